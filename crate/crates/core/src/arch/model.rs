use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::residual::{chain_backward, chain_forward, chain_forward_train, ResidualCache};
use super::{
    conv_backward_into, join, require_multiple_of_4, MdanConfig, MdsaBlock, MdsaCache, Parameters, ResidualBlock,
};
use crate::error::{Error, Result};
use crate::tensor::{add, conv2d, ConvKernel, Tensor};

/// One MDSA block followed by its `p` residual blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyStage {
    pub mdsa: MdsaBlock,
    pub residual: Vec<ResidualBlock>,
}

/// Full single-plane filter network.
///
/// `out = plane + tail(body(head_block(head(plane))))`, so an all-zero
/// parameter set is the identity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdan {
    pub config: MdanConfig,
    pub head: ConvKernel,
    pub head_block: ResidualBlock,
    pub body: Vec<BodyStage>,
    pub tail: ConvKernel,
}

pub struct MdanCache {
    input: Tensor,
    head_block: ResidualCache,
    stages: Vec<(MdsaCache, Vec<ResidualCache>)>,
    tail_in: Tensor,
}

impl Mdan {
    /// Model with every weight and bias set to zero.
    pub fn zeros(config: MdanConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        Ok(Mdan {
            config,
            head: ConvKernel::same3(c, config.in_planes, true),
            head_block: ResidualBlock::zeros(c),
            body: (0..config.mdsa_blocks)
                .map(|_| BodyStage {
                    mdsa: MdsaBlock::zeros(&config),
                    residual: (0..config.p).map(|_| ResidualBlock::zeros(c)).collect(),
                })
                .collect(),
            tail: ConvKernel::same3(config.in_planes, c, true),
        })
    }

    fn check_input(&self, plane: &Tensor) -> Result<()> {
        if plane.c() != self.config.in_planes {
            return Err(Error::shape(
                "mdan_forward",
                format!("expected {} input plane(s), got {}", self.config.in_planes, plane.c()),
            ));
        }
        require_multiple_of_4("mdan_forward", plane)
    }

    pub fn forward(&self, plane: &Tensor) -> Result<Tensor> {
        self.check_input(plane)?;
        let mut h = self.head_block.forward(&conv2d(plane, &self.head)?)?;
        for stage in &self.body {
            h = chain_forward(&stage.residual, stage.mdsa.forward(&h)?)?;
        }
        add(plane, &conv2d(&h, &self.tail)?)
    }

    pub fn forward_train(&self, plane: &Tensor) -> Result<(Tensor, MdanCache)> {
        self.check_input(plane)?;
        let head_in = conv2d(plane, &self.head)?;
        let (mut h, head_block) = self.head_block.forward_train(&head_in)?;
        let mut stages = Vec::with_capacity(self.body.len());
        for stage in &self.body {
            let (y, mc) = stage.mdsa.forward_train(&h)?;
            let (y, rc) = chain_forward_train(&stage.residual, y)?;
            stages.push((mc, rc));
            h = y;
        }
        let out = add(plane, &conv2d(&h, &self.tail)?)?;
        Ok((
            out,
            MdanCache {
                input: plane.clone(),
                head_block,
                stages,
                tail_in: h,
            },
        ))
    }

    /// Parameter gradients and the gradient of the input plane.
    pub fn backward(&self, cache: &MdanCache, grad_out: &Tensor) -> Result<(Mdan, Tensor)> {
        let mut grads = self.zeros_like();
        let mut g = conv_backward_into(&self.tail, &cache.tail_in, grad_out, &mut grads.tail)?;
        for ((stage, (mc, rc)), gs) in self.body.iter().zip(&cache.stages).zip(grads.body.iter_mut()).rev() {
            g = chain_backward(&stage.residual, rc, g, &mut gs.residual)?;
            g = stage.mdsa.backward(mc, &g, &mut gs.mdsa)?;
        }
        let g = self.head_block.backward(&cache.head_block, &g, &mut grads.head_block)?;
        let mut g_in = conv_backward_into(&self.head, &cache.input, &g, &mut grads.head)?;
        g_in.add_assign(grad_out)?;
        Ok((grads, g_in))
    }
}

impl Parameters for Mdan {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.head.visit(&join(prefix, "head"), f);
        self.head_block.visit(&join(prefix, "head_block"), f);
        for (i, s) in self.body.iter().enumerate() {
            let p = join(prefix, &format!("body.{i}"));
            s.mdsa.visit(&join(&p, "mdsa"), f);
            s.residual.visit(&join(&p, "res"), f);
        }
        self.tail.visit(&join(prefix, "tail"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.head.visit_mut(&join(prefix, "head"), f);
        self.head_block.visit_mut(&join(prefix, "head_block"), f);
        for (i, s) in self.body.iter_mut().enumerate() {
            let p = join(prefix, &format!("body.{i}"));
            s.mdsa.visit_mut(&join(&p, "mdsa"), f);
            s.residual.visit_mut(&join(&p, "res"), f);
        }
        self.tail.visit_mut(&join(prefix, "tail"), f);
    }
}

/// Deterministic initialisation: weights uniform in `±1/√fan_in`, biases
/// zero, every value rounded to single precision so checkpoints hold it
/// exactly.
pub fn init_params(config: MdanConfig, seed: u64) -> Result<Mdan> {
    let mut model = Mdan::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |name, t| {
        if name.ends_with(".bias") {
            return;
        }
        let [_, i, kh, kw] = t.shape();
        let bound = 1.0 / ((i * kh * kw) as f64).sqrt();
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..bound) as f32 as f64);
    });
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub weights: usize,
    pub biases: usize,
}

/// Weight and bias counts per sub-module.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub groups: Vec<ParamGroup>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.groups.iter().map(|g| g.weights + g.biases).sum()
    }

    pub fn total_weights(&self) -> usize {
        self.groups.iter().map(|g| g.weights).sum()
    }

    pub fn total_biases(&self) -> usize {
        self.groups.iter().map(|g| g.biases).sum()
    }

    /// Fusion weight count of every MDSA block, in order.
    pub fn fusion_weights(&self) -> Vec<usize> {
        self.groups
            .iter()
            .filter(|g| g.name.ends_with(".fusion"))
            .map(|g| g.weights)
            .collect()
    }
}

fn count<P: Parameters>(name: String, p: &P) -> ParamGroup {
    let mut g = ParamGroup {
        name,
        weights: 0,
        biases: 0,
    };
    p.visit("", &mut |n, t| {
        if n.ends_with("bias") {
            g.biases += t.len();
        } else {
            g.weights += t.len();
        }
    });
    g
}

pub fn param_count(model: &Mdan) -> ParamCount {
    let mut groups = vec![
        count("head".into(), &model.head),
        count("head_block".into(), &model.head_block),
    ];
    for (i, s) in model.body.iter().enumerate() {
        let m = &s.mdsa;
        groups.push(count(format!("body.{i}.full"), &m.full));
        let mut half = count(format!("body.{i}.half"), &m.half);
        for k in [&m.down, &m.up] {
            half.weights += k.weight_count();
            half.biases += k.bias_count();
        }
        groups.push(half);
        groups.push(count(format!("body.{i}.attention"), &m.attention));
        groups.push(count(format!("body.{i}.fusion"), &m.fusion));
        groups.push(count(format!("body.{i}.res"), &s.residual));
    }
    groups.push(count("tail".into(), &model.tail));
    ParamCount { groups }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn zero_model_is_identity() {
        let m = Mdan::zeros(MdanConfig::new(8, 2)).unwrap();
        let x = random([2, 1, 12, 8], 4);
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn shape_preserved_for_sizes_divisible_by_4() {
        let m = init_params(MdanConfig::new(8, 1), 3).unwrap();
        for &(h, w) in &[(4, 4), (8, 12), (16, 20)] {
            let x = random([1, 1, h, w], 5);
            assert_eq!(m.forward(&x).unwrap().shape(), [1, 1, h, w]);
        }
        assert!(m.forward(&random([1, 1, 6, 8], 5)).is_err());
        assert!(m.forward(&random([1, 2, 8, 8], 5)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(Mdan::zeros(MdanConfig::new(12, 1)).is_err());
        assert!(Mdan::zeros(MdanConfig::new(0, 1)).is_err());
    }

    #[test]
    fn residual_block_count_at_64() {
        let g = count("rb".into(), &ResidualBlock::zeros(64));
        assert_eq!((g.weights, g.biases), (73_728, 128));
    }

    #[test]
    fn counts_at_full_scale() {
        let m = Mdan::zeros(MdanConfig::default()).unwrap();
        let pc = param_count(&m);
        assert_eq!(pc.fusion_weights(), vec![5632; 8]);
        assert!(pc.groups.iter().filter(|g| g.name.ends_with(".fusion")).all(|g| g.biases == 0));
        assert_eq!(pc.total(), m.scalar_count());
        assert_eq!(pc.total(), pc.total_weights() + pc.total_biases());
        assert_eq!(param_count(&m), pc);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MdanConfig::new(8, 1);
        assert_eq!(init_params(cfg, 7).unwrap(), init_params(cfg, 7).unwrap());
        assert_ne!(init_params(cfg, 7).unwrap(), init_params(cfg, 8).unwrap());
    }

    #[test]
    fn init_output_is_finite_and_bounded() {
        let m = init_params(MdanConfig::new(16, 2), 1).unwrap();
        let x = Tensor::from_fn([1, 1, 16, 16], |i| ((i * 7919) % 256) as f64 / 255.0);
        let y = m.forward(&x).unwrap();
        assert!(y.is_finite());
        assert!(y.data().iter().all(|v| *v > -10.0 && *v < 11.0));
    }

    #[test]
    fn train_forward_matches_inference() {
        let m = init_params(MdanConfig::new(8, 2), 2).unwrap();
        let x = random([2, 1, 8, 8], 6);
        assert_eq!(m.forward_train(&x).unwrap().0, m.forward(&x).unwrap());
    }

    #[test]
    fn full_model_gradients() {
        let mut m = init_params(MdanConfig::new(8, 1), 41).unwrap();
        // Non-zero biases so every path carries gradient.
        m.visit_mut("", &mut |n, t| {
            if n.ends_with("bias") {
                t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * ((i % 7) as f64 - 3.0));
            }
        });
        let x = random([1, 1, 8, 8], 42);
        let g = random([1, 1, 8, 8], 43);
        let (_, cache) = m.forward_train(&x).unwrap();
        let (grads, gx) = m.backward(&cache, &g).unwrap();
        let num = input_grad_fd(&x, |t| dot(&m.forward(t).unwrap(), &g), 1e-6);
        for (a, n) in gx.data().iter().zip(num.data()) {
            assert!(rel_err(*a, *n) <= 1e-5, "{a} vs {n}");
        }
        let (worst, name) = check_param_grads(&m.head, &grads.head, |h| {
            let mut mm = m.clone();
            mm.head = h.clone();
            dot(&mm.forward(&x).unwrap(), &g)
        }, 1e-6);
        assert!(worst <= 1e-4, "{worst} at {name}");
    }
}
