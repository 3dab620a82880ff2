//! Toy-scale supervised training on (reconstruction, original) patch pairs,
//! with resumable checkpoints and a finite-difference gradient check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{init_params, Checkpoint, Mdan, MdanConfig, Parameters};
use crate::error::{Error, Result};
use crate::pipeline::{normalize, PlaneClass};
use crate::tensor::Tensor;
use crate::yuv::{PlanarFrame, Plane, PlaneId};

/// Training hyper-parameters, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: MdanConfig,
    pub patch_size: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: u64,
    pub seed: u64,
    /// Band stamped into the checkpoint; 0 for "any band".
    pub qp_band: u32,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Loss is logged every `log_every` steps (and at the last step).
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: MdanConfig::default(),
            patch_size: 64,
            batch_size: 8,
            learning_rate: 1e-4,
            steps: 1000,
            seed: 0,
            qp_band: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::format("training config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.patch_size == 0 || !self.patch_size.is_multiple_of(4) {
            return Err(Error::Invalid(format!("patch_size {} must be a positive multiple of 4", self.patch_size)));
        }
        if self.batch_size == 0 || self.steps == 0 || self.log_every == 0 {
            return Err(Error::Invalid("batch_size, steps and log_every must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Invalid("moment decays must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Co-located reconstruction and original planes of one plane class.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub rec: Vec<Plane>,
    pub org: Vec<Plane>,
    pub bit_depth: u32,
}

impl TrainData {
    pub fn from_frames(rec: &[PlanarFrame], org: &[PlanarFrame], class: PlaneClass) -> Result<Self> {
        if rec.len() != org.len() {
            return Err(Error::Invalid(format!(
                "reconstruction has {} frames but original has {}",
                rec.len(),
                org.len()
            )));
        }
        let first = rec.first().ok_or_else(|| Error::Invalid("no training frames".into()))?;
        let ids: &[PlaneId] = match class {
            PlaneClass::Luma => &[PlaneId::Y],
            PlaneClass::Chroma => &[PlaneId::U, PlaneId::V],
        };
        let mut data = TrainData {
            rec: Vec::new(),
            org: Vec::new(),
            bit_depth: first.format.bit_depth,
        };
        for (r, o) in rec.iter().zip(org) {
            if r.format != o.format {
                return Err(Error::Invalid("reconstruction and original formats differ".into()));
            }
            for &id in ids {
                data.rec.push(r.plane(id).clone());
                data.org.push(o.plane(id).clone());
            }
        }
        Ok(data)
    }
}

/// One training example and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub rec: Tensor,
    pub org: Tensor,
    pub frame: usize,
    pub x: usize,
    pub y: usize,
}

/// Draws patch batches. Batch `i` depends only on the seed and `i`, so a
/// resumed run sees exactly the batches an uninterrupted run would.
#[derive(Clone, Debug)]
pub struct PatchSampler<'a> {
    data: &'a TrainData,
    patch: usize,
    seed: u64,
}

impl<'a> PatchSampler<'a> {
    pub fn new(data: &'a TrainData, patch: usize, seed: u64) -> Result<Self> {
        if data.rec.is_empty() || data.rec.len() != data.org.len() {
            return Err(Error::Invalid("training data must hold equally many non-zero planes".into()));
        }
        for (r, o) in data.rec.iter().zip(&data.org) {
            if r.dims() != o.dims() {
                return Err(Error::Invalid("reconstruction and original planes differ in size".into()));
            }
            if r.width() < patch || r.height() < patch {
                return Err(Error::Invalid(format!(
                    "patch size {patch} exceeds plane {}×{}",
                    r.width(),
                    r.height()
                )));
            }
        }
        Ok(PatchSampler { data, patch, seed })
    }

    fn cut(&self, plane: &Plane, x: usize, y: usize) -> Tensor {
        let p = self.patch;
        Tensor::from_fn([1, 1, p, p], |i| normalize(plane.get(x + i % p, y + i / p), self.data.bit_depth))
    }

    /// Uniform over frames, then uniform over valid offsets.
    pub fn batch(&self, index: u64, size: usize) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        (0..size)
            .map(|_| {
                let frame = rng.gen_range(0..self.data.rec.len());
                let plane = &self.data.rec[frame];
                let x = rng.gen_range(0..=plane.width() - self.patch);
                let y = rng.gen_range(0..=plane.height() - self.patch);
                PatchPair {
                    rec: self.cut(plane, x, y),
                    org: self.cut(&self.data.org[frame], x, y),
                    frame,
                    x,
                    y,
                }
            })
            .collect()
    }
}

/// Stacks single-patch tensors along the batch axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::with_capacity(items.len() * c * h * w);
    for t in items {
        if t.shape() != [1, c, h, w] {
            return Err(Error::shape("stack", "batch items differ in shape"));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec([items.len(), c, h, w], data)
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.shape()),
        ));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        sum += d * d;
        *g = 2.0 * d / n;
    }
    Ok((sum / n, grad))
}

fn round_to_f32<P: Parameters>(p: &mut P) {
    p.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64));
}

/// Adaptive-moment optimiser. Parameters and moments are kept at single
/// precision after every update so a checkpoint captures the state exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Mdan,
    v: Mdan,
}

const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";
const OPT_STEP: &str = "opt.step";

impl Adam {
    pub fn new(model: &Mdan, cfg: &TrainConfig) -> Self {
        Adam {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            step: 0,
            m: model.zeros_like(),
            v: model.zeros_like(),
        }
    }

    pub fn update(&mut self, model: &mut Mdan, grads: &Mdan) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let mut gs: Vec<&[f64]> = Vec::new();
        grads.visit("", &mut |_, t| gs.push(t.data()));
        let mut ms: Vec<Vec<f64>> = Vec::new();
        self.m.visit("", &mut |_, t| ms.push(t.data().to_vec()));
        let mut vs: Vec<Vec<f64>> = Vec::new();
        self.v.visit("", &mut |_, t| vs.push(t.data().to_vec()));
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let mut k = 0;
        model.visit_mut("", &mut |_, p| {
            let (g, m, v) = (gs[k], &mut ms[k], &mut vs[k]);
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = (b1 * *m + (1.0 - b1) * g) as f32 as f64;
                *v = (b2 * *v + (1.0 - b2) * g * g) as f32 as f64;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                *p = (*p - update) as f32 as f64;
            }
            k += 1;
        });
        for (state, fresh) in [(&mut self.m, ms), (&mut self.v, vs)] {
            let mut it = fresh.into_iter();
            state.visit_mut("", &mut |_, t| t.data_mut().copy_from_slice(&it.next().expect("same layout")));
        }
    }

    fn export(&self, ckpt: &mut Checkpoint) {
        for (prefix, state) in [(OPT_M, &self.m), (OPT_V, &self.v)] {
            state.visit("", &mut |n, t| ckpt.extra.push((format!("{prefix}{n}"), t.clone())));
        }
        ckpt.extra.push((OPT_STEP.into(), Tensor::filled([1, 1, 1, 1], self.step as f64)));
    }

    /// Restores optimiser state saved alongside a model; a checkpoint
    /// without it starts fresh moments.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut adam = Adam::new(&ckpt.model, cfg);
        let Some(step) = ckpt.extra(OPT_STEP) else {
            return Ok(adam);
        };
        adam.step = step.data()[0] as u64;
        for (prefix, state) in [(OPT_M, &mut adam.m), (OPT_V, &mut adam.v)] {
            let mut err = None;
            state.visit_mut("", &mut |n, t| match ckpt.extra(&format!("{prefix}{n}")) {
                Some(src) if src.shape() == t.shape() => *t = src.clone(),
                _ => err = Some(format!("optimizer state for '{n}' missing or mis-shaped")),
            });
            if let Some(e) = err {
                return Err(Error::format("checkpoint", e));
            }
        }
        Ok(adam)
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// `(step, loss)` for every executed step, 1-based.
    pub losses: Vec<(u64, f64)>,
}

/// One optimisation step on a batch; returns the loss before the update.
pub fn train_step(model: &mut Mdan, opt: &mut Adam, rec: &Tensor, org: &Tensor) -> Result<f64> {
    let (pred, cache) = model.forward_train(rec)?;
    let (loss, grad) = mse_loss(&pred, org)?;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("loss diverged ({loss}) at step {}", opt.step + 1)));
    }
    let (grads, _) = model.backward(&cache, &grad)?;
    opt.update(model, &grads);
    Ok(loss)
}

/// Trains from scratch, or continues `resume` up to `cfg.steps` total steps.
/// `log` sees every executed `(step, loss)`.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    resume: Option<Checkpoint>,
    mut log: impl FnMut(u64, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let sampler = PatchSampler::new(data, cfg.patch_size, cfg.seed)?;
    let (mut model, mut opt) = match resume {
        Some(ckpt) => {
            if ckpt.header.config != cfg.model {
                return Err(Error::Invalid("checkpoint model config differs from the training config".into()));
            }
            let opt = Adam::from_checkpoint(&ckpt, cfg)?;
            (ckpt.model, opt)
        }
        None => {
            let model = init_params(cfg.model, cfg.seed)?;
            let opt = Adam::new(&model, cfg);
            (model, opt)
        }
    };
    let mut losses = Vec::new();
    while opt.step < cfg.steps {
        let batch = sampler.batch(opt.step, cfg.batch_size);
        let rec = stack(&batch.iter().map(|p| &p.rec).collect::<Vec<_>>())?;
        let org = stack(&batch.iter().map(|p| &p.org).collect::<Vec<_>>())?;
        let loss = train_step(&mut model, &mut opt, &rec, &org)?;
        losses.push((opt.step, loss));
        log(opt.step, loss);
    }
    round_to_f32(&mut model);
    let mut checkpoint = Checkpoint::new(model, cfg.qp_band, cfg.seed);
    opt.export(&mut checkpoint);
    Ok(TrainOutcome { checkpoint, losses })
}

/// Outcome of comparing analytic and numerical parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub max_abs_grad: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// Denominator floor for relative errors of near-zero gradients.
pub const GRAD_FLOOR: f64 = 1e-8;
/// Finite-difference schemes tried in order until one agrees: step size and
/// whether to use the five-point stencil instead of the central difference.
pub const FD_SCHEMES: [(f64, bool); 4] = [(1e-5, false), (1e-4, true), (1e-6, false), (1e-3, true)];

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR)
}

/// Checks every parameter gradient of the MSE loss of `model` on `(input,
/// target)` by central differences.
///
/// A ReLU or max-pool switch inside the difference interval corrupts a
/// single estimate, so a mismatch is retried with the other schemes and the
/// best agreement is kept.
pub fn gradient_check_model(model: &Mdan, input: &Tensor, target: &Tensor, tolerance: f64) -> Result<GradCheckReport> {
    let loss = |m: &Mdan| -> Result<f64> { Ok(mse_loss(&m.forward(input)?, target)?.0) };
    let (pred, cache) = model.forward_train(input)?;
    let (_, g) = mse_loss(&pred, target)?;
    let (grads, _) = model.backward(&cache, &g)?;

    let analytic: Vec<(String, Vec<f64>)> =
        grads.named_tensors().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        max_abs_grad: 0.0,
        tolerance,
    };
    let mut probe = model.clone();
    for (ti, (name, values)) in analytic.iter().enumerate() {
        for (i, &a) in values.iter().enumerate() {
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            let mut best = (f64::INFINITY, 0.0);
            for (h, five_point) in FD_SCHEMES {
                // Loss at the parameter moved by `delta`, plus the
                // displacement actually representable in f64.
                let mut at = |delta: f64| -> Result<(f64, f64)> {
                    let mut orig = 0.0;
                    let mut moved = 0.0;
                    let mut k = 0;
                    probe.visit_mut("", &mut |_, t| {
                        if k == ti {
                            orig = t.data()[i];
                            t.data_mut()[i] = orig + delta;
                            moved = t.data()[i] - orig;
                        }
                        k += 1;
                    });
                    let l = loss(&probe);
                    let mut k = 0;
                    probe.visit_mut("", &mut |_, t| {
                        if k == ti {
                            t.data_mut()[i] = orig;
                        }
                        k += 1;
                    });
                    Ok((l?, moved))
                };
                let (lp, dp) = at(h)?;
                let (lm, dm) = at(-h)?;
                let num = if five_point {
                    let (lp2, _) = at(2.0 * h)?;
                    let (lm2, _) = at(-2.0 * h)?;
                    (8.0 * (lp - lm) - (lp2 - lm2)) / (12.0 * h)
                } else {
                    (lp - lm) / (dp - dm)
                };
                let e = rel_error(a, num);
                if e < best.0 {
                    best = (e, num);
                }
                if e <= tolerance {
                    break;
                }
            }
            report.checked += 1;
            if best.0 > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = best.0;
                report.worst_param = format!("{name}[{i}]");
                report.worst_analytic = a;
                report.worst_numeric = best.1;
            }
        }
    }
    Ok(report)
}

/// Gradient check of a freshly initialised reduced model on an 8×8 input.
pub fn gradient_check(config: MdanConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    if config.channels > 8 || config.mdsa_blocks != 1 {
        return Err(Error::Invalid(format!(
            "gradient check runs on a reduced model (≤ 8 channels, 1 MDSA block), got {} channels and {} blocks",
            config.channels, config.mdsa_blocks
        )));
    }
    let mut model = init_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // Non-zero biases so every bias gradient is exercised away from zero.
    model.visit_mut("", &mut |n, t| {
        if n.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    });
    let input = Tensor::from_fn([1, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let target = Tensor::from_fn([1, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    gradient_check_model(&model, &input, &target, tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(seed: u64) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let org: Vec<Plane> = (0..2)
            .map(|_| Plane::from_fn(24, 20, |x, y| ((x * 11 + y * 7) % 200 + 20) as u16))
            .collect();
        let rec = org
            .iter()
            .map(|o| Plane::from_fn(24, 20, |x, y| (o.get(x, y) as i32 + rng.gen_range(-8..=8)) as u16))
            .collect();
        TrainData { rec, org, bit_depth: 8 }
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            model: MdanConfig::new(8, 1),
            patch_size: 8,
            batch_size: 2,
            learning_rate: 1e-3,
            steps: 6,
            seed: 3,
            qp_band: 37,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        let a = Tensor::from_fn([1, 1, 2, 3], |i| i as f64);
        assert_eq!(mse_loss(&a, &a).unwrap().0, 0.0);
        let mut b = a.clone();
        b.data_mut().iter_mut().for_each(|v| *v += 0.5);
        assert_eq!(mse_loss(&b, &a).unwrap().0, 0.25);
        assert!(mse_loss(&a, &Tensor::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let p = Tensor::from_fn([1, 1, 3, 3], |i| (i as f64 * 0.37).sin());
        let t = Tensor::from_fn([1, 1, 3, 3], |i| (i as f64 * 0.11).cos());
        let (_, g) = mse_loss(&p, &t).unwrap();
        for i in 0..p.len() {
            let h = 1e-6;
            let mut hi = p.clone();
            hi.data_mut()[i] += h;
            let mut lo = p.clone();
            lo.data_mut()[i] -= h;
            let num = (mse_loss(&hi, &t).unwrap().0 - mse_loss(&lo, &t).unwrap().0) / (2.0 * h);
            assert!((num - g.data()[i]).abs() <= 1e-7);
        }
    }

    #[test]
    fn config_toml_round_trip_and_validation() {
        let cfg = tiny_config();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = TrainConfig::from_toml("patch_size = 32\nsteps = 10\n[model]\nchannels = 16\nmdsa_blocks = 2\n").unwrap();
        assert_eq!((parsed.model.channels, parsed.model.p, parsed.patch_size), (16, 2, 32));
        assert!(TrainConfig::from_toml("patch_size = 30\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
        assert!(TrainConfig::from_toml("unknown = 1\n").is_err());
    }

    #[test]
    fn sampler_is_deterministic_and_bounded() {
        let data = toy_data(1);
        let s = PatchSampler::new(&data, 8, 42).unwrap();
        assert_eq!(s.batch(5, 4), s.batch(5, 4));
        assert_ne!(s.batch(5, 4), s.batch(6, 4));
        for p in s.batch(0, 64) {
            assert!(p.x + 8 <= 24 && p.y + 8 <= 20);
            assert_eq!(p.rec.shape(), [1, 1, 8, 8]);
        }
        assert!(PatchSampler::new(&data, 32, 0).is_err());
    }

    #[test]
    fn full_size_patch_has_one_offset() {
        let data = TrainData {
            rec: vec![Plane::new(64, 64)],
            org: vec![Plane::new(64, 64)],
            bit_depth: 8,
        };
        let s = PatchSampler::new(&data, 64, 0).unwrap();
        assert!(s.batch(0, 16).iter().all(|p| (p.x, p.y) == (0, 0)));
    }

    #[test]
    fn offsets_are_uniform() {
        // 4 × 4 valid offsets; 10⁴ draws should land within 3σ of uniform.
        let data = TrainData {
            rec: vec![Plane::new(11, 11)],
            org: vec![Plane::new(11, 11)],
            bit_depth: 8,
        };
        let s = PatchSampler::new(&data, 8, 9).unwrap();
        let mut counts = [0usize; 16];
        for b in 0..1000 {
            for p in s.batch(b, 10) {
                counts[p.y * 4 + p.x] += 1;
            }
        }
        let (n, k) = (10_000.0f64, 16.0f64);
        let mean = n / k;
        let sigma = (n * (1.0 / k) * (1.0 - 1.0 / k)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn one_gradient_step_descends() {
        let mut m = init_params(MdanConfig::new(8, 1), 4).unwrap();
        let x = Tensor::from_fn([1, 1, 8, 8], |i| ((i * 37) % 64) as f64 / 64.0);
        let t = Tensor::from_fn([1, 1, 8, 8], |i| ((i * 29) % 64) as f64 / 64.0);
        let (pred, cache) = m.forward_train(&x).unwrap();
        let (before, g) = mse_loss(&pred, &t).unwrap();
        let (grads, _) = m.backward(&cache, &g).unwrap();
        let gs: Vec<Tensor> = grads.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let mut k = 0;
        m.visit_mut("", &mut |_, p| {
            for (v, g) in p.data_mut().iter_mut().zip(gs[k].data()) {
                *v -= 1e-3 * g;
            }
            k += 1;
        });
        let after = mse_loss(&m.forward(&x).unwrap(), &t).unwrap().0;
        assert!(after < before, "{after} ≥ {before}");
    }

    #[test]
    fn repeated_pair_loss_decreases() {
        let data = toy_data(2);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 1,
            learning_rate: 1e-4,
            ..tiny_config()
        };
        // A single plane pair of patch size: every batch is the same patch.
        let single = TrainData {
            rec: vec![Plane::from_fn(8, 8, |x, y| data.rec[0].get(x, y))],
            org: vec![Plane::from_fn(8, 8, |x, y| data.org[0].get(x, y))],
            bit_depth: 8,
        };
        let out = train(&cfg, &single, None, |_, _| {}).unwrap();
        let first = out.losses[0].1;
        let last = out.losses.last().unwrap().1;
        assert!(last < first, "{last} ≥ {first}");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_config()
        };
        let out = train(&cfg, &toy_data(3), None, |_, _| {}).unwrap();
        assert_eq!(out.checkpoint.model, init_params(cfg.model, cfg.seed).unwrap());
        assert_eq!(out.checkpoint.header.qp_band, 37);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = toy_data(4);
        let full_cfg = tiny_config();
        let full = train(&full_cfg, &data, None, |_, _| {}).unwrap();

        let half_cfg = TrainConfig { steps: 3, ..tiny_config() };
        let half = train(&half_cfg, &data, None, |_, _| {}).unwrap();
        let mut bytes = Vec::new();
        crate::arch::write_checkpoint(&half.checkpoint, &mut bytes).unwrap();
        let restored = crate::arch::read_checkpoint(&mut bytes.as_slice()).unwrap();
        let rest = train(&full_cfg, &data, Some(restored), |_, _| {}).unwrap();

        let joined: Vec<_> = half.losses.iter().chain(&rest.losses).copied().collect();
        assert_eq!(joined, full.losses);
        assert_eq!(rest.checkpoint, full.checkpoint);
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(5);
        let bytes = |o: TrainOutcome| {
            let mut v = Vec::new();
            crate::arch::write_checkpoint(&o.checkpoint, &mut v).unwrap();
            v
        };
        let a = bytes(train(&tiny_config(), &data, None, |_, _| {}).unwrap());
        let b = bytes(train(&tiny_config(), &data, None, |_, _| {}).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let cfg = TrainConfig {
            learning_rate: 1e30,
            steps: 50,
            ..tiny_config()
        };
        match train(&cfg, &toy_data(6), None, |_, _| {}) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("step"), "{msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_model_with_zero_gap_has_zero_gradients() {
        let m = Mdan::zeros(MdanConfig::new(8, 1)).unwrap();
        let x = Tensor::from_fn([1, 1, 8, 8], |i| i as f64 / 64.0);
        let r = gradient_check_model(&m, &x, &x, 1e-4).unwrap();
        assert_eq!(r.max_abs_grad, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn gradient_check_rejects_large_configs() {
        assert!(gradient_check(MdanConfig::new(16, 1), 0, 1e-4).is_err());
        assert!(gradient_check(MdanConfig::new(8, 2), 0, 1e-4).is_err());
    }
}
