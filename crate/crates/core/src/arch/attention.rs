use super::residual::{chain_backward, chain_forward, chain_forward_train, ResidualCache};
use super::{conv_backward_into, join, require_multiple_of_4, Parameters, ResidualBlock};
use crate::error::Result;
use crate::tensor::{
    channel_max, channel_max_backward, channel_mean, channel_mean_backward, concat_channels, conv2d,
    max_pool2d, max_pool2d_backward, pixel_shuffle, pixel_shuffle_backward, sigmoid, sigmoid_backward,
    split_channels, ConvKernel, Tensor,
};

/// Single spatial attention branch shared by both densities.
///
/// Channel-wise mean and max maps are stacked and squeezed to one channel,
/// pooled down twice (each pool followed by a one-channel residual block),
/// passed through the bottleneck, then expanded by pixel shuffle. The first
/// expansion yields the half-resolution mask `m`; `m` is refined by another
/// residual block and expanded again into the full-resolution mask `m̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBranch {
    pub entry: ConvKernel,
    pub down: Vec<ResidualBlock>,
    pub bottleneck: Vec<ResidualBlock>,
    pub up1: ConvKernel,
    pub refine: ResidualBlock,
    pub up2: ConvKernel,
}

pub struct AttentionCache {
    input: Tensor,
    stacked: Tensor,
    pool_in: [Tensor; 2],
    down: [ResidualCache; 2],
    bottleneck: Vec<ResidualCache>,
    bottleneck_out: Tensor,
    m: Tensor,
    refine: ResidualCache,
    refined: Tensor,
    m_hat: Tensor,
}

const POOL_STAGES: usize = 2;

impl AttentionBranch {
    pub fn zeros(q: usize) -> Self {
        AttentionBranch {
            entry: ConvKernel::same3(1, 2, true),
            down: (0..POOL_STAGES).map(|_| ResidualBlock::zeros(1)).collect(),
            bottleneck: (0..q).map(|_| ResidualBlock::zeros(1)).collect(),
            up1: ConvKernel::same3(4, 1, true),
            refine: ResidualBlock::zeros(1),
            up2: ConvKernel::same3(4, 1, true),
        }
    }

    /// Returns the masks `(m, m̂)` of shapes `(n,1,H/2,W/2)` and `(n,1,H,W)`.
    pub fn forward(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        require_multiple_of_4("attention_branch", f)?;
        let stacked = concat_channels(&[&channel_mean(f), &channel_max(f)])?;
        let mut a = conv2d(&stacked, &self.entry)?;
        for block in &self.down {
            a = block.forward(&max_pool2d(&a, 2, 2)?)?;
        }
        let a = chain_forward(&self.bottleneck, a)?;
        let m = sigmoid(&pixel_shuffle(&conv2d(&a, &self.up1)?, 2)?);
        let r = self.refine.forward(&m)?;
        let m_hat = sigmoid(&pixel_shuffle(&conv2d(&r, &self.up2)?, 2)?);
        Ok((m, m_hat))
    }

    pub fn forward_train(&self, f: &Tensor) -> Result<((Tensor, Tensor), AttentionCache)> {
        require_multiple_of_4("attention_branch", f)?;
        let stacked = concat_channels(&[&channel_mean(f), &channel_max(f)])?;
        let pool0 = conv2d(&stacked, &self.entry)?;
        let (d0, c0) = self.down[0].forward_train(&max_pool2d(&pool0, 2, 2)?)?;
        let pool1 = d0.clone();
        let (d1, c1) = self.down[1].forward_train(&max_pool2d(&pool1, 2, 2)?)?;

        let (bottleneck_out, bottleneck) = chain_forward_train(&self.bottleneck, d1)?;
        let m = sigmoid(&pixel_shuffle(&conv2d(&bottleneck_out, &self.up1)?, 2)?);
        let (refined, refine) = self.refine.forward_train(&m)?;
        let m_hat = sigmoid(&pixel_shuffle(&conv2d(&refined, &self.up2)?, 2)?);
        Ok((
            (m.clone(), m_hat.clone()),
            AttentionCache {
                input: f.clone(),
                stacked,
                pool_in: [pool0, pool1],
                down: [c0, c1],
                bottleneck,
                bottleneck_out,
                m,
                refine,
                refined,
                m_hat,
            },
        ))
    }

    /// Gradient of the branch input given gradients of both masks.
    pub fn backward(
        &self,
        cache: &AttentionCache,
        grad_m: &Tensor,
        grad_m_hat: &Tensor,
        grads: &mut Self,
    ) -> Result<Tensor> {
        let g = sigmoid_backward(&cache.m_hat, grad_m_hat)?;
        let g = pixel_shuffle_backward(&g, 2)?;
        let g = conv_backward_into(&self.up2, &cache.refined, &g, &mut grads.up2)?;
        let mut g_m = self.refine.backward(&cache.refine, &g, &mut grads.refine)?;
        g_m.add_assign(grad_m)?;

        let g = sigmoid_backward(&cache.m, &g_m)?;
        let g = pixel_shuffle_backward(&g, 2)?;
        let g = conv_backward_into(&self.up1, &cache.bottleneck_out, &g, &mut grads.up1)?;
        let mut g = chain_backward(&self.bottleneck, &cache.bottleneck, g, &mut grads.bottleneck)?;

        for i in (0..POOL_STAGES).rev() {
            g = self.down[i].backward(&cache.down[i], &g, &mut grads.down[i])?;
            g = max_pool2d_backward(&cache.pool_in[i], 2, 2, &g)?;
        }
        let g = conv_backward_into(&self.entry, &cache.stacked, &g, &mut grads.entry)?;
        let parts = split_channels(&g, &[1, 1])?;
        let mut gf = channel_mean_backward(cache.input.shape(), &parts[0])?;
        gf.add_assign(&channel_max_backward(&cache.input, &parts[1])?)?;
        Ok(gf)
    }
}

impl Parameters for AttentionBranch {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.entry.visit(&join(prefix, "entry"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.bottleneck.visit(&join(prefix, "bottleneck"), f);
        self.up1.visit(&join(prefix, "up1"), f);
        self.refine.visit(&join(prefix, "refine"), f);
        self.up2.visit(&join(prefix, "up2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.entry.visit_mut(&join(prefix, "entry"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        self.bottleneck.visit_mut(&join(prefix, "bottleneck"), f);
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.refine.visit_mut(&join(prefix, "refine"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn zero_weights_give_half_masks() {
        let f = Tensor::filled([1, 8, 8, 12], 0.7);
        let (m, m_hat) = AttentionBranch::zeros(1).forward(&f).unwrap();
        assert!(m.data().iter().chain(m_hat.data()).all(|v| *v == 0.5));
    }

    #[test]
    fn mask_shapes() {
        let mut a = AttentionBranch::zeros(1);
        randomize(&mut a, 1, 0.5);
        let f = random([1, 64, 16, 16], 2);
        let (m, m_hat) = a.forward(&f).unwrap();
        assert_eq!(m.shape(), [1, 1, 8, 8]);
        assert_eq!(m_hat.shape(), [1, 1, 16, 16]);
        assert!(m.data().iter().chain(m_hat.data()).all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn rejects_sizes_not_divisible_by_4() {
        let f = random([1, 8, 6, 8], 2);
        assert!(AttentionBranch::zeros(1).forward(&f).is_err());
    }

    #[test]
    fn gradients_through_both_masks() {
        let mut a = AttentionBranch::zeros(1);
        randomize(&mut a, 11, 0.8);
        let f = random([2, 3, 8, 8], 12);
        let gm = random([2, 1, 4, 4], 13);
        let gmh = random([2, 1, 8, 8], 14);
        let loss = |p: &AttentionBranch, x: &Tensor| {
            let (m, mh) = p.forward(x).unwrap();
            dot(&m, &gm) + dot(&mh, &gmh)
        };

        let ((m, mh), cache) = a.forward_train(&f).unwrap();
        assert_eq!((m, mh), a.forward(&f).unwrap());
        let mut grads = a.zeros_like();
        let gf = a.backward(&cache, &gm, &gmh, &mut grads).unwrap();

        let (worst, name) = check_param_grads(&a, &grads, |p| loss(p, &f), 1e-5);
        assert!(worst <= 1e-5, "{worst} at {name}");
        let num = input_grad_fd(&f, |x| loss(&a, x), 1e-5);
        for (x, y) in gf.data().iter().zip(num.data()) {
            assert!(rel_err(*x, *y) <= 1e-5, "{x} vs {y}");
        }
    }
}
