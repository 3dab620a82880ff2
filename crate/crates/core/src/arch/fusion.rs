use super::{conv_backward_into, join, Parameters};
use crate::error::Result;
use crate::tensor::{
    add, conv2d, global_avg_pool, global_avg_pool_backward, scale_channels, scale_channels_backward,
    softmax_pair, softmax_pair_backward, ConvKernel, Tensor,
};

/// Channel-mutual fusion of the two density branches.
///
/// The branch sum is pooled to a channel descriptor, squeezed to `C/8`,
/// expanded once per branch, and a two-way softmax turns the pair into
/// per-channel selection weights. The weighted sum is mixed by a final 1×1
/// convolution. All four convolutions are bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModule {
    pub down: ConvKernel,
    pub up_a: ConvKernel,
    pub up_b: ConvKernel,
    pub out: ConvKernel,
}

pub struct FusionCache {
    u_full: Tensor,
    u_half: Tensor,
    sum_shape: [usize; 4],
    pooled: Tensor,
    squeezed: Tensor,
    s1: Tensor,
    s2: Tensor,
    mixed: Tensor,
}

impl FusionModule {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        FusionModule {
            down: ConvKernel::pointwise(reduction, channels, false),
            up_a: ConvKernel::pointwise(channels, reduction, false),
            up_b: ConvKernel::pointwise(channels, reduction, false),
            out: ConvKernel::pointwise(channels, channels, false),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.down.weight_count() + self.up_a.weight_count() + self.up_b.weight_count() + self.out.weight_count()
    }

    /// Per-channel selection weights `(s1, s2)` for the given branch outputs.
    pub fn selection(&self, u_full: &Tensor, u_half: &Tensor) -> Result<(Tensor, Tensor)> {
        let pooled = global_avg_pool(&add(u_full, u_half)?);
        let z = conv2d(&pooled, &self.down)?;
        softmax_pair(&conv2d(&z, &self.up_a)?, &conv2d(&z, &self.up_b)?)
    }

    pub fn forward(&self, u_full: &Tensor, u_half: &Tensor) -> Result<Tensor> {
        let (s1, s2) = self.selection(u_full, u_half)?;
        let mixed = add(&scale_channels(u_full, &s1)?, &scale_channels(u_half, &s2)?)?;
        conv2d(&mixed, &self.out)
    }

    pub fn forward_train(&self, u_full: &Tensor, u_half: &Tensor) -> Result<(Tensor, FusionCache)> {
        let sum = add(u_full, u_half)?;
        let pooled = global_avg_pool(&sum);
        let squeezed = conv2d(&pooled, &self.down)?;
        let (s1, s2) = softmax_pair(&conv2d(&squeezed, &self.up_a)?, &conv2d(&squeezed, &self.up_b)?)?;
        let mixed = add(&scale_channels(u_full, &s1)?, &scale_channels(u_half, &s2)?)?;
        let out = conv2d(&mixed, &self.out)?;
        Ok((
            out,
            FusionCache {
                u_full: u_full.clone(),
                u_half: u_half.clone(),
                sum_shape: sum.shape(),
                pooled,
                squeezed,
                s1,
                s2,
                mixed,
            },
        ))
    }

    /// Returns gradients of `(u_full, u_half)`.
    pub fn backward(&self, cache: &FusionCache, grad_out: &Tensor, grads: &mut Self) -> Result<(Tensor, Tensor)> {
        let g_mixed = conv_backward_into(&self.out, &cache.mixed, grad_out, &mut grads.out)?;
        let (mut g_full, g_s1) = scale_channels_backward(&cache.u_full, &cache.s1, &g_mixed)?;
        let (mut g_half, g_s2) = scale_channels_backward(&cache.u_half, &cache.s2, &g_mixed)?;
        let (g_a, g_b) = softmax_pair_backward(&cache.s1, &cache.s2, &g_s1, &g_s2)?;
        let mut g_z = conv_backward_into(&self.up_a, &cache.squeezed, &g_a, &mut grads.up_a)?;
        g_z.add_assign(&conv_backward_into(&self.up_b, &cache.squeezed, &g_b, &mut grads.up_b)?)?;
        let g_pooled = conv_backward_into(&self.down, &cache.pooled, &g_z, &mut grads.down)?;
        let g_sum = global_avg_pool_backward(cache.sum_shape, &g_pooled)?;
        g_full.add_assign(&g_sum)?;
        g_half.add_assign(&g_sum)?;
        Ok((g_full, g_half))
    }
}

impl Parameters for FusionModule {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.down.visit(&join(prefix, "down"), f);
        self.up_a.visit(&join(prefix, "up_a"), f);
        self.up_b.visit(&join(prefix, "up_b"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up_a.visit_mut(&join(prefix, "up_a"), f);
        self.up_b.visit_mut(&join(prefix, "up_b"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;

    #[test]
    fn weight_count_at_64_channels() {
        let f = FusionModule::zeros(64, 8);
        assert_eq!(f.weight_count(), 5632);
        assert_eq!(f.scalar_count(), 5632);
    }

    #[test]
    fn equal_inputs_with_symmetric_expansions_select_evenly() {
        // Identical inputs only force s1 = s2 when both expansions agree.
        let mut f = FusionModule::zeros(16, 2);
        randomize(&mut f, 1, 0.5);
        f.up_b = f.up_a.clone();
        let u = random([2, 16, 4, 4], 2);
        let (s1, s2) = f.selection(&u, &u).unwrap();
        assert!(s1.data().iter().chain(s2.data()).all(|v| *v == 0.5));
        assert_eq!(f.forward(&u, &u).unwrap(), conv2d(&u, &f.out).unwrap());
    }

    #[test]
    fn selection_sums_to_one() {
        let mut f = FusionModule::zeros(16, 2);
        randomize(&mut f, 3, 2.0);
        let (s1, s2) = f.selection(&random([2, 16, 4, 4], 4), &random([2, 16, 4, 4], 5)).unwrap();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            assert!((a + b - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = FusionModule::zeros(8, 1);
        assert!(f.forward(&random([1, 8, 4, 4], 1), &random([1, 8, 4, 6], 2)).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut f = FusionModule::zeros(8, 1);
        randomize(&mut f, 21, 0.8);
        let a = random([2, 8, 4, 4], 22);
        let b = random([2, 8, 4, 4], 23);
        let g = random([2, 8, 4, 4], 24);
        let ((out, cache), mut grads) = (f.forward_train(&a, &b).unwrap(), f.zeros_like());
        assert_eq!(out, f.forward(&a, &b).unwrap());
        let (ga, gb) = f.backward(&cache, &g, &mut grads).unwrap();

        let (worst, name) = check_param_grads(&f, &grads, |p| dot(&p.forward(&a, &b).unwrap(), &g), 1e-5);
        assert!(worst <= 1e-5, "{worst} at {name}");
        let na = input_grad_fd(&a, |x| dot(&f.forward(x, &b).unwrap(), &g), 1e-5);
        let nb = input_grad_fd(&b, |x| dot(&f.forward(&a, x).unwrap(), &g), 1e-5);
        for (x, y) in ga.data().iter().zip(na.data()).chain(gb.data().iter().zip(nb.data())) {
            assert!(rel_err(*x, *y) <= 1e-5, "{x} vs {y}");
        }
    }
}
