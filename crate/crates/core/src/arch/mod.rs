//! The multi-density attention network: residual blocks, the shared spatial
//! attention branch, channel-mutual fusion, MDSA blocks and the full model.
//!
//! Every module offers `forward` for inference, `forward_train` which also
//! returns the activations needed later, and `backward` which accumulates
//! parameter gradients into a zero-initialised clone of the module.

mod attention;
mod checkpoint;
mod fusion;
mod mdsa;
mod model;
mod residual;

pub use attention::{AttentionBranch, AttentionCache};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use fusion::{FusionCache, FusionModule};
pub use mdsa::{MdsaBlock, MdsaCache};
pub use model::{init_params, param_count, Mdan, MdanCache, ParamCount, ParamGroup};
pub use residual::{ResidualBlock, ResidualCache};

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, ConvKernel, Tensor};

/// Hyper-parameters of one model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct MdanConfig {
    /// Feature channels `C`; must be a multiple of 8.
    pub channels: usize,
    pub mdsa_blocks: usize,
    /// Residual blocks after every MDSA block.
    pub p: usize,
    /// Residual blocks at the attention-branch bottleneck.
    pub q: usize,
    pub in_planes: usize,
}

impl Default for MdanConfig {
    fn default() -> Self {
        MdanConfig {
            channels: 64,
            mdsa_blocks: 8,
            p: 2,
            q: 1,
            in_planes: 1,
        }
    }
}

impl MdanConfig {
    pub fn new(channels: usize, mdsa_blocks: usize) -> Self {
        MdanConfig {
            channels,
            mdsa_blocks,
            ..Self::default()
        }
    }

    /// Width of the fusion bottleneck, `C/8`.
    pub fn reduction(&self) -> usize {
        self.channels / 8
    }

    /// Residual blocks in the half-density branch.
    pub fn half_depth(&self) -> usize {
        self.q + 2
    }

    /// Residual blocks in the full-density branch.
    pub fn full_depth(&self) -> usize {
        self.q + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(8) {
            return Err(Error::Invalid(format!(
                "channel count {} must be a positive multiple of 8",
                self.channels
            )));
        }
        if self.in_planes != 1 {
            return Err(Error::Invalid(format!(
                "only single-plane models are supported, got in_planes={}",
                self.in_planes
            )));
        }
        Ok(())
    }
}

/// Named traversal over every learnable tensor, in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    /// Clone with every tensor zeroed; used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, t| t.fill(0.0));
        z
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for ConvKernel {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "weight"), &self.weights);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weights);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Backpropagates through one convolution, adding its parameter gradients to
/// `acc` and returning the gradient of its input.
pub(crate) fn conv_backward_into(
    kernel: &ConvKernel,
    x: &Tensor,
    grad_out: &Tensor,
    acc: &mut ConvKernel,
) -> Result<Tensor> {
    let g = conv2d_backward(x, kernel, grad_out)?;
    acc.weights.add_assign(&g.grad_weights)?;
    if let (Some(b), Some(gb)) = (acc.bias.as_mut(), g.grad_bias.as_ref()) {
        b.add_assign(gb)?;
    }
    Ok(g.grad_x)
}

pub(crate) fn require_multiple_of_4(op: &'static str, x: &Tensor) -> Result<()> {
    if !x.h().is_multiple_of(4) || !x.w().is_multiple_of(4) {
        return Err(Error::shape(
            op,
            format!("spatial size {}×{} must be divisible by 4", x.h(), x.w()),
        ));
    }
    Ok(())
}
