use super::{conv_backward_into, join, Parameters};
use crate::error::Result;
use crate::tensor::{add, conv2d, relu, relu_backward, ConvKernel, Tensor};

/// `x + conv2(relu(conv1(x)))`, two 3×3 convolutions with bias and no
/// normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub conv1: ConvKernel,
    pub conv2: ConvKernel,
}

#[derive(Clone, Debug)]
pub struct ResidualCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl ResidualBlock {
    pub fn zeros(channels: usize) -> Self {
        ResidualBlock {
            conv1: ConvKernel::same3(channels, channels, true),
            conv2: ConvKernel::same3(channels, channels, true),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let act = relu(&conv2d(x, &self.conv1)?);
        add(x, &conv2d(&act, &self.conv2)?)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ResidualCache)> {
        let pre = conv2d(x, &self.conv1)?;
        let act = relu(&pre);
        let out = add(x, &conv2d(&act, &self.conv2)?)?;
        Ok((
            out,
            ResidualCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&self, cache: &ResidualCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let g_act = conv_backward_into(&self.conv2, &cache.act, grad_out, &mut grads.conv2)?;
        let g_pre = relu_backward(&cache.pre, &g_act)?;
        let mut gx = conv_backward_into(&self.conv1, &cache.x, &g_pre, &mut grads.conv1)?;
        gx.add_assign(grad_out)?;
        Ok(gx)
    }
}

impl Parameters for ResidualBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

pub(crate) fn chain_forward(blocks: &[ResidualBlock], x: Tensor) -> Result<Tensor> {
    blocks.iter().try_fold(x, |h, b| b.forward(&h))
}

pub(crate) fn chain_forward_train(
    blocks: &[ResidualBlock],
    x: Tensor,
) -> Result<(Tensor, Vec<ResidualCache>)> {
    let mut caches = Vec::with_capacity(blocks.len());
    let mut h = x;
    for b in blocks {
        let (y, c) = b.forward_train(&h)?;
        caches.push(c);
        h = y;
    }
    Ok((h, caches))
}

pub(crate) fn chain_backward(
    blocks: &[ResidualBlock],
    caches: &[ResidualCache],
    grad_out: Tensor,
    grads: &mut [ResidualBlock],
) -> Result<Tensor> {
    let mut g = grad_out;
    for ((b, c), gb) in blocks.iter().zip(caches).zip(grads.iter_mut()).rev() {
        g = b.backward(c, &g, gb)?;
    }
    Ok(g)
}
