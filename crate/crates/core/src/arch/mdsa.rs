use super::residual::{chain_backward, chain_forward, chain_forward_train, ResidualCache};
use super::{
    conv_backward_into, join, require_multiple_of_4, AttentionBranch, AttentionCache, FusionCache, FusionModule,
    MdanConfig, Parameters, ResidualBlock,
};
use crate::error::Result;
use crate::tensor::{
    add, broadcast_mul, broadcast_mul_backward, conv2d, pixel_shuffle, pixel_shuffle_backward, ConvKernel, Tensor,
};

/// Multi-density single-attention block.
///
/// ```text
///        ┌── full residual chain ──────────⊙ m̂ ────────────┐
///  x ────┼── stride-2 conv ─ half chain ─⊙ m ─ conv ─ shuffle ─┤ fusion ─(+x)─▶
///        └── attention branch ─▶ (m, m̂)                         │
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct MdsaBlock {
    pub full: Vec<ResidualBlock>,
    pub down: ConvKernel,
    pub half: Vec<ResidualBlock>,
    pub up: ConvKernel,
    pub attention: AttentionBranch,
    pub fusion: FusionModule,
}

pub struct MdsaCache {
    x: Tensor,
    attention: AttentionCache,
    m: Tensor,
    m_hat: Tensor,
    full: Vec<ResidualCache>,
    full_out: Tensor,
    half: Vec<ResidualCache>,
    half_out: Tensor,
    half_masked: Tensor,
    fusion: FusionCache,
}

impl MdsaBlock {
    pub fn zeros(cfg: &MdanConfig) -> Self {
        let c = cfg.channels;
        MdsaBlock {
            full: (0..cfg.full_depth()).map(|_| ResidualBlock::zeros(c)).collect(),
            down: ConvKernel::zeros(c, c, 3, 2, 1, true),
            half: (0..cfg.half_depth()).map(|_| ResidualBlock::zeros(c)).collect(),
            up: ConvKernel::same3(4 * c, c, true),
            attention: AttentionBranch::zeros(cfg.q),
            fusion: FusionModule::zeros(c, cfg.reduction()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        require_multiple_of_4("mdsa_block", x)?;
        let (m, m_hat) = self.attention.forward(x)?;
        let u_full = broadcast_mul(&chain_forward(&self.full, x.clone())?, &m_hat)?;
        let half = chain_forward(&self.half, conv2d(x, &self.down)?)?;
        let u_half = pixel_shuffle(&conv2d(&broadcast_mul(&half, &m)?, &self.up)?, 2)?;
        add(x, &self.fusion.forward(&u_full, &u_half)?)
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, MdsaCache)> {
        require_multiple_of_4("mdsa_block", x)?;
        let ((m, m_hat), attention) = self.attention.forward_train(x)?;
        let (full_out, full) = chain_forward_train(&self.full, x.clone())?;
        let u_full = broadcast_mul(&full_out, &m_hat)?;
        let (half_out, half) = chain_forward_train(&self.half, conv2d(x, &self.down)?)?;
        let half_masked = broadcast_mul(&half_out, &m)?;
        let u_half = pixel_shuffle(&conv2d(&half_masked, &self.up)?, 2)?;
        let (fused, fusion) = self.fusion.forward_train(&u_full, &u_half)?;
        Ok((
            add(x, &fused)?,
            MdsaCache {
                x: x.clone(),
                attention,
                m,
                m_hat,
                full,
                full_out,
                half,
                half_out,
                half_masked,
                fusion,
            },
        ))
    }

    pub fn backward(&self, cache: &MdsaCache, grad_out: &Tensor, grads: &mut Self) -> Result<Tensor> {
        let (g_full, g_half_up) = self.fusion.backward(&cache.fusion, grad_out, &mut grads.fusion)?;

        let g = pixel_shuffle_backward(&g_half_up, 2)?;
        let g = conv_backward_into(&self.up, &cache.half_masked, &g, &mut grads.up)?;
        let (g_half, g_m) = broadcast_mul_backward(&cache.half_out, &cache.m, &g)?;
        let g = chain_backward(&self.half, &cache.half, g_half, &mut grads.half)?;
        let g_x_half = conv_backward_into(&self.down, &cache.x, &g, &mut grads.down)?;

        let (g_full, g_m_hat) = broadcast_mul_backward(&cache.full_out, &cache.m_hat, &g_full)?;
        let g_x_full = chain_backward(&self.full, &cache.full, g_full, &mut grads.full)?;

        let g_x_att = self
            .attention
            .backward(&cache.attention, &g_m, &g_m_hat, &mut grads.attention)?;

        let mut gx = grad_out.clone();
        gx.add_assign(&g_x_half)?;
        gx.add_assign(&g_x_full)?;
        gx.add_assign(&g_x_att)?;
        Ok(gx)
    }
}

impl Parameters for MdsaBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.full.visit(&join(prefix, "full"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.half.visit(&join(prefix, "half"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.attention.visit(&join(prefix, "attention"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.full.visit_mut(&join(prefix, "full"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
        self.half.visit_mut(&join(prefix, "half"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
        self.attention.visit_mut(&join(prefix, "attention"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
    }
}
