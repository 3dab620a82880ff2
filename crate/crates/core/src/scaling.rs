//! Per-frame least-squares scaling of the network residual.
//!
//! The encoder regresses the coding residual `org − rec` on the network
//! residual `nn − rec` over a whole plane and signals the slope as a 16-bit
//! fixed-point factor; both sides then compute `rec + α·(nn − rec)`.

use crate::error::{Error, Result};
use crate::yuv::{Plane, PlaneId};

/// Fractional bits of the signalled factor.
pub const ALPHA_FRAC_BITS: u32 = 11;
pub const ALPHA_ONE: i16 = 1 << ALPHA_FRAC_BITS;
/// Relative threshold below which the regression denominator counts as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

const DEGENERATE_FLAG: u8 = 0x80;

/// Regression sums over one plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScalingStats {
    /// Σ dₙ²
    pub self_multi: f64,
    /// Σ dₙ·dₒ
    pub cross_multi: f64,
    /// Σ dₒ
    pub sum_org_resi: f64,
    /// Σ dₙ
    pub sum_nn_resi: f64,
    pub n: u64,
}

impl ScalingStats {
    pub fn push(&mut self, nn_resi: f64, org_resi: f64) {
        self.self_multi += nn_resi * nn_resi;
        self.cross_multi += nn_resi * org_resi;
        self.sum_org_resi += org_resi;
        self.sum_nn_resi += nn_resi;
        self.n += 1;
    }

    pub fn from_residuals(nn_resi: &[f64], org_resi: &[f64]) -> Result<Self> {
        if nn_resi.len() != org_resi.len() {
            return Err(Error::shape(
                "scaling_stats",
                format!("{} network residuals vs {} coding residuals", nn_resi.len(), org_resi.len()),
            ));
        }
        let mut s = ScalingStats::default();
        for (a, b) in nn_resi.iter().zip(org_resi) {
            s.push(*a, *b);
        }
        Ok(s)
    }

    /// Combines partial sums; merge partials in a fixed order for
    /// reproducible results.
    pub fn merge(&mut self, other: &ScalingStats) {
        self.self_multi += other.self_multi;
        self.cross_multi += other.cross_multi;
        self.sum_org_resi += other.sum_org_resi;
        self.sum_nn_resi += other.sum_nn_resi;
        self.n += other.n;
    }
}

/// Accumulates the regression sums in raster order.
pub fn accumulate_stats(p_nn: &Plane, p_rec: &Plane, p_org: &Plane) -> Result<ScalingStats> {
    p_nn.require_same_dims(p_rec, "accumulate_stats")?;
    p_nn.require_same_dims(p_org, "accumulate_stats")?;
    let mut s = ScalingStats::default();
    for ((&nn, &rec), &org) in p_nn.data().iter().zip(p_rec.data()).zip(p_org.data()) {
        s.push(nn as f64 - rec as f64, org as f64 - rec as f64);
    }
    Ok(s)
}

/// A signalled per-plane factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingFactor {
    pub alpha_real: f64,
    pub alpha_q: i16,
    pub plane: PlaneId,
    pub degenerate: bool,
}

impl ScalingFactor {
    /// Quantizes `alpha` to s16 with 11 fractional bits, clamping to [−16, 16).
    pub fn from_alpha(alpha: f64, plane: PlaneId) -> Result<Self> {
        Ok(ScalingFactor {
            alpha_real: alpha,
            alpha_q: quantize_alpha(alpha)?,
            plane,
            degenerate: false,
        })
    }

    /// α = 1: the network output passes through unchanged.
    pub fn identity(plane: PlaneId) -> Self {
        ScalingFactor {
            alpha_real: 1.0,
            alpha_q: ALPHA_ONE,
            plane,
            degenerate: false,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha_q as f64 / ALPHA_ONE as f64
    }
}

pub fn quantize_alpha(alpha: f64) -> Result<i16> {
    if !alpha.is_finite() {
        return Err(Error::Numerical(format!("scaling factor {alpha} is not finite")));
    }
    let scale = ALPHA_ONE as f64;
    let hi = 16.0 - 1.0 / scale;
    Ok((alpha.clamp(-16.0, hi) * scale).round() as i16)
}

/// Closed-form regression slope.
///
/// Falls back to α = 1 (flagged degenerate) when the network residual is
/// constant and the slope is undefined.
pub fn derive_alpha(stats: &ScalingStats, plane: PlaneId) -> Result<ScalingFactor> {
    if stats.n < 2 {
        return Err(Error::Invalid(format!(
            "scaling factor needs at least 2 samples, got {}",
            stats.n
        )));
    }
    let n = stats.n as f64;
    let den = n * stats.self_multi - stats.sum_nn_resi * stats.sum_nn_resi;
    if den.abs() <= DEGENERATE_EPS * n * stats.self_multi.max(1.0) {
        return Ok(ScalingFactor {
            degenerate: true,
            ..ScalingFactor::identity(plane)
        });
    }
    let num = n * stats.cross_multi - stats.sum_org_resi * stats.sum_nn_resi;
    ScalingFactor::from_alpha(num / den, plane)
}

/// `clip(round(α·(nn − rec) + rec))` with α taken from the quantized value,
/// so encoder and decoder agree bit for bit.
pub fn apply_scaling(p_nn: &Plane, p_rec: &Plane, factor: &ScalingFactor, bit_depth: u32) -> Result<Plane> {
    p_nn.require_same_dims(p_rec, "apply_scaling")?;
    let alpha = factor.alpha();
    let max = ((1u32 << bit_depth) - 1) as f64;
    let data = p_nn
        .data()
        .iter()
        .zip(p_rec.data())
        .map(|(&nn, &rec)| {
            // Exact in f64: α is dyadic and the residual is a small integer.
            let v = alpha * (nn as f64 - rec as f64) + rec as f64;
            v.round().clamp(0.0, max) as u16
        })
        .collect();
    Plane::from_vec(p_nn.width(), p_nn.height(), data)
}

pub const FACTOR_BYTES: usize = 3;

/// `[plane id | degenerate flag, α_q low, α_q high]`.
pub fn encode_factor(factor: &ScalingFactor) -> [u8; FACTOR_BYTES] {
    let q = factor.alpha_q.to_le_bytes();
    let id = factor.plane.index() | if factor.degenerate { DEGENERATE_FLAG } else { 0 };
    [id, q[0], q[1]]
}

pub fn decode_factor(bytes: &[u8]) -> Result<ScalingFactor> {
    if bytes.len() < FACTOR_BYTES {
        return Err(Error::format(
            "factor record",
            format!("truncated: {} of {FACTOR_BYTES} bytes", bytes.len()),
        ));
    }
    let degenerate = bytes[0] & DEGENERATE_FLAG != 0;
    let plane = PlaneId::from_index(bytes[0] & !DEGENERATE_FLAG)
        .ok_or_else(|| Error::format("factor record", format!("unknown plane id {:#04x}", bytes[0])))?;
    let alpha_q = i16::from_le_bytes([bytes[1], bytes[2]]);
    if degenerate && alpha_q != ALPHA_ONE {
        return Err(Error::format(
            "factor record",
            format!("degenerate flag set with α_q = {alpha_q}, expected {ALPHA_ONE}"),
        ));
    }
    Ok(ScalingFactor {
        alpha_real: alpha_q as f64 / ALPHA_ONE as f64,
        alpha_q,
        plane,
        degenerate,
    })
}
