//! Blockwise-DCT quantization used as a stand-in for a real encoder's
//! reconstruction.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::yuv::{PlanarFrame, Plane, PlaneId};

const B: usize = 8;
pub const MAX_QP: u32 = 51;

/// Orthonormal DCT-II basis, `basis[k][n]`.
fn basis() -> &'static [[f64; B]; B] {
    static BASIS: OnceLock<[[f64; B]; B]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut m = [[0.0; B]; B];
        for (k, row) in m.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / B as f64).sqrt() } else { (2.0 / B as f64).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = scale * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * B) as f64).cos();
            }
        }
        m
    })
}

/// Quantizer step for `qp` at the given bit depth: `2^((qp−4)/6)` on the
/// 8-bit scale, scaled up with the sample range.
pub fn quant_step(qp: u32, bit_depth: u32) -> f64 {
    2f64.powf((qp as f64 - 4.0) / 6.0) * 2f64.powi(bit_depth as i32 - 8)
}

type Block = [[f64; B]; B];

fn forward_dct(x: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; B]; B];
    for r in 0..B {
        for k in 0..B {
            tmp[r][k] = (0..B).map(|n| c[k][n] * x[r][n]).sum();
        }
    }
    let mut out = [[0.0; B]; B];
    for k in 0..B {
        for col in 0..B {
            out[k][col] = (0..B).map(|n| c[k][n] * tmp[n][col]).sum();
        }
    }
    out
}

fn inverse_dct(x: &Block) -> Block {
    let c = basis();
    let mut tmp = [[0.0; B]; B];
    for n in 0..B {
        for col in 0..B {
            tmp[n][col] = (0..B).map(|k| c[k][n] * x[k][col]).sum();
        }
    }
    let mut out = [[0.0; B]; B];
    for r in 0..B {
        for n in 0..B {
            out[r][n] = (0..B).map(|k| c[k][n] * tmp[r][k]).sum();
        }
    }
    out
}

/// Quantizes one plane blockwise. Partial edge blocks are filled by edge
/// replication before the transform.
pub fn compress_plane(plane: &Plane, step: f64, bit_depth: u32) -> Plane {
    let (w, h) = plane.dims();
    let max = ((1u32 << bit_depth) - 1) as f64;
    let mut out = plane.clone();
    for by in (0..h).step_by(B) {
        for bx in (0..w).step_by(B) {
            let mut block = [[0.0; B]; B];
            for (r, row) in block.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = plane.get((bx + c).min(w - 1), (by + r).min(h - 1)) as f64;
                }
            }
            let mut coeffs = forward_dct(&block);
            for v in coeffs.iter_mut().flatten() {
                *v = (*v / step).round() * step;
            }
            let rec = inverse_dct(&coeffs);
            for r in 0..B.min(h - by) {
                for c in 0..B.min(w - bx) {
                    out.set(bx + c, by + r, rec[r][c].round().clamp(0.0, max) as u16);
                }
            }
        }
    }
    out
}

/// Simulated reconstruction of `frame` at quantization parameter `qp`.
pub fn simulate_compression(frame: &PlanarFrame, qp: u32) -> Result<PlanarFrame> {
    if qp > MAX_QP {
        return Err(Error::Invalid(format!("qp {qp} outside 0..={MAX_QP}")));
    }
    let step = quant_step(qp, frame.format.bit_depth);
    let mut out = frame.clone();
    for id in PlaneId::ALL {
        *out.plane_mut(id) = compress_plane(frame.plane(id), step, frame.format.bit_depth);
    }
    Ok(out)
}

/// Mean absolute horizontal step across 8-aligned column boundaries minus the
/// mean step between columns inside blocks.
pub fn blockiness(plane: &Plane) -> f64 {
    let (w, h) = plane.dims();
    let (mut edge, mut ne, mut inner, mut ni) = (0.0, 0usize, 0.0, 0usize);
    for y in 0..h {
        for x in 1..w {
            let d = (plane.get(x, y) as f64 - plane.get(x - 1, y) as f64).abs();
            if x % B == 0 {
                edge += d;
                ne += 1;
            } else {
                inner += d;
                ni += 1;
            }
        }
    }
    edge / ne.max(1) as f64 - inner / ni.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::synth;
    use crate::yuv::FrameFormat;

    #[test]
    fn transform_is_orthonormal() {
        let mut x = [[0.0; B]; B];
        for (i, v) in x.iter_mut().flatten().enumerate() {
            *v = ((i * 37) % 29) as f64;
        }
        let back = inverse_dct(&forward_dct(&x));
        for (a, b) in x.iter().flatten().zip(back.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        let e1: f64 = x.iter().flatten().map(|v| v * v).sum();
        let e2: f64 = forward_dct(&x).iter().flatten().map(|v| v * v).sum();
        assert!((e1 - e2).abs() < 1e-6 * e1);
    }

    #[test]
    fn constant_frame_survives_fine_quantization() {
        let fmt = FrameFormat::new(24, 20, 8).unwrap();
        let mut f = PlanarFrame::blank(fmt);
        for id in PlaneId::ALL {
            f.plane_mut(id).data_mut().fill(117);
        }
        assert!(quant_step(4, 8) <= 1.0);
        assert_eq!(simulate_compression(&f, 4).unwrap(), f);
    }

    #[test]
    fn distortion_grows_with_qp() {
        for depth in [8, 10] {
            let fmt = FrameFormat::new(64, 48, depth).unwrap();
            let f = &synth::sequence(fmt, 1, 3)[0];
            let mut last = f64::INFINITY;
            for qp in [22, 27, 32, 37, 42] {
                let p = psnr(&f.y, &simulate_compression(f, qp).unwrap().y, depth).unwrap();
                assert!(p < last, "qp {qp}: {p} ≥ {last}");
                last = p;
            }
        }
    }

    #[test]
    fn compression_adds_blockiness() {
        let fmt = FrameFormat::new(64, 64, 8).unwrap();
        let f = &synth::sequence(fmt, 1, 11)[0];
        let rec = simulate_compression(f, 37).unwrap();
        assert!(blockiness(&rec.y) > blockiness(&f.y));
    }

    #[test]
    fn qp_range_checked() {
        let f = PlanarFrame::blank(FrameFormat::new(8, 8, 8).unwrap());
        assert!(simulate_compression(&f, 52).is_err());
    }

    #[test]
    fn deterministic() {
        let fmt = FrameFormat::new(40, 24, 10).unwrap();
        let f = &synth::sequence(fmt, 1, 1)[0];
        assert_eq!(simulate_compression(f, 32).unwrap(), simulate_compression(f, 32).unwrap());
    }
}
