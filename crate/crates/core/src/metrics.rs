//! PSNR and Bjøntegaard delta metrics.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::yuv::Plane;

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    a.require_same_dims(b, "psnr")?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// PSNR in dB; identical planes give `f64::INFINITY`.
pub fn psnr(a: &Plane, b: &Plane, bit_depth: u32) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?, bit_depth))
}

pub fn psnr_from_mse(mse: f64, bit_depth: u32) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    let max = ((1u32 << bit_depth) - 1) as f64;
    10.0 * (max * max / mse).log10()
}

/// Combines per-plane figures with the 4:1:1 luma/chroma weighting.
pub fn yuv_weighted(y: f64, u: f64, v: f64) -> f64 {
    (4.0 * y + u + v) / 6.0
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub rate: f64,
    pub psnr: f64,
}

/// Rate-distortion points sorted by strictly increasing rate.
#[derive(Clone, Debug, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

pub const CURVE_POINTS: usize = 4;

impl RdCurve {
    /// Sorts by rate and validates. Rates must be positive and distinct and
    /// PSNRs finite.
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() != CURVE_POINTS {
            return Err(Error::Invalid(format!(
                "an RD curve needs exactly {CURVE_POINTS} points, got {}",
                points.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !(p.rate > 0.0 && p.rate.is_finite()) || !p.psnr.is_finite()) {
            return Err(Error::Invalid(format!(
                "RD point (rate {}, psnr {}) must have a finite positive rate and finite PSNR",
                p.rate, p.psnr
            )));
        }
        points.sort_by(|a, b| a.rate.total_cmp(&b.rate));
        if let Some(w) = points.windows(2).find(|w| w[0].rate == w[1].rate) {
            return Err(Error::Invalid(format!("duplicate rate {} in RD curve", w[0].rate)));
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    /// Points where PSNR drops as rate increases; reported, not corrected.
    pub fn psnr_violations(&self) -> Vec<(RdPoint, RdPoint)> {
        self.points
            .windows(2)
            .filter(|w| w[1].psnr < w[0].psnr)
            .map(|w| (w[0], w[1]))
            .collect()
    }

    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate.log10()).collect()
    }

    fn psnrs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.psnr).collect()
    }
}

/// Least-squares cubic in a centred, scaled variable.
struct Cubic {
    center: f64,
    scale: f64,
    coeffs: [f64; 4],
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let center = x.iter().sum::<f64>() / x.len() as f64;
        let scale = x.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Err(Error::Numerical("RD curve has no spread to fit".into()));
        }
        let u: Vec<f64> = x.iter().map(|v| (v - center) / scale).collect();
        let mut a = [[0.0f64; 5]; 4];
        for (ui, yi) in u.iter().zip(y) {
            let pw = [1.0, *ui, ui * ui, ui * ui * ui];
            for r in 0..4 {
                for c in 0..4 {
                    a[r][c] += pw[r] * pw[c];
                }
                a[r][4] += pw[r] * yi;
            }
        }
        for col in 0..4 {
            let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            if a[piv][col].abs() < 1e-12 {
                return Err(Error::Numerical("degenerate RD curve: cubic fit is singular".into()));
            }
            a.swap(col, piv);
            for r in 0..4 {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..5 {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let mut coeffs = [0.0; 4];
        for (i, c) in coeffs.iter_mut().enumerate() {
            *c = a[i][4] / a[i][i];
        }
        Ok(Cubic { center, scale, coeffs })
    }

    /// Mean value over `[lo, hi]`.
    fn mean(&self, lo: f64, hi: f64) -> f64 {
        let prim = |x: f64| {
            let u = (x - self.center) / self.scale;
            self.coeffs.iter().enumerate().map(|(k, c)| c * u.powi(k as i32 + 1) / (k + 1) as f64).sum::<f64>()
        };
        (prim(hi) - prim(lo)) * self.scale / (hi - lo)
    }
}

fn overlap(a: &[f64], b: &[f64], what: &str) -> Result<(f64, f64)> {
    let range = |v: &[f64]| (v.iter().copied().fold(f64::INFINITY, f64::min), v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (a_lo, a_hi) = range(a);
    let (b_lo, b_hi) = range(b);
    let (lo, hi) = (a_lo.max(b_lo), a_hi.min(b_hi));
    if lo >= hi {
        return Err(Error::Invalid(format!(
            "{what} ranges do not overlap: anchor [{a_lo}, {a_hi}], test [{b_lo}, {b_hi}]"
        )));
    }
    Ok((lo, hi))
}

/// Average rate change of `test` against `anchor` at equal quality, in percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (pa, pt) = (anchor.psnrs(), test.psnrs());
    let (lo, hi) = overlap(&pa, &pt, "PSNR")?;
    let fa = Cubic::fit(&pa, &anchor.log_rates())?;
    let ft = Cubic::fit(&pt, &test.log_rates())?;
    let diff = ft.mean(lo, hi) - fa.mean(lo, hi);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}

/// Average PSNR change of `test` against `anchor` at equal rate, in dB.
pub fn bd_psnr(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let (ra, rt) = (anchor.log_rates(), test.log_rates());
    let (lo, hi) = overlap(&ra, &rt, "log-rate")?;
    let fa = Cubic::fit(&ra, &anchor.psnrs())?;
    let ft = Cubic::fit(&rt, &test.psnrs())?;
    Ok(ft.mean(lo, hi) - fa.mean(lo, hi))
}

/// One row of an RD results file.
#[derive(Clone, Copy, Debug, PartialEq, Deserialize)]
pub struct RdRow {
    pub qp: u32,
    pub rate: f64,
    pub psnr_y: f64,
    pub psnr_u: f64,
    pub psnr_v: f64,
}

/// Per-plane curves built from RD rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneCurves {
    pub y: RdCurve,
    pub u: RdCurve,
    pub v: RdCurve,
}

impl PlaneCurves {
    pub fn from_rows(rows: &[RdRow]) -> Result<Self> {
        let curve = |f: fn(&RdRow) -> f64| {
            RdCurve::new(rows.iter().map(|r| RdPoint { rate: r.rate, psnr: f(r) }).collect())
        };
        Ok(PlaneCurves {
            y: curve(|r| r.psnr_y)?,
            u: curve(|r| r.psnr_u)?,
            v: curve(|r| r.psnr_v)?,
        })
    }
}

/// Reads `qp,rate,psnr_y,psnr_u,psnr_v` rows (header required).
pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<RdRow>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        }
    } else {
        Error::format("RD csv", format!("{}: {e}", path.display()))
    }
}

/// BD figures for every plane plus the weighted combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdSummary {
    pub rate: [f64; 3],
    pub psnr: [f64; 3],
}

impl BdSummary {
    pub fn compute(anchor: &PlaneCurves, test: &PlaneCurves) -> Result<Self> {
        let pairs = [(&anchor.y, &test.y), (&anchor.u, &test.u), (&anchor.v, &test.v)];
        let mut s = BdSummary {
            rate: [0.0; 3],
            psnr: [0.0; 3],
        };
        for (i, (a, t)) in pairs.iter().enumerate() {
            s.rate[i] = bd_rate(a, t)?;
            s.psnr[i] = bd_psnr(a, t)?;
        }
        Ok(s)
    }

    pub fn weighted_rate(&self) -> f64 {
        yuv_weighted(self.rate[0], self.rate[1], self.rate[2])
    }

    pub fn weighted_psnr(&self) -> f64 {
        yuv_weighted(self.psnr[0], self.psnr[1], self.psnr[2])
    }
}
