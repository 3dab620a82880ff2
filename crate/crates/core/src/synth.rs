//! Deterministic synthetic test sequences: smooth gradients, drifting
//! sinusoidal texture, moving solid shapes and a little sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::yuv::{FrameFormat, PlanarFrame, Plane, PlaneId};

struct Wave {
    fx: f64,
    fy: f64,
    speed: f64,
    phase: f64,
    amp: f64,
}

struct Shape {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    rx: f64,
    ry: f64,
    level: f64,
    round: bool,
}

struct PlaneScene {
    base: f64,
    gx: f64,
    gy: f64,
    waves: Vec<Wave>,
    shapes: Vec<Shape>,
    noise: f64,
}

impl PlaneScene {
    fn random(rng: &mut ChaCha8Rng, w: f64, h: f64, detail: f64) -> Self {
        let waves = (0..3)
            .map(|_| Wave {
                fx: rng.gen_range(0.02..0.35) * detail,
                fy: rng.gen_range(0.02..0.35) * detail,
                speed: rng.gen_range(-0.3..0.3),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.03..0.09),
            })
            .collect();
        let shapes = (0..5)
            .map(|_| Shape {
                cx: rng.gen_range(0.0..w),
                cy: rng.gen_range(0.0..h),
                vx: rng.gen_range(-2.0..2.0),
                vy: rng.gen_range(-1.5..1.5),
                rx: rng.gen_range(0.06..0.2) * w,
                ry: rng.gen_range(0.06..0.2) * h,
                level: rng.gen_range(-0.3..0.3),
                round: rng.gen_bool(0.5),
            })
            .collect();
        PlaneScene {
            base: rng.gen_range(0.35..0.65),
            gx: rng.gen_range(-0.2..0.2) / w,
            gy: rng.gen_range(-0.2..0.2) / h,
            waves,
            shapes,
            noise: 0.004,
        }
    }

    fn render(&self, w: usize, h: usize, t: f64, max: u16, rng: &mut ChaCha8Rng) -> Plane {
        Plane::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = self.base + self.gx * xf + self.gy * yf;
            for wv in &self.waves {
                v += wv.amp * (wv.fx * xf + wv.fy * yf + wv.speed * t + wv.phase).sin();
            }
            for s in &self.shapes {
                let dx = (xf - (s.cx + s.vx * t)) / s.rx;
                let dy = (yf - (s.cy + s.vy * t)) / s.ry;
                let inside = if s.round { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
                if inside {
                    v += s.level;
                }
            }
            v += rng.gen_range(-self.noise..self.noise);
            (v.clamp(0.0, 1.0) * max as f64).round() as u16
        })
    }
}

/// `frames` pictures of a reproducible synthetic scene.
pub fn sequence(format: FrameFormat, frames: usize, seed: u64) -> Vec<PlanarFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes: Vec<PlaneScene> = PlaneId::ALL
        .iter()
        .map(|&id| {
            let (w, h) = format.plane_dims(id);
            let detail = if id.is_luma() { 1.0 } else { 0.6 };
            PlaneScene::random(&mut rng, w as f64, h as f64, detail)
        })
        .collect();
    (0..frames)
        .map(|t| {
            let mut f = PlanarFrame::blank(format);
            for (id, scene) in PlaneId::ALL.into_iter().zip(&scenes) {
                let (w, h) = format.plane_dims(id);
                *f.plane_mut(id) = scene.render(w, h, t as f64, format.max_value(), &mut rng);
            }
            f
        })
        .collect()
}
