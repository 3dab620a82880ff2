//! Plane filtering with tiling, per-QP model selection, and the
//! filter-then-scale sequence flow with its sidecar file.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::arch::{load_checkpoint, read_checkpoint, Checkpoint, Mdan, CHECKPOINT_MAGIC};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::scaling::{accumulate_stats, apply_scaling, decode_factor, derive_alpha, encode_factor, ScalingFactor, FACTOR_BYTES};
use crate::tensor::Tensor;
use crate::yuv::{FrameFormat, PlanarFrame, Plane, PlaneId};

/// Maps an integer sample to `[0, 1]`.
pub fn normalize(v: u16, bit_depth: u32) -> f64 {
    v as f64 / ((1u32 << bit_depth) - 1) as f64
}

/// Inverse of [`normalize`]: scale, round half away from zero, clip.
pub fn denormalize(x: f64, bit_depth: u32) -> u16 {
    let max = ((1u32 << bit_depth) - 1) as f64;
    (x * max).round().clamp(0.0, max) as u16
}

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else if len == 1 {
        0
    } else {
        (2 * len - 2).saturating_sub(i)
    }
}

/// Normalised plane reflect-padded on the bottom and right to multiples of 4.
pub fn plane_to_tensor(plane: &Plane, bit_depth: u32) -> Tensor {
    let (w, h) = plane.dims();
    let (wp, hp) = (w.next_multiple_of(4), h.next_multiple_of(4));
    Tensor::from_fn([1, 1, hp, wp], |i| {
        let (y, x) = (i / wp, i % wp);
        normalize(plane.get(reflect(x, w), reflect(y, h)), bit_depth)
    })
}

/// Crops a padded network output back to `width × height` integer samples.
pub fn tensor_to_plane(t: &Tensor, width: usize, height: usize, bit_depth: u32) -> Plane {
    let wp = t.w();
    Plane::from_fn(width, height, |x, y| denormalize(t.data()[y * wp + x], bit_depth))
}

/// Square tiles with linear cross-fades where neighbours overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TilingPlan {
    pub tile_size: usize,
    pub overlap: usize,
}

impl Default for TilingPlan {
    fn default() -> Self {
        TilingPlan {
            tile_size: 128,
            overlap: 8,
        }
    }
}

impl TilingPlan {
    pub fn new(tile_size: usize, overlap: usize) -> Result<Self> {
        if tile_size == 0 || !tile_size.is_multiple_of(4) {
            return Err(Error::Invalid(format!("tile size {tile_size} must be a positive multiple of 4")));
        }
        if 2 * overlap > tile_size {
            return Err(Error::Invalid(format!("overlap {overlap} exceeds half the tile size {tile_size}")));
        }
        Ok(TilingPlan { tile_size, overlap })
    }

    /// Tile start offsets along one axis of padded length `len`.
    pub fn starts(&self, len: usize) -> Vec<usize> {
        if len <= self.tile_size {
            return vec![0];
        }
        let step = self.tile_size - self.overlap;
        let mut v: Vec<usize> = (0..).map(|k| k * step).take_while(|s| s + self.tile_size < len).collect();
        v.push(len - self.tile_size);
        v
    }

    /// Blend weight of position `i` in a tile of length `len`; edges that
    /// touch the plane border are not faded.
    fn ramp(&self, i: usize, len: usize, first: bool, last: bool) -> f64 {
        if self.overlap == 0 {
            return 1.0;
        }
        let o = self.overlap as f64;
        let mut w: f64 = 1.0;
        if !first {
            w = w.min((i as f64 + 0.5) / o);
        }
        if !last {
            w = w.min(((len - i) as f64 - 0.5) / o);
        }
        w
    }

    /// Runs `model` over a padded `(1,1,H,W)` plane tile by tile.
    pub fn run(&self, model: &Mdan, x: &Tensor) -> Result<Tensor> {
        let (h, w) = (x.h(), x.w());
        let (ys, xs) = (self.starts(h), self.starts(w));
        if ys.len() == 1 && xs.len() == 1 {
            return model.forward(x);
        }
        let (th, tw) = (self.tile_size.min(h), self.tile_size.min(w));
        let mut acc = vec![0.0; h * w];
        let mut norm = vec![0.0; h * w];
        for (yi, &y0) in ys.iter().enumerate() {
            for (xi, &x0) in xs.iter().enumerate() {
                let tile = Tensor::from_fn([1, 1, th, tw], |i| x.data()[(y0 + i / tw) * w + x0 + i % tw]);
                let out = model.forward(&tile)?;
                for ty in 0..th {
                    let wy = self.ramp(ty, th, yi == 0, yi + 1 == ys.len());
                    for tx in 0..tw {
                        let wgt = wy * self.ramp(tx, tw, xi == 0, xi + 1 == xs.len());
                        let k = (y0 + ty) * w + x0 + tx;
                        acc[k] += wgt * out.data()[ty * tw + tx];
                        norm[k] += wgt;
                    }
                }
            }
        }
        let data = acc.iter().zip(&norm).map(|(a, n)| a / n).collect();
        Tensor::from_vec([1, 1, h, w], data)
    }
}

/// Applies `model` to one integer plane: normalise, pad, tile, crop,
/// denormalise.
pub fn filter_plane_with(model: &Mdan, plane: &Plane, bit_depth: u32, tiling: &TilingPlan) -> Result<Plane> {
    let out = tiling.run(model, &plane_to_tensor(plane, bit_depth))?;
    Ok(tensor_to_plane(&out, plane.width(), plane.height(), bit_depth))
}

pub const QP_BANDS: [u32; 5] = [22, 27, 32, 37, 42];

/// Nearest trained band; ties go to the lower band.
pub fn select_band(qp: u32) -> u32 {
    *QP_BANDS
        .iter()
        .min_by_key(|&&b| (b.abs_diff(qp), b))
        .expect("non-empty band list")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneClass {
    Luma,
    Chroma,
}

impl PlaneClass {
    pub fn of(id: PlaneId) -> Self {
        if id.is_luma() {
            PlaneClass::Luma
        } else {
            PlaneClass::Chroma
        }
    }
}

/// Checkpoints per (QP band, plane class).
///
/// Registry files hold one entry per line, `<band|*> <luma|chroma> <path>`,
/// with paths relative to the file. `*` matches every band. Chroma falls
/// back to the luma model when no chroma entry resolves.
#[derive(Clone, Debug, Default)]
pub struct QpBandRegistry {
    entries: HashMap<(Option<u32>, PlaneClass), Checkpoint>,
}

impl QpBandRegistry {
    /// One model for every band and both plane classes.
    pub fn single(ckpt: Checkpoint) -> Self {
        let mut r = QpBandRegistry::default();
        r.entries.insert((None, PlaneClass::Luma), ckpt);
        r
    }

    pub fn insert(&mut self, band: Option<u32>, class: PlaneClass, ckpt: Checkpoint) -> Result<()> {
        if let Some(b) = band {
            if !QP_BANDS.contains(&b) {
                return Err(Error::Invalid(format!("unknown QP band {b}; expected one of {QP_BANDS:?}")));
            }
        }
        self.entries.insert((band, class), ckpt);
        Ok(())
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut r = QpBandRegistry::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::format("model registry", format!("line {}: {why}: '{line}'", no + 1));
            let mut parts = line.split_whitespace();
            let (Some(band), Some(class), Some(path), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad("expected '<band|*> <luma|chroma> <path>'"));
            };
            let band = match band {
                "*" => None,
                b => Some(b.parse::<u32>().map_err(|_| bad("band is not a number"))?),
            };
            let class = match class {
                "luma" => PlaneClass::Luma,
                "chroma" => PlaneClass::Chroma,
                _ => return Err(bad("plane class must be 'luma' or 'chroma'")),
            };
            let path: PathBuf = base.join(path);
            let ckpt = load_checkpoint(&path)
                .map_err(|e| Error::Invalid(format!("model registry line {}: {}: {e}", no + 1, path.display())))?;
            r.insert(band, class, ckpt)?;
        }
        for band in QP_BANDS {
            r.resolve_band(band, PlaneClass::Luma)?;
        }
        Ok(r)
    }

    /// Reads a registry file; a bare checkpoint file serves every band.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            return Ok(Self::single(read_checkpoint(&mut bytes.as_slice())?));
        }
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::format("model registry", format!("{} is neither a checkpoint nor text", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Model for `qp` and the plane class, checking the stamped band.
    pub fn resolve(&self, qp: u32, class: PlaneClass) -> Result<&Mdan> {
        self.resolve_band(select_band(qp), class)
    }

    fn resolve_band(&self, band: u32, class: PlaneClass) -> Result<&Mdan> {
        let mut order = vec![(Some(band), class), (None, class)];
        if class == PlaneClass::Chroma {
            order.extend([(Some(band), PlaneClass::Luma), (None, PlaneClass::Luma)]);
        }
        let ckpt = order
            .iter()
            .find_map(|k| self.entries.get(k))
            .ok_or_else(|| Error::Invalid(format!("no model registered for QP band {band} ({class:?})")))?;
        let stamped = ckpt.header.qp_band;
        if stamped != 0 && stamped != band {
            return Err(Error::Invalid(format!(
                "checkpoint trained for QP band {stamped} registered for band {band}"
            )));
        }
        Ok(&ckpt.model)
    }
}

/// Filters one plane with the registry's model for `qp`.
pub fn filter_plane(
    rec: &Plane,
    bit_depth: u32,
    qp: u32,
    registry: &QpBandRegistry,
    class: PlaneClass,
    tiling: &TilingPlan,
) -> Result<Plane> {
    filter_plane_with(registry.resolve(qp, class)?, rec, bit_depth, tiling)
}

pub const SIDECAR_MAGIC: &[u8; 4] = b"MDSF";

/// Per-frame Y, U, V scaling factors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sidecar {
    pub frames: Vec<[ScalingFactor; 3]>,
}

impl Sidecar {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u32::try_from(self.frames.len())
            .map_err(|_| Error::Invalid("too many frames for a sidecar".into()))?;
        let mut out = Vec::with_capacity(8 + self.frames.len() * 3 * FACTOR_BYTES);
        out.extend_from_slice(SIDECAR_MAGIC);
        out.extend_from_slice(&count.to_le_bytes());
        for f in &self.frames {
            for (factor, id) in f.iter().zip(PlaneId::ALL) {
                if factor.plane != id {
                    return Err(Error::Invalid(format!("factor for plane {} stored in slot {id}", factor.plane)));
                }
                out.extend_from_slice(&encode_factor(factor));
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != SIDECAR_MAGIC {
            return Err(Error::format("sidecar", "missing MDSF header"));
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let body = &bytes[8..];
        let record = 3 * FACTOR_BYTES;
        if body.len() != count.saturating_mul(record) {
            return Err(Error::format(
                "sidecar",
                format!("header declares {count} frames ({} bytes) but {} bytes follow", count * record, body.len()),
            ));
        }
        let mut frames = Vec::with_capacity(count);
        for (index, chunk) in body.chunks_exact(record).enumerate() {
            let mut f = [ScalingFactor::identity(PlaneId::Y); 3];
            for (slot, id) in PlaneId::ALL.into_iter().enumerate() {
                let factor = decode_factor(&chunk[slot * FACTOR_BYTES..])?;
                if factor.plane != id {
                    return Err(Error::format(
                        "sidecar",
                        format!("frame {index}: expected plane {id}, found {}", factor.plane),
                    ));
                }
                f[slot] = factor;
            }
            frames.push(f);
        }
        Ok(Sidecar { frames })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Per-plane figures for one frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportLine {
    pub frame: usize,
    pub plane: PlaneId,
    /// Reconstruction vs original; `None` without an original.
    pub psnr_rec: Option<f64>,
    /// Network output before scaling vs original.
    pub psnr_nn: Option<f64>,
    /// Final output vs original.
    pub psnr_filtered: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub lines: Vec<ReportLine>,
}

fn fmt_db(v: Option<f64>) -> String {
    match v {
        None => "n/a".into(),
        Some(v) if v.is_infinite() => "inf".into(),
        Some(v) => format!("{v:.4}"),
    }
}

impl Report {
    /// `index plane psnr_rec psnr_filtered alpha`, one line per frame and plane.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{} {} {} {} {:.6}",
                l.frame,
                l.plane,
                fmt_db(l.psnr_rec),
                fmt_db(l.psnr_filtered),
                l.alpha
            );
        }
        s
    }

    pub fn plane_lines(&self, id: PlaneId) -> impl Iterator<Item = &ReportLine> {
        self.lines.iter().filter(move |l| l.plane == id)
    }
}

/// Settings shared by the encoder and decoder paths.
#[derive(Clone, Copy, Debug)]
pub struct FilterSettings<'a> {
    pub qp: u32,
    pub registry: &'a QpBandRegistry,
    pub tiling: TilingPlan,
}

impl FilterSettings<'_> {
    fn network(&self, frame: &PlanarFrame, id: PlaneId) -> Result<Plane> {
        filter_plane(
            frame.plane(id),
            frame.format.bit_depth,
            self.qp,
            self.registry,
            PlaneClass::of(id),
            &self.tiling,
        )
    }
}

/// Output of the encoder-side flow.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub frames: Vec<PlanarFrame>,
    pub sidecar: Sidecar,
    pub report: Report,
}

/// Encoder side: filters every plane and, with `scale`, fits a factor per
/// plane against the original.
pub fn encode_frames(
    rec: &[PlanarFrame],
    org: Option<&[PlanarFrame]>,
    scale: bool,
    settings: &FilterSettings,
) -> Result<Encoded> {
    if scale && org.is_none() {
        return Err(Error::Invalid("scaling needs the original sequence".into()));
    }
    if let Some(org) = org {
        if org.len() != rec.len() {
            return Err(Error::Invalid(format!(
                "original has {} frames but reconstruction has {}",
                org.len(),
                rec.len()
            )));
        }
        if let Some(o) = org.first() {
            if o.format != rec[0].format {
                return Err(Error::Invalid("original and reconstruction formats differ".into()));
            }
        }
    }
    let mut out = Encoded {
        frames: Vec::with_capacity(rec.len()),
        sidecar: Sidecar::default(),
        report: Report::default(),
    };
    for (index, frame) in rec.iter().enumerate() {
        let depth = frame.format.bit_depth;
        let original = org.map(|o| &o[index]);
        let mut filtered = frame.clone();
        let mut factors = [ScalingFactor::identity(PlaneId::Y); 3];
        for (slot, id) in PlaneId::ALL.into_iter().enumerate() {
            let p_rec = frame.plane(id);
            let p_nn = settings.network(frame, id)?;
            let factor = match original {
                Some(o) if scale => derive_alpha(&accumulate_stats(&p_nn, p_rec, o.plane(id))?, id)?,
                _ => ScalingFactor::identity(id),
            };
            let p_out = apply_scaling(&p_nn, p_rec, &factor, depth)?;
            let metric = |p: &Plane| original.map(|o| psnr(p, o.plane(id), depth)).transpose();
            out.report.lines.push(ReportLine {
                frame: index,
                plane: id,
                psnr_rec: metric(p_rec)?,
                psnr_nn: metric(&p_nn)?,
                psnr_filtered: metric(&p_out)?,
                alpha: factor.alpha(),
            });
            factors[slot] = factor;
            *filtered.plane_mut(id) = p_out;
        }
        out.sidecar.frames.push(factors);
        out.frames.push(filtered);
    }
    Ok(out)
}

/// Decoder side: reproduces the encoder output from the reconstruction and
/// the signalled factors alone.
pub fn decode_frames(rec: &[PlanarFrame], sidecar: &Sidecar, settings: &FilterSettings) -> Result<Vec<PlanarFrame>> {
    if sidecar.frames.len() != rec.len() {
        return Err(Error::Invalid(format!(
            "sidecar carries {} frames but the reconstruction has {}",
            sidecar.frames.len(),
            rec.len()
        )));
    }
    rec.iter()
        .zip(&sidecar.frames)
        .map(|(frame, factors)| {
            let mut out = frame.clone();
            for (id, factor) in PlaneId::ALL.into_iter().zip(factors) {
                let p_nn = settings.network(frame, id)?;
                *out.plane_mut(id) = apply_scaling(&p_nn, frame.plane(id), factor, frame.format.bit_depth)?;
            }
            Ok(out)
        })
        .collect()
}

/// File-level encoder flow.
#[derive(Clone, Debug)]
pub struct FilterRequest<'a> {
    pub rec: &'a Path,
    pub org: Option<&'a Path>,
    pub out: &'a Path,
    pub sidecar: &'a Path,
    pub report: Option<&'a Path>,
    pub format: FrameFormat,
    pub scale: bool,
}

pub fn filter_sequence(req: &FilterRequest, settings: &FilterSettings) -> Result<Report> {
    let rec = crate::yuv::read_yuv420(req.rec, req.format)?;
    let org = req.org.map(|p| crate::yuv::read_yuv420(p, req.format)).transpose()?;
    let enc = encode_frames(&rec, org.as_deref(), req.scale, settings)?;
    crate::yuv::write_yuv420(&enc.frames, req.out)?;
    enc.sidecar.save(req.sidecar)?;
    if let Some(p) = req.report {
        fs::write(p, enc.report.to_text())?;
    }
    Ok(enc.report)
}

/// File-level decoder flow.
pub fn apply_sequence(rec: &Path, sidecar: &Path, out: &Path, format: FrameFormat, settings: &FilterSettings) -> Result<()> {
    let frames = crate::yuv::read_yuv420(rec, format)?;
    let decoded = decode_frames(&frames, &Sidecar::load(sidecar)?, settings)?;
    crate::yuv::write_yuv420(&decoded, out)
}
