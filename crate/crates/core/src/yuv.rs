//! Planar YUV 4:2:0 frames and raw file I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One integer sample plane in raster order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl Plane {
    pub fn new(width: usize, height: usize) -> Self {
        Plane::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u16) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Invalid(format!(
                "plane {width}×{height} needs {} samples, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Plane { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u16) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u16) {
        self.data[y * self.width + x] = v;
    }

    pub fn max_sample(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub(crate) fn require_same_dims(&self, other: &Plane, op: &'static str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(
                op,
                format!(
                    "plane dimensions differ: {}×{} vs {}×{}",
                    self.width, self.height, other.width, other.height
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlaneId {
    Y,
    U,
    V,
}

impl PlaneId {
    pub const ALL: [PlaneId; 3] = [PlaneId::Y, PlaneId::U, PlaneId::V];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        PlaneId::ALL.get(i as usize).copied()
    }

    pub fn is_luma(self) -> bool {
        self == PlaneId::Y
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneId::Y => "Y",
            PlaneId::U => "U",
            PlaneId::V => "V",
        }
    }
}

impl std::fmt::Display for PlaneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Frame size and sample depth shared by every frame of a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameFormat {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u32,
}

impl FrameFormat {
    pub fn new(width: usize, height: usize, bit_depth: u32) -> Result<Self> {
        if width == 0 || height == 0 || !width.is_multiple_of(2) || !height.is_multiple_of(2) {
            return Err(Error::Invalid(format!(
                "frame size {width}×{height} must be non-zero and even in both dimensions"
            )));
        }
        if bit_depth != 8 && bit_depth != 10 {
            return Err(Error::Invalid(format!("bit depth must be 8 or 10, got {bit_depth}")));
        }
        Ok(FrameFormat {
            width,
            height,
            bit_depth,
        })
    }

    pub fn max_value(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn plane_dims(&self, id: PlaneId) -> (usize, usize) {
        if id.is_luma() {
            (self.width, self.height)
        } else {
            (self.width.div_ceil(2), self.height.div_ceil(2))
        }
    }

    pub fn samples_per_frame(&self) -> usize {
        let (cw, ch) = self.plane_dims(PlaneId::U);
        self.width * self.height + 2 * cw * ch
    }

    pub fn bytes_per_sample(&self) -> usize {
        if self.bit_depth > 8 {
            2
        } else {
            1
        }
    }

    pub fn frame_bytes(&self) -> usize {
        self.samples_per_frame() * self.bytes_per_sample()
    }
}

/// Parses `WxH` as used on the command line.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Invalid(format!("size '{s}' is not of the form WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanarFrame {
    pub format: FrameFormat,
    pub y: Plane,
    pub u: Plane,
    pub v: Plane,
}

impl PlanarFrame {
    pub fn blank(format: FrameFormat) -> Self {
        let (cw, ch) = format.plane_dims(PlaneId::U);
        PlanarFrame {
            format,
            y: Plane::new(format.width, format.height),
            u: Plane::new(cw, ch),
            v: Plane::new(cw, ch),
        }
    }

    /// Checks plane geometry and sample range.
    pub fn from_planes(format: FrameFormat, y: Plane, u: Plane, v: Plane) -> Result<Self> {
        let f = PlanarFrame { format, y, u, v };
        for id in PlaneId::ALL {
            let p = f.plane(id);
            if p.dims() != format.plane_dims(id) {
                return Err(Error::Invalid(format!(
                    "{id} plane is {}×{}, expected {:?}",
                    p.width(),
                    p.height(),
                    format.plane_dims(id)
                )));
            }
            if p.max_sample() > format.max_value() {
                return Err(Error::Invalid(format!(
                    "{id} plane sample {} exceeds {}-bit range",
                    p.max_sample(),
                    format.bit_depth
                )));
            }
        }
        Ok(f)
    }

    pub fn plane(&self, id: PlaneId) -> &Plane {
        match id {
            PlaneId::Y => &self.y,
            PlaneId::U => &self.u,
            PlaneId::V => &self.v,
        }
    }

    pub fn plane_mut(&mut self, id: PlaneId) -> &mut Plane {
        match id {
            PlaneId::Y => &mut self.y,
            PlaneId::U => &mut self.u,
            PlaneId::V => &mut self.v,
        }
    }
}

/// Decodes a raw 4:2:0 byte stream into frames.
pub fn decode_yuv420(bytes: &[u8], format: FrameFormat) -> Result<Vec<PlanarFrame>> {
    let fb = format.frame_bytes();
    if !bytes.len().is_multiple_of(fb) {
        return Err(Error::Invalid(format!(
            "input of {} bytes is not a whole number of {}×{} {}-bit frames ({fb} bytes each; {} frame(s) and {} byte(s) left over)",
            bytes.len(),
            format.width,
            format.height,
            format.bit_depth,
            bytes.len() / fb,
            bytes.len() % fb
        )));
    }
    let bps = format.bytes_per_sample();
    let max = format.max_value();
    let mut frames = Vec::with_capacity(bytes.len() / fb);
    for (index, chunk) in bytes.chunks_exact(fb).enumerate() {
        let mut frame = PlanarFrame::blank(format);
        let mut offset = 0;
        for id in PlaneId::ALL {
            let plane = frame.plane_mut(id);
            let n = plane.data().len();
            let raw = &chunk[offset..offset + n * bps];
            offset += n * bps;
            for (dst, src) in plane.data_mut().iter_mut().zip(raw.chunks_exact(bps)) {
                *dst = if bps == 1 {
                    src[0] as u16
                } else {
                    u16::from_le_bytes([src[0], src[1]])
                };
            }
            if let Some(pos) = plane.data().iter().position(|v| *v > max) {
                return Err(Error::Invalid(format!(
                    "frame {index}: {id} sample {} at offset {pos} exceeds {}-bit maximum {max}",
                    plane.data()[pos],
                    format.bit_depth
                )));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn encode_yuv420(frames: &[PlanarFrame]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (index, frame) in frames.iter().enumerate() {
        if frames[0].format != frame.format {
            return Err(Error::Invalid(format!("frame {index}: format differs from frame 0")));
        }
        let max = frame.format.max_value();
        for id in PlaneId::ALL {
            for &v in frame.plane(id).data() {
                if v > max {
                    return Err(Error::Invalid(format!(
                        "frame {index}: {id} sample {v} exceeds {}-bit maximum",
                        frame.format.bit_depth
                    )));
                }
                if frame.format.bytes_per_sample() == 1 {
                    out.push(v as u8);
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn read_yuv420(path: &Path, format: FrameFormat) -> Result<Vec<PlanarFrame>> {
    let bytes = fs::read(path)?;
    decode_yuv420(&bytes, format).map_err(|e| match e {
        Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
        e => e,
    })
}

pub fn write_yuv420(frames: &[PlanarFrame], path: &Path) -> Result<()> {
    fs::write(path, encode_yuv420(frames)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frames(format: FrameFormat, count: usize, seed: u64) -> Vec<PlanarFrame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut f = PlanarFrame::blank(format);
                for id in PlaneId::ALL {
                    f.plane_mut(id)
                        .data_mut()
                        .iter_mut()
                        .for_each(|v| *v = rng.gen_range(0..=format.max_value()));
                }
                f
            })
            .collect()
    }

    #[test]
    fn eight_bit_round_trip() {
        let fmt = FrameFormat::new(64, 48, 8).unwrap();
        let frames = random_frames(fmt, 3, 1);
        let bytes = encode_yuv420(&frames).unwrap();
        assert_eq!(bytes.len(), 3 * 64 * 48 * 3 / 2);
        assert_eq!(decode_yuv420(&bytes, fmt).unwrap(), frames);
    }

    #[test]
    fn ten_bit_round_trip_and_boundary() {
        let fmt = FrameFormat::new(8, 4, 10).unwrap();
        let mut frames = random_frames(fmt, 2, 2);
        frames[1].y.set(0, 0, 1023);
        let bytes = encode_yuv420(&frames).unwrap();
        assert_eq!(decode_yuv420(&bytes, fmt).unwrap(), frames);

        let mut bad = bytes.clone();
        let off = fmt.frame_bytes();
        bad[off..off + 2].copy_from_slice(&1024u16.to_le_bytes());
        let err = decode_yuv420(&bad, fmt).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn partial_frame_rejected() {
        let fmt = FrameFormat::new(16, 16, 8).unwrap();
        let bytes = vec![0u8; fmt.frame_bytes() * 3 / 2];
        let err = decode_yuv420(&bytes, fmt).unwrap_err().to_string();
        assert!(err.contains(&fmt.frame_bytes().to_string()), "{err}");
    }

    #[test]
    fn format_validation() {
        assert!(FrameFormat::new(15, 16, 8).is_err());
        assert!(FrameFormat::new(16, 16, 12).is_err());
        let fmt = FrameFormat::new(176, 144, 10).unwrap();
        assert_eq!(fmt.plane_dims(PlaneId::V), (88, 72));
        assert_eq!(fmt.frame_bytes(), 176 * 144 * 3);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let fmt = FrameFormat::new(32, 16, 10).unwrap();
        let frames = random_frames(fmt, 2, 3);
        let p = dir.path().join("a.yuv");
        write_yuv420(&frames, &p).unwrap();
        assert_eq!(read_yuv420(&p, fmt).unwrap(), frames);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("176x144").unwrap(), (176, 144));
        assert!(parse_size("176").is_err());
    }
}
