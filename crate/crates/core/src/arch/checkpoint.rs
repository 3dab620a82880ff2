use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{MdanConfig, Mdan, Parameters};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MDAN1";

/// Prefix reserved for optimizer state stored alongside the weights.
const EXTRA_PREFIX: &str = "opt.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub config: MdanConfig,
    /// QP band the model was trained for; 0 means "any band".
    pub qp_band: u32,
    pub seed: u64,
}

/// A model plus optional named tensors under the `opt.` prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Mdan,
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: Mdan, qp_band: u32, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config: model.config,
                qp_band,
                seed,
            },
            model,
            extra: Vec::new(),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("checkpoint", format!("{what} {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_u32(out, name.len(), "name length")?;
    out.extend_from_slice(name.as_bytes());
    for d in t.shape() {
        put_u32(out, d, "dimension")?;
    }
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(())
}

/// Serialises a checkpoint. Values are stored as f32, so only tensors already
/// representable in single precision survive a round trip unchanged.
pub fn write_checkpoint(ckpt: &Checkpoint, w: &mut impl Write) -> Result<()> {
    let c = &ckpt.header.config;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (v, what) in [
        (c.channels, "channels"),
        (c.mdsa_blocks, "mdsa_blocks"),
        (c.p, "p"),
        (c.q, "q"),
        (c.in_planes, "in_planes"),
        (ckpt.header.qp_band as usize, "qp_band"),
    ] {
        put_u32(&mut out, v, what)?;
    }
    out.extend_from_slice(&ckpt.header.seed.to_le_bytes());
    let mut result = Ok(());
    ckpt.model.visit("", &mut |name, t| {
        if result.is_ok() {
            result = put_tensor(&mut out, &name, t);
        }
    });
    result?;
    for (name, t) in &ckpt.extra {
        if !name.starts_with(EXTRA_PREFIX) {
            return Err(Error::format("checkpoint", format!("extra tensor '{name}' lacks the '{EXTRA_PREFIX}' prefix")));
        }
        put_tensor(&mut out, name, t)?;
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                "checkpoint",
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(5, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic, expected MDAN1"));
    }
    let config = MdanConfig {
        channels: cur.u32("channels")?,
        mdsa_blocks: cur.u32("mdsa_blocks")?,
        p: cur.u32("p")?,
        q: cur.u32("q")?,
        in_planes: cur.u32("in_planes")?,
    };
    let qp_band = cur.u32("qp_band")? as u32;
    let s = cur.take(8, "seed")?;
    let seed = u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let mut model = Mdan::zeros(config)?;

    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut extra = Vec::new();
    while !cur.done() {
        let len = cur.u32("name length")?;
        let name = std::str::from_utf8(cur.take(len, "name")?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = cur.u32("dimension")?;
        }
        let count = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
        let count = count
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::format("checkpoint", format!("tensor '{name}' is too large")))?;
        let data = cur
            .take(count, &name)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        let t = Tensor::from_vec(shape, data).map_err(|e| Error::format("checkpoint", format!("tensor '{name}': {e}")))?;
        if name.starts_with(EXTRA_PREFIX) {
            extra.push((name, t));
        } else if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::format("checkpoint", format!("duplicate tensor '{name}'")));
        }
    }

    let mut err = None;
    model.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.remove(&name) {
            None => err = Some(format!("missing tensor '{name}'")),
            Some(v) if v.shape() != t.shape() => {
                err = Some(format!(
                    "tensor '{name}' has shape {:?}, config requires {:?}",
                    v.shape(),
                    t.shape()
                ))
            }
            Some(v) => *t = v,
        }
    });
    if let Some(e) = err {
        return Err(Error::format("checkpoint", e));
    }
    if let Some(name) = tensors.keys().min() {
        return Err(Error::format("checkpoint", format!("unknown tensor '{name}'")));
    }
    Ok(Checkpoint {
        header: CheckpointHeader { config, qp_band, seed },
        model,
        extra,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
