//! Command-line front end.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::arch::{load_checkpoint, param_count, save_checkpoint, MdanConfig};
use crate::codec_sim::simulate_compression;
use crate::error::{Error, Result};
use crate::metrics::{read_rd_csv, BdSummary, PlaneCurves, RdCurve};
use crate::pipeline::{apply_sequence, filter_sequence, FilterRequest, FilterSettings, PlaneClass, QpBandRegistry, TilingPlan, QP_BANDS};
use crate::train::{gradient_check, train, TrainConfig, TrainData};
use crate::yuv::{parse_size, read_yuv420, write_yuv420, FrameFormat};

#[derive(Debug, Parser)]
#[command(name = "mdan", version, about = "Multi-density attention loop filter with on-line scaling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate codec distortion on a YUV 4:2:0 sequence.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        qp: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a reconstructed/original sequence pair.
    Train {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long)]
        org: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        qp_band: u32,
        /// TOML training configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train on chroma planes instead of luma.
        #[arg(long)]
        chroma: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write every step's loss as `step,loss` lines.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Filter a reconstruction, optionally fitting scaling factors.
    Filter {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long)]
        org: Option<PathBuf>,
        /// Fit per-plane scaling factors against `--org`.
        #[arg(long, requires = "org")]
        scale: bool,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        qp: u32,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decoder side: reproduce `filter` output from the sidecar.
    Apply {
        #[arg(long)]
        rec: PathBuf,
        #[arg(long)]
        sidecar: PathBuf,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        qp: u32,
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// BD-rate and BD-PSNR of a test RD table against an anchor.
    Eval {
        #[arg(long)]
        anchor: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Compare analytic and numerical gradients of a reduced model.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Describe a checkpoint and verify its fusion parameter count.
    Info {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct FormatArgs {
    /// Luma size as `WxH`.
    #[arg(long)]
    size: String,
    #[arg(long, default_value_t = 8)]
    depth: u32,
}

impl FormatArgs {
    fn format(&self) -> Result<FrameFormat> {
        let (w, h) = parse_size(&self.size)?;
        FrameFormat::new(w, h, self.depth)
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model registry file, or a single checkpoint used for every band.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value_t = TilingPlan::default().tile_size)]
    tile: usize,
    #[arg(long, default_value_t = TilingPlan::default().overlap)]
    overlap: usize,
}

impl ModelArgs {
    fn load(&self) -> Result<(QpBandRegistry, TilingPlan)> {
        Ok((QpBandRegistry::load(&self.models)?, TilingPlan::new(self.tile, self.overlap)?))
    }
}

/// Fusion weights one MDSA block should hold: the squeeze, two excitations
/// and the output mix.
pub fn expected_fusion_weights(config: &MdanConfig) -> usize {
    let (c, r) = (config.channels, config.reduction());
    3 * c * r + c * c
}

/// Runs one command, writing human-readable results to `out`.
pub fn run(cli: Cli, out: &mut impl std::io::Write) -> Result<()> {
    match cli.command {
        Command::Degrade { input, format, qp, out: dst } => {
            let frames = read_yuv420(&input, format.format()?)?;
            let degraded = frames.iter().map(|f| simulate_compression(f, qp)).collect::<Result<Vec<_>>>()?;
            write_yuv420(&degraded, &dst)?;
            writeln!(out, "degraded {} frames at qp {qp}", degraded.len())?;
        }
        Command::Train { rec, org, format, qp_band, config, out: dst, chroma, resume, loss_log } => {
            if !QP_BANDS.contains(&qp_band) {
                return Err(Error::Invalid(format!("QP band {qp_band} is not one of {QP_BANDS:?}")));
            }
            let mut cfg = match config {
                Some(p) => TrainConfig::from_toml(&fs::read_to_string(&p)?)?,
                None => TrainConfig::default(),
            };
            cfg.qp_band = qp_band;
            let fmt = format.format()?;
            let class = if chroma { PlaneClass::Chroma } else { PlaneClass::Luma };
            let data = TrainData::from_frames(&read_yuv420(&rec, fmt)?, &read_yuv420(&org, fmt)?, class)?;
            let resume = resume.map(|p| load_checkpoint(&p)).transpose()?;
            let every = cfg.log_every.max(1);
            let outcome = train(&cfg, &data, resume, |step, loss| {
                if step % every == 0 || step == cfg.steps {
                    let _ = writeln!(out, "step {step} loss {loss:.6e}");
                }
            })?;
            save_checkpoint(&outcome.checkpoint, &dst)?;
            if let Some(p) = loss_log {
                let text: String = outcome.losses.iter().map(|(s, l)| format!("{s},{l:e}\n")).collect();
                fs::write(p, text)?;
            }
            writeln!(out, "wrote {}", dst.display())?;
        }
        Command::Filter { rec, org, scale, format, qp, models, out: dst, sidecar, report } => {
            let (registry, tiling) = models.load()?;
            let settings = FilterSettings { qp, registry: &registry, tiling };
            let req = FilterRequest {
                rec: &rec,
                org: org.as_deref(),
                out: &dst,
                sidecar: &sidecar,
                report: report.as_deref(),
                format: format.format()?,
                scale,
            };
            let rep = filter_sequence(&req, &settings)?;
            write!(out, "{}", rep.to_text())?;
        }
        Command::Apply { rec, sidecar, format, qp, models, out: dst } => {
            let (registry, tiling) = models.load()?;
            let settings = FilterSettings { qp, registry: &registry, tiling };
            apply_sequence(&rec, &sidecar, &dst, format.format()?, &settings)?;
            writeln!(out, "wrote {}", dst.display())?;
        }
        Command::Eval { anchor, test } => {
            let a = PlaneCurves::from_rows(&read_rd_csv(&anchor)?)?;
            let t = PlaneCurves::from_rows(&read_rd_csv(&test)?)?;
            for (name, curve) in [("anchor", &a), ("test", &t)] {
                for (plane, c) in [("Y", &curve.y), ("U", &curve.u), ("V", &curve.v)] {
                    warn_violations(name, plane, c);
                }
            }
            let s = BdSummary::compute(&a, &t)?;
            writeln!(out, "plane  bd_rate(%)  bd_psnr(dB)")?;
            for (i, plane) in ["Y", "U", "V"].iter().enumerate() {
                writeln!(out, "{plane:<5} {:>11.4} {:>12.4}", s.rate[i], s.psnr[i])?;
            }
            writeln!(out, "{:<5} {:>11.4} {:>12.4}", "YUV", s.weighted_rate(), s.weighted_psnr())?;
        }
        Command::Gradcheck { channels, seed, tolerance } => {
            let r = gradient_check(MdanConfig::new(channels, 1), seed, tolerance)?;
            writeln!(out, "checked {} parameters", r.checked)?;
            writeln!(
                out,
                "max relative error {:.3e} at {} (analytic {:.6e}, numeric {:.6e})",
                r.max_rel_error, r.worst_param, r.worst_analytic, r.worst_numeric
            )?;
            if !r.passed() {
                return Err(Error::Numerical(format!(
                    "gradient mismatch {:.3e} exceeds tolerance {tolerance:e}",
                    r.max_rel_error
                )));
            }
            writeln!(out, "ok")?;
        }
        Command::Info { ckpt } => {
            let ck = load_checkpoint(&ckpt)?;
            let cfg = ck.header.config;
            writeln!(
                out,
                "channels {} mdsa_blocks {} p {} q {} qp_band {} seed {}",
                cfg.channels, cfg.mdsa_blocks, cfg.p, cfg.q, ck.header.qp_band, ck.header.seed
            )?;
            let counts = param_count(&ck.model);
            for g in &counts.groups {
                writeln!(out, "{:<20} weights {:>8} biases {:>6}", g.name, g.weights, g.biases)?;
            }
            writeln!(
                out,
                "total {} ({} weights, {} biases)",
                counts.total(),
                counts.total_weights(),
                counts.total_biases()
            )?;
            let expected = expected_fusion_weights(&cfg);
            if let Some((i, n)) = counts.fusion_weights().into_iter().enumerate().find(|&(_, n)| n != expected) {
                return Err(Error::Invalid(format!("block {i} fusion holds {n} weights, expected {expected}")));
            }
            writeln!(out, "fusion weights per block {expected} ok")?;
            if !ck.extra.is_empty() {
                writeln!(out, "optimiser state tensors {}", ck.extra.len())?;
            }
        }
    }
    Ok(())
}

fn warn_violations(name: &str, plane: &str, curve: &RdCurve) {
    for (a, b) in curve.psnr_violations() {
        eprintln!(
            "warning: {name} {plane} PSNR falls from {} to {} as rate rises from {} to {}",
            a.psnr, b.psnr, a.rate, b.rate
        );
    }
}
