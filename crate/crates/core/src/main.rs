use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use oavm::compositing::{sfm_compose, synth_sequence, AugmentConfig};
use oavm::config::PipelineConfig;
use oavm::dataset;
use oavm::manifest::Manifest;
use oavm::metrics::MetricsReport;
use oavm::pipeline::{run_sequence, write_outputs};
use oavm::pnm::{self, BitDepth};
use oavm::selftest;

#[derive(Parser)]
#[command(name = "oavm", version, about = "Object-aware video matting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic clip of soft ellipses with alphas and masks.
    Synth {
        #[arg(long)]
        frames: usize,
        /// Frame size as HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 1)]
        objects: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sample depth of frames and alphas.
        #[arg(long, default_value_t = 8)]
        depth: u8,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge a second foreground clip into the background of the first.
    Augment {
        #[arg(long)]
        clip1: PathBuf,
        #[arg(long)]
        clip2: PathBuf,
        /// Manifest whose frames are the background sequence.
        #[arg(long)]
        bg: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        p1: f64,
        #[arg(long, default_value_t = 0.5)]
        p2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict alpha mattes for a clip.
    Infer {
        #[arg(long)]
        manifest: PathBuf,
        /// Coarse foreground mask for the first frame.
        #[arg(long)]
        init_mask: PathBuf,
        /// JSON config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted alphas against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a per-frame CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the oracle and invariant suite.
    Selftest,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

fn depth(bits: u8) -> Result<BitDepth> {
    match bits {
        8 => Ok(BitDepth::Eight),
        16 => Ok(BitDepth::Sixteen),
        _ => bail!("depth must be 8 or 16, got {bits}"),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth {
            frames,
            size: (h, w),
            objects,
            seed,
            depth: bits,
            out,
        } => {
            let clip = synth_sequence(frames, h, w, objects, seed)?;
            let path = dataset::write_clip(&clip, &out, depth(bits)?, Some(seed))?;
            println!("wrote {}", path.display());
        }
        Command::Augment {
            clip1,
            clip2,
            bg,
            p1,
            p2,
            seed,
            out,
        } => {
            let c1 = dataset::load_clip(&Manifest::load(&clip1)?).with_context(|| clip1.display().to_string())?;
            let c2 = dataset::load_clip(&Manifest::load(&clip2)?).with_context(|| clip2.display().to_string())?;
            let background = Manifest::load(&bg)?.load_frames()?;
            let cfg = AugmentConfig { p1, p2, seed };
            let aug = sfm_compose(&c1, &c2, &background, &cfg)?;
            let mut files = dataset::encode_clip(&aug.clip, BitDepth::Eight, Some(seed));
            let mut draw = serde_json::to_string_pretty(&aug.draw)?;
            draw.push('\n');
            files.insert("augment.json".into(), draw.into_bytes());
            dataset::write_files(&files, &out)?;
            println!(
                "wrote {} (injected: {}, single supervision: {})",
                out.join(dataset::MANIFEST).display(),
                aug.draw.injected,
                aug.draw.single_supervision
            );
        }
        Command::Infer {
            manifest,
            init_mask,
            config,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => PipelineConfig::load(p)?,
                None => PipelineConfig::default(),
            };
            cfg.apply_env()?;
            let m = Manifest::load(&manifest)?;
            let mask = pnm::read_image(&init_mask)?;
            let result = run_sequence(&m, &mask, &cfg)?;
            let d = &result.diagnostics;
            if d.padded {
                eprintln!(
                    "warning: frames of {}x{} reflect-padded to {}x{}",
                    d.input_size[0], d.input_size[1], d.padded_size[0], d.padded_size[1]
                );
            }
            write_outputs(&result, &out)?;
            println!("wrote {} frames to {}", result.results.len(), out.display());
            if let Some(r) = &result.metrics {
                println!("{}", summary(r));
            }
        }
        Command::Eval { pred, gt, out, csv } => {
            let p = Manifest::load(&pred)?
                .load_alphas()?
                .with_context(|| format!("{} lists no alphas", pred.display()))?;
            let g = Manifest::load(&gt)?
                .load_alphas()?
                .with_context(|| format!("{} lists no alphas", gt.display()))?;
            let report = MetricsReport::evaluate(&p, &g, true)?;
            fs::write(&out, report.to_json()).with_context(|| out.display().to_string())?;
            if let Some(csv) = csv {
                fs::write(&csv, report.to_csv()).with_context(|| csv.display().to_string())?;
            }
            println!("{}", summary(&report));
        }
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} passed, {failed} failed", results.len() - failed);
            if failed > 0 {
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn summary(r: &MetricsReport) -> String {
    let dt = r.dtssd.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    format!(
        "MAD {:.4}  MSE {:.4}  Grad {:.4}  Conn {:.4}  dtSSD {dt}",
        r.mad, r.mse, r.grad, r.conn
    )
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
