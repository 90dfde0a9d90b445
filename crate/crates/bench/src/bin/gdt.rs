use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gdt_bench::config::{load_config, RunConfig};
use gdt_bench::dataset::{format_boxes, load_sequence, read_boxes};
use gdt_bench::metrics::{default_precision_curve, precision_at, success_auc, success_curve, PRECISION_THRESHOLD};
use gdt_bench::ope::{build_network, run_ope};
use gdt_bench::report::emit_report;
use gdt_bench::synth::{synth_corpus, synth_sequence, SynthParams};
use gdt_core::nn::save_weights;
use gdt_core::pretrain::{head_accuracy, pretrain_objectness, PatchCorpus, PretrainConfig};
use gdt_core::tracker::save_state;

#[derive(Parser)]
#[command(name = "gdt", version, about = "Online CNN tracker with a naive Bayes appearance model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track one OTB-style sequence and write 1-based x,y,w,h lines.
    Track {
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the sampler and network seeds of the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Only the Gaussians adapt online.
        #[arg(long)]
        freeze_net: bool,
        /// Ignore configured weights and start from a freshly initialized backbone.
        #[arg(long)]
        no_pretrain: bool,
        #[arg(long)]
        state_out: Option<PathBuf>,
    },
    /// Score a results file against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Render a synthetic sequence.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pixels per frame, `VX,VY`.
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        velocity: Option<(f64, f64)>,
        /// 0-based half-open frame range `A:B` with the target fully covered.
        #[arg(long, value_parser = parse_range)]
        occlude: Option<(usize, usize)>,
        #[arg(long)]
        noise: Option<f64>,
        /// Relative size change per frame.
        #[arg(long, allow_hyphen_values = true)]
        scale_drift: Option<f64>,
    },
    /// Objectness pretraining of the whole backbone on object/ and background/ patches.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Network shape keys are read from this config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
    },
    /// Write a synthetic object/background patch corpus for `pretrain`.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 40)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected VX,VY")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number"));
    Ok((num(a)?, num(b)?))
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or("expected A:B")?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("`{v}` is not a frame index"));
    Ok((num(a)?, num(b)?))
}

fn run_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Track {
            seq,
            config,
            seed,
            out,
            freeze_net,
            no_pretrain,
            state_out,
        } => {
            let mut cfg = run_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            cfg.tracker.freeze_net |= freeze_net;
            let sequence = load_sequence(&seq).with_context(|| format!("loading sequence {}", seq.display()))?;
            let net = build_network(&cfg, no_pretrain)?;
            let run = run_ope(&sequence, &cfg.tracker, net)?;
            fs::write(&out, format_boxes(&run.boxes)).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = state_out {
                save_state(&run.state, &p).with_context(|| format!("writing state {}", p.display()))?;
            }
            let updates = run.frames.iter().filter(|f| f.updated).count();
            eprintln!("tracked {} frames, {updates} online updates", run.boxes.len());
        }
        Command::Eval { results, gt, csv, svg } => {
            let pred = read_boxes(&results)?;
            let truth = read_boxes(&gt)?;
            let p = default_precision_curve(&pred, &truth)?;
            let s = success_curve(&pred, &truth)?;
            emit_report(&p, &s, &csv, svg.as_deref())?;
            println!(
                "precision@{PRECISION_THRESHOLD} {:.3}  success AUC {:.3}",
                precision_at(&p, PRECISION_THRESHOLD).unwrap_or(f64::NAN),
                success_auc(&s)
            );
        }
        Command::Synth {
            out,
            frames,
            seed,
            velocity,
            occlude,
            noise,
            scale_drift,
        } => {
            let d = SynthParams::default();
            let params = SynthParams {
                frames,
                velocity: velocity.unwrap_or(d.velocity),
                occlusion: occlude,
                noise_sigma: noise.unwrap_or(d.noise_sigma),
                scale_drift: scale_drift.unwrap_or(d.scale_drift),
                ..d
            };
            let s = synth_sequence(&params, seed, &out)?;
            eprintln!("wrote {} frames to {}", s.frames.len(), out.display());
        }
        Command::Pretrain {
            corpus,
            iters,
            seed,
            out,
            config,
            lr,
            batch,
        } => {
            let network = run_config(config.as_ref())?.network;
            if network.in_channels != 1 {
                bail!("pretraining reads grayscale patches; in_channels must be 1");
            }
            let patches = PatchCorpus::load(&corpus, network.input_size)?;
            let cfg = PretrainConfig {
                network: gdt_core::NetworkConfig { seed, ..network },
                learning_rate: lr,
                batch_size: batch,
                seed,
                ..PretrainConfig::default()
            };
            let outcome = pretrain_objectness::<f64>(&patches, iters, &cfg)?;
            save_weights(&outcome.network, &out)?;
            eprintln!(
                "pretrained {iters} iterations on {} patches; training accuracy {:.3}",
                patches.len(),
                head_accuracy(&outcome, &patches)?
            );
        }
        Command::SynthCorpus { out, per_class, side, seed } => {
            synth_corpus(&out, per_class, side, seed)?;
            eprintln!("wrote {per_class} patches per class to {}", out.display());
        }
    }
    Ok(())
}
