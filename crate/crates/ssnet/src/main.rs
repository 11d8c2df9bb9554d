use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use ssnet::bench::{self, bench};
use ssnet::checkpoint::Checkpoint;
use ssnet::config::RunConfig;
use ssnet::dataset::{read_dataset, write_dataset, Meta};
use ssnet::gradcheck::{self, GradReport};
use ssnet::train::{self, evaluate_checkpoint, split_validation};
use ssnet_core::synth::{synth_generate, SynthConfig, NUM_CLASSES, THING_CLASSES};

#[derive(Parser)]
#[command(name = "ssnet", version, about = "Guided upsampling segmentation: data, training, evaluation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// `HxW` or a single side length.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        max_shapes: usize,
        /// Shape side range `MIN,MAX` in pixels.
        #[arg(long, value_parser = parse_pair)]
        sides: Option<(usize, usize)>,
    },
    /// Train from scratch; per-epoch validation metrics go to stdout as CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Best-mIoU checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Separate validation set (default: the tail of `--data`).
        #[arg(long)]
        val: Option<PathBuf>,
        /// Write the metrics CSV here instead of stdout.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, one CSV row per diffusion step count.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Diffusion steps; repeat or comma-separate for a sweep.
        #[arg(long, value_delimiter = ',', required = true)]
        t: Vec<usize>,
        /// Fold batch norms into the convolutions first.
        #[arg(long)]
        fold_bn: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        /// One of the known operators (default: all).
        #[arg(long)]
        op: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time a decoder, a diffusion step or the whole pipeline.
    Bench {
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value_t = NUM_CLASSES)]
        channels: usize,
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 50)]
        reps: usize,
        /// Diffusion steps for the pipeline scenario.
        #[arg(long, default_value_t = 30)]
        t: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).unwrap_or((s, s));
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad size {s:?}: {e}"));
    Ok((p(h)?, p(w)?))
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected MIN,MAX, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("bad value {v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn output(path: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth {
            seed,
            count,
            size: (h, w),
            out,
            max_shapes,
            sides,
        } => {
            let mut cfg = SynthConfig::new(h, w, max_shapes)?;
            if let Some((lo, hi)) = sides {
                cfg = cfg.with_sides(lo, hi)?;
            }
            let samples = synth_generate(seed, count, cfg)?;
            let meta = Meta {
                count,
                classes: NUM_CLASSES,
                thing_classes: THING_CLASSES.to_vec(),
                seed,
            };
            write_dataset(&out, &samples, &meta)?;
            eprintln!("wrote {count} samples to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            val,
            metrics,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (samples, meta) = read_dataset(&data)?;
            let val_set = match &val {
                Some(dir) => Some(read_dataset(dir)?),
                None => None,
            };
            for m in std::iter::once(&meta).chain(val_set.as_ref().map(|v| &v.1)) {
                if m.classes != cfg.model.encoder.classes {
                    bail!("dataset has {} classes, config {}", m.classes, cfg.model.encoder.classes);
                }
            }
            let (train_set, val_set) = match &val_set {
                Some((v, _)) => (&samples[..], &v[..]),
                None => split_validation(&samples, cfg.val_fraction)?,
            };
            eprintln!("training on {} samples, validating on {}", train_set.len(), val_set.len());
            let outcome = train::train(&cfg, train_set, val_set, |st, row| {
                eprintln!(
                    "epoch {:>3}  lr {:.3e}  loss {:.4} (sem {:.4}, inst {:.4})  val miou {:.4}  ap {:.4}",
                    st.epoch, st.lr, st.loss, st.semantic_loss, st.instance_loss, row.report.semantic.miou, row.report.instance.ap
                );
            })?;
            outcome.best.save(&out)?;
            eprintln!("best val miou {:.4} at epoch {}; wrote {}", outcome.best_miou, outcome.best.epoch, out.display());
            train::write_csv(output(metrics.as_deref())?, &outcome.rows)?;
        }
        Command::Eval {
            ckpt,
            data,
            t,
            fold_bn,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let (samples, meta) = read_dataset(&data)?;
            if meta.classes != ck.config.model.encoder.classes {
                bail!("dataset has {} classes, checkpoint {}", meta.classes, ck.config.model.encoder.classes);
            }
            let rows = evaluate_checkpoint(&ck, &samples, &t, fold_bn)?;
            train::write_csv(output(out.as_deref())?, &rows)?;
        }
        Command::Gradcheck { op, out } => {
            let reports = match op {
                Some(op) => gradcheck::run_op(&op)?,
                None => gradcheck::run_all()?,
            };
            let mut w = csv::Writer::from_writer(output(out.as_deref())?);
            w.write_record(["op", "max_rel_err", "probes", "pass"])?;
            for r in &reports {
                w.write_record([
                    r.name.clone(),
                    format!("{:.3e}", r.max_rel_err),
                    r.probes.to_string(),
                    r.passed().to_string(),
                ])?;
            }
            w.flush()?;
            return Ok(reports.iter().all(GradReport::passed));
        }
        Command::Bench {
            scenario,
            channels,
            size: (h, w),
            reps,
            t,
            out,
        } => {
            let report = bench(&scenario, channels, h, w, reps, t)?;
            bench::write_csv(output(out.as_deref())?, &[report])?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
