//! Wall-clock benchmarks of the decoders, one diffusion step and the full
//! inference pipeline. Everything runs on the calling thread.

use std::hint::black_box;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssnet_core::conv::{conv_transpose2d, Conv2dParams};
use ssnet_core::igum::igum_labels;
use ssnet_core::instance::diffuse;
use ssnet_core::model::{predict, ModelConfig};
use ssnet_core::net::init_params;
use ssnet_core::{Tape, Tensor};

use crate::error::{Error, Result};

pub const WARMUP: usize = 10;
pub const MIN_REPS: usize = 10;
/// Encoder output width fed to both decoders.
pub const FEATURES: usize = 128;

pub const SCENARIOS: [&str; 4] = ["igum_decoder", "dense_decoder", "diffusion_step", "pipeline"];

pub const CSV_HEADER: [&str; 7] = ["scenario", "channels", "height", "width", "reps", "median_ms", "fps"];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub scenario: String,
    /// Classes `C` and output size `H x W`.
    pub shape: (usize, usize, usize),
    pub reps: usize,
    pub median_ms: f64,
    /// Images per second at batch 1.
    pub fps: f64,
}

impl BenchReport {
    pub fn fields(&self) -> [String; 7] {
        let (c, h, w) = self.shape;
        [
            self.scenario.clone(),
            c.to_string(),
            h.to_string(),
            w.to_string(),
            self.reps.to_string(),
            format!("{:.4}", self.median_ms),
            format!("{:.2}", self.fps),
        ]
    }
}

pub fn write_csv<W: Write>(out: W, reports: &[BenchReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in reports {
        w.write_record(r.fields())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Median wall time of `f` in milliseconds over `reps` runs after
/// [`WARMUP`] untimed ones.
pub fn median_ms(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..WARMUP {
        f()?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[m]
    } else {
        0.5 * (times[m - 1] + times[m])
    })
}

/// Runs `scenario` producing `channels` class maps of `height x width`.
///
/// `igum_decoder` projects 128-channel features at 1/8 resolution to logits
/// and offsets with 1x1 convolutions and produces the full-resolution label
/// map with nearest iGUM.
/// `dense_decoder` upsamples the same features with two transposed
/// convolutions (x2 then x4). `diffusion_step` is one evaluation-mode
/// diffusion step on a full-resolution map, and `pipeline` is the whole desk network
/// forward with `t` diffusion steps and instance extraction.
pub fn bench(scenario: &str, channels: usize, height: usize, width: usize, reps: usize, t: usize) -> Result<BenchReport> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!("bench needs at least {MIN_REPS} repetitions, got {reps}")));
    }
    if channels == 0 {
        return Err(Error::Config("bench needs at least one channel".into()));
    }
    let f = 8;
    if height % f != 0 || width % f != 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!("bench size {height}x{width} must be a positive multiple of {f}")));
    }
    let (h, w) = (height / f, width / f);
    let mut rng = ChaCha8Rng::seed_from_u64(0x6265_6e63);
    let feats = Tensor::rand_normal([1, FEATURES, h, w], 1.0, &mut rng);
    let ms = match scenario {
        "igum_decoder" => {
            let w_sem = Tensor::rand_normal([channels, FEATURES, 1, 1], 0.1, &mut rng);
            let w_off = Tensor::rand_normal([2, FEATURES, 1, 1], 0.1, &mut rng);
            let p = Conv2dParams::default();
            median_ms(reps, || {
                let mut tape = Tape::new();
                let x = tape.constant(feats.clone());
                let (ws, wo) = (tape.constant(w_sem.clone()), tape.constant(w_off.clone()));
                let logits = tape.conv2d(x, ws, None, p)?;
                let raw = tape.conv2d(x, wo, None, p)?;
                black_box(igum_labels(tape.value(logits)?, tape.value(raw)?, f)?);
                Ok(())
            })?
        }
        "dense_decoder" => {
            let w1 = Tensor::rand_normal([FEATURES, channels, 2, 2], 0.1, &mut rng);
            let w2 = Tensor::rand_normal([channels, channels, 4, 4], 0.1, &mut rng);
            median_ms(reps, || {
                let mid = conv_transpose2d(&feats, &w1, None, 2)?;
                black_box(conv_transpose2d(&mid, &w2, None, 4)?);
                Ok(())
            })?
        }
        "diffusion_step" => {
            let offsets = Tensor::rand_uniform([1, 2, height, width], -0.05, 0.05, &mut rng);
            let mode = ModelConfig::desk(channels).diffusion_eval;
            median_ms(reps, || {
                let mut tape = Tape::new();
                let o = tape.constant(offsets.clone());
                let y = diffuse(&mut tape, o, 1, mode)?;
                black_box(tape.value(y)?);
                Ok(())
            })?
        }
        "pipeline" => {
            let cfg = ModelConfig::desk(channels);
            let params = init_params(&cfg.encoder, 0)?;
            let image = Tensor::rand_uniform([1, 3, height, width], 0.0, 1.0, &mut rng);
            median_ms(reps, || {
                black_box(predict(&params, &cfg, &image, t)?);
                Ok(())
            })?
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown bench scenario {scenario:?}; known: {}",
                SCENARIOS.join(", ")
            )))
        }
    };
    Ok(BenchReport {
        scenario: scenario.into(),
        shape: (channels, height, width),
        reps,
        median_ms: ms,
        fps: 1e3 / ms,
    })
}
