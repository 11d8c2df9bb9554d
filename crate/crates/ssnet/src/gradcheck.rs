//! Finite-difference checks of every differentiable operator and the full
//! training loss.
//!
//! Inputs are drawn so that no probe lands within `EPSILON` of a kink:
//! bilinear sample positions keep a fractional part of at least 0.05 px,
//! and distances in the instance losses stay away from zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssnet_core::gradcheck::grad_check_at;
use ssnet_core::igum::upsample_offsets;
use ssnet_core::instance::diffuse;
use ssnet_core::model::{training_loss, ModelConfig};
use ssnet_core::net::{init_block, init_params, lightweight_nonbt1d, Binder, LightweightNonBt1DConfig, ParamStore, StageConfig};
use ssnet_core::sampler::{bound_offsets, guided_sample_bilinear, SampleGrid, SampleMode};
use ssnet_core::synth::{make_batch, synth_generate, SynthConfig, NUM_CLASSES};
use ssnet_core::tape::InstanceLossKind;
use ssnet_core::{Mode, Tape, Tensor, Var};

use crate::error::{Error, Result};

pub const EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 9] = [
    "guided_sample_bilinear",
    "upsample_offsets",
    "bound_offsets",
    "diffuse",
    "instance_loss_l2",
    "instance_loss_l1",
    "instance_loss_smoothl1",
    "lightweight_nonbt1d",
    "full_network",
];

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Operator, with the differentiated argument after a colon.
    pub name: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn check<F>(name: &str, f: F, x: &Tensor, stride: usize) -> Result<GradReport>
where
    F: Fn(&mut Tape, Var) -> ssnet_core::Result<Var>,
{
    let idx: Vec<usize> = (0..x.len()).step_by(stride).collect();
    Ok(GradReport {
        name: name.into(),
        max_rel_err: grad_check_at(f, x, EPSILON, &idx)?,
        probes: idx.len(),
    })
}

/// `sum(weights * y)`, so every output element contributes differently.
fn weighted_sum(t: &mut Tape, y: Var, weights: &Tensor) -> ssnet_core::Result<Var> {
    let w = t.constant(weights.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Offsets in normalized units worth `lo..hi` pixels, with random sign.
fn pixel_offsets(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let [_, _, h, w] = shape;
    let mut t = Tensor::zeros(shape);
    let per = [2.0 / (w - 1) as f64, 2.0 / (h - 1) as f64];
    let hw = h * w;
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let c = (i / hw) % 2;
        let mag = rng.random_range(lo..hi);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        *v = sign * mag * per[c];
    }
    t
}

fn sampler_cases(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let input = Tensor::rand_normal([2, 3, 6, 6], 1.0, rng);
    let grid = SampleGrid::regular(6, 6, 2)?;
    // Regular positions have fractional parts 0.25 / 0.75, so shifts below
    // 0.2 px keep them 0.05 px from the next integer.
    let offsets = pixel_offsets([2, 2, 12, 12], 0.0, 0.2, rng);
    let weights = Tensor::rand_normal([2, 3, 12, 12], 1.0, rng);
    let wrt_input = |t: &mut Tape, v: Var| {
        let o = t.constant(offsets.clone());
        let y = guided_sample_bilinear(t, v, &grid, Some(o))?;
        weighted_sum(t, y, &weights)
    };
    let wrt_offsets = |t: &mut Tape, v: Var| {
        let x = t.constant(input.clone());
        let y = guided_sample_bilinear(t, x, &grid, Some(v))?;
        weighted_sum(t, y, &weights)
    };
    Ok(vec![
        check("guided_sample_bilinear:input", wrt_input, &input, 3)?,
        check("guided_sample_bilinear:offsets", wrt_offsets, &offsets, 1)?,
    ])
}

fn upsample_case(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let low = Tensor::rand_uniform([1, 2, 4, 4], -0.5, 0.5, rng);
    let weights = Tensor::rand_normal([1, 2, 16, 16], 1.0, rng);
    let f = |t: &mut Tape, v: Var| {
        let y = upsample_offsets(t, v, 4)?;
        weighted_sum(t, y, &weights)
    };
    Ok(vec![check("upsample_offsets", f, &low, 1)?])
}

fn bound_case(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let raw = Tensor::rand_normal([2, 2, 5, 5], 1.0, rng);
    let weights = Tensor::rand_normal([2, 2, 5, 5], 1.0, rng);
    let f = |t: &mut Tape, v: Var| {
        let y = bound_offsets(t, v)?;
        weighted_sum(t, y, &weights)
    };
    Ok(vec![check("bound_offsets", f, &raw, 1)?])
}

fn diffuse_case(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    // Every step samples at pixel + offset, so 0.15..0.45 px shifts stay
    // off the integer lattice.
    let offsets = pixel_offsets([1, 2, 6, 6], 0.15, 0.45, rng);
    let weights = Tensor::rand_normal([1, 2, 6, 6], 1.0, rng);
    let f = |t: &mut Tape, v: Var| {
        let y = diffuse(t, v, 2, SampleMode::Bilinear)?;
        weighted_sum(t, y, &weights)
    };
    Ok(vec![check("diffuse:t=2", f, &offsets, 1)?])
}

fn loss_case(kind: InstanceLossKind, name: &str, rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let pred = Tensor::rand_uniform([2, 2, 5, 5], -1.5, 1.5, rng);
    let target = Tensor::rand_uniform([2, 2, 5, 5], -1.5, 1.5, rng);
    let mut mask = Tensor::zeros([2, 1, 5, 5]);
    for v in mask.data_mut() {
        *v = if rng.random_bool(0.7) { 1.0 } else { 0.0 };
    }
    // Keep |pred - target| per coordinate clear of 0 (L1, L2) and of the
    // SmoothL1 knee.
    let mut pred = pred;
    for (p, &q) in pred.data_mut().iter_mut().zip(target.data()) {
        let d = *p - q;
        if d.abs() < 0.05 || (d.abs() - 1.0).abs() < 0.05 {
            *p += 0.2;
        }
    }
    let f = |t: &mut Tape, v: Var| t.instance_loss(v, &target, &mask, kind);
    Ok(vec![check(name, f, &pred, 1)?])
}

fn block_case(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let cfg = LightweightNonBt1DConfig {
        use_bias: true,
        ..LightweightNonBt1DConfig::new(3, 2, 0.2)
    };
    let mut store = ParamStore::new();
    init_block(&mut store, "b", &cfg, rng);
    let x = Tensor::rand_normal([2, 3, 5, 5], 1.0, rng);
    let f = |t: &mut Tape, v: Var| {
        let mut s = store.clone();
        let mut bind = Binder::new(&mut s, false);
        let y = lightweight_nonbt1d(t, &mut bind, v, "b", &cfg, Mode::Train, 5)?;
        let y = t.mul(y, y)?;
        t.mean(y)
    };
    let wrt_w = |t: &mut Tape, v: Var| {
        let mut s = store.clone();
        let mut bind = Binder::new(&mut s, false);
        bind.substitute("b.c1.w", v)?;
        let xv = t.constant(x.clone());
        let y = lightweight_nonbt1d(t, &mut bind, xv, "b", &cfg, Mode::Train, 5)?;
        let y = t.mul(y, y)?;
        t.mean(y)
    };
    Ok(vec![
        check("lightweight_nonbt1d:input", f, &x, 3)?,
        check("lightweight_nonbt1d:c1.w", wrt_w, store.get("b.c1.w")?, 1)?,
    ])
}

/// A two-stage encoder small enough for finite differences.
pub fn tiny_model() -> ModelConfig {
    let mut m = ModelConfig::desk(NUM_CLASSES);
    m.encoder.stages = vec![
        StageConfig {
            channels: 4,
            dilations: vec![],
        },
        StageConfig {
            channels: 6,
            dilations: vec![1],
        },
    ];
    m.t_train = 3;
    m.area_threshold = 4;
    m
}

fn network_case(rng: &mut ChaCha8Rng) -> Result<Vec<GradReport>> {
    let cfg = tiny_model();
    let samples = synth_generate(0, 2, SynthConfig::new(32, 32, 2)?)?;
    let batch = make_batch(&samples, &[0, 1])?;
    let mut params = init_params(&cfg.encoder, 1)?;
    // Small offset heads plus a uniform 0.3 px instance shift keep every
    // bilinear sample position off the pixel lattice.
    for e in params.entries_mut() {
        if e.name.starts_with("head.") && e.name.ends_with(".w") {
            e.value = Tensor::rand_normal(e.value.shape(), 5e-4, rng);
        }
    }
    let shift = (0.3 / cfg.instance_step).atanh();
    *params.get_mut("head.ioff.b")? = Tensor::vector(&[shift, shift]);
    let mut out = Vec::new();
    for name in ["head.ioff.w", "head.soff.w", "head.sem.w", "s1.m0.c2.w"] {
        let f = |t: &mut Tape, v: Var| {
            let mut s = params.clone();
            let mut bind = Binder::new(&mut s, false);
            bind.substitute(name, v)?;
            Ok(training_loss(t, &mut bind, &cfg, &batch, 3)?.total)
        };
        out.push(check(&format!("full_network:{name}"), f, params.get(name)?, 7)?);
    }
    Ok(out)
}

/// Runs the checks of one entry of [`OPS`].
pub fn run_op(op: &str) -> Result<Vec<GradReport>> {
    let pos = OPS
        .iter()
        .position(|&o| o == op)
        .ok_or_else(|| Error::Config(format!("unknown gradcheck op {op:?}; known: {}", OPS.join(", "))))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164 + pos as u64);
    match op {
        "guided_sample_bilinear" => sampler_cases(&mut rng),
        "upsample_offsets" => upsample_case(&mut rng),
        "bound_offsets" => bound_case(&mut rng),
        "diffuse" => diffuse_case(&mut rng),
        "instance_loss_l2" => loss_case(InstanceLossKind::L2, op, &mut rng),
        "instance_loss_l1" => loss_case(InstanceLossKind::L1, op, &mut rng),
        "instance_loss_smoothl1" => loss_case(InstanceLossKind::SmoothL1, op, &mut rng),
        "lightweight_nonbt1d" => block_case(&mut rng),
        _ => network_case(&mut rng),
    }
}

pub fn run_all() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for op in OPS {
        out.extend(run_op(op)?);
    }
    Ok(out)
}
