//! The encoder: early downsampling, stacks of lightweight factorized
//! residual blocks, and three 3x3 heads (semantic logits, semantic guidance
//! offsets, instance guidance offsets) at `1/f` of the input resolution.
//!
//! Parameters live in a [`ParamStore`] under dotted names. A convolution
//! `P` owns `P.w`, optionally `P.b`, and its batch norm `P.bn.{gamma, beta,
//! mean, var}`; the activation after it owns `P.act` (PReLU slopes).

mod fold;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conv::Conv2dParams;
use crate::error::{config_err, dim_err, Result};
use crate::math;
use crate::tape::{RunningStats, Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

pub use fold::fold_batchnorm;
pub use params::{Binder, ParamEntry, ParamKind, ParamStore};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const PRELU_INIT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightweightNonBt1DConfig {
    pub channels: usize,
    pub dilation: usize,
    pub dropout_p: f64,
    pub use_prelu: bool,
    pub use_bias: bool,
    /// Second 1x1 convolution at the end of the block (otherwise right
    /// after the first one).
    pub tail_1x1: bool,
}

impl LightweightNonBt1DConfig {
    pub fn new(channels: usize, dilation: usize, dropout_p: f64) -> Self {
        Self {
            channels,
            dilation,
            dropout_p,
            use_prelu: true,
            use_bias: false,
            tail_1x1: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.dilation == 0 {
            return Err(config_err!("block needs channels >= 1 and dilation >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(config_err!("dropout probability {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

/// A downsampler to `channels` followed by blocks with these dilations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageConfig {
    pub channels: usize,
    pub dilations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub classes: usize,
    /// Dropout of the first `early_modules` blocks; later blocks use `late_dropout`.
    pub early_dropout: f64,
    pub late_dropout: f64,
    pub early_modules: usize,
    pub use_prelu: bool,
    pub use_bias: bool,
    pub tail_1x1: bool,
}

impl EncoderConfig {
    /// Widths 16/64/128, four blocks (dilations 1,1,2,4) at 1/4 and six
    /// (2,4,8,16,2,4) at 1/8 resolution.
    pub fn desk(classes: usize) -> Self {
        Self {
            in_channels: 3,
            stages: vec![
                StageConfig {
                    channels: 16,
                    dilations: vec![],
                },
                StageConfig {
                    channels: 64,
                    dilations: vec![1, 1, 2, 4],
                },
                StageConfig {
                    channels: 128,
                    dilations: vec![2, 4, 8, 16, 2, 4],
                },
            ],
            classes,
            early_dropout: 0.03,
            late_dropout: 0.3,
            early_modules: 5,
            use_prelu: true,
            use_bias: false,
            tail_1x1: true,
        }
    }

    /// Output stride: `2^(number of downsamplers)`.
    pub fn factor(&self) -> usize {
        1 << self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.classes == 0 || self.in_channels == 0 {
            return Err(config_err!("encoder needs at least one stage, one class and one input channel"));
        }
        let mut c = self.in_channels;
        for (k, s) in self.stages.iter().enumerate() {
            if s.channels <= c {
                return Err(config_err!("stage {k}: width {} must exceed its input width {c}", s.channels));
            }
            if s.dilations.contains(&0) {
                return Err(config_err!("stage {k}: dilations must be >= 1"));
            }
            c = s.channels;
        }
        for p in [self.early_dropout, self.late_dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(config_err!("dropout probability {p} outside [0, 1)"));
            }
        }
        Ok(())
    }

    /// Block configurations in forward order, with their stage index.
    pub fn blocks(&self) -> Vec<(usize, LightweightNonBt1DConfig)> {
        let mut out = Vec::new();
        for (k, s) in self.stages.iter().enumerate() {
            for &d in &s.dilations {
                let p = if out.len() < self.early_modules {
                    self.early_dropout
                } else {
                    self.late_dropout
                };
                out.push((
                    k,
                    LightweightNonBt1DConfig {
                        channels: s.channels,
                        dilation: d,
                        dropout_p: p,
                        use_prelu: self.use_prelu,
                        use_bias: self.use_bias,
                        tail_1x1: self.tail_1x1,
                    },
                ));
            }
        }
        out
    }

    pub fn feature_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.channels)
    }
}

/// Raw head outputs at encoder resolution.
#[derive(Debug, Clone, Copy)]
pub struct NetworkOutput {
    /// `(B, C, N, M)`
    pub logits: Var,
    /// `(B, 2, N, M)`, before `tanh`.
    pub semantic_offsets: Var,
    /// `(B, 2, N, M)`, before `tanh`.
    pub instance_offsets: Var,
}

pub fn block_prefix(stage: usize, index: usize) -> String {
    format!("s{stage}.m{index}")
}

pub fn down_prefix(stage: usize) -> String {
    format!("s{stage}.down")
}

pub const HEADS: [&str; 3] = ["head.sem", "head.soff", "head.ioff"];

fn kaiming(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3];
    Tensor::rand_normal(shape, math::sqrt(2.0 / fan_in as f64), rng)
}

fn insert_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.bn.gamma"), ParamKind::Trainable, Tensor::vector(&vec![1.0; c]));
    store.insert(&format!("{prefix}.bn.beta"), ParamKind::Trainable, Tensor::vector(&vec![0.0; c]));
    store.insert(&format!("{prefix}.bn.mean"), ParamKind::Buffer, Tensor::vector(&vec![0.0; c]));
    store.insert(&format!("{prefix}.bn.var"), ParamKind::Buffer, Tensor::vector(&vec![1.0; c]));
}

fn insert_act(store: &mut ParamStore, prefix: &str, c: usize, use_prelu: bool) {
    if use_prelu {
        store.insert(&format!("{prefix}.act"), ParamKind::Trainable, Tensor::vector(&vec![PRELU_INIT; c]));
    }
}

/// Kernel shapes `(kh, kw)` of the four block convolutions.
const BLOCK_KERNELS: [(&str, usize, usize); 4] = [("c1", 1, 1), ("c2", 3, 1), ("c3", 1, 3), ("c4", 1, 1)];

pub fn init_block(store: &mut ParamStore, prefix: &str, cfg: &LightweightNonBt1DConfig, rng: &mut ChaCha8Rng) {
    let w = cfg.channels;
    for (name, kh, kw) in BLOCK_KERNELS {
        let p = format!("{prefix}.{name}");
        store.insert(&format!("{p}.w"), ParamKind::Trainable, kaiming([w, w, kh, kw], rng));
        if cfg.use_bias {
            store.insert(&format!("{p}.b"), ParamKind::Trainable, Tensor::vector(&vec![0.0; w]));
        }
        insert_bn(store, &p, w);
        let last = if cfg.tail_1x1 { "c4" } else { "c3" };
        if name != last {
            insert_act(store, &p, w, cfg.use_prelu);
        }
    }
    insert_act(store, &format!("{prefix}.out"), w, cfg.use_prelu);
}

pub fn init_downsampler(store: &mut ParamStore, prefix: &str, c_in: usize, c_out: usize, use_prelu: bool, rng: &mut ChaCha8Rng) {
    store.insert(&format!("{prefix}.w"), ParamKind::Trainable, kaiming([c_out - c_in, c_in, 3, 3], rng));
    insert_bn(store, prefix, c_out);
    insert_act(store, prefix, c_out, use_prelu);
}

/// Fresh parameters for `cfg`, drawn from a generator seeded with `seed`.
pub fn init_params(cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut c = cfg.in_channels;
    let blocks = cfg.blocks();
    let mut next_block = 0;
    for (k, s) in cfg.stages.iter().enumerate() {
        init_downsampler(&mut store, &down_prefix(k), c, s.channels, cfg.use_prelu, &mut rng);
        c = s.channels;
        for j in 0..s.dilations.len() {
            init_block(&mut store, &block_prefix(k, j), &blocks[next_block].1, &mut rng);
            next_block += 1;
        }
    }
    let fan = c * 9;
    store.insert(
        "head.sem.w",
        ParamKind::Trainable,
        Tensor::rand_normal([cfg.classes, c, 3, 3], math::sqrt(1.0 / fan as f64), &mut rng),
    );
    store.insert("head.sem.b", ParamKind::Trainable, Tensor::vector(&vec![0.0; cfg.classes]));
    // Offset heads start at zero: plain upsampling and an identity diffusion.
    for h in &HEADS[1..] {
        store.insert(&format!("{h}.w"), ParamKind::Trainable, Tensor::zeros([2, c, 3, 3]));
        store.insert(&format!("{h}.b"), ParamKind::Trainable, Tensor::vector(&[0.0, 0.0]));
    }
    Ok(store)
}

/// Convolution `prefix` with its optional bias and batch norm.
fn conv_unit(tape: &mut Tape, bind: &mut Binder, x: Var, prefix: &str, p: Conv2dParams, mode: Mode) -> Result<Var> {
    let w = bind.var(tape, &format!("{prefix}.w"))?;
    let bname = format!("{prefix}.b");
    let b = if bind.has(&bname) { Some(bind.var(tape, &bname)?) } else { None };
    let y = tape.conv2d(x, w, b, p)?;
    batchnorm(tape, bind, y, prefix, mode)
}

/// Applies `prefix.bn` when present.
fn batchnorm(tape: &mut Tape, bind: &mut Binder, x: Var, prefix: &str, mode: Mode) -> Result<Var> {
    let g = format!("{prefix}.bn.gamma");
    if !bind.has(&g) {
        return Ok(x);
    }
    let gamma = bind.var(tape, &g)?;
    let beta = bind.var(tape, &format!("{prefix}.bn.beta"))?;
    let (mname, vname) = (format!("{prefix}.bn.mean"), format!("{prefix}.bn.var"));
    let mut stats = RunningStats {
        mean: bind.store().get(&mname)?.data().to_vec(),
        var: bind.store().get(&vname)?.data().to_vec(),
    };
    let y = tape.batchnorm2d(x, gamma, beta, &mut stats, mode, BN_MOMENTUM, BN_EPS)?;
    if mode == Mode::Train {
        bind.store_mut().get_mut(&mname)?.data_mut().copy_from_slice(&stats.mean);
        bind.store_mut().get_mut(&vname)?.data_mut().copy_from_slice(&stats.var);
    }
    Ok(y)
}

fn act(tape: &mut Tape, bind: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let name = format!("{prefix}.act");
    if bind.has(&name) {
        let s = bind.var(tape, &name)?;
        tape.prelu(x, s)
    } else {
        tape.relu(x)
    }
}

/// Mixes a step seed with a block index into a dropout seed.
fn dropout_seed(seed: u64, block: usize) -> u64 {
    let mut z = seed ^ (block as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The lightweight factorized residual block.
///
/// Residual path: 1x1, 3x1 (vertical dilation), 1x3 (horizontal dilation),
/// 1x1, each followed by batch norm and all but the last by the block
/// activation; then dropout. The sum with the input passes through a final
/// activation. With `tail_1x1 == false` the second 1x1 runs right after
/// the first.
#[allow(clippy::too_many_arguments)]
pub fn lightweight_nonbt1d(
    tape: &mut Tape,
    bind: &mut Binder,
    x: Var,
    prefix: &str,
    cfg: &LightweightNonBt1DConfig,
    mode: Mode,
    seed: u64,
) -> Result<Var> {
    cfg.validate()?;
    let c = tape.value(x)?.channels();
    if c != cfg.channels {
        return Err(dim_err!("block {prefix} expects {} channels, got {c}", cfg.channels));
    }
    let d = cfg.dilation;
    let order: [(&str, Conv2dParams, bool); 4] = {
        let c1 = ("c1", Conv2dParams::default(), true);
        let c2 = ("c2", Conv2dParams::same(3, 1, (d, 1)), true);
        let c3 = ("c3", Conv2dParams::same(1, 3, (1, d)), true);
        if cfg.tail_1x1 {
            [c1, c2, c3, ("c4", Conv2dParams::default(), false)]
        } else {
            [c1, ("c4", Conv2dParams::default(), true), c2, ("c3", c3.1, false)]
        }
    };
    let mut y = x;
    for (name, p, with_act) in order {
        let pre = format!("{prefix}.{name}");
        y = conv_unit(tape, bind, y, &pre, p, mode)?;
        if with_act {
            y = act(tape, bind, y, &pre)?;
        }
    }
    y = tape.dropout(y, cfg.dropout_p, mode, seed)?;
    let sum = tape.residual_add(y, x)?;
    act(tape, bind, sum, &format!("{prefix}.out"))
}

/// Concatenation of a stride-2 3x3 convolution (`c_out - c_in` filters)
/// and 2x2 max pooling, followed by batch norm and the activation.
///
/// After folding, the convolution carries a bias and the pooled channels a
/// per-channel affine `prefix.pool_scale`, `prefix.pool_shift`.
pub fn downsampler(tape: &mut Tape, bind: &mut Binder, x: Var, prefix: &str, c_out: usize, mode: Mode) -> Result<Var> {
    let [_, c_in, h, w] = tape.value(x)?.shape();
    if c_out <= c_in {
        return Err(config_err!("downsampler needs c_out > c_in, got {c_out} <= {c_in}"));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("downsampler needs even spatial dims, got {h}x{w}"));
    }
    let wv = bind.var(tape, &format!("{prefix}.w"))?;
    let wc = tape.value(wv)?.shape()[0];
    if wc + c_in != c_out {
        return Err(dim_err!("{prefix}: {wc} conv filters + {c_in} pooled channels != {c_out}"));
    }
    let bname = format!("{prefix}.b");
    let b = if bind.has(&bname) { Some(bind.var(tape, &bname)?) } else { None };
    let p = Conv2dParams {
        stride: 2,
        dilation: (1, 1),
        padding: (1, 1),
    };
    let conv = tape.conv2d(x, wv, b, p)?;
    let mut pool = tape.maxpool2x2(x)?;
    let sname = format!("{prefix}.pool_scale");
    if bind.has(&sname) {
        let scale = bind.store().get(&sname)?.data().to_vec();
        let shift = bind.store().get(&format!("{prefix}.pool_shift"))?.data().to_vec();
        pool = tape.channel_affine(pool, &scale, &shift)?;
    }
    let cat = tape.concat_channels(conv, pool)?;
    let y = batchnorm(tape, bind, cat, prefix, mode)?;
    act(tape, bind, y, prefix)
}

fn head(tape: &mut Tape, bind: &mut Binder, x: Var, name: &str) -> Result<Var> {
    let w = bind.var(tape, &format!("{name}.w"))?;
    let b = bind.var(tape, &format!("{name}.b"))?;
    tape.conv2d(x, w, Some(b), Conv2dParams::same(3, 3, (1, 1)))
}

/// Runs the encoder and heads on `image` `(B, in_channels, H, W)`.
///
/// `seed` drives dropout in train mode; train mode also updates the
/// batch-norm running statistics stored in `bind`.
pub fn encoder_forward(tape: &mut Tape, bind: &mut Binder, image: Var, cfg: &EncoderConfig, mode: Mode, seed: u64) -> Result<NetworkOutput> {
    cfg.validate()?;
    let [_, c, h, w] = tape.value(image)?.shape();
    if c != cfg.in_channels {
        return Err(dim_err!("encoder expects {} input channels, got {c}", cfg.in_channels));
    }
    let f = cfg.factor();
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(config_err!("input {h}x{w} is not divisible by the output stride {f}"));
    }
    let blocks = cfg.blocks();
    let mut x = image;
    let mut bi = 0;
    for (k, s) in cfg.stages.iter().enumerate() {
        x = downsampler(tape, bind, x, &down_prefix(k), s.channels, mode)?;
        for j in 0..s.dilations.len() {
            x = lightweight_nonbt1d(tape, bind, x, &block_prefix(k, j), &blocks[bi].1, mode, dropout_seed(seed, bi))?;
            bi += 1;
        }
    }
    Ok(NetworkOutput {
        logits: head(tape, bind, x, HEADS[0])?,
        semantic_offsets: head(tape, bind, x, HEADS[1])?,
        instance_offsets: head(tape, bind, x, HEADS[2])?,
    })
}
