//! The full model: encoder, guided upsampling of the class map, instance
//! diffusion, the joint training objective, an Adam trainer and the
//! evaluation pipeline.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, Result};
use crate::igum::{fixed_upsample, igum_forward, upsample_offsets, IgumConfig};
use crate::instance::{centroid_targets, diffuse, extract_instances, upsample_instance_output, InstanceLabeling};
use crate::metrics::{ap_thresholds, boundary_band, miou, ApAccumulator, ConfusionMatrix, InstanceScores, SemanticScores};
use crate::net::{encoder_forward, init_params, Binder, EncoderConfig, ParamKind, ParamStore};
use crate::optim::{poly_lr, Adam, AdamConfig};
use crate::sampler::{bound_offsets, SampleMode};
use crate::synth::{make_batch, Batch, Sample, THING_CLASSES};
use crate::tape::{InstanceLossKind, Tape, Var};
use crate::tensor::Tensor;
use crate::Mode;

/// How the class map reaches full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsampling {
    /// Guided by the predicted low-resolution offsets.
    Guided,
    /// Offsets forced to zero: plain resizing.
    Fixed,
}

/// Where instance diffusion runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionAt {
    /// The offset table is interpolated to full resolution first.
    Full,
    /// Diffuse at encoder resolution, then upsample the coordinate map.
    Encoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub upsampling: Upsampling,
    pub diffusion: DiffusionAt,
    /// Diffusion steps while training.
    pub t_train: usize,
    pub loss_kind: InstanceLossKind,
    pub lambda_instance: f64,
    /// Minimum instance area in full-resolution pixels.
    pub area_threshold: usize,
    /// Class-map sampling at inference (training always samples bilinearly).
    pub semantic_eval: SampleMode,
    /// Diffusion sampling at inference.
    pub diffusion_eval: SampleMode,
    /// Longest diffusion step, in full-resolution pixels per axis, for
    /// full-resolution diffusion: the bounded table is scaled so that
    /// `tanh = ±1` moves this far.
    pub instance_step: f64,
}

impl ModelConfig {
    pub fn desk(classes: usize) -> Self {
        Self {
            encoder: EncoderConfig::desk(classes),
            upsampling: Upsampling::Guided,
            diffusion: DiffusionAt::Full,
            t_train: 30,
            loss_kind: InstanceLossKind::L2,
            lambda_instance: 1.0,
            area_threshold: 64,
            semantic_eval: SampleMode::Bilinear,
            diffusion_eval: SampleMode::Bilinear,
            instance_step: 1.0,
        }
    }

    pub fn factor(&self) -> usize {
        self.encoder.factor()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.lambda_instance >= 0.0) {
            return Err(config_err!("lambda_instance must be >= 0"));
        }
        if !(self.instance_step > 0.0) {
            return Err(config_err!("instance_step must be > 0"));
        }
        Ok(())
    }
}

/// Class map and coordinate map at full resolution.
struct Heads {
    logits: Var,
    coords: Var,
}

fn heads(tape: &mut Tape, bind: &mut Binder, cfg: &ModelConfig, images: &Tensor, mode: Mode, t: usize, seed: u64) -> Result<Heads> {
    let x = tape.constant(images.clone());
    let out = encoder_forward(tape, bind, x, &cfg.encoder, mode, seed)?;
    let (sample, class_sample) = match mode {
        Mode::Train => (SampleMode::Bilinear, SampleMode::Bilinear),
        Mode::Eval => (cfg.diffusion_eval, cfg.semantic_eval),
    };
    let f = cfg.factor();
    let up = IgumConfig::new(f, sample)?;
    let class_up = IgumConfig::new(f, class_sample)?;
    let logits = match cfg.upsampling {
        Upsampling::Guided => igum_forward(tape, out.logits, out.semantic_offsets, class_up)?,
        Upsampling::Fixed => fixed_upsample(tape, out.logits, class_up)?,
    };
    let bounded = bound_offsets(tape, out.instance_offsets)?;
    let coords = match cfg.diffusion {
        DiffusionAt::Full => {
            let [_, _, h, w] = images.shape();
            let per_px = |s: usize| if s > 1 { 2.0 / (s - 1) as f64 } else { 1.0 };
            let scale = [cfg.instance_step * per_px(w), cfg.instance_step * per_px(h)];
            let scaled = tape.channel_affine(bounded, &scale, &[0.0, 0.0])?;
            let table = upsample_offsets(tape, scaled, f)?;
            diffuse(tape, table, t, sample)?
        }
        DiffusionAt::Encoder => {
            let low = diffuse(tape, bounded, t, sample)?;
            match cfg.upsampling {
                Upsampling::Guided => upsample_instance_output(tape, low, out.semantic_offsets, up)?,
                Upsampling::Fixed => fixed_upsample(tape, low, up)?,
            }
        }
    };
    Ok(Heads { logits, coords })
}

/// Scalar objective and its parts for one batch.
pub struct Loss {
    pub total: Var,
    pub semantic: f64,
    pub instance: f64,
}

/// Cross-entropy of the upsampled class map plus `lambda` times the
/// instance regression loss on thing pixels (train mode).
pub fn training_loss(tape: &mut Tape, bind: &mut Binder, cfg: &ModelConfig, batch: &Batch, seed: u64) -> Result<Loss> {
    let h = heads(tape, bind, cfg, &batch.images, Mode::Train, cfg.t_train, seed)?;
    let ce = tape.softmax_cross_entropy(h.logits, &batch.semantic)?;
    let targets = centroid_targets(&batch.instances);
    let inst = tape.instance_loss(h.coords, &targets.centers, &targets.mask, cfg.loss_kind)?;
    let (semantic, instance) = (tape.value(ce)?.item()?, tape.value(inst)?.item()?);
    let weighted = tape.scale(inst, cfg.lambda_instance)?;
    let total = tape.add(ce, weighted)?;
    Ok(Loss {
        total,
        semantic,
        instance,
    })
}

/// Per-pixel class of largest score (lowest class on ties).
pub fn argmax_classes(logits: &Tensor) -> Vec<u32> {
    let [b, c, h, w] = logits.shape();
    let hw = h * w;
    let d = logits.data();
    let mut out = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for p in 0..hw {
            let mut best = 0;
            for ci in 1..c {
                if d[(bi * c + ci) * hw + p] > d[(bi * c + best) * hw + p] {
                    best = ci;
                }
            }
            out.push(best as u32);
        }
    }
    out
}

/// Eval-mode outputs for a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Full-resolution class scores `(B, C, H, W)`.
    pub logits: Tensor,
    /// Full-resolution coordinate map `(B, 2, H, W)` after diffusion.
    pub coords: Tensor,
    pub semantic: Vec<u32>,
    pub instances: InstanceLabeling,
    /// Area over largest area, per image and instance.
    pub confidences: Vec<Vec<f64>>,
}

/// Inference with `t` diffusion steps. Instances are the
/// coordinate groups among pixels predicted as a thing class.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, images: &Tensor, t: usize) -> Result<Prediction> {
    let mut store = params.clone();
    let mut tape = Tape::new();
    let mut bind = Binder::new(&mut store, false);
    let h = heads(&mut tape, &mut bind, cfg, images, Mode::Eval, t, 0)?;
    let logits = tape.value(h.logits)?.clone();
    let coords = tape.value(h.coords)?.clone();
    let semantic = argmax_classes(&logits);
    let things: Vec<bool> = semantic.iter().map(|c| THING_CLASSES.contains(c)).collect();
    let instances = extract_instances(&coords, cfg.area_threshold, Some(&things))?;
    let confidences = (0..instances.batch()).map(|b| instances.area_confidences(b)).collect();
    Ok(Prediction {
        logits,
        coords,
        semantic,
        instances,
        confidences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub semantic: SemanticScores,
    /// mIoU restricted to pixels within 2 px of a ground-truth boundary.
    pub boundary_miou: f64,
    pub instance: InstanceScores,
}

pub const BOUNDARY_RADIUS: usize = 2;
pub const EVAL_BATCH: usize = 8;

/// Metrics over `samples` for each diffusion step count in `ts`.
pub fn evaluate(params: &ParamStore, cfg: &ModelConfig, samples: &[Sample], ts: &[usize]) -> Result<Vec<EvalReport>> {
    let classes = cfg.encoder.classes;
    let mut reports = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut conf = ConfusionMatrix::new(classes);
        let mut band_conf = ConfusionMatrix::new(classes);
        let mut ap = ApAccumulator::new(&ap_thresholds());
        let idx: Vec<usize> = (0..samples.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let batch = make_batch(samples, chunk)?;
            let pred = predict(params, cfg, &batch.images, t)?;
            conf.accumulate(&batch.semantic, &pred.semantic, None)?;
            let (h, w) = (batch.instances.height(), batch.instances.width());
            for (k, &i) in chunk.iter().enumerate() {
                let band = boundary_band(&samples[i].semantic, h, w, BOUNDARY_RADIUS)?;
                let hw = h * w;
                band_conf.accumulate(&samples[i].semantic, &pred.semantic[k * hw..(k + 1) * hw], Some(&band))?;
            }
            ap.add(&pred.instances, &pred.confidences, &batch.instances)?;
        }
        reports.push(EvalReport {
            semantic: miou(&conf)?,
            boundary_miou: miou(&band_conf)?.miou,
            instance: ap.scores(),
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 1e-4,
            epochs: 40,
            batch: 8,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(config_err!("lr0 must be positive"));
        }
        if !(self.poly_power > 0.0 && self.poly_power <= 1.0) {
            return Err(config_err!("poly_power must lie in (0, 1]"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(config_err!("batch and epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: f64,
    pub semantic_loss: f64,
    pub instance_loss: f64,
}

/// Parameters, optimizer state and schedule of one training run.
pub struct Trainer {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    adam: Adam,
    epoch: usize,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Trainer {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let params = init_params(&model.encoder, train.seed)?;
        Self::with_params(model, train, params)
    }

    pub fn with_params(model: ModelConfig, train: TrainConfig, params: ParamStore) -> Result<Self> {
        let sizes: Vec<usize> = params
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .collect();
        let adam = Adam::new(
            AdamConfig {
                weight_decay: train.weight_decay,
                ..AdamConfig::default()
            },
            sizes,
        );
        Ok(Self {
            model,
            train,
            params,
            adam,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One optimizer step on `batch`; returns (total, semantic, instance) loss.
    pub fn step(&mut self, batch: &Batch, lr: f64, seed: u64) -> Result<(f64, f64, f64)> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&mut self.params, true);
        let loss = training_loss(&mut tape, &mut bind, &self.model, batch, seed)?;
        let total = tape.value(loss.total)?.item()?;
        if !total.is_finite() {
            return Err(crate::Error::NonFinite(alloc::format!(
                "loss {total} (semantic {}, instance {})",
                loss.semantic,
                loss.instance
            )));
        }
        let mut grads = tape.backward(loss.total)?;
        let vars = bind.into_vars();
        let mut gs = Vec::new();
        let mut ps = Vec::new();
        for (e, v) in self.params.entries_mut().iter_mut().zip(vars) {
            if e.kind != ParamKind::Trainable {
                continue;
            }
            let g = v.and_then(|v| grads.take(v)).unwrap_or_else(|| Tensor::zeros(e.value.shape()));
            g.check_finite(&e.name)?;
            gs.push(g);
            ps.push(&mut e.value);
        }
        let grefs: Vec<&Tensor> = gs.iter().collect();
        self.adam.step(&mut ps, &grefs, lr)?;
        Ok((total, loss.semantic, loss.instance))
    }

    /// Runs the next epoch over `samples` in a seeded shuffled order.
    pub fn run_epoch(&mut self, samples: &[Sample]) -> Result<EpochStats> {
        if self.epoch >= self.train.epochs {
            return Err(config_err!("all {} epochs already ran", self.train.epochs));
        }
        let e = self.epoch;
        let lr = poly_lr(e, self.train.epochs, self.train.lr0, self.train.poly_power)?;
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
        rng.set_stream(e as u64 + 1);
        order.shuffle(&mut rng);
        let (mut tot, mut sem, mut ins, mut n) = (0.0, 0.0, 0.0, 0usize);
        for (k, chunk) in order.chunks(self.train.batch).enumerate() {
            let batch = make_batch(samples, chunk)?;
            let seed = mix(mix(self.train.seed, e as u64), k as u64);
            let (a, b, c) = self.step(&batch, lr, seed)?;
            tot += a;
            sem += b;
            ins += c;
            n += 1;
        }
        self.epoch += 1;
        let n = n.max(1) as f64;
        Ok(EpochStats {
            epoch: e,
            lr,
            loss: tot / n,
            semantic_loss: sem / n,
            instance_loss: ins / n,
        })
    }
}
