//! `key=value` run configuration (one per line, `#` starts a comment).

use std::fmt::Write as _;
use std::path::Path;

use ssnet_core::model::{DiffusionAt, ModelConfig, TrainConfig, Upsampling};
use ssnet_core::net::StageConfig;
use ssnet_core::sampler::SampleMode;
use ssnet_core::tape::InstanceLossKind;

use crate::error::{io_err, Error, Result};

/// Splits `text` into `(line number, key, value)` triples. Blank lines and
/// comments are skipped; repeated keys are rejected.
pub fn parse_key_values(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out: Vec<(usize, String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got {line:?}", n + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(_, seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
        }
        out.push((n + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Everything a training or evaluation run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Diffusion steps used for the per-epoch validation rows.
    pub eval_t: usize,
    /// Share of the training directory held out when no `--val` is given.
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_classes(ssnet_core::synth::NUM_CLASSES)
    }
}

fn mode_name(m: SampleMode) -> &'static str {
    match m {
        SampleMode::Nearest => "nearest",
        SampleMode::Bilinear => "bilinear",
    }
}

fn loss_name(k: InstanceLossKind) -> &'static str {
    match k {
        InstanceLossKind::L2 => "l2",
        InstanceLossKind::L1 => "l1",
        InstanceLossKind::SmoothL1 => "smoothl1",
    }
}

pub fn parse_loss(s: &str) -> Result<InstanceLossKind> {
    match s.to_ascii_lowercase().as_str() {
        "l2" => Ok(InstanceLossKind::L2),
        "l1" => Ok(InstanceLossKind::L1),
        "smoothl1" | "smooth_l1" => Ok(InstanceLossKind::SmoothL1),
        _ => Err(Error::Config(format!("unknown loss {s:?} (l2, l1, smoothl1)"))),
    }
}

fn parse_mode(s: &str) -> Result<SampleMode> {
    match s {
        "nearest" => Ok(SampleMode::Nearest),
        "bilinear" => Ok(SampleMode::Bilinear),
        _ => Err(Error::Config(format!("unknown sampling mode {s:?} (nearest, bilinear)"))),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<usize>, std::num::ParseIntError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn for_classes(classes: usize) -> Self {
        Self {
            model: ModelConfig::desk(classes),
            train: TrainConfig::default(),
            eval_t: 30,
            val_fraction: 0.2,
        }
    }

    /// Canonical text form; [`RunConfig::parse`] reads it back unchanged.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        let widths: Vec<usize> = e.stages.iter().map(|s| s.channels).collect();
        let dilations: Vec<String> = e.stages.iter().map(|s| join(&s.dilations)).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").expect("writing to a String");
        kv("classes", e.classes.to_string());
        kv("widths", join(&widths));
        kv("dilations", dilations.join("/"));
        kv("early_dropout", format!("{:?}", e.early_dropout));
        kv("late_dropout", format!("{:?}", e.late_dropout));
        kv("early_modules", e.early_modules.to_string());
        kv("use_prelu", e.use_prelu.to_string());
        kv("use_bias", e.use_bias.to_string());
        kv("tail_1x1", e.tail_1x1.to_string());
        kv(
            "upsampling",
            match m.upsampling {
                Upsampling::Guided => "guided",
                Upsampling::Fixed => "fixed",
            }
            .into(),
        );
        kv(
            "diffusion",
            match m.diffusion {
                DiffusionAt::Full => "full",
                DiffusionAt::Encoder => "encoder",
            }
            .into(),
        );
        kv("t_train", m.t_train.to_string());
        kv("loss", loss_name(m.loss_kind).into());
        kv("lambda_instance", format!("{:?}", m.lambda_instance));
        kv("area_threshold", m.area_threshold.to_string());
        kv("semantic_eval", mode_name(m.semantic_eval).into());
        kv("diffusion_eval", mode_name(m.diffusion_eval).into());
        kv("instance_step", format!("{:?}", m.instance_step));
        kv("lr0", format!("{:?}", t.lr0));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("epochs", t.epochs.to_string());
        kv("batch", t.batch.to_string());
        kv("poly_power", format!("{:?}", t.poly_power));
        kv("seed", t.seed.to_string());
        kv("eval_t", self.eval_t.to_string());
        kv("val_fraction", format!("{:?}", self.val_fraction));
        s
    }

    /// Applies the keys of `text` on top of the defaults. Unknown keys are
    /// rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply(text)?;
        Ok(c)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        let kv = parse_key_values(text)?;
        let mut widths = None;
        let mut dilations = None;
        for (line, key, value) in kv {
            let bad = |what: &str| Error::Config(format!("line {line}: {key}={value:?}: {what}"));
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| bad(&format!("{e}")))?
                };
            }
            let m = &mut self.model;
            let t = &mut self.train;
            match key.as_str() {
                "classes" => m.encoder.classes = num!(),
                "widths" => widths = Some(parse_list(&value).map_err(|e| bad(&e.to_string()))?),
                "dilations" => {
                    dilations = Some(
                        value
                            .split('/')
                            .map(parse_list)
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| bad(&e.to_string()))?,
                    )
                }
                "early_dropout" => m.encoder.early_dropout = num!(),
                "late_dropout" => m.encoder.late_dropout = num!(),
                "early_modules" => m.encoder.early_modules = num!(),
                "use_prelu" => m.encoder.use_prelu = num!(),
                "use_bias" => m.encoder.use_bias = num!(),
                "tail_1x1" => m.encoder.tail_1x1 = num!(),
                "upsampling" => {
                    m.upsampling = match value.as_str() {
                        "guided" => Upsampling::Guided,
                        "fixed" => Upsampling::Fixed,
                        _ => return Err(bad("expected guided or fixed")),
                    }
                }
                "diffusion" => {
                    m.diffusion = match value.as_str() {
                        "full" => DiffusionAt::Full,
                        "encoder" => DiffusionAt::Encoder,
                        _ => return Err(bad("expected full or encoder")),
                    }
                }
                "t_train" | "t_iterations" => m.t_train = num!(),
                "loss" | "loss_kind" => m.loss_kind = parse_loss(&value)?,
                "lambda_instance" => m.lambda_instance = num!(),
                "area_threshold" => m.area_threshold = num!(),
                "semantic_eval" => m.semantic_eval = parse_mode(&value)?,
                "diffusion_eval" => m.diffusion_eval = parse_mode(&value)?,
                "instance_step" => m.instance_step = num!(),
                "lr0" => t.lr0 = num!(),
                "weight_decay" => t.weight_decay = num!(),
                "epochs" => t.epochs = num!(),
                "batch" => t.batch = num!(),
                "poly_power" => t.poly_power = num!(),
                "seed" => t.seed = num!(),
                "eval_t" => self.eval_t = num!(),
                "val_fraction" => self.val_fraction = num!(),
                _ => return Err(Error::Config(format!("line {line}: unknown key {key:?}"))),
            }
        }
        match (widths, dilations) {
            (None, None) => {}
            (Some(w), Some(d)) => {
                if w.len() != d.len() {
                    return Err(Error::Config(format!(
                        "{} stage widths but {} dilation lists",
                        w.len(),
                        d.len()
                    )));
                }
                self.model.encoder.stages = w
                    .into_iter()
                    .zip(d)
                    .map(|(channels, dilations)| StageConfig { channels, dilations })
                    .collect();
            }
            _ => return Err(Error::Config("widths and dilations must be given together".into())),
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }
}
