//! Model, training and data configuration with a flat `key = value` text form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NormKind;
use crate::tensor::checkpoint::NamedTensor;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    /// Side of the square attention windows of the local temporal layer.
    pub window: usize,
    /// Key/value reduction ratios of the global temporal layer at stages 3, 4.
    pub sr_ratios: [usize; 2],
    pub heads: usize,
    /// Frames per clip at inference.
    pub clip_len: usize,
    /// Frames per clip during training.
    pub train_clip_len: usize,
    pub input_side: usize,
    /// Weight of the auxiliary losses.
    pub lambda: f64,
    pub mlp_ratio: usize,
    pub encoder_blocks: usize,
    pub mtt_depth: usize,
    pub temporal_attention: bool,
    pub positional_encoding: bool,
    pub shared_encoder: bool,
    pub decoder_norm: NormKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            window: 8,
            sr_ratios: [4, 2],
            heads: 2,
            clip_len: 12,
            train_clip_len: 3,
            input_side: 512,
            lambda: 0.5,
            mlp_ratio: 4,
            encoder_blocks: 2,
            mtt_depth: 1,
            temporal_attention: true,
            positional_encoding: false,
            shared_encoder: true,
            decoder_norm: NormKind::Batch,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale variant used by the synthetic training task: 64 px input,
    /// 2 px windows on the 4x4 and 2x2 deep maps.
    pub fn toy() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128],
            window: 2,
            sr_ratios: [2, 1],
            heads: 2,
            clip_len: 12,
            train_clip_len: 3,
            input_side: 64,
            mlp_ratio: 2,
            encoder_blocks: 1,
            ..Self::default()
        }
    }

    pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

    pub fn stage_extent(&self, stage: usize) -> usize {
        self.input_side / Self::STRIDES[stage]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_side == 0 || self.input_side % 32 != 0 {
            return fail(format!("input_side {} must be a positive multiple of 32", self.input_side));
        }
        if self.stage_channels.iter().any(|&c| c < 2 || c % 2 != 0) {
            return fail(format!("stage_channels {:?} must be even and >= 2", self.stage_channels));
        }
        if self.window == 0 {
            return fail("window must be >= 1".into());
        }
        if self.heads == 0 || self.stage_channels[2] % self.heads != 0 || self.stage_channels[3] % self.heads != 0 {
            return fail(format!(
                "heads {} must divide transformer dims {} and {}",
                self.heads, self.stage_channels[2], self.stage_channels[3]
            ));
        }
        for (i, &r) in self.sr_ratios.iter().enumerate() {
            let extent = self.stage_extent(2 + i);
            if r == 0 || extent % r != 0 {
                return fail(format!("sr ratio {r} does not divide stage {} extent {extent}", 3 + i));
            }
        }
        if self.clip_len == 0 || self.train_clip_len == 0 {
            return fail("clip lengths must be >= 1".into());
        }
        if self.mlp_ratio == 0 || self.mtt_depth == 0 {
            return fail("mlp_ratio and mtt_depth must be >= 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be finite and non-negative", self.lambda));
        }
        Ok(())
    }

    /// Configuration stored alongside the weights in a checkpoint.
    pub fn to_entries(&self) -> Vec<NamedTensor> {
        let scalar = |name: &str, v: f64| NamedTensor {
            name: format!("config.{name}"),
            shape: vec![1],
            data: vec![v as f32],
        };
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        vec![
            NamedTensor {
                name: "config.stage_channels".into(),
                shape: vec![4],
                data: self.stage_channels.iter().map(|&c| c as f32).collect(),
            },
            scalar("window", self.window as f64),
            NamedTensor {
                name: "config.sr_ratios".into(),
                shape: vec![2],
                data: self.sr_ratios.iter().map(|&c| c as f32).collect(),
            },
            scalar("heads", self.heads as f64),
            scalar("clip_len", self.clip_len as f64),
            scalar("train_clip_len", self.train_clip_len as f64),
            scalar("input_side", self.input_side as f64),
            scalar("lambda", self.lambda),
            scalar("mlp_ratio", self.mlp_ratio as f64),
            scalar("encoder_blocks", self.encoder_blocks as f64),
            scalar("mtt_depth", self.mtt_depth as f64),
            scalar("temporal_attention", b(self.temporal_attention)),
            scalar("positional_encoding", b(self.positional_encoding)),
            scalar("shared_encoder", b(self.shared_encoder)),
            scalar("decoder_norm", if self.decoder_norm == NormKind::Batch { 0.0 } else { 1.0 }),
        ]
    }

    pub fn from_entries(entries: &[NamedTensor]) -> Result<Self> {
        let get = |name: &str| -> Result<&[f32]> {
            entries
                .iter()
                .find(|e| e.name == format!("config.{name}"))
                .map(|e| e.data.as_slice())
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks config.{name}")))
        };
        let one = |name: &str| -> Result<f64> { Ok(get(name)?.first().copied().unwrap_or(0.0) as f64) };
        let sc = get("stage_channels")?;
        let sr = get("sr_ratios")?;
        if sc.len() != 4 || sr.len() != 2 {
            return Err(Error::Checkpoint("malformed config entries".into()));
        }
        let cfg = Self {
            stage_channels: [sc[0] as usize, sc[1] as usize, sc[2] as usize, sc[3] as usize],
            window: one("window")? as usize,
            sr_ratios: [sr[0] as usize, sr[1] as usize],
            heads: one("heads")? as usize,
            clip_len: one("clip_len")? as usize,
            train_clip_len: one("train_clip_len")? as usize,
            input_side: one("input_side")? as usize,
            lambda: one("lambda")?,
            mlp_ratio: one("mlp_ratio")? as usize,
            encoder_blocks: one("encoder_blocks")? as usize,
            mtt_depth: one("mtt_depth")? as usize,
            temporal_attention: one("temporal_attention")? != 0.0,
            positional_encoding: one("positional_encoding")? != 0.0,
            shared_encoder: one("shared_encoder")? != 0.0,
            decoder_norm: if one("decoder_norm")? == 0.0 { NormKind::Batch } else { NormKind::Layer },
            seed: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimiser and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Probability of reversing the frame order of a training clip.
    pub reverse_prob: f64,
    pub log_every: usize,
    pub schedule: Schedule,
    /// Linear ramp from zero before the schedule starts.
    pub warmup_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from `lr` to zero over the run.
    Cosine,
}

impl TrainConfig {
    /// Learning rate of step `step` in a run of `total` steps.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
                let x = (step - self.warmup_steps) as f64 / span;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * x.min(1.0)).cos())
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            reverse_prob: 0.5,
            log_every: 50,
            schedule: Schedule::Cosine,
            warmup_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectShape {
    Square,
    Disc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trajectory {
    Linear,
    Sinusoidal,
}

/// Parameters of one synthetic moving-object clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClipSpec {
    pub seed: u64,
    pub canvas: usize,
    pub shape: ObjectShape,
    pub object_size: usize,
    pub trajectory: Trajectory,
    /// Pixels per frame.
    pub velocity: f64,
    pub distractors: usize,
    pub noise: f64,
    /// Randomise start position and heading from the seed; otherwise the
    /// object starts at the canvas centre heading right.
    pub randomize: bool,
}

impl Default for SyntheticClipSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            canvas: 64,
            shape: ObjectShape::Square,
            object_size: 20,
            trajectory: Trajectory::Linear,
            velocity: 2.0,
            distractors: 0,
            noise: 0.05,
            randomize: true,
        }
    }
}

/// Everything a `key = value` config file may set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticClipSpec,
    /// Frame count for `make-data`.
    pub frames: usize,
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated integers, got {v:?}")))?;
    items
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected {N} values, got {v:?}")))
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

impl Config {
    /// Toy model on the default synthetic task.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            // the small model tolerates, and within 2000 steps needs, a
            // larger step than the full-size default
            train: TrainConfig {
                lr: 1e-3,
                warmup_steps: 50,
                ..TrainConfig::default()
            },
            frames: 24,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "preset" => match value.trim() {
                "toy" => *self = Self { frames: self.frames, ..Self::toy() },
                "default" => *self = Self { frames: self.frames, ..Self::default() },
                other => return Err(Error::Config(format!("unknown preset {other:?}"))),
            },
            "stage_channels" => m.stage_channels = parse_list(key, value)?,
            "window" => m.window = parse(key, value)?,
            "sr_ratios" => m.sr_ratios = parse_list(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "clip_len" => m.clip_len = parse(key, value)?,
            "train_clip_len" => m.train_clip_len = parse(key, value)?,
            "input_side" => m.input_side = parse(key, value)?,
            "lambda" => m.lambda = parse(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "encoder_blocks" => m.encoder_blocks = parse(key, value)?,
            "mtt_depth" => m.mtt_depth = parse(key, value)?,
            "temporal_attention" => m.temporal_attention = parse_bool(key, value)?,
            "positional_encoding" => m.positional_encoding = parse_bool(key, value)?,
            "shared_encoder" => m.shared_encoder = parse_bool(key, value)?,
            "decoder_norm" => {
                m.decoder_norm = match value.trim() {
                    "batch" => NormKind::Batch,
                    "layer" => NormKind::Layer,
                    v => return Err(Error::Config(format!("decoder_norm: expected batch|layer, got {v:?}"))),
                }
            }
            "seed" => {
                m.seed = parse(key, value)?;
                d.seed = m.seed;
            }
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "reverse_prob" => t.reverse_prob = parse(key, value)?,
            "log_every" => t.log_every = parse(key, value)?,
            "schedule" => {
                t.schedule = match value.trim() {
                    "constant" => Schedule::Constant,
                    "cosine" => Schedule::Cosine,
                    v => return Err(Error::Config(format!("schedule: expected constant|cosine, got {v:?}"))),
                }
            }
            "warmup_steps" => t.warmup_steps = parse(key, value)?,
            "canvas" => d.canvas = parse(key, value)?,
            "shape" => {
                d.shape = match value.trim() {
                    "square" => ObjectShape::Square,
                    "disc" => ObjectShape::Disc,
                    v => return Err(Error::Config(format!("shape: expected square|disc, got {v:?}"))),
                }
            }
            "object_size" => d.object_size = parse(key, value)?,
            "trajectory" => {
                d.trajectory = match value.trim() {
                    "linear" => Trajectory::Linear,
                    "sinusoidal" => Trajectory::Sinusoidal,
                    v => return Err(Error::Config(format!("trajectory: expected linear|sinusoidal, got {v:?}"))),
                }
            }
            "velocity" => d.velocity = parse(key, value)?,
            "distractors" => d.distractors = parse(key, value)?,
            "noise" => d.noise = parse(key, value)?,
            "randomize" => d.randomize = parse_bool(key, value)?,
            "frames" => self.frames = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut kv = BTreeMap::new();
        kv.insert("stage_channels", join(&m.stage_channels));
        kv.insert("window", m.window.to_string());
        kv.insert("sr_ratios", join(&m.sr_ratios));
        kv.insert("heads", m.heads.to_string());
        kv.insert("clip_len", m.clip_len.to_string());
        kv.insert("train_clip_len", m.train_clip_len.to_string());
        kv.insert("input_side", m.input_side.to_string());
        kv.insert("lambda", m.lambda.to_string());
        kv.insert("mlp_ratio", m.mlp_ratio.to_string());
        kv.insert("encoder_blocks", m.encoder_blocks.to_string());
        kv.insert("mtt_depth", m.mtt_depth.to_string());
        kv.insert("temporal_attention", m.temporal_attention.to_string());
        kv.insert("positional_encoding", m.positional_encoding.to_string());
        kv.insert("shared_encoder", m.shared_encoder.to_string());
        kv.insert("decoder_norm", if m.decoder_norm == NormKind::Batch { "batch" } else { "layer" }.into());
        kv.insert("seed", m.seed.to_string());
        kv.insert("lr", t.lr.to_string());
        kv.insert("beta1", t.beta1.to_string());
        kv.insert("beta2", t.beta2.to_string());
        kv.insert("weight_decay", t.weight_decay.to_string());
        kv.insert("reverse_prob", t.reverse_prob.to_string());
        kv.insert("log_every", t.log_every.to_string());
        kv.insert("schedule", if t.schedule == Schedule::Cosine { "cosine" } else { "constant" }.into());
        kv.insert("warmup_steps", t.warmup_steps.to_string());
        kv.insert("canvas", d.canvas.to_string());
        kv.insert("shape", if d.shape == ObjectShape::Square { "square" } else { "disc" }.into());
        kv.insert("object_size", d.object_size.to_string());
        kv.insert(
            "trajectory",
            if d.trajectory == Trajectory::Linear { "linear" } else { "sinusoidal" }.into(),
        );
        kv.insert("velocity", d.velocity.to_string());
        kv.insert("distractors", d.distractors.to_string());
        kv.insert("noise", d.noise.to_string());
        kv.insert("randomize", d.randomize.to_string());
        kv.insert("frames", self.frames.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
