//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::cell::Variant;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Random intra- and inter-clip strides per episode.
    LongShort,
    /// Consecutive frames, random start.
    Fixed,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long_short" | "long-short" => Ok(SamplingMode::LongShort),
            "fixed" => Ok(SamplingMode::Fixed),
            other => Err(Error::Invalid(format!("unknown sampling mode '{other}'"))),
        }
    }
}

impl SamplingMode {
    fn name(self) -> &'static str {
        match self {
            SamplingMode::LongShort => "long_short",
            SamplingMode::Fixed => "fixed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub share_gates: bool,
    pub norm: bool,
    pub stem_channels: usize,
    pub hidden_channels: usize,
    pub fusion_weight: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Unrolled steps, one clip per step.
    pub steps: usize,
    pub clip_frames: usize,
    pub crop: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub eval_every: usize,
    pub eval_strides: Vec<usize>,
    pub patience: usize,
    /// Required validation gain, in accuracy points.
    pub min_improvement: f64,
    pub decay_factor: f64,
    pub max_decays: usize,
    /// Freeze the stems until the first learning-rate decay.
    pub two_step: bool,
    pub sampling: SamplingMode,
    pub flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::L2stm,
            share_gates: true,
            norm: true,
            stem_channels: 16,
            hidden_channels: 32,
            fusion_weight: 0.5,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 5.0,
            steps: 8,
            clip_frames: 5,
            crop: 14,
            batch_size: 4,
            iterations: 2000,
            eval_every: 50,
            eval_strides: vec![1, 2, 4],
            patience: 5,
            min_improvement: 0.2,
            decay_factor: 0.1,
            max_decays: 2,
            two_step: true,
            sampling: SamplingMode::LongShort,
            flip: true,
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Invalid(format!("bad value '{value}' for key '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Invalid(format!("bad boolean '{value}' for key '{key}'"))),
    }
}

impl TrainConfig {
    /// Every recognized key, in file order.
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "share_gates",
        "norm",
        "stem_channels",
        "hidden_channels",
        "fusion_weight",
        "lr",
        "momentum",
        "weight_decay",
        "clip_norm",
        "steps",
        "clip_frames",
        "crop",
        "batch_size",
        "iterations",
        "eval_every",
        "eval_strides",
        "patience",
        "min_improvement",
        "decay_factor",
        "max_decays",
        "two_step",
        "sampling",
        "flip",
        "seed",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "variant" => self.variant = parse(key, v)?,
            "share_gates" => self.share_gates = parse_bool(key, v)?,
            "norm" => self.norm = parse_bool(key, v)?,
            "stem_channels" => self.stem_channels = parse(key, v)?,
            "hidden_channels" => self.hidden_channels = parse(key, v)?,
            "fusion_weight" => self.fusion_weight = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "clip_frames" => self.clip_frames = parse(key, v)?,
            "crop" => self.crop = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_strides" => {
                self.eval_strides = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?;
            }
            "patience" => self.patience = parse(key, v)?,
            "min_improvement" => self.min_improvement = parse(key, v)?,
            "decay_factor" => self.decay_factor = parse(key, v)?,
            "max_decays" => self.max_decays = parse(key, v)?,
            "two_step" => self.two_step = parse_bool(key, v)?,
            "sampling" => self.sampling = parse(key, v)?,
            "flip" => self.flip = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            other => return Err(Error::Invalid(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines over the current values. Blank lines and
    /// `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Invalid(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn to_text(&self) -> String {
        let strides: Vec<String> = self.eval_strides.iter().map(usize::to_string).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        put("variant", self.variant.to_string());
        put("share_gates", self.share_gates.to_string());
        put("norm", self.norm.to_string());
        put("stem_channels", self.stem_channels.to_string());
        put("hidden_channels", self.hidden_channels.to_string());
        put("fusion_weight", self.fusion_weight.to_string());
        put("lr", self.lr.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("clip_norm", self.clip_norm.to_string());
        put("steps", self.steps.to_string());
        put("clip_frames", self.clip_frames.to_string());
        put("crop", self.crop.to_string());
        put("batch_size", self.batch_size.to_string());
        put("iterations", self.iterations.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_strides", strides.join(","));
        put("patience", self.patience.to_string());
        put("min_improvement", self.min_improvement.to_string());
        put("decay_factor", self.decay_factor.to_string());
        put("max_decays", self.max_decays.to_string());
        put("two_step", self.two_step.to_string());
        put("sampling", self.sampling.name().to_string());
        put("flip", self.flip.to_string());
        put("seed", self.seed.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stem_channels", self.stem_channels),
            ("hidden_channels", self.hidden_channels),
            ("steps", self.steps),
            ("clip_frames", self.clip_frames),
            ("crop", self.crop),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{k} must be positive")));
        }
        let rates = [
            ("lr", self.lr),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
            ("decay_factor", self.decay_factor),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!("{k} = {v} must be finite and non-negative")));
        }
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Invalid(format!("fusion_weight {} outside [0, 1]", self.fusion_weight)));
        }
        if !self.crop.is_multiple_of(2) {
            return Err(Error::Invalid(format!("crop {} must be even", self.crop)));
        }
        if self.eval_strides.is_empty() || self.eval_strides.contains(&0) {
            return Err(Error::Invalid("eval_strides must be a non-empty list of positive strides".into()));
        }
        Ok(())
    }
}
