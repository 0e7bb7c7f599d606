//! Optimization: learning-rate schedule, Adam, the training loop for every
//! regime, and checkpoints.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION};
pub use trainer::{token_accuracy, EpochRecord, Teacher, TrainOutcome, Trainer};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::BeamConfig;
use crate::distill::GateMode;
use crate::{io_err, Error, Result};

/// What a training run optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Negative log-likelihood of the gold target.
    Teacher,
    /// Cross-entropy against teacher distributions under the gold prefix.
    TokenKd,
    /// Negative log-likelihood of the teacher's beam output.
    SentenceKd,
    /// Gated mix of the two.
    Hybrid,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Teacher => "teacher",
            Regime::TokenKd => "token_kd",
            Regime::SentenceKd => "sentence_kd",
            Regime::Hybrid => "hybrid",
        }
    }

    pub fn needs_teacher(self) -> bool {
        self != Regime::Teacher
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Regime::Teacher),
            "token_kd" => Ok(Regime::TokenKd),
            "sentence_kd" => Ok(Regime::SentenceKd),
            "hybrid" => Ok(Regime::Hybrid),
            other => Err(Error::Config(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Micro-batches per optimizer step.
    pub accumulation_steps: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Padded tokens per micro-batch.
    pub token_budget: usize,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Keep this many teacher probabilities per position (renormalized).
    pub top_k: Option<usize>,
    pub gate_mode: GateMode,
    /// Initial gate logit.
    pub gate_init: f64,
    pub freeze_gate: bool,
    /// Beam used to produce pseudo-targets.
    pub beam_width: usize,
    pub length_penalty: f64,
    /// Dev sentences decoded after every epoch for model selection.
    pub dev_sentences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Teacher,
            base_lr: 5e-4,
            warmup_steps: 400,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            accumulation_steps: 4,
            max_epochs: 20,
            max_steps: None,
            token_budget: 2048,
            clip_norm: None,
            seed: 1,
            top_k: Some(64),
            gate_mode: GateMode::PooledLinear,
            gate_init: crate::distill::GATE_INIT_LOGIT,
            freeze_gate: false,
            beam_width: 4,
            length_penalty: 0.6,
            dev_sentences: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.accumulation_steps == 0 {
            return Err(Error::Config("accumulation_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam needs betas in [0, 1) and a positive epsilon".into()));
        }
        if self.token_budget == 0 {
            return Err(Error::Config("token_budget must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        self.beam().validate()
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            length_penalty: self.length_penalty,
            ..BeamConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "train config".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { detail, .. } => Error::Parse {
                path: path.display().to_string(),
                detail,
            },
            other => other,
        })
    }

    /// Fails for values TOML cannot hold, such as seeds above `i64::MAX`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot write config as TOML: {e}")))
    }
}

/// Inverse square-root schedule with linear warmup. Steps count from 1.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::Config("learning-rate steps count from 1".into()));
    }
    if warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    Ok(if step <= warmup_steps {
        base_lr * step as f64 / warmup_steps as f64
    } else {
        base_lr * (warmup_steps as f64 / step as f64).sqrt()
    })
}
