use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Base continual-learning method the plugins extend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Herding replay, cross-entropy only.
    Replay,
    /// Logit distillation without a buffer.
    Distill,
    /// Herding replay plus logit distillation.
    ReplayDistill,
}

impl Method {
    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Replay | Method::ReplayDistill)
    }

    pub fn uses_distillation(self) -> bool {
        matches!(self, Method::Distill | Method::ReplayDistill)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Replay => "replay",
            Method::Distill => "distill",
            Method::ReplayDistill => "replay+distill",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replay" => Ok(Method::Replay),
            "distill" => Ok(Method::Distill),
            "replay+distill" => Ok(Method::ReplayDistill),
            other => Err(Error::Config(format!(
                "unknown method '{other}' (expected replay, distill or replay+distill)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdVariant {
    Ce,
    Kl,
}

impl fmt::Display for KdVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KdVariant::Ce => "ce",
            KdVariant::Kl => "kl",
        })
    }
}

impl FromStr for KdVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(KdVariant::Ce),
            "kl" => Ok(KdVariant::Kl),
            other => Err(Error::Config(format!("unknown distillation variant '{other}' (expected ce or kl)"))),
        }
    }
}

/// Hyperparameters of one learner.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub dlc: bool,
    pub gate: bool,
    pub seed: u64,

    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    /// Epochs at which the phase-1 rate is multiplied by `lr_gamma`.
    pub milestones: Vec<usize>,
    pub lr_gamma: f32,

    pub phase2_epochs: usize,
    pub phase2_lr: f32,

    pub kd: KdVariant,
    pub tau: f32,
    pub lambda_ce: f32,
    pub lambda_mem: f32,
    pub lambda_aux: f32,
    pub lambda_ia: f32,

    pub buffer_capacity: usize,
    /// `None` picks 8 or 16 from the tapped layer's width.
    pub rank: Option<usize>,
    /// `None` means `α = r`.
    pub alpha: Option<f32>,
    pub k_plugins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let epochs = 10;
        Self {
            method: Method::ReplayDistill,
            dlc: true,
            gate: true,
            seed: 0,
            epochs,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            milestones: vec![epochs / 2, epochs * 3 / 4],
            lr_gamma: 0.1,
            phase2_epochs: phase2_epochs_for(epochs),
            phase2_lr: 0.01,
            kd: KdVariant::Kl,
            tau: 2.0,
            lambda_ce: 1.0,
            lambda_mem: 1.0,
            lambda_aux: 1.0,
            lambda_ia: 1.0,
            buffer_capacity: 2000,
            rank: None,
            alpha: None,
            k_plugins: 1,
        }
    }
}

/// Default phase-2 length: a fifth of phase 1, at least one epoch.
pub fn phase2_epochs_for(phase1_epochs: usize) -> usize {
    (phase1_epochs / 5).max(1)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("phase2_epochs", self.phase2_epochs),
            ("k_plugins", self.k_plugins),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr", self.lr), ("phase2_lr", self.phase2_lr), ("tau", self.tau)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.rank == Some(0) {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    /// The gate only exists on top of plugins.
    pub fn gate_enabled(&self) -> bool {
        self.dlc && self.gate
    }
}
