//! The self-supervised objective and pretraining loop.

mod check;
mod heads;
mod losses;
mod optim;
mod train;

pub use check::ObjectiveCheck;
pub use heads::{
    build_temporal_batch, draw_shuffles, expander_var, init_expander, init_temporal_head, order_label,
    temporal_logits, update_running_stats, BatchStats, EXPANDER, PERMUTATIONS, TEMPORAL_HEAD,
};
pub use losses::{
    covariance_loss, covariance_var, invariance_loss, invariance_var, temporal_bce_var, temporal_loss,
    variance_loss, variance_var, LOG_EPS, VARIANCE_EPS,
};
pub use optim::{learning_rate, Adam, Optimizer, Sgd};
pub use train::{
    checkpoint_name, encode_images, init_model, pretrain, step_loss, temporal_order_accuracy, tov_vicreg_step, LogRow,
    PretrainOutput, Sidecar, StepBatch, StepVars, ENCODER, LOSS_LOG_FILE, SIDECAR_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adamw" => Ok(Self::Adamw),
            other => Err(Error::config("ssl.optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Objective weights, expander shape and optimization schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    pub inv_coef: f64,
    pub var_coef: f64,
    pub cov_coef: f64,
    pub temp_coef: f64,
    /// Target standard deviation of the variance hinge.
    pub gamma: f64,
    pub expander_dims: Vec<usize>,
    /// Peak learning rate per 256 samples.
    pub base_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// SGD momentum.
    pub momentum: f64,
    /// Per-layer trust ratio on top of SGD.
    pub lars: bool,
    pub lars_eta: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// When false every view is the plain (resized) frame.
    pub augment: bool,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            inv_coef: 25.0,
            var_coef: 25.0,
            cov_coef: 10.0,
            temp_coef: 0.1,
            gamma: 1.0,
            expander_dims: vec![1024, 1024, 1024],
            base_lr: 0.6,
            final_lr: 1e-6,
            weight_decay: 1e-6,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            lars: false,
            lars_eta: 0.001,
            epochs: 10,
            warmup_epochs: 2,
            batch_size: 64,
            augment: true,
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("ssl.inv_coef", self.inv_coef),
            ("ssl.var_coef", self.var_coef),
            ("ssl.cov_coef", self.cov_coef),
            ("ssl.temp_coef", self.temp_coef),
            ("ssl.base_lr", self.base_lr),
            ("ssl.final_lr", self.final_lr),
            ("ssl.weight_decay", self.weight_decay),
            ("ssl.lars_eta", self.lars_eta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("must be a finite value ≥ 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("ssl.gamma", format!("must be > 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("ssl.momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if self.expander_dims.is_empty() || self.expander_dims.contains(&0) {
            return Err(Error::config("ssl.expander_dims", "need at least one positive width"));
        }
        if self.epochs == 0 {
            return Err(Error::config("ssl.epochs", "must be ≥ 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("ssl.warmup_epochs", "cannot exceed ssl.epochs"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("ssl.batch_size", "must be ≥ 2"));
        }
        Ok(())
    }

    /// Peak learning rate after batch scaling.
    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Loss components of one step and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
    pub temporal: f64,
    pub total: f64,
}

impl LossReport {
    /// Builds a report whose `total` is `λ·inv + μ·var + ν·cov + τ·temp`
    /// evaluated left to right.
    pub fn new(cfg: &SslConfig, invariance: f64, variance: f64, covariance: f64, temporal: f64) -> Self {
        let total = cfg.inv_coef * invariance
            + cfg.var_coef * variance
            + cfg.cov_coef * covariance
            + cfg.temp_coef * temporal;
        Self {
            invariance,
            variance,
            covariance,
            temporal,
            total,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.invariance, self.variance, self.covariance, self.temporal, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}
