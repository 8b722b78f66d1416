//! Flat TOML run configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BottleneckKind, CodebookMode, EncoderConfig, EncoderKind, ModelConfig};
use crate::quantizer::{CodebookShape, Metric, VqLossConfig};
use crate::train::{AdamConfig, ClassifierConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,

    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub encoder: EncoderKind,
    pub heads: usize,
    pub n_sub_encoders: usize,
    pub bottleneck: BottleneckKind,
    pub codebook_size: usize,
    pub metric: Metric,
    pub beta: f64,
    pub alpha: f64,
    pub codebook_mode: CodebookMode,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    pub gumbel_tau: f64,
    pub gumbel_hard: bool,

    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropconnect_rate: f64,
    pub clip_threshold: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub labeled_fraction: f64,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            checkpoint: None,
            log: None,
            test_fraction: 0.2,
            split_seed: 0,
            vocab_size: 32,
            max_len: 16,
            d_model: 32,
            encoder: EncoderKind::Transformer,
            heads: 4,
            n_sub_encoders: 2,
            bottleneck: BottleneckKind::Dvq,
            codebook_size: 256,
            metric: Metric::L1,
            beta: 0.25,
            alpha: 1.0,
            codebook_mode: CodebookMode::Ema,
            ema_decay: 0.99,
            laplace_eps: 1e-5,
            gumbel_tau: 1.0,
            gumbel_hard: false,
            lr: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            dropconnect_rate: 0.1,
            clip_threshold: 1.0,
            epochs: 20,
            batch_size: 8,
            seed: 0,
            labeled_fraction: 1.0,
            classifier_lr: 1e-2,
            classifier_epochs: 100,
            classifier_batch_size: 32,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msgs) => {
                Error::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect())
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Checks every field and reports all failures at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        let unit_open = |x: f64| (0.0..1.0).contains(&x);
        check(
            unit_open(self.test_fraction),
            format!("test_fraction must be in [0, 1), got {}", self.test_fraction),
        );
        check(
            self.vocab_size >= 3,
            format!("vocab_size must be >= 3, got {}", self.vocab_size),
        );
        check(self.max_len >= 1, "max_len must be >= 1".into());
        check(self.d_model >= 1, "d_model must be >= 1".into());
        if self.encoder == EncoderKind::Transformer {
            check(
                self.heads >= 1 && self.d_model.is_multiple_of(self.heads),
                format!("d_model {} must be divisible by heads {}", self.d_model, self.heads),
            );
        }
        check(
            self.n_sub_encoders >= 1 && self.d_model.is_multiple_of(self.n_sub_encoders.max(1)),
            format!(
                "d_model {} must be divisible by n_sub_encoders {}",
                self.d_model, self.n_sub_encoders
            ),
        );
        match self.bottleneck {
            BottleneckKind::Dvq => {
                if let Err(e) = CodebookShape::new(self.codebook_size, self.n_sub_encoders, self.d_model) {
                    check(false, format!("codebook: {e}"));
                }
            }
            BottleneckKind::Vq => {
                if let Err(e) = CodebookShape::new(self.codebook_size, 1, self.d_model) {
                    check(false, format!("codebook: {e}"));
                }
            }
            BottleneckKind::Gumbel => check(self.codebook_size >= 2, "codebook_size must be >= 2".into()),
            BottleneckKind::Semhash => {}
        }
        check(
            self.beta >= 0.0 && self.beta.is_finite(),
            format!("beta must be >= 0, got {}", self.beta),
        );
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            format!("alpha must be >= 0, got {}", self.alpha),
        );
        check(
            unit_open(self.ema_decay),
            format!("ema_decay must be in [0, 1), got {}", self.ema_decay),
        );
        check(
            self.laplace_eps >= 0.0,
            format!("laplace_eps must be >= 0, got {}", self.laplace_eps),
        );
        check(
            self.gumbel_tau > 0.0,
            format!("gumbel_tau must be > 0, got {}", self.gumbel_tau),
        );
        check(
            self.lr > 0.0 && self.lr.is_finite(),
            format!("lr must be > 0, got {}", self.lr),
        );
        check(
            unit_open(self.adam_beta1),
            format!("adam_beta1 must be in [0, 1), got {}", self.adam_beta1),
        );
        check(
            unit_open(self.adam_beta2),
            format!("adam_beta2 must be in [0, 1), got {}", self.adam_beta2),
        );
        check(
            self.adam_eps > 0.0,
            format!("adam_eps must be > 0, got {}", self.adam_eps),
        );
        check(
            unit_open(self.dropconnect_rate),
            format!("dropconnect_rate must be in [0, 1), got {}", self.dropconnect_rate),
        );
        check(
            self.clip_threshold > 0.0,
            format!("clip_threshold must be > 0, got {}", self.clip_threshold),
        );
        check(self.epochs >= 1, "epochs must be >= 1".into());
        check(self.batch_size >= 1, "batch_size must be >= 1".into());
        check(
            self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0,
            format!("labeled_fraction must be in (0, 1], got {}", self.labeled_fraction),
        );
        check(
            self.classifier_lr > 0.0 && self.classifier_lr.is_finite(),
            format!("classifier_lr must be > 0, got {}", self.classifier_lr),
        );
        check(self.classifier_epochs >= 1, "classifier_epochs must be >= 1".into());
        check(
            self.classifier_batch_size >= 1,
            "classifier_batch_size must be >= 1".into(),
        );
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                vocab_size: self.vocab_size,
                max_len: self.max_len,
                d_model: self.d_model,
                kind: self.encoder,
                heads: self.heads,
                n_sub_encoders: self.n_sub_encoders,
            },
            bottleneck: self.bottleneck,
            codebook_size: self.codebook_size,
            vq: VqLossConfig {
                beta: self.beta,
                alpha: self.alpha,
                metric: self.metric,
            },
            codebook_mode: self.codebook_mode,
            ema_decay: self.ema_decay,
            laplace_eps: self.laplace_eps,
            gumbel_tau: self.gumbel_tau,
            gumbel_hard: self.gumbel_hard,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            adam: AdamConfig {
                lr: self.lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            dropconnect_rate: self.dropconnect_rate,
            clip_threshold: self.clip_threshold,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }

    pub fn classifier_config(&self) -> ClassifierConfig {
        ClassifierConfig {
            adam: AdamConfig {
                lr: self.classifier_lr,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch_size,
            seed: self.seed,
        }
    }
}
