//! Pre-training, environment adaptation, evaluation and the experiment
//! suites built on them.

mod data;
mod eval;
mod experiments;
mod report;
mod train;

pub use data::{predict, prepare_env, EnvData, FrozenOutputs, SplitData};
pub use eval::{
    env_metrics, evaluate, evaluate_predictions, EnvMetrics, EvalReport, EvalSubject, Oracle,
};
pub use experiments::{
    alpha_sweep, convergence_cdf, lam_ckpt_name, mode_comparison, reference_ablation,
    sam_ckpt_name, sample_efficiency, size_sweep, suite_codec, suite_datasets, suite_env_dataset,
    AblationPair, AblationTable, AlphaSweep, CdfRow, CdfTable, ConvergenceFlag, Lab, ModeRow,
    ModeTable, RunSpec, SampleRow, SampleTable, SizeRow, SizeTable, SizedSam, Stage, SuiteConfig,
    DESK_PRETRAIN_EPOCHS,
};
pub use report::{
    run_trace_path, write_report_csv, write_run_trace, write_runs_csv, write_summary_json,
    ExperimentSummary,
};
pub use train::{
    adapt, mode_label, pretrain, pretrain_model, stopping_epoch, AdaptReport, AdaptSetup,
    EarlyStopper, PretrainReport, TrainTrace,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chansim::ChanSimError;
use crate::collab::CollabError;
use crate::feedback::FeedbackError;
use crate::models::ModelError;
use crate::nncore::{NnError, ScheduleKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Missing(String),
    #[error("{what} diverged at epoch {epoch}")]
    Diverged { what: String, epoch: u64 },
    #[error("split/codec mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Data(#[from] ChanSimError),
    #[error(transparent)]
    Feedback(#[from] FeedbackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Collab(#[from] CollabError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Numerical failures (as opposed to configuration or I/O problems).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            HarnessError::Diverged { .. }
                | HarnessError::Nn(NnError::NonFinite { .. })
                | HarnessError::Model(ModelError::Nn(NnError::NonFinite { .. }))
                | HarnessError::Collab(CollabError::Model(ModelError::Nn(
                    NnError::NonFinite { .. }
                )))
        )
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: u64,
    pub warmup_fraction: f64,
    pub schedule: ScheduleKind,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub patience: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl TrainConfig {
    /// Warmup-cosine pre-training, 0 -> 1e-3 -> 1e-5 with 5% warmup.
    pub fn pretrain(max_epochs: u64) -> Self {
        Self {
            batch_size: 256,
            max_epochs,
            warmup_fraction: 0.05,
            schedule: ScheduleKind::WarmupCosine,
            lr_init: 0.0,
            lr_peak: 1e-3,
            lr_final: 1e-5,
            patience: max_epochs.max(1),
            weight_decay: 0.01,
            seed: 0,
            precision: Precision::F32,
        }
    }

    /// Constant 1e-3, early exit after 20 stale epochs, at most 100 epochs.
    pub fn adapt() -> Self {
        Self {
            batch_size: 256,
            max_epochs: 100,
            warmup_fraction: 0.0,
            schedule: ScheduleKind::Constant,
            lr_init: 1e-3,
            lr_peak: 1e-3,
            lr_final: 1e-3,
            patience: 20,
            weight_decay: 0.01,
            seed: 0,
            precision: Precision::F32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(0.0..=0.5).contains(&self.warmup_fraction) {
            return bad(format!(
                "warmup_fraction {} outside [0, 0.5]",
                self.warmup_fraction
            ));
        }
        for (name, v) in [
            ("lr_init", self.lr_init),
            ("lr_peak", self.lr_peak),
            ("lr_final", self.lr_final),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}
