//! Experiment orchestration: method matrix, multi-step training, λ search
//! and report tables.

mod lambda;
mod report;
mod train;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::continual::GroupMask;
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::eval::coco_thresholds;
use crate::optim::DEFAULT_GRAD_NORM_LIMIT;
use crate::scenario::{ProtocolSpec, TaskProtocol};

pub use lambda::{continue_with_backoff, lambda_search, ExperimentProbe, LambdaSearch, Probe, QuadraticProbe};
pub use report::{emit_report, write_report, Report, SummaryRow};
pub use train::{
    continue_protocol, run_protocol, train_base, train_step, BaseState, Regularizer, RunRecord, StepRecord, TrainExample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "finetune")]
    Finetune,
    #[serde(rename = "finetune+pseudo")]
    FinetunePseudo,
    #[serde(rename = "ewc")]
    Ewc,
    #[serde(rename = "online-ewc")]
    OnlineEwc,
    #[serde(rename = "mas")]
    Mas,
    #[serde(rename = "incdet-huber")]
    IncdetHuber,
    #[serde(rename = "constrained-ewc")]
    ConstrainedEwc,
    #[serde(rename = "diode")]
    Diode,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Finetune,
        Method::FinetunePseudo,
        Method::Ewc,
        Method::OnlineEwc,
        Method::Mas,
        Method::IncdetHuber,
        Method::ConstrainedEwc,
        Method::Diode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Finetune => "finetune",
            Method::FinetunePseudo => "finetune+pseudo",
            Method::Ewc => "ewc",
            Method::OnlineEwc => "online-ewc",
            Method::Mas => "mas",
            Method::IncdetHuber => "incdet-huber",
            Method::ConstrainedEwc => "constrained-ewc",
            Method::Diode => "diode",
        }
    }

    pub fn spec(self) -> MethodSpec {
        let quad = |importance, anchors, mask| MethodSpec {
            importance: Some(importance),
            anchors,
            mask,
            penalty: PenaltyKind::Quadratic,
            pseudo: true,
            expand: false,
        };
        match self {
            Method::Finetune => MethodSpec { pseudo: false, ..MethodSpec::plain() },
            Method::FinetunePseudo => MethodSpec::plain(),
            Method::Ewc => quad(ImportanceKind::Fisher, AnchorMode::PerTask, GroupMask::all()),
            Method::OnlineEwc => quad(ImportanceKind::Fisher, AnchorMode::Online, GroupMask::all()),
            Method::Mas => quad(ImportanceKind::Mas, AnchorMode::Online, GroupMask::all()),
            Method::IncdetHuber => MethodSpec {
                penalty: PenaltyKind::Huber,
                ..quad(ImportanceKind::Fisher, AnchorMode::Online, GroupMask::all())
            },
            Method::ConstrainedEwc => quad(ImportanceKind::Fisher, AnchorMode::Online, GroupMask::feature_extractor()),
            Method::Diode => MethodSpec {
                expand: true,
                ..quad(ImportanceKind::Fisher, AnchorMode::Online, GroupMask::feature_extractor())
            },
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::usage(format!("unknown method `{s}`; expected one of {}", names.join(", ")))
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceKind {
    Fisher,
    Mas,
}

/// Per-task anchors keep one `(F_n, θ*_n)` pair per finished task; online
/// anchoring sums importances and keeps only the latest snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    PerTask,
    Online,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Quadratic,
    Huber,
}

/// The composable switches behind each method name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub importance: Option<ImportanceKind>,
    pub anchors: AnchorMode,
    pub mask: GroupMask,
    pub penalty: PenaltyKind,
    pub pseudo: bool,
    /// Dilatable adapters for every task from the second incremental step.
    pub expand: bool,
}

impl MethodSpec {
    fn plain() -> Self {
        MethodSpec {
            importance: None,
            anchors: AnchorMode::Online,
            mask: GroupMask::all(),
            penalty: PenaltyKind::Quadratic,
            pseudo: true,
            expand: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: ProtocolSpec,
    /// Load a corpus written by `gen-data` instead of generating `protocol`.
    pub data_dir: Option<PathBuf>,
    pub detector: DetectorConfig,
    pub method: Method,
    pub lambda: f64,
    pub lambda_grid: Vec<f64>,
    pub lr: f64,
    /// Fraction of a step after which the learning rate drops 10×.
    pub lr_decay_at: f64,
    pub momentum: f64,
    pub iterations: usize,
    /// Iterations of each incremental step; defaults to `iterations`.
    pub incremental_iterations: Option<usize>,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    pub pseudo_confidence: f64,
    pub pseudo_nms_iou: f64,
    /// Overrides the method's pseudo-annotation switch.
    pub pseudo: Option<bool>,
    /// Estimate importance on merged (ground truth + pseudo) labels.
    pub importance_on_pseudo: bool,
    pub importance_samples: usize,
    pub grad_norm_limit: f64,
    pub huber_clip: f64,
    /// Probe length as a fraction of the first incremental step.
    pub probe_fraction: f64,
    pub eval_thresholds: Vec<f64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            protocol: ProtocolSpec::default(),
            data_dir: None,
            detector: DetectorConfig::default(),
            method: Method::Diode,
            lambda: 1e3,
            lambda_grid: (0..=8).map(|k| 10f64.powi(k)).collect(),
            lr: 0.01,
            lr_decay_at: 0.75,
            momentum: 0.9,
            iterations: 2000,
            incremental_iterations: None,
            batch_size: 8,
            seeds: vec![0],
            pseudo_confidence: 0.5,
            pseudo_nms_iou: 0.5,
            pseudo: None,
            importance_on_pseudo: true,
            importance_samples: 256,
            grad_norm_limit: DEFAULT_GRAD_NORM_LIMIT,
            huber_clip: 1e4,
            probe_fraction: 0.1,
            eval_thresholds: coco_thresholds(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn method_spec(&self) -> MethodSpec {
        let mut spec = self.method.spec();
        if let Some(p) = self.pseudo {
            spec.pseudo = p;
        }
        spec
    }

    pub fn iterations_for(&self, step: usize) -> usize {
        if step == 0 {
            self.iterations
        } else {
            self.incremental_iterations.unwrap_or(self.iterations)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.protocol.validate()?;
        if self.protocol.scene.image_size != self.detector.image_size {
            return Err(Error::config("scene and detector image sizes differ"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.lr_decay_at) {
            return Err(Error::config("lr must be positive and lr_decay_at within [0,1]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0,1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and nonnegative"));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.importance_samples == 0 {
            return Err(Error::config("iterations, batch size and importance samples must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if !(self.pseudo_confidence > 0.0 && self.pseudo_confidence < 1.0) {
            return Err(Error::config("pseudo confidence must be in (0,1)"));
        }
        if !(self.probe_fraction > 0.0 && self.probe_fraction <= 1.0) {
            return Err(Error::config("probe fraction must be in (0,1]"));
        }
        if !(self.grad_norm_limit > 0.0) || !(self.huber_clip > 0.0) {
            return Err(Error::config("gradient limit and clip must be positive"));
        }
        Ok(())
    }

    /// Generates or loads the corpus this experiment trains on.
    pub fn materialize(&self) -> Result<TaskProtocol> {
        let p = match &self.data_dir {
            Some(dir) => TaskProtocol::load(dir)?,
            None => TaskProtocol::build(&self.protocol)?,
        };
        if p.spec.scene.image_size != self.detector.image_size {
            return Err(Error::config("dataset and detector image sizes differ"));
        }
        Ok(p)
    }
}
