//! Self-training adaptation: train a source detector, then repeatedly
//! auto-annotate target images with the current model, pair the resulting
//! positives with source negatives, and update a copy of the model under the
//! combined loss against the frozen source stream.

mod classification;
mod detection;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use classification::{
    classification_pseudo_labels, run_classification_adaptation, train_classifier_source,
    ClassAdaptConfig, ClassAdaptResult, ClassPseudoLabel, ClassSetting,
};
pub use detection::{
    adapt_iteration, auto_annotate, pseudo_label_centers, run_adaptation, sample_negatives,
    train_source, AdaptRun, DetectionData, IterationOutcome, PseudoLabel, SourcePool,
    SourceTrainConfig,
};

use crate::detector::SweepConfig;
use crate::error::{Error, Result};
use crate::eval::MatchPolicy;
use crate::losses::{LossConfig, RegularizerSite};

/// The five compared training objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MethodVariant {
    /// The source model, never updated.
    SourceOnly,
    /// Target pseudo-labels only.
    TargetOnly,
    TargetPlusEwm,
    /// Pseudo-labels and source negatives, regularized on the feature vector.
    MixedPlusFv,
    MixedPlusEwm,
}

impl MethodVariant {
    pub const ALL: [MethodVariant; 5] = [
        MethodVariant::SourceOnly,
        MethodVariant::TargetOnly,
        MethodVariant::TargetPlusEwm,
        MethodVariant::MixedPlusFv,
        MethodVariant::MixedPlusEwm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodVariant::SourceOnly => "SourceOnly",
            MethodVariant::TargetOnly => "TargetOnly",
            MethodVariant::TargetPlusEwm => "TargetPlusEwm",
            MethodVariant::MixedPlusFv => "MixedPlusFv",
            MethodVariant::MixedPlusEwm => "MixedPlusEwm",
        }
    }

    pub fn trains(self) -> bool {
        self != MethodVariant::SourceOnly
    }

    pub fn uses_negatives(self) -> bool {
        matches!(self, MethodVariant::MixedPlusFv | MethodVariant::MixedPlusEwm)
    }

    pub fn site(self) -> RegularizerSite {
        match self {
            MethodVariant::SourceOnly | MethodVariant::TargetOnly => RegularizerSite::None,
            MethodVariant::TargetPlusEwm | MethodVariant::MixedPlusEwm => RegularizerSite::Ewm,
            MethodVariant::MixedPlusFv => RegularizerSite::FeatureVector,
        }
    }
}

impl std::str::FromStr for MethodVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodVariant::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// What the two streams see when the regularizer is evaluated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerInput {
    /// Both models see random sweep windows of their own domain.
    #[default]
    SweepWindows,
    /// The target model sees the step's training batch; the source model
    /// sees source windows carrying the same label.
    TrainingBatch,
}

/// How pseudo-positives and source negatives share SGD steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMix {
    /// Even steps take a positive batch, odd steps a negative batch.
    #[default]
    Alternate,
    /// Every step takes one batch of each.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub n_iterations: usize,
    pub tau_annotate: f64,
    pub tau_gate: f64,
    pub alpha: f64,
    pub method: MethodVariant,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub target_images_per_iter: usize,
    pub source_images_per_iter: usize,
    /// Overrides the variant's regularizer placement when set.
    pub site_override: Option<RegularizerSite>,
    pub regularizer_input: RegularizerInput,
    pub step_mix: StepMix,
    pub sweep: SweepConfig,
    pub eval_thresholds: usize,
    pub match_policy: MatchPolicy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            n_iterations: 5,
            tau_annotate: 0.8,
            tau_gate: 0.8,
            alpha: 0.8,
            method: MethodVariant::MixedPlusEwm,
            steps_per_iteration: 100,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 0,
            target_images_per_iter: 100,
            source_images_per_iter: 1000,
            site_override: None,
            regularizer_input: RegularizerInput::default(),
            step_mix: StepMix::default(),
            sweep: SweepConfig::default(),
            eval_thresholds: 101,
            match_policy: MatchPolicy::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if self.n_iterations == 0
            || self.steps_per_iteration == 0
            || self.batch_size == 0
            || self.target_images_per_iter == 0
            || self.source_images_per_iter == 0
        {
            return Err(Error::Config("iteration, step, batch and image counts must be positive".into()));
        }
        if !unit(self.tau_annotate) || !unit(self.tau_gate) {
            return Err(Error::Config("thresholds must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.alpha >= 0.0) {
            return Err(Error::Config("learning_rate must be positive and alpha non-negative".into()));
        }
        if self.eval_thresholds < 2 {
            return Err(Error::Config("eval_thresholds must be at least 2".into()));
        }
        self.sweep.validate()
    }

    pub fn site(&self) -> RegularizerSite {
        self.site_override.unwrap_or(self.method.site())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            tau_gate: self.tau_gate,
            site: self.site(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub n_pseudo: usize,
    /// Fraction of pseudo-labels matching hidden ground truth; `None` when
    /// there are none.
    pub pseudo_precision: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub loss_s: f64,
    pub loss_u: f64,
    /// Set when no pseudo-labels were produced, so the target term was skipped.
    pub no_pseudo_labels: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptHistory {
    pub records: Vec<IterationRecord>,
}

impl AdaptHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,n_pseudo,pseudo_precision,precision,recall,f1,loss_s,loss_u\n");
        for r in &self.records {
            let pp = r.pseudo_precision.map_or(String::new(), |v| format!("{v:.6}"));
            writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.iteration, r.n_pseudo, pp, r.precision, r.recall, r.f1, r.loss_s, r.loss_u
            )
            .unwrap();
        }
        s
    }
}
