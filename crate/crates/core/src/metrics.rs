//! Classification metrics for goal prediction: accuracy, macro-averaged
//! precision/recall/F1 from per-class confusion tallies, and the
//! dialog-leading success rate (LS) — the fraction of predictions that hit
//! the dialog's final recommendation goal.
//!
//! Macro averaging runs over the classes present in labels ∪ predictions, and
//! a class with a zero denominator contributes 0 to its metric. Both
//! conventions are results-visible and therefore configurable via
//! [`MetricsConfig`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AdjacencyMatrix, TrainingInstance};
use crate::model::{self, DhlModelParams, ModelConfig, ModelError, LEVEL_NAMES};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("predictions and labels have different lengths: {predictions} vs {labels}")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("empty input")]
    Empty,
    #[error("class id {id} out of range for {n} classes")]
    ClassOutOfRange { id: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a class with no predictions (P) or no instances (R) contributes to the
/// macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ZeroDenominator {
    /// Contribute 0; penalizes degenerate predictors.
    #[default]
    CountsAsZero,
    /// Drop the class from that metric's average.
    Exclude,
}

/// Which classes enter the macro average.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassAveraging {
    /// Classes appearing in labels ∪ predictions of the evaluated split.
    #[default]
    Present,
    /// Every class of the vocabulary.
    FullVocabulary,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub zero_denominator: ZeroDenominator,
    pub averaging: ClassAveraging,
}

/// Per-class confusion counts.
#[derive(Debug, Clone)]
pub struct ConfusionTally {
    pub n_classes: usize,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
    /// Classes appearing in labels or predictions.
    pub present: Vec<bool>,
    pub correct: usize,
    pub total: usize,
}

impl ConfusionTally {
    pub fn from_pairs(
        predictions: &[usize],
        labels: &[usize],
        n_classes: usize,
    ) -> Result<Self, MetricsError> {
        if predictions.len() != labels.len() {
            return Err(MetricsError::LengthMismatch {
                predictions: predictions.len(),
                labels: labels.len(),
            });
        }
        if predictions.is_empty() {
            return Err(MetricsError::Empty);
        }
        let mut tally = ConfusionTally {
            n_classes,
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            present: vec![false; n_classes],
            correct: 0,
            total: 0,
        };
        for (&p, &l) in predictions.iter().zip(labels) {
            for id in [p, l] {
                if id >= n_classes {
                    return Err(MetricsError::ClassOutOfRange { id, n: n_classes });
                }
            }
            tally.present[p] = true;
            tally.present[l] = true;
            tally.total += 1;
            if p == l {
                tally.correct += 1;
                tally.tp[p] += 1;
            } else {
                tally.fp[p] += 1;
                tally.fn_[l] += 1;
            }
        }
        Ok(tally)
    }

    /// Merge another tally into this one; tallies are commutative sums, so
    /// sharded evaluation is order-independent.
    pub fn merge(&mut self, other: &ConfusionTally) {
        assert_eq!(self.n_classes, other.n_classes);
        for c in 0..self.n_classes {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
            self.present[c] |= other.present[c];
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    /// Macro precision, recall, and F1 under the given conventions. Macro-F1
    /// is the mean of per-class F1 values, not the harmonic mean of the
    /// macro-averaged precision and recall.
    pub fn macro_metrics(&self, config: &MetricsConfig) -> (f64, f64, f64) {
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        for c in 0..self.n_classes {
            let in_scope = match config.averaging {
                ClassAveraging::Present => self.present[c],
                ClassAveraging::FullVocabulary => true,
            };
            if !in_scope {
                continue;
            }
            let (tp, fp, fnn) = (self.tp[c] as f64, self.fp[c] as f64, self.fn_[c] as f64);
            let precision = if tp + fp > 0.0 { Some(tp / (tp + fp)) } else { None };
            let recall = if tp + fnn > 0.0 { Some(tp / (tp + fnn)) } else { None };
            let f1 = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            for (slot, value) in [precision, recall, f1].into_iter().enumerate() {
                match (value, config.zero_denominator) {
                    (Some(v), _) => {
                        sums[slot] += v;
                        counts[slot] += 1;
                    }
                    (None, ZeroDenominator::CountsAsZero) => counts[slot] += 1,
                    (None, ZeroDenominator::Exclude) => {}
                }
            }
        }
        let avg = |i: usize| if counts[i] > 0 { sums[i] / counts[i] as f64 } else { 0.0 };
        (avg(0), avg(1), avg(2))
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Metric bundle for one goal level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub level: String,
    pub acc: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Dialog-leading success rate; present for the entity level only.
    pub ls: Option<f64>,
    pub n_instances: usize,
}

/// Accuracy plus macro precision/recall/F1 under the default conventions.
pub fn compute_metrics(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricsReport, MetricsError> {
    compute_metrics_with(predictions, labels, n_classes, &MetricsConfig::default())
}

pub fn compute_metrics_with(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
    config: &MetricsConfig,
) -> Result<MetricsReport, MetricsError> {
    let tally = ConfusionTally::from_pairs(predictions, labels, n_classes)?;
    let (macro_precision, macro_recall, macro_f1) = tally.macro_metrics(config);
    Ok(MetricsReport {
        level: String::new(),
        acc: tally.accuracy(),
        macro_precision,
        macro_recall,
        macro_f1,
        ls: None,
        n_instances: tally.total,
    })
}

/// Fraction of predictions equal to their dialog's final goal.
pub fn leading_success(
    entity_predictions: &[usize],
    final_goals: &[usize],
) -> Result<f64, MetricsError> {
    if entity_predictions.len() != final_goals.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: entity_predictions.len(),
            labels: final_goals.len(),
        });
    }
    if entity_predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = entity_predictions
        .iter()
        .zip(final_goals)
        .filter(|(p, f)| p == f)
        .count();
    Ok(hits as f64 / entity_predictions.len() as f64)
}

/// Model-free baselines for [`evaluate_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    /// Run the model.
    None,
    /// Predict each level's last prefix element.
    Next,
}

/// Per-level prediction metrics over expanded instances. The entity-level
/// report carries LS. `params` may be absent for the Next baseline.
pub fn evaluate_model(
    params: Option<&DhlModelParams>,
    config: &ModelConfig,
    instances: &[TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    baseline: Baseline,
) -> Result<Vec<MetricsReport>, MetricsError> {
    evaluate_model_with(
        params,
        config,
        instances,
        adjacency,
        baseline,
        &MetricsConfig::default(),
    )
}

pub fn evaluate_model_with(
    params: Option<&DhlModelParams>,
    config: &ModelConfig,
    instances: &[TrainingInstance],
    adjacency: &[AdjacencyMatrix],
    baseline: Baseline,
    metrics_config: &MetricsConfig,
) -> Result<Vec<MetricsReport>, MetricsError> {
    if instances.is_empty() {
        return Err(MetricsError::Empty);
    }
    let levels = config.levels;
    for inst in instances {
        if inst.prefixes.len() != levels {
            return Err(ModelError::LevelMismatch {
                got: inst.prefixes.len(),
                expected: levels,
            }
            .into());
        }
    }

    let mut predictions: Vec<Vec<usize>> = vec![Vec::with_capacity(instances.len()); levels];
    match baseline {
        Baseline::Next => {
            for inst in instances {
                for level in 0..levels {
                    predictions[level].push(*inst.prefixes[level].last().unwrap());
                }
            }
        }
        Baseline::None => {
            let params = params.ok_or_else(|| {
                MetricsError::Model(ModelError::InvalidConfig(
                    "model evaluation requires parameters".into(),
                ))
            })?;
            // chunked so each throwaway tape stays small
            for chunk in instances.chunks(128) {
                let mut tape = Tape::new();
                let staged = model::stage_model(&mut tape, params, adjacency)?;
                for inst in chunk {
                    let trace =
                        model::forward_staged(&mut tape, &staged, config, &inst.prefixes)?;
                    for level in 0..levels {
                        predictions[level].push(model::predict_next(&trace, level));
                    }
                }
            }
        }
    }

    let mut reports = Vec::with_capacity(levels);
    for level in 0..levels {
        let labels: Vec<usize> = instances.iter().map(|i| i.targets[level]).collect();
        let mut report = compute_metrics_with(
            &predictions[level],
            &labels,
            config.vocab_sizes[level],
            metrics_config,
        )?;
        report.level = LEVEL_NAMES[level].to_string();
        if level == 1 {
            let finals: Vec<usize> = instances.iter().map(|i| i.finals[1]).collect();
            report.ls = Some(leading_success(&predictions[1], &finals)?);
        }
        reports.push(report);
    }
    Ok(reports)
}
