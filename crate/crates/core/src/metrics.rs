//! Precision, recall and F1 over per-timestep key comparisons.

use crate::keys::KeySet;
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign};

/// True/false positive and false negative key counts, summed over timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EpisodeCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl EpisodeCounts {
    pub fn of_step(pressed: KeySet, targets: KeySet) -> Self {
        EpisodeCounts {
            tp: pressed.intersection(targets).len() as u64,
            fp: pressed.difference(targets).len() as u64,
            fn_: targets.difference(pressed).len() as u64,
        }
    }

    pub fn accumulate(self, pressed: KeySet, targets: KeySet) -> Self {
        self + Self::of_step(pressed, targets)
    }

    pub fn finalize(self) -> Scores {
        Scores::from_counts(self.tp, self.fp, self.fn_)
    }
}

impl Add for EpisodeCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        EpisodeCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for EpisodeCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Scores {
    /// Zero denominators count as a perfect score for that metric.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Scores { precision, recall, f1: harmonic_f1(precision, recall) }
    }
}

pub fn harmonic_f1(precision: f64, recall: f64) -> f64 {
    if precision <= 0.0 || recall <= 0.0 {
        0.0
    } else {
        2.0 / (1.0 / recall + 1.0 / precision)
    }
}

/// Averaging convention for episode scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Sum counts over the episode, then compute scores.
    #[default]
    Micro,
    /// Compute scores per timestep, then average.
    PerStep,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Micro => "micro",
            Aggregation::PerStep => "per_step",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "micro" => Ok(Aggregation::Micro),
            "per_step" | "per-step" => Ok(Aggregation::PerStep),
            other => Err(format!("unknown aggregation {other:?}")),
        }
    }
}

/// Streaming scorer keeping both aggregations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreAccumulator {
    pub counts: EpisodeCounts,
    steps: u64,
    precision_sum: f64,
    recall_sum: f64,
    f1_sum: f64,
}

impl ScoreAccumulator {
    pub fn push(&mut self, pressed: KeySet, targets: KeySet) -> EpisodeCounts {
        let step = EpisodeCounts::of_step(pressed, targets);
        self.counts += step;
        let s = step.finalize();
        self.steps += 1;
        self.precision_sum += s.precision;
        self.recall_sum += s.recall;
        self.f1_sum += s.f1;
        step
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn scores(&self, agg: Aggregation) -> Scores {
        match agg {
            Aggregation::Micro => self.counts.finalize(),
            Aggregation::PerStep if self.steps == 0 => Scores { precision: 1.0, recall: 1.0, f1: 1.0 },
            Aggregation::PerStep => {
                let n = self.steps as f64;
                Scores { precision: self.precision_sum / n, recall: self.recall_sum / n, f1: self.f1_sum / n }
            }
        }
    }
}
