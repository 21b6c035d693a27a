//! Crowdsourced label bookkeeping: assurance scores, MLE labels and
//! agreement statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One example: raw features, a d-length binary crowd label vector, and an
/// optional ground-truth label used only for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct CrowdExample {
    pub features: Vec<f64>,
    pub crowd_labels: Vec<u8>,
    pub truth: Option<u8>,
}

impl CrowdExample {
    pub fn assurance(&self) -> f64 {
        assurance(&self.crowd_labels).expect("examples carry non-empty label vectors")
    }

    pub fn mle_label(&self) -> u8 {
        mle_label(&self.crowd_labels).1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<CrowdExample>,
    pub split: Split,
    /// Number of crowd workers; constant across the dataset.
    pub n_workers: usize,
}

impl Dataset {
    pub fn new(examples: Vec<CrowdExample>, split: Split) -> Result<Self> {
        let first = examples
            .first()
            .ok_or_else(|| Error::Data("dataset has no examples".into()))?;
        let p = first.features.len();
        let d = first.crowd_labels.len();
        if d == 0 {
            return Err(Error::Data("empty crowd label vector".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.features.len() != p {
                return Err(Error::Data(format!(
                    "example {i} has {} features, expected {p}",
                    ex.features.len()
                )));
            }
            if ex.crowd_labels.len() != d {
                return Err(Error::Data(format!(
                    "example {i} has {} crowd labels, expected {d}",
                    ex.crowd_labels.len()
                )));
            }
            if ex.crowd_labels.iter().any(|&y| y > 1) {
                return Err(Error::Data(format!("example {i} has a non-binary label")));
            }
        }
        Ok(Dataset {
            examples,
            split,
            n_workers: d,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.examples[0].features.len()
    }

    pub fn assurances(&self) -> Vec<f64> {
        self.examples.iter().map(CrowdExample::assurance).collect()
    }

    pub fn mle_labels(&self) -> Vec<u8> {
        self.examples.iter().map(CrowdExample::mle_label).collect()
    }

    /// Truth labels where present, MLE labels otherwise.
    pub fn eval_labels(&self) -> Vec<u8> {
        self.examples
            .iter()
            .map(|ex| ex.truth.unwrap_or_else(|| ex.mle_label()))
            .collect()
    }
}

/// Label assurance |1 - (2/d)·||y||₁|: 1 when unanimous, 0 at an even tie.
pub fn assurance(y: &[u8]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Data("assurance of empty label vector".into()));
    }
    let d = y.len() as f64;
    let ones = y.iter().map(|&v| v as f64).sum::<f64>();
    Ok((1.0 - 2.0 * ones / d).abs())
}

/// MLE label estimate: (mean of y, thresholded label). A tie (prob exactly
/// 0.5) deterministically maps to label 0.
pub fn mle_label(y: &[u8]) -> (f64, u8) {
    let d = y.len() as f64;
    let prob = y.iter().map(|&v| v as f64).sum::<f64>() / d;
    (prob, if prob > 0.5 { 1 } else { 0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FleissKappa {
    pub value: f64,
    /// Chance agreement was 1 (every label in the whole set identical); the
    /// value is reported as 1.0 by convention.
    pub degenerate: bool,
}

/// Fleiss' kappa over the two binary categories.
pub fn fleiss_kappa(dataset: &Dataset) -> Result<FleissKappa> {
    let n = dataset.len();
    let d = dataset.n_workers;
    if n < 2 {
        return Err(Error::Data("fleiss kappa needs at least 2 examples".into()));
    }
    if d < 2 {
        return Err(Error::Data("fleiss kappa needs at least 2 raters".into()));
    }
    let d_f = d as f64;
    let mut p_bar = 0.0;
    let mut frac_ones = 0.0;
    for ex in &dataset.examples {
        let ones = ex.crowd_labels.iter().map(|&v| v as f64).sum::<f64>();
        let zeros = d_f - ones;
        p_bar += (ones * (ones - 1.0) + zeros * (zeros - 1.0)) / (d_f * (d_f - 1.0));
        frac_ones += ones / d_f;
    }
    p_bar /= n as f64;
    frac_ones /= n as f64;
    let p_e = frac_ones * frac_ones + (1.0 - frac_ones) * (1.0 - frac_ones);
    if (1.0 - p_e).abs() < 1e-12 {
        return Ok(FleissKappa {
            value: 1.0,
            degenerate: true,
        });
    }
    Ok(FleissKappa {
        value: (p_bar - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

/// Fraction of positive examples, preferring truth labels when present.
pub fn class_ratio(dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Data("class ratio of empty dataset".into()));
    }
    let pos = dataset
        .eval_labels()
        .iter()
        .filter(|&&l| l == 1)
        .count();
    Ok(pos as f64 / dataset.len() as f64)
}
