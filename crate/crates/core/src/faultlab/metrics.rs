//! Corruption metrics over token-id sequences.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::block_pool::TokenId;

/// Collapse threshold on the mean ROUGE-L F1 of a fully changed trial.
pub const COLLAPSE_ROUGE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("{baselines} baselines vs {outputs} outputs")]
    LengthMismatch { baselines: usize, outputs: usize },
    #[error("no sequences given")]
    Empty,
}

/// Token change rate: fraction of requests whose output differs from baseline.
pub fn tcr(baselines: &[Vec<TokenId>], outputs: &[Vec<TokenId>]) -> Result<f64, MetricError> {
    check_pairs(baselines, outputs)?;
    let changed = baselines
        .iter()
        .zip(outputs)
        .filter(|(y, h)| y != h)
        .count();
    Ok(changed as f64 / baselines.len() as f64)
}

fn check_pairs(baselines: &[Vec<TokenId>], outputs: &[Vec<TokenId>]) -> Result<(), MetricError> {
    if baselines.len() != outputs.len() {
        return Err(MetricError::LengthMismatch {
            baselines: baselines.len(),
            outputs: outputs.len(),
        });
    }
    if baselines.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Token diff ratio over `max(|y|, |ŷ|)` positions; positions present in
/// only one sequence count as mismatches. Two empty sequences give 0.
pub fn tdr(y: &[TokenId], y_hat: &[TokenId]) -> f64 {
    let l = y.len().max(y_hat.len());
    if l == 0 {
        return 0.0;
    }
    let same = y.iter().zip(y_hat).filter(|(a, b)| a == b).count();
    (l - same) as f64 / l as f64
}

/// Output change rate: fraction of trials with nonzero TCR.
pub fn ocr(trial_tcrs: &[f64]) -> Result<f64, MetricError> {
    if trial_tcrs.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(trial_tcrs.iter().filter(|&&t| t > 0.0).count() as f64 / trial_tcrs.len() as f64)
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for &x in a {
        let mut diag = 0;
        for (j, &y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// ROUGE-L F1 over token ids.
pub fn rouge_l_f1(reference: &[TokenId], hypothesis: &[TokenId]) -> f64 {
    if reference.is_empty() || hypothesis.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(reference, hypothesis);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hypothesis.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    NoEffect,
    Partial,
    Complete,
    Collapse,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::NoEffect,
        Category::Partial,
        Category::Complete,
        Category::Collapse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::NoEffect => "no_effect",
            Category::Partial => "partial",
            Category::Complete => "complete",
            Category::Collapse => "collapse",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn classify_trial(tcr: f64, mean_rouge: f64) -> Category {
    if tcr <= 0.0 {
        Category::NoEffect
    } else if tcr < 1.0 {
        Category::Partial
    } else if mean_rouge >= COLLAPSE_ROUGE_THRESHOLD {
        Category::Complete
    } else {
        Category::Collapse
    }
}

pub fn corruption_indicator(baseline: &[TokenId], output: &[TokenId]) -> bool {
    baseline != output
}

/// Prefix sums `C_1..C_N` of the indicators.
pub fn cumulative(indicators: &[bool]) -> Vec<u32> {
    indicators
        .iter()
        .scan(0u32, |c, &i| {
            *c += u32::from(i);
            Some(*c)
        })
        .collect()
}

/// Per-trial metric bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub tcr: f64,
    pub tdr_per_request: Vec<f64>,
    pub rouge_per_request: Vec<f64>,
    pub mean_tdr: f64,
    pub mean_rouge: f64,
    pub category: Category,
}

impl TrialMetrics {
    pub fn compute(
        baselines: &[Vec<TokenId>],
        outputs: &[Vec<TokenId>],
    ) -> Result<Self, MetricError> {
        let tcr = tcr(baselines, outputs)?;
        let tdr_per_request: Vec<f64> = baselines
            .iter()
            .zip(outputs)
            .map(|(y, h)| tdr(y, h))
            .collect();
        let rouge_per_request: Vec<f64> = baselines
            .iter()
            .zip(outputs)
            .map(|(y, h)| rouge_l_f1(y, h))
            .collect();
        let n = baselines.len() as f64;
        let mean_tdr = tdr_per_request.iter().sum::<f64>() / n;
        let mean_rouge = rouge_per_request.iter().sum::<f64>() / n;
        Ok(Self {
            category: classify_trial(tcr, mean_rouge),
            tcr,
            tdr_per_request,
            rouge_per_request,
            mean_tdr,
            mean_rouge,
        })
    }
}
