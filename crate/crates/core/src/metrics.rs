//! Correlation and accuracy metrics and the challenge composite score.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("{0} vector is constant; correlation is undefined")]
    Constant(&'static str),
    #[error("threshold step must be positive, got {0}")]
    Step(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<(), MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooShort {
            need: 2,
            got: pred.len(),
        });
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("predictions"));
    }
    if truth.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("targets"));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    let mx = mean(x);
    let my = mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(MetricsError::Constant("prediction"));
    }
    if syy == 0.0 {
        return Err(MetricsError::Constant("target"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_pair(pred, truth)?;
    pearson_unchecked(pred, truth)
}

/// One-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]] == xs[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    check_pair(pred, truth)?;
    pearson_unchecked(&average_ranks(pred), &average_ranks(truth))
}

/// Fraction of positions where the predicted hit equals the true one.
pub fn element_accuracy(pred: &[bool], truth: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    let agree = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(agree as f64 / pred.len() as f64)
}

/// `plcc/4 + srcc/4 + acc/2`.
pub fn main_score(srcc: f64, plcc: f64, acc: f64) -> f64 {
    plcc / 4.0 + srcc / 4.0 + acc / 2.0
}

/// Result of [`optimal_threshold_search`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub accuracy: f64,
}

/// Candidate thresholds: `min(pred) + k·step` for `k = -1, 0, 1, …` up to
/// the first grid point at or above `max(pred)`. The extra point on each
/// side makes the all-hit and all-miss classifiers reachable.
pub fn threshold_grid(pred: &[f64], step: f64) -> Vec<f64> {
    let lo = pred.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pred.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let steps = ((hi - lo) / step).ceil() as i64;
    (-1..=steps).map(|k| lo + k as f64 * step).collect()
}

/// Scans the fixed-step grid for the threshold maximising the accuracy of
/// `pred > t` against `truth`; ties go to the smallest threshold.
pub fn optimal_threshold_search(
    pred: &[f64],
    truth: &[bool],
    step: f64,
) -> Result<ThresholdChoice, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(MetricsError::Step(step));
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite("predictions"));
    }

    // Sort once; for threshold t the predicted hits are the suffix with
    // value > t, so accuracy = misses-below + hits-above.
    let mut pairs: Vec<(f64, bool)> = pred.iter().copied().zip(truth.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let mut hits_from = vec![0usize; n + 1];
    let mut misses_before = vec![0usize; n + 1];
    for i in 0..n {
        misses_before[i + 1] = misses_before[i] + usize::from(!pairs[i].1);
    }
    for i in (0..n).rev() {
        hits_from[i] = hits_from[i + 1] + usize::from(pairs[i].1);
    }

    let mut best = ThresholdChoice {
        threshold: f64::NAN,
        accuracy: -1.0,
    };
    for t in threshold_grid(pred, step) {
        let split = pairs.partition_point(|p| p.0 <= t);
        let correct = misses_before[split] + hits_from[split];
        let accuracy = correct as f64 / n as f64;
        if accuracy > best.accuracy {
            best = ThresholdChoice { threshold: t, accuracy };
        }
    }
    Ok(best)
}

/// Leaderboard metrics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub srcc: f64,
    pub plcc: f64,
    pub acc: f64,
    pub main_score: f64,
    pub n_samples: usize,
    pub n_elements: usize,
}

impl MetricsReport {
    pub fn compute(
        pred_totals: &[f64],
        true_totals: &[f64],
        pred_hits: &[bool],
        true_hits: &[bool],
    ) -> Result<Self, MetricsError> {
        let srcc = srcc(pred_totals, true_totals)?;
        let plcc = plcc(pred_totals, true_totals)?;
        let acc = element_accuracy(pred_hits, true_hits)?;
        Ok(Self {
            srcc,
            plcc,
            acc,
            main_score: main_score(srcc, plcc, acc),
            n_samples: pred_totals.len(),
            n_elements: pred_hits.len(),
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        writeln!(f, "{:<12} {:>10.4}", "SRCC", self.srcc)?;
        writeln!(f, "{:<12} {:>10.4}", "PLCC", self.plcc)?;
        writeln!(f, "{:<12} {:>10.4}", "ACC", self.acc)?;
        writeln!(f, "{:<12} {:>10.4}", "Main Score", self.main_score)?;
        writeln!(f, "{:<12} {:>10}", "samples", self.n_samples)?;
        write!(f, "{:<12} {:>10}", "elements", self.n_elements)
    }
}
