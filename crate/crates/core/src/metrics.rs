//! Evaluation metrics: ranking AUCs, masked-token precision, confusion
//! counts, isotonic calibration and the paired t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tensor};
use crate::vocab::TokenId;

/// Scores with parallel binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabels {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    /// Scores are raw logits rather than probabilities.
    pub logits: bool,
}

impl ScoredLabels {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        Self::build(scores, labels, false)
    }

    pub fn from_logits(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        Self::build(scores, labels, true)
    }

    fn build(scores: Vec<f64>, labels: Vec<u8>, logits: bool) -> Result<Self> {
        if scores.is_empty() || scores.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} scores for {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::Validation("labels must be 0 or 1".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("scores must be finite".into()));
        }
        Ok(Self { scores, labels, logits })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// Scores on the probability scale.
    pub fn probabilities(&self) -> Vec<f64> {
        if self.logits {
            self.scores.iter().map(|&z| sigmoid(z)).collect()
        } else {
            self.scores.clone()
        }
    }
}

/// Area under the ROC curve, `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, from midranks.
pub fn roc_auc(sl: &ScoredLabels) -> Result<f64> {
    let pos = sl.positives();
    let neg = sl.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..sl.len()).collect();
    order.sort_by(|&a, &b| sl.scores[a].total_cmp(&sl.scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && sl.scores[order[j + 1]] == sl.scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += midrank * order[i..=j].iter().filter(|&&k| sl.labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: the mean, over positives, of precision at each
/// positive's rank. Ranking is by descending score; tied scores keep input
/// order, so earlier items rank first.
pub fn pr_auc(sl: &ScoredLabels) -> Result<f64> {
    let pos = sl.positives();
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR AUC needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..sl.len()).collect();
    order.sort_by(|&a, &b| sl.scores[b].total_cmp(&sl.scores[a]));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if sl.labels[k] == 1 {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// When a masked position counts as a prediction and when it is correct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionRule {
    /// Predicts when the largest probability exceeds the threshold; correct
    /// when that arg-max is the true code.
    #[default]
    MaxProbability,
    /// Every position is a prediction; correct when the true code's
    /// probability exceeds the threshold.
    TrueProbability,
}

/// Poolable masked-precision counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PrecisionCounts {
    pub positions: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl PrecisionCounts {
    pub fn merge(&mut self, other: PrecisionCounts) {
        self.positions += other.positions;
        self.predicted += other.predicted;
        self.correct += other.correct;
    }

    /// `None` when no position made a prediction.
    pub fn precision(&self) -> Option<f64> {
        (self.predicted > 0).then(|| self.correct as f64 / self.predicted as f64)
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Counts for `[positions, vocab]` logits against the true ids.
pub fn masked_precision_counts(
    logits: &Tensor,
    targets: &[TokenId],
    threshold: f64,
    rule: PrecisionRule,
) -> Result<PrecisionCounts> {
    if logits.shape().len() != 2 || logits.shape()[0] != targets.len() {
        return Err(Error::shape("masked_precision", logits.shape(), &[targets.len()]));
    }
    let mut c = PrecisionCounts {
        positions: targets.len(),
        ..Default::default()
    };
    for (i, &t) in targets.iter().enumerate() {
        let p = softmax_row(logits.row(i));
        let (arg, &max) = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty vocabulary");
        match rule {
            PrecisionRule::MaxProbability => {
                if max > threshold {
                    c.predicted += 1;
                    c.correct += usize::from(arg == t);
                }
            }
            PrecisionRule::TrueProbability => {
                c.predicted += 1;
                c.correct += usize::from(p[t] > threshold);
            }
        }
    }
    Ok(c)
}

/// Masked-token precision pooled over all positions; `None` when nothing
/// was predicted.
pub fn masked_precision(logits: &Tensor, targets: &[TokenId], threshold: f64) -> Result<Option<f64>> {
    Ok(masked_precision_counts(logits, targets, threshold, PrecisionRule::MaxProbability)?.precision())
}

/// Confusion counts; row 0 is the negative label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tp: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tn + self.fp + self.fn_ + self.tp
    }

    /// `[[TN, FP], [FN, TP]]`.
    pub fn matrix(&self) -> [[usize; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }
}

/// Predicted positive iff the probability exceeds `threshold`.
pub fn confusion(sl: &ScoredLabels, threshold: f64) -> Confusion {
    let mut c = Confusion { tn: 0, fp: 0, fn_: 0, tp: 0 };
    for (p, &y) in sl.probabilities().into_iter().zip(&sl.labels) {
        match (p > threshold, y == 1) {
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (true, true) => c.tp += 1,
        }
    }
    c
}

/// Weighted least-squares non-decreasing fit by pool-adjacent-violators.
pub fn isotonic_regression(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    // blocks of (mean, weight, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, c2) = blocks.pop().unwrap();
            let (m1, w1, c1) = blocks.pop().unwrap();
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, c1 + c2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

/// Monotone step map from scores to calibrated probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibrator {
    /// Strictly increasing distinct training scores.
    pub breakpoints: Vec<f64>,
    /// Non-decreasing fitted value at each breakpoint.
    pub values: Vec<f64>,
}

/// Fits labels against scores; tied scores are pooled before fitting.
pub fn isotonic_fit(sl: &ScoredLabels) -> Result<Calibrator> {
    if sl.is_empty() {
        return Err(Error::Validation("isotonic fit needs at least one point".into()));
    }
    let mut order: Vec<usize> = (0..sl.len()).collect();
    order.sort_by(|&a, &b| sl.scores[a].total_cmp(&sl.scores[b]));
    let mut xs: Vec<f64> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for k in order {
        let (s, y) = (sl.scores[k], sl.labels[k] as f64);
        if xs.last() == Some(&s) {
            *sums.last_mut().unwrap() += y;
            *counts.last_mut().unwrap() += 1.0;
        } else {
            xs.push(s);
            sums.push(y);
            counts.push(1.0);
        }
    }
    let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
    Ok(Calibrator {
        values: isotonic_regression(&means, &counts),
        breakpoints: xs,
    })
}

impl Calibrator {
    /// Value of the last breakpoint at or below `score`; the first value
    /// below the fitted range. Results are clamped to `[0, 1]`.
    pub fn apply_one(&self, score: f64) -> f64 {
        let i = self.breakpoints.partition_point(|&b| b <= score);
        self.values[i.saturating_sub(1)].clamp(0.0, 1.0)
    }

    pub fn apply(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.apply_one(s)).collect()
    }
}

pub fn isotonic_apply(cal: &Calibrator, scores: &[f64]) -> Vec<f64> {
    cal.apply(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed.
    pub p: f64,
    pub df: f64,
}

/// Student's t-test on the paired differences `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!(
            "paired t-test needs two equal-length samples of at least 2 (got {} and {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (var / n).sqrt();
    let df = n - 1.0;
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}

/// Mean and sample standard deviation across splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub per_split: Vec<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = if values.is_empty() { f64::NAN } else { values.iter().sum::<f64>() / n };
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self {
            mean,
            sd,
            per_split: values.to_vec(),
        }
    }

    /// `mean (sd)` with four decimals.
    pub fn display(&self) -> String {
        format!("{:.4} ({:.4})", self.mean, self.sd)
    }
}
