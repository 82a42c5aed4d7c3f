//! Saliency evaluation: MAE, 256-threshold PR curves and maximum F-measure.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_THRESHOLDS: usize = 256;
/// Field-standard `β²` for the F-measure.
pub const DEFAULT_BETA2: f64 = 0.3;

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

fn check_pair(s: &Tensor, y: &Tensor) -> Result<()> {
    if s.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: s.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean absolute error between a map and its mask.
pub fn mae(s: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(s, y)?;
    let total: f64 = s
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / s.numel() as f64)
}

/// True/false positive counts at each of the 256 thresholds, plus the mask's positive count.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub true_pos: Vec<u64>,
    pub false_pos: Vec<u64>,
    pub positives: u64,
}

impl ConfusionCounts {
    pub fn merge(&mut self, other: &ConfusionCounts) {
        if self.true_pos.is_empty() {
            *self = other.clone();
            return;
        }
        for k in 0..NUM_THRESHOLDS {
            self.true_pos[k] += other.true_pos[k];
            self.false_pos[k] += other.false_pos[k];
        }
        self.positives += other.positives;
    }

    pub fn curve(&self) -> PrCurve {
        let mut precision = Vec::with_capacity(NUM_THRESHOLDS);
        let mut recall = Vec::with_capacity(NUM_THRESHOLDS);
        for k in 0..NUM_THRESHOLDS {
            let (tp, fp) = (self.true_pos[k], self.false_pos[k]);
            precision.push(if tp + fp == 0 {
                1.0
            } else {
                tp as f64 / (tp + fp) as f64
            });
            recall.push(if self.positives == 0 {
                1.0
            } else {
                tp as f64 / self.positives as f64
            });
        }
        PrCurve {
            thresholds: (0..NUM_THRESHOLDS).map(threshold).collect(),
            precision,
            recall,
        }
    }
}

/// Highest threshold index `k` with `k/255 <= v`, or `None` if `v < 0`.
fn highest_passed(v: f64) -> Option<usize> {
    if !(v >= 0.0) {
        return None;
    }
    let mut k = ((v * 255.0).floor() as usize).min(NUM_THRESHOLDS - 1);
    // guard against rounding in v * 255 so the result matches a direct `v >= k/255` test
    while k + 1 < NUM_THRESHOLDS && threshold(k + 1) <= v {
        k += 1;
    }
    while threshold(k) > v {
        if k == 0 {
            return None;
        }
        k -= 1;
    }
    Some(k)
}

/// Confusion counts for `s >= k/255` at every `k`, via a cumulative histogram.
pub fn confusion_counts(s: &Tensor, y: &Tensor) -> Result<ConfusionCounts> {
    check_pair(s, y)?;
    let mut pos_hist = [0u64; NUM_THRESHOLDS];
    let mut neg_hist = [0u64; NUM_THRESHOLDS];
    let mut positives = 0;
    for (&v, &label) in s.data().iter().zip(y.data()) {
        let fg = label > 0.5;
        positives += fg as u64;
        if let Some(k) = highest_passed(v) {
            if fg {
                pos_hist[k] += 1;
            } else {
                neg_hist[k] += 1;
            }
        }
    }
    let mut true_pos = vec![0; NUM_THRESHOLDS];
    let mut false_pos = vec![0; NUM_THRESHOLDS];
    let (mut tp, mut fp) = (0, 0);
    for k in (0..NUM_THRESHOLDS).rev() {
        tp += pos_hist[k];
        fp += neg_hist[k];
        true_pos[k] = tp;
        false_pos[k] = fp;
    }
    Ok(ConfusionCounts {
        true_pos,
        false_pos,
        positives,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    pub fn f_measures(&self, beta2: f64) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, beta2))
            .collect()
    }

    pub fn max_f(&self, beta2: f64) -> f64 {
        self.f_measures(beta2).into_iter().fold(0.0, f64::max)
    }

    /// Pointwise mean of several curves on the shared threshold grid.
    pub fn mean(curves: &[PrCurve]) -> Option<PrCurve> {
        let first = curves.first()?;
        let n = curves.len() as f64;
        let avg = |f: fn(&PrCurve) -> &Vec<f64>| {
            (0..NUM_THRESHOLDS)
                .map(|k| curves.iter().map(|c| f(c)[k]).sum::<f64>() / n)
                .collect()
        };
        Some(PrCurve {
            thresholds: first.thresholds.clone(),
            precision: avg(|c| &c.precision),
            recall: avg(|c| &c.recall),
        })
    }

    /// `threshold,precision,recall` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,precision,recall")?;
        for k in 0..self.thresholds.len() {
            writeln!(
                w,
                "{},{},{}",
                self.thresholds[k], self.precision[k], self.recall[k]
            )?;
        }
        Ok(())
    }
}

pub fn f_measure(p: f64, r: f64, beta2: f64) -> f64 {
    let denom = beta2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / denom
    }
}

pub fn pr_curve(s: &Tensor, y: &Tensor) -> Result<PrCurve> {
    Ok(confusion_counts(s, y)?.curve())
}

pub fn max_f(s: &Tensor, y: &Tensor, beta2: f64) -> Result<f64> {
    if !(beta2 > 0.0) {
        return Err(Error::Config(format!(
            "beta2 must be positive, got {beta2}"
        )));
    }
    Ok(pr_curve(s, y)?.max_f(beta2))
}

/// How per-image results are combined into dataset scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// MaxF per image, then averaged; PR curve is the mean of per-image curves.
    #[default]
    PerImage,
    /// Confusion counts summed over all images before computing P/R/F.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub max_f: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub beta2: f64,
    pub aggregation: Aggregation,
    pub max_f: f64,
    pub mae: f64,
    pub images: Vec<ImageScore>,
    #[serde(skip)]
    pub curve: Option<PrCurve>,
}

/// Scores a list of `(name, prediction, mask)` triples.
pub fn evaluate<'a>(
    pairs: impl IntoIterator<Item = (&'a str, &'a Tensor, &'a Tensor)>,
    beta2: f64,
    aggregation: Aggregation,
) -> Result<EvalReport> {
    if !(beta2 > 0.0) {
        return Err(Error::Config(format!(
            "beta2 must be positive, got {beta2}"
        )));
    }
    let mut images = Vec::new();
    let mut curves = Vec::new();
    let mut total = ConfusionCounts::default();
    for (name, s, y) in pairs {
        let counts = confusion_counts(s, y)?;
        let curve = counts.curve();
        images.push(ImageScore {
            name: name.to_string(),
            max_f: curve.max_f(beta2),
            mae: mae(s, y)?,
        });
        total.merge(&counts);
        curves.push(curve);
    }
    if images.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let n = images.len() as f64;
    let mae_mean = images.iter().map(|i| i.mae).sum::<f64>() / n;
    let (max_f, curve) = match aggregation {
        Aggregation::PerImage => (
            images.iter().map(|i| i.max_f).sum::<f64>() / n,
            PrCurve::mean(&curves),
        ),
        Aggregation::Dataset => {
            let c = total.curve();
            (c.max_f(beta2), Some(c))
        }
    };
    Ok(EvalReport {
        beta2,
        aggregation,
        max_f,
        mae: mae_mean,
        images,
        curve,
    })
}
