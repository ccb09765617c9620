//! Dice overlap, ROC curves and AUC, and the line-oriented metric report.

use std::fmt::Write as _;

use crate::crf::SoftMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `2|A∩B| / (|A| + |B|)` for binary masks; 1.0 when both are empty.
pub fn dice<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape(format!("dice: {:?} vs {:?}", pred.shape(), truth.shape())));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (binary(p)?, binary(t)?);
        inter += usize::from(p && t);
        a += usize::from(p);
        b += usize::from(t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn binary<T: Scalar>(v: T) -> Result<bool> {
    if v == T::zero() {
        Ok(false)
    } else if v == T::one() {
        Ok(true)
    } else {
        Err(Error::Contract(format!("mask value {v} is not binary")))
    }
}

/// Foreground where `p(mass) ≥ threshold`; one `H×W` tensor per sample.
pub fn binarize<T: Scalar>(soft: &SoftMask<T>, threshold: f64) -> Vec<Tensor<T>> {
    (0..soft.batch())
        .map(|n| soft.foreground(n).map(|p| if p.as_f64() >= threshold { T::one() } else { T::zero() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// `(false-positive rate, true-positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold of each point; the first is `+∞`.
    pub thresholds: Vec<f64>,
    pub auc: f64,
}

/// ROC curve sweeping a threshold through every distinct score, highest
/// first; AUC by the trapezoidal rule.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("AUC undefined with {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        thresholds.push(s);
    }
    Ok(RocCurve { auc: trapezoid(&points), points, thresholds })
}

/// Area under a piecewise-linear curve.
pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn mann_whitney_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric("AUC undefined for a single class".into()));
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Evaluation record: per-sample Dice and per-split ROC curves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub dice: Vec<(String, f64)>,
    pub rocs: Vec<(String, RocCurve)>,
}

impl MetricReport {
    pub fn mean_dice(&self) -> Option<f64> {
        (!self.dice.is_empty()).then(|| self.dice.iter().map(|(_, d)| d).sum::<f64>() / self.dice.len() as f64)
    }

    pub fn auc(&self, split: &str) -> Option<f64> {
        self.rocs.iter().find(|(s, _)| s == split).map(|(_, r)| r.auc)
    }

    /// `dice <id> <v>`, `auc <split> <v>` and `roc <split> <fpr> <tpr> <thr>`
    /// lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, d) in &self.dice {
            writeln!(out, "dice {id} {d:.6}").unwrap();
        }
        for (split, roc) in &self.rocs {
            writeln!(out, "auc {split} {:.6}", roc.auc).unwrap();
        }
        for (split, roc) in &self.rocs {
            for (&(fpr, tpr), thr) in roc.points.iter().zip(&roc.thresholds) {
                writeln!(out, "roc {split} {fpr:.6} {tpr:.6} {thr:.6}").unwrap();
            }
        }
        out
    }

    /// ROC curves as SVG polylines on the unit square.
    pub fn to_svg(&self) -> String {
        const SIZE: f64 = 400.0;
        const PAD: f64 = 40.0;
        const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
        let full = SIZE + 2.0 * PAD;
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{full}\" height=\"{full}\" viewBox=\"0 0 {full} {full}\">\n\
             <rect x=\"{PAD}\" y=\"{PAD}\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"none\" stroke=\"#000\"/>\n\
             <line x1=\"{PAD}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{PAD}\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>\n\
             <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"14\">false positive rate</text>\n\
             <text x=\"12\" y=\"{tx}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 12 {tx})\">true positive rate</text>\n",
            y0 = PAD + SIZE,
            x1 = PAD + SIZE,
            tx = PAD + SIZE / 2.0,
            ty = full - 8.0,
        );
        for (i, (split, roc)) in self.rocs.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = roc
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", PAD + x * SIZE, PAD + (1.0 - y) * SIZE))
                .collect();
            writeln!(
                svg,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            )
            .unwrap();
            writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"13\" fill=\"{color}\">{split} AUC {:.3}</text>",
                PAD + SIZE * 0.55,
                PAD + SIZE * 0.7 + 18.0 * i as f64,
                roc.auc
            )
            .unwrap();
        }
        svg.push_str("</svg>\n");
        svg
    }
}
