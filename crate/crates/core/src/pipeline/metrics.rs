//! Saliency metrics: MAE, adaptive-threshold F-measure and a PR curve.

use crate::error::{shape_err, Error, Result};

pub const PR_THRESHOLDS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mae: f64,
    pub f_beta: f64,
    /// `(precision, recall)` at thresholds `i / 255`, averaged over images.
    pub pr_curve: Vec<(f64, f64)>,
}

/// `(precision, recall)` of `pred >= threshold` against `gt`. An empty
/// denominator yields 0.
pub fn precision_recall(pred: &[f32], gt: &[f32], threshold: f32) -> (f64, f64) {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p >= threshold, g >= 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(tp, tp + fp), ratio(tp, tp + fn_))
}

pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

/// F-measure at the adaptive threshold `min(2 * mean(pred), 1)`.
pub fn adaptive_f_beta(pred: &[f32], gt: &[f32], beta_sq: f64) -> f64 {
    let mean = pred.iter().map(|&v| v as f64).sum::<f64>() / pred.len() as f64;
    let threshold = (2.0 * mean).min(1.0) as f32;
    let (p, r) = precision_recall(pred, gt, threshold);
    f_measure(p, r, beta_sq)
}

pub fn mae(pred: &[f32], gt: &[f32]) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Per-image metrics averaged over the set.
pub fn evaluate(preds: &[Vec<f32>], gts: &[Vec<f32>], beta_sq: f64) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if preds.len() != gts.len() {
        return Err(shape_err("evaluate", format!("{} predictions for {} masks", preds.len(), gts.len())));
    }
    let n = preds.len() as f64;
    let (mut mae_sum, mut f_sum) = (0.0, 0.0);
    let mut pr = vec![(0.0, 0.0); PR_THRESHOLDS];
    for (p, g) in preds.iter().zip(gts) {
        if p.len() != g.len() || p.is_empty() {
            return Err(shape_err("evaluate", format!("{} predicted vs {} gt pixels", p.len(), g.len())));
        }
        mae_sum += mae(p, g);
        f_sum += adaptive_f_beta(p, g, beta_sq);
        for (i, acc) in pr.iter_mut().enumerate() {
            let (pi, ri) = precision_recall(p, g, i as f32 / 255.0);
            acc.0 += pi;
            acc.1 += ri;
        }
    }
    Ok(MetricsReport {
        mae: mae_sum / n,
        f_beta: f_sum / n,
        pr_curve: pr.into_iter().map(|(p, r)| (p / n, r / n)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let gt = vec![1.0, 0.0, 1.0, 0.0, 0.0];
        let r = evaluate(&[gt.clone()], &[gt], 0.3).unwrap();
        assert_eq!(r.mae, 0.0);
        assert_eq!(r.f_beta, 1.0);
        assert!(r.pr_curve.contains(&(1.0, 1.0)));
        assert_eq!(r.pr_curve.len(), PR_THRESHOLDS);
    }

    #[test]
    fn inverted_prediction() {
        let gt = vec![1.0, 0.0, 1.0, 0.0];
        let pred: Vec<f32> = gt.iter().map(|v| 1.0 - v).collect();
        assert_eq!(evaluate(&[pred], &[gt], 0.3).unwrap().mae, 1.0);
    }

    #[test]
    fn empty_set() {
        assert!(matches!(evaluate(&[], &[], 0.3), Err(Error::EmptyDataset)));
    }

    #[test]
    fn f_measure_arithmetic() {
        assert_eq!(f_measure(0.0, 0.0, 0.3), 0.0);
        assert!((f_measure(0.5, 1.0, 0.3) - 1.3 * 0.5 / 1.15).abs() < 1e-12);
    }
}
