//! Regression metrics in log10 target space.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub n: usize,
    /// `None` when the targets have zero variance.
    pub r2: Option<f64>,
    /// `None` when either side has zero variance.
    pub pcc: Option<f64>,
    pub rmse: f64,
    pub mae: f64,
}

pub fn evaluate(predictions: &[f64], targets: &[f64]) -> Result<MetricsReport> {
    let n = check(predictions, targets)?;
    let nf = n as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in predictions.iter().zip(targets) {
        abs += (p - t).abs();
        sq += (p - t) * (p - t);
    }
    let mean_t = targets.iter().sum::<f64>() / nf;
    let ss_tot: f64 = targets.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    Ok(MetricsReport {
        n,
        r2: (ss_tot > 0.0).then(|| 1.0 - sq / ss_tot),
        pcc: pearson(predictions, targets),
        rmse: math::sqrt(sq / nf),
        mae: abs / nf,
    })
}

fn check(a: &[f64], b: &[f64]) -> Result<usize> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Precondition(alloc::format!(
            "metrics need equal non-empty inputs, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if let Some(i) = a.iter().chain(b).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(a.len())
}

/// Sample correlation; `None` when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / math::sqrt(saa * sbb)).clamp(-1.0, 1.0))
}

/// Ranks starting at 1; ties share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = alloc::vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let m = evaluate(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!((m.r2, m.pcc, m.rmse, m.mae), (Some(1.0), Some(1.0), 0.0, 0.0));
    }

    #[test]
    fn mean_predictor_has_zero_r2() {
        let m = evaluate(&[2.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.r2, Some(0.0));
        assert_eq!(m.pcc, None);
    }

    #[test]
    fn hand_example() {
        let m = evaluate(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((m.mae - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.rmse - 0.577_350_269_189_625_8).abs() < 1e-15);
    }

    #[test]
    fn constant_targets_flag_r2() {
        let m = evaluate(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(m.r2, None);
        assert!(evaluate(&[], &[]).is_err());
    }

    #[test]
    fn tied_ranks_are_averaged() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 15.0]), Some(0.5));
    }
}
