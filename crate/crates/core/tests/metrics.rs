use erba_core::metrics::{evaluate, spearman};
use proptest::prelude::*;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn brute_pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    num / (da * db).sqrt()
}

/// Rank of each entry: one plus the number of smaller entries plus half the other ties.
fn brute_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let below = v.iter().filter(|&&y| y < x).count() as f64;
            let ties = v.iter().filter(|&&y| y == x).count() as f64;
            below + (ties + 1.0) / 2.0
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force(
        pairs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..80),
        snap in any::<bool>(),
    ) {
        // Snapping to integers produces ties for the rank correlation.
        let (mut pred, mut z): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if snap {
            pred.iter_mut().for_each(|v| *v = (*v / 10.0).round());
            z.iter_mut().for_each(|v| *v = (*v / 10.0).round());
        }
        prop_assume!(z.iter().any(|&v| v != z[0]) && pred.iter().any(|&v| v != pred[0]));
        let m = evaluate(&pred, &z).unwrap();
        let n = z.len() as f64;
        let mz = mean(&z);
        let sse: f64 = pred.iter().zip(&z).map(|(p, t)| (t - p) * (t - p)).sum();
        let sst: f64 = z.iter().map(|t| (t - mz) * (t - mz)).sum();
        let mae = pred.iter().zip(&z).map(|(p, t)| (t - p).abs()).sum::<f64>() / n;
        prop_assert_eq!(m.n, z.len());
        prop_assert!((m.r2.unwrap() - (1.0 - sse / sst)).abs() <= 1e-12 * (1.0 + (sse / sst).abs()));
        prop_assert!((m.pcc.unwrap() - brute_pearson(&pred, &z)).abs() <= 1e-12);
        prop_assert!((m.rmse - (sse / n).sqrt()).abs() <= 1e-12 * (1.0 + m.rmse));
        prop_assert!((m.mae - mae).abs() <= 1e-12 * (1.0 + mae));
        let rho = brute_pearson(&brute_ranks(&pred), &brute_ranks(&z));
        prop_assert!((spearman(&pred, &z).unwrap() - rho).abs() <= 1e-12);
    }
}

#[test]
fn constant_targets_leave_correlations_undefined() {
    let m = evaluate(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]).unwrap();
    assert!(m.r2.is_none() && m.pcc.is_none());
    assert!((m.rmse - (14.0f64 / 3.0).sqrt()).abs() < 1e-12);
}
