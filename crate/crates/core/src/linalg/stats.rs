use crate::error::{Error, Result};

/// Temperature softmax, `exp(sᵢ/τ) / Σⱼ exp(sⱼ/τ)`, evaluated with the
/// maximum subtracted first.
pub fn softmax(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::param("tau", format!("must be positive and finite, got {tau}")));
    }
    if scores.is_empty() {
        return Err(Error::param("scores", "empty score vector"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::param("scores", format!("non-finite score {s}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// 1-based fractional ranks; tied values share the average of their ranks.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 observations, got {}",
            x.len()
        )));
    }
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return pearson(x, y);
    }
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample (n−1) standard deviation; zero for a single observation.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// `sample_std / √n`.
pub fn standard_error(values: &[f64]) -> f64 {
    sample_std(values) / (values.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric() {
        for tau in [0.1, 1.0, 7.0] {
            let w = softmax(&[0.3, 0.3, 0.3], tau).unwrap();
            for x in w {
                assert!((x - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_two_way() {
        // e^0.8 / (e^0.8 + e^0.2)
        let w = softmax(&[0.8, 0.2], 1.0).unwrap();
        let expected = 0.8f64.exp() / (0.8f64.exp() + 0.2f64.exp());
        assert!((w[0] - expected).abs() < 1e-12);
        assert!((w[0] - 0.6457).abs() < 1e-3);
        assert!((w[1] - 0.3543).abs() < 1e-3);
    }

    #[test]
    fn softmax_sharp_limit() {
        let w = softmax(&[1.0, 0.0], 1e-3).unwrap();
        assert!(w[0] > 1.0 - 1e-12);
        let w = softmax(&[1.0, 0.0], 1e-6).unwrap();
        assert_eq!(w, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        assert!(matches!(softmax(&[1.0], 0.0), Err(Error::Parameter { name: "tau", .. })));
        assert!(softmax(&[1.0], -1.0).is_err());
        assert!(softmax(&[1.0], f64::NAN).is_err());
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(
            spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn ties_average() {
        assert_eq!(fractional_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn standard_error_of_pair() {
        assert!((standard_error(&[2.0, 4.0]) - 1.0).abs() < 1e-12);
        assert_eq!(standard_error(&[3.0]), 0.0);
    }

    /// `1 − 6Σd²/(n(n²−1))`, valid without ties.
    fn spearman_no_ties_formula(x: &[f64], y: &[f64]) -> f64 {
        let rx = fractional_ranks(x);
        let ry = fractional_ranks(y);
        let n = x.len() as f64;
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        1.0 - 6.0 * d2 / (n * (n * n - 1.0))
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_equivariant(
            scores in prop::collection::vec(-50.0f64..50.0, 1..12),
            tau in 0.01f64..10.0,
            rot in 0usize..12,
        ) {
            let w = softmax(&scores, tau).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let k = rot % scores.len();
            let mut rotated = scores.clone();
            rotated.rotate_left(k);
            let mut w_rot = w.clone();
            w_rot.rotate_left(k);
            let w2 = softmax(&rotated, tau).unwrap();
            for (a, b) in w2.iter().zip(&w_rot) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn spearman_monotone_invariance(
            pairs in prop::collection::btree_map(-1000i32..1000, -1000i32..1000, 3..30),
        ) {
            let x: Vec<f64> = pairs.keys().map(|&v| v as f64).collect();
            let y: Vec<f64> = pairs.values().map(|&v| v as f64).collect();
            prop_assume!(y.iter().any(|&v| v != y[0]));
            let base = spearman(&x, &y).unwrap();
            let tx: Vec<f64> = x.iter().map(|v| (v / 100.0).exp()).collect();
            let ty: Vec<f64> = y.iter().map(|v| v * v * v + 3.0).collect();
            prop_assert!((spearman(&tx, &ty).unwrap() - base).abs() < 1e-9);
            let mut sorted = y.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[0] != w[1]) {
                prop_assert!((spearman_no_ties_formula(&x, &y) - base).abs() < 1e-9);
            }
        }
    }
}
