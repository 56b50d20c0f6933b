//! Trim, elect sign, disjoint mean.

/// Keeps the `⌈density·len⌉` largest-magnitude entries and zeroes the rest.
/// Equal magnitudes at the cut are kept in index order.
pub fn trim_top_k(values: &[f64], density: f64) -> Vec<f64> {
    let k = ((density * values.len() as f64).ceil() as usize).min(values.len());
    if k == values.len() {
        return values.to_vec();
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; values.len()];
    for &i in &idx[..k] {
        out[i] = values[i];
    }
    out
}

/// Per entry: elect the sign of the summed mass, then average the values
/// that agree with it. Entries whose mass sums to exactly zero come out zero.
pub fn ties_combine(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let len = trimmed.first().map_or(0, Vec::len);
    let mut out = vec![0.0; len];
    for (e, slot) in out.iter_mut().enumerate() {
        let mass: f64 = trimmed.iter().map(|t| t[e]).sum();
        if mass == 0.0 {
            continue;
        }
        let positive = mass > 0.0;
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in trimmed {
            let v = t[e];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        if count > 0 {
            *slot = sum / count as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trim_keeps_top_two() {
        assert_eq!(trim_top_k(&[0.5, -0.05, 0.2, 0.01], 0.5), vec![0.5, 0.0, 0.2, 0.0]);
    }

    #[test]
    fn trim_rounds_up_and_breaks_ties_by_index() {
        assert_eq!(trim_top_k(&[1.0, -1.0, 1.0], 0.5), vec![1.0, -1.0, 0.0]);
        assert_eq!(trim_top_k(&[3.0, 1.0], 0.01), vec![3.0, 0.0]);
        assert_eq!(trim_top_k(&[3.0, 1.0], 1.0), vec![3.0, 1.0]);
    }

    #[test]
    fn elect_and_disjoint_mean() {
        let out = ties_combine(&[vec![0.3], vec![-0.1], vec![0.4]]);
        assert!((out[0] - 0.35).abs() < 1e-15);
    }

    #[test]
    fn zero_mass_gives_zero() {
        assert_eq!(ties_combine(&[vec![0.5, 1.0], vec![-0.5, 0.0]]), vec![0.0, 1.0]);
    }

    #[test]
    fn single_contributor_keeps_magnitude() {
        // Mean would give 0.25; disjoint mean keeps the full value.
        assert_eq!(ties_combine(&[vec![1.0], vec![0.0], vec![0.0], vec![0.0]]), vec![1.0]);
    }

    #[test]
    fn same_sign_inputs_average_nonzero_entries() {
        let out = ties_combine(&[vec![1.0, 0.0], vec![3.0, 2.0]]);
        assert_eq!(out, vec![2.0, 2.0]);
    }
}
