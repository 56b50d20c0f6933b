//! Merging in a shared SVD basis.
//!
//! The `n` task deltas (`d_out×d_in` each) are stacked vertically and
//! decomposed jointly, `[ΔW₁; …; ΔWₙ] = U Σ Vᵀ`. Each task's block of `U`,
//! scaled by `Σ`, gives its coordinates `Cᵢ = Uᵢ Σ` in the shared right basis
//! `Vᵀ`. TIES runs on the `Cᵢ` and the result maps back through `Vᵀ`.

use super::ties::{ties_combine, trim_top_k};
use crate::error::Result;
use crate::linalg::{matmul_f64, svd_f64};

/// Coordinates at or below this fraction of `σ_max` are SVD roundoff of
/// exact zeros and must not count as contributors in the disjoint mean.
const NOISE_FLOOR: f64 = 1e-12;

/// Returns the merged `rows×cols` delta (row-major).
pub fn knots_combine(
    rows: usize,
    cols: usize,
    deltas: &[&[f64]],
    density: f64,
    lambda: f64,
    energy_threshold: Option<f64>,
) -> Result<Vec<f64>> {
    let n = deltas.len();
    let stacked: Vec<f64> = deltas.iter().flat_map(|d| d.iter().copied()).collect();
    let svd = svd_f64(n * rows, cols, &stacked)?;

    let k = match energy_threshold {
        Some(t) => retained_components(&svd.sigma, t),
        None => svd.k,
    };

    let floor = NOISE_FLOOR * svd.sigma.first().copied().unwrap_or(0.0);
    // Cᵢ = Uᵢ[:, :k] · diag(σ[:k]), each rows×k.
    let components: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut c = vec![0.0; rows * k];
            for r in 0..rows {
                let urow = &svd.u[(i * rows + r) * svd.k..(i * rows + r + 1) * svd.k];
                for j in 0..k {
                    let v = urow[j] * svd.sigma[j];
                    c[r * k + j] = if v.abs() <= floor { 0.0 } else { v };
                }
            }
            trim_top_k(&c, density)
        })
        .collect();

    let aligned = ties_combine(&components);
    let mut out = matmul_f64(rows, k, cols, &aligned, &svd.vt[..k * cols]);
    out.iter_mut().for_each(|v| *v *= lambda);
    Ok(out)
}

/// Smallest `k` whose leading `σ²` cover `threshold` of the total.
fn retained_components(sigma: &[f64], threshold: f64) -> usize {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        acc += s * s;
        if acc >= threshold * total {
            return i + 1;
        }
    }
    sigma.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn energy_cut() {
        assert_eq!(retained_components(&[3.0, 1.0, 0.1], 0.85), 1);
        assert_eq!(retained_components(&[3.0, 1.0, 0.1], 0.999), 2);
        assert_eq!(retained_components(&[3.0, 1.0, 0.1], 1.0), 3);
        assert_eq!(retained_components(&[0.0, 0.0], 0.5), 1);
    }

    #[test]
    fn single_delta_round_trips() {
        let d = [1.0, -2.0, 0.5, 3.0, 0.25, -1.0];
        let out = knots_combine(2, 3, &[&d], 1.0, 1.0, None).unwrap();
        for (a, b) in out.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opposite_sign_disjoint_diagonals_keep_magnitude() {
        let (a, b) = ([0.1, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, -0.1]);
        let out = knots_combine(2, 2, &[&a, &b], 1.0, 1.0, None).unwrap();
        for (got, want) in out.iter().zip([0.1, 0.0, 0.0, -0.1]) {
            assert!((got - want).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn zero_deltas() {
        let z = [0.0; 4];
        assert_eq!(knots_combine(2, 2, &[&z, &z], 1.0, 1.0, None).unwrap(), vec![0.0; 4]);
    }
}
