use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinAssignment {
    pub edges: Vec<f64>,
    /// Bin index per input score.
    pub bins: Vec<usize>,
    pub counts: Vec<usize>,
}

/// `n` equal-width bins over `[0, 1]`.
pub fn uniform_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// One bin per score `k/N`: edges sit halfway between lattice points.
pub fn lattice_edges(trials: usize) -> Vec<f64> {
    let n = trials as f64;
    std::iter::once(0.0)
        .chain((0..trials).map(|k| (k as f64 + 0.5) / n))
        .chain(std::iter::once(1.0))
        .collect()
}

pub fn bin_label(edges: &[f64], bin: usize) -> String {
    format!("{:.2}-{:.2}", edges[bin], edges[bin + 1])
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges[0] != 0.0 || edges[edges.len() - 1] != 1.0 {
        return Err(Error::param("edges", "must start at 0, end at 1 and hold at least two values"));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::param("edges", "must be strictly increasing"));
    }
    Ok(())
}

/// Half-open bins `[a, b)`; the last bin is closed at 1.
pub fn bin_scores(scores: &[f64], edges: &[f64]) -> Result<BinAssignment> {
    check_edges(edges)?;
    let last = edges.len() - 2;
    let bins = scores
        .iter()
        .map(|&s| {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::param("score", format!("{s} is outside [0, 1]")));
            }
            Ok(edges[1..].iter().position(|&hi| s < hi).unwrap_or(last))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0; last + 1];
    for &b in &bins {
        counts[b] += 1;
    }
    Ok(BinAssignment { edges: edges.to_vec(), bins, counts })
}
