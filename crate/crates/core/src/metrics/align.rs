//! Cross-space alignment: mean overlap of the `k` nearest shared tokens.
//!
//! Neighbor search on each side is restricted to the shared tokens, so both
//! top-k sets live in the same token universe. Ties are broken by the position
//! of the token in `pairs`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::knn::CosineRows;
use crate::metrics::top_k_local;
use crate::store::EmbeddingSpace;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentResult {
    pub score: f64,
    pub k: usize,
    /// Number of shared tokens.
    pub support: usize,
    /// Per shared token, `|top_k(a) & top_k(b)| / k`, in `pairs` order.
    pub overlaps: Vec<f64>,
}

pub fn alignment_score(
    a: &EmbeddingSpace,
    b: &EmbeddingSpace,
    pairs: &[(usize, usize)],
    k: usize,
) -> Result<AlignmentResult> {
    Ok(alignment_scores(a, b, pairs, &[k])?.remove(0))
}

/// Scores for several `k` sharing one neighbor computation per side.
pub fn alignment_scores(
    a: &EmbeddingSpace,
    b: &EmbeddingSpace,
    pairs: &[(usize, usize)],
    ks: &[usize],
) -> Result<Vec<AlignmentResult>> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::Domain(format!("alignment needs at least 2 shared tokens, got {n}")));
    }
    for &k in ks {
        if k == 0 || k >= n {
            return Err(Error::Domain(format!("k={k} must lie in 1..{n}")));
        }
    }
    let rows_a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let rows_b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    for (side, rows) in [("a", &rows_a), ("b", &rows_b)] {
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Domain(format!("row repeated on side {side} of the pairs")));
        }
    }
    let view_a = CosineRows::new(a, Some(&rows_a))?;
    let view_b = CosineRows::new(b, Some(&rows_b))?;
    let max_k = ks.iter().copied().max().unwrap_or(1);

    let ranked: Vec<(Vec<usize>, Vec<usize>)> = (0..n)
        .into_par_iter()
        .map(|t| (top_k_local(&view_a, t, max_k), top_k_local(&view_b, t, max_k)))
        .collect();

    Ok(ks
        .iter()
        .map(|&k| {
            let mut seen = vec![false; n];
            let overlaps: Vec<f64> = ranked
                .iter()
                .map(|(na, nb)| {
                    for &x in &na[..k] {
                        seen[x] = true;
                    }
                    let shared = nb[..k].iter().filter(|&&x| seen[x]).count();
                    for &x in &na[..k] {
                        seen[x] = false;
                    }
                    shared as f64 / k as f64
                })
                .collect();
            AlignmentResult {
                score: overlaps.iter().sum::<f64>() / n as f64,
                k,
                support: n,
                overlaps,
            }
        })
        .collect())
}
