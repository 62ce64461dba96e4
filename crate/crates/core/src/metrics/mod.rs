//! Evaluation of extracted structure.
//!
//! - [`topo`]: local ordering of integer tokens.
//! - [`align`]: neighbor overlap of shared tokens across two spaces.
//! - [`precision`]: community purity against external label sets.
//! - [`cohesion`]: whether case variants land in the same leaf community.
//! - [`ari`]: adjusted Rand index between two labelings.

pub mod align;
pub mod ari;
pub mod cohesion;
pub mod precision;
pub mod topo;

pub use align::{alignment_score, alignment_scores, AlignmentResult};
pub use ari::adjusted_rand_index;
pub use cohesion::{case_variant_cohesion, CohesionResult};
pub use precision::{precision_report, LabelRecord, LabelSet, PrecisionReport};
pub use topo::{parse_numeric_tokens, topo_order_score, topo_order_scores, NumericCluster, TopoResult};

use crate::knn::CosineRows;
use std::cmp::Ordering;

/// The `k` nearest other points of local index `i`, ties broken by ascending
/// local index.
pub(crate) fn top_k_local(rows: &CosineRows<'_>, i: usize, k: usize) -> Vec<usize> {
    let mut all: Vec<(f32, usize)> = (0..rows.len())
        .filter(|&j| j != i)
        .map(|j| (rows.distance(i, j), j))
        .collect();
    let cmp = |a: &(f32, usize), b: &(f32, usize)| -> Ordering { a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)) };
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_unstable_by(cmp);
    all.into_iter().map(|(_, j)| j).collect()
}
