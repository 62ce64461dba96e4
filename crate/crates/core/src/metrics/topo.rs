//! Topological ordering of integer tokens.
//!
//! An integer `x` passes at strictness `k` when its embedding is among the `k`
//! nearest cluster members of both `x - 1` and `x + 1`. The score is the pass
//! rate over interior values (those with both neighbors present in the cluster).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::knn::CosineRows;
use crate::metrics::top_k_local;
use crate::store::{EmbeddingSpace, TokenNormalization};

/// Integer value -> row id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NumericCluster {
    values: BTreeMap<i64, usize>,
}

impl NumericCluster {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (i64, usize)>) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (v, row) in pairs {
            if values.insert(v, row).is_some() {
                return Err(Error::Validation(format!("value {v} appears twice")));
            }
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, value: i64) -> Option<usize> {
        self.values.get(&value).copied()
    }

    /// `(value, row)` in ascending value order.
    pub fn iter(&self) -> impl Iterator<Item = (i64, usize)> + '_ {
        self.values.iter().map(|(&v, &r)| (v, r))
    }

    /// Smallest and largest value.
    pub fn range(&self) -> Option<(i64, i64)> {
        Some((*self.values.keys().next()?, *self.values.keys().next_back()?))
    }

    /// Keeps only entries whose row is in `rows` (sorted ascending).
    pub fn restrict_to_rows(&self, rows: &[usize]) -> Self {
        Self {
            values: self
                .values
                .iter()
                .filter(|(_, r)| rows.binary_search(r).is_ok())
                .map(|(&v, &r)| (v, r))
                .collect(),
        }
    }

    /// Keeps only values in `lo..=hi`.
    pub fn restrict_to_range(&self, lo: i64, hi: i64) -> Self {
        Self {
            values: self.values.range(lo..=hi).map(|(&v, &r)| (v, r)).collect(),
        }
    }
}

/// Tokens that normalize to a plain run of ASCII digits.
///
/// Multi-digit tokens with a leading zero ("01") are skipped since they do not
/// spell an integer canonically. When several tokens name the same value, an
/// unmarked token wins over a marked one, then the smallest row.
pub fn parse_numeric_tokens(space: &EmbeddingSpace, norm: &TokenNormalization) -> NumericCluster {
    let mut best: BTreeMap<i64, (bool, usize)> = BTreeMap::new();
    for (row, token) in space.tokens().iter().enumerate() {
        let t = norm.normalize(token);
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            continue;
        }
        if t.len() > 1 && t.starts_with('0') {
            continue;
        }
        let Ok(value) = t.parse::<i64>() else { continue };
        let candidate = (!norm.is_unmarked(token), row);
        best.entry(value)
            .and_modify(|cur| {
                if candidate < *cur {
                    *cur = candidate;
                }
            })
            .or_insert(candidate);
    }
    NumericCluster {
        values: best.into_iter().map(|(v, (_, row))| (v, row)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopoResult {
    pub score: f64,
    pub k: usize,
    /// Number of interior values.
    pub evaluated: usize,
    /// Cluster size.
    pub support: usize,
    /// `(value, passed)` for each interior value, ascending.
    pub passes: Vec<(i64, bool)>,
}

pub fn topo_order_score(space: &EmbeddingSpace, cluster: &NumericCluster, k: usize) -> Result<TopoResult> {
    Ok(topo_order_scores(space, cluster, &[k])?.remove(0))
}

/// Scores for several strictness levels sharing one neighbor computation.
pub fn topo_order_scores(space: &EmbeddingSpace, cluster: &NumericCluster, ks: &[usize]) -> Result<Vec<TopoResult>> {
    if cluster.len() < 3 {
        return Err(Error::Domain(format!(
            "topological ordering needs at least 3 values, got {}",
            cluster.len()
        )));
    }
    if ks.contains(&0) {
        return Err(Error::Domain("k must be positive".into()));
    }
    let values: Vec<i64> = cluster.values.keys().copied().collect();
    let rows: Vec<usize> = cluster.values.values().copied().collect();
    let interior: Vec<usize> = (1..values.len().saturating_sub(1))
        .filter(|&p| values[p - 1] + 1 == values[p] && values[p] + 1 == values[p + 1])
        .collect();
    if interior.is_empty() {
        return Err(Error::Domain("cluster has no value x with both x-1 and x+1 present".into()));
    }
    // Local index order is ascending value, which is also the tie-break.
    let view = CosineRows::new(space, Some(&rows))?;
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut needed: Vec<usize> = interior.iter().flat_map(|&p| [p - 1, p + 1]).collect();
    needed.sort_unstable();
    needed.dedup();
    let ranked: BTreeMap<usize, Vec<usize>> = needed
        .into_iter()
        .map(|p| (p, top_k_local(&view, p, max_k)))
        .collect();

    Ok(ks
        .iter()
        .map(|&k| {
            let within = |anchor: usize, p: usize| ranked[&anchor].iter().take(k).any(|&q| q == p);
            let passes: Vec<(i64, bool)> = interior
                .iter()
                .map(|&p| (values[p], within(p - 1, p) && within(p + 1, p)))
                .collect();
            let hits = passes.iter().filter(|(_, ok)| *ok).count();
            TopoResult {
                score: hits as f64 / passes.len() as f64,
                k,
                evaluated: passes.len(),
                support: values.len(),
                passes,
            }
        })
        .collect())
}
