//! Case-variant cohesion: how often tokens that differ only in letter case end
//! up in the same leaf community.

use std::collections::HashMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::store::{EmbeddingSpace, TokenNormalization};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohesionResult {
    pub fraction: f64,
    pub pairs: usize,
    pub cohesive: usize,
    /// Distinct tokens taking part in at least one variant pair.
    pub tokens: usize,
}

/// Pairs are tokens with equal marker-stripped lowercase forms whose
/// marker-stripped forms differ (so `▁cat`/`cat` is not a case variant).
pub fn case_variant_cohesion(h: &ConceptHierarchy, space: &EmbeddingSpace) -> Result<CohesionResult> {
    let strip = TokenNormalization::strip_markers();
    let fold = TokenNormalization::strip_markers_lowercase();
    let leaf_of = h.leaf_assignment();

    let mut groups: HashMap<String, Vec<(String, usize)>> = HashMap::new();
    for (row, token) in space.tokens().iter().enumerate() {
        let key = fold.normalize(token);
        if key.is_empty() {
            continue;
        }
        groups.entry(key).or_default().push((strip.normalize(token), row));
    }

    let mut pairs = 0usize;
    let mut cohesive = 0usize;
    let mut involved = 0usize;
    for group in groups.values().filter(|g| g.len() > 1) {
        let mut any = vec![false; group.len()];
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                if group[i].0 == group[j].0 {
                    continue;
                }
                let leaf = |row: usize| -> Result<usize> {
                    leaf_of.get(row).copied().flatten().ok_or_else(|| {
                        Error::Validation(format!("row {row} is not covered by the hierarchy"))
                    })
                };
                pairs += 1;
                if leaf(group[i].1)? == leaf(group[j].1)? {
                    cohesive += 1;
                }
                any[i] = true;
                any[j] = true;
            }
        }
        involved += any.iter().filter(|&&x| x).count();
    }
    if pairs == 0 {
        return Err(Error::Domain("space has no case-variant token pairs".into()));
    }
    Ok(CohesionResult {
        fraction: cohesive as f64 / pairs as f64,
        pairs,
        cohesive,
        tokens: involved,
    })
}
