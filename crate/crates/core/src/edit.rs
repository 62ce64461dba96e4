//! Cluster-level embedding edits.
//!
//! Target rows are either redrawn from a diagonal Gaussian around the joint
//! cluster mean, or collapsed onto that mean. Every other row is copied
//! untouched.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::ConceptHierarchy;
use crate::store::EmbeddingSpace;

pub const DEFAULT_SCALE: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EditMode {
    /// Each coordinate drawn from `N(mu_d, (scale * sigma_d)^2)`.
    GaussianResample { scale: f64 },
    MidpointCollapse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEditSpec {
    rows: Vec<usize>,
    mode: EditMode,
    seed: u64,
}

impl ClusterEditSpec {
    /// Rows are sorted and deduplicated.
    pub fn new(rows: impl IntoIterator<Item = usize>, mode: EditMode, seed: u64) -> Result<Self> {
        if let EditMode::GaussianResample { scale } = mode {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Validation(format!("scale must be positive, got {scale}")));
            }
        }
        let mut rows: Vec<usize> = rows.into_iter().collect();
        rows.sort_unstable();
        rows.dedup();
        Ok(Self { rows, mode, seed })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn mode(&self) -> EditMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-dimension mean and population standard deviation over `rows`.
pub fn cluster_stats(space: &EmbeddingSpace, rows: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Domain(format!("cluster statistics need at least 2 rows, got {}", rows.len())));
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= space.len()) {
        return Err(Error::Validation(format!("row {bad} out of range")));
    }
    let d = space.dim();
    let n = rows.len() as f64;
    let mut mu = vec![0.0f64; d];
    for &r in rows {
        for (m, &x) in mu.iter_mut().zip(space.row(r)) {
            *m += f64::from(x);
        }
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for &r in rows {
        for ((v, &x), m) in var.iter_mut().zip(space.row(r)).zip(&mu) {
            let dx = f64::from(x) - m;
            *v += dx * dx;
        }
    }
    let sigma = var.into_iter().map(|v| (v / n).sqrt()).collect();
    Ok((mu, sigma))
}

pub fn apply_edit(space: &EmbeddingSpace, spec: &ClusterEditSpec) -> Result<EmbeddingSpace> {
    let (mu, sigma) = cluster_stats(space, &spec.rows)?;
    let replacements: Vec<(usize, Vec<f32>)> = match spec.mode {
        EditMode::MidpointCollapse => {
            let center: Vec<f32> = mu.iter().map(|&m| m as f32).collect();
            spec.rows.iter().map(|&r| (r, center.clone())).collect()
        }
        EditMode::GaussianResample { scale } => spec
            .rows
            .par_iter()
            .map(|&r| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(r as u64);
                let row = mu
                    .iter()
                    .zip(&sigma)
                    .map(|(&m, &s)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (m + scale * s * z) as f32
                    })
                    .collect();
                (r, row)
            })
            .collect(),
    };
    space.with_rows_replaced(&replacements)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditModeName {
    GaussianResample,
    MidpointCollapse,
}

/// JSON edit request naming hierarchy communities plus optional extra rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    #[serde(default)]
    pub communities: Vec<String>,
    #[serde(default)]
    pub extra_rows: Vec<usize>,
    pub mode: EditModeName,
    #[serde(default = "default_scale")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_scale() -> f64 {
    DEFAULT_SCALE
}

impl EditRequest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    /// Union of the named communities' members and `extra_rows`.
    pub fn resolve(&self, h: Option<&ConceptHierarchy>) -> Result<ClusterEditSpec> {
        let mut rows = self.extra_rows.clone();
        if !self.communities.is_empty() {
            let h = h.ok_or_else(|| {
                Error::Validation("edit request names communities but no hierarchy was given".into())
            })?;
            for name in &self.communities {
                rows.extend_from_slice(&h.find(name)?.members);
            }
        }
        let mode = match self.mode {
            EditModeName::GaussianResample => EditMode::GaussianResample { scale: self.scale },
            EditModeName::MidpointCollapse => EditMode::MidpointCollapse,
        };
        ClusterEditSpec::new(rows, mode, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{read_emb1, write_emb1};
    use proptest::prelude::*;

    fn space(rows: Vec<Vec<f32>>) -> EmbeddingSpace {
        let dim = rows[0].len();
        EmbeddingSpace::from_rows((0..rows.len()).map(|i| format!("w{i}")).collect(), dim, &rows).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let s = space(vec![vec![0.0, 0.0], vec![5.0, -1.0], vec![2.0, 2.0]]);
        let (mu, sigma) = cluster_stats(&s, &[0, 2]).unwrap();
        assert_eq!(mu, vec![1.0, 1.0]);
        assert_eq!(sigma, vec![1.0, 1.0]);
        let (_, sigma) = cluster_stats(&space(vec![vec![3.0, 1.0]; 4]), &[0, 1, 2, 3]).unwrap();
        assert_eq!(sigma, vec![0.0, 0.0]);
        assert!(matches!(cluster_stats(&s, &[1]), Err(Error::Domain(_))));
    }

    #[test]
    fn collapse_to_midpoint() {
        let s = space(vec![vec![0.0, 0.0], vec![5.0, -1.0], vec![2.0, 2.0]]);
        let spec = ClusterEditSpec::new([2, 0, 2], EditMode::MidpointCollapse, 0).unwrap();
        assert_eq!(spec.rows(), &[0, 2]);
        let e = apply_edit(&s, &spec).unwrap();
        assert_eq!(e.row(0), &[1.0, 1.0]);
        assert_eq!(e.row(2), &[1.0, 1.0]);
        assert_eq!(e.row(1), s.row(1));
        assert_eq!(apply_edit(&e, &spec).unwrap(), e);
    }

    #[test]
    fn standard_normal_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f32>> = (0..10_000)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let s = space(rows);
        let all: Vec<usize> = (0..s.len()).collect();
        let (mu, sigma) = cluster_stats(&s, &all).unwrap();
        assert!(mu.iter().all(|m| m.abs() < 0.05), "{mu:?}");
        assert!(sigma.iter().all(|v| (v - 1.0).abs() < 0.05), "{sigma:?}");
    }

    #[test]
    fn bad_scale_rejected() {
        for scale in [0.0, -1.0, f64::NAN] {
            assert!(ClusterEditSpec::new([0, 1], EditMode::GaussianResample { scale }, 0).is_err());
        }
    }

    #[test]
    fn request_resolution() {
        use crate::hierarchy::HierarchyNode;
        let h = ConceptHierarchy {
            k_schedule: vec![2],
            params: None,
            root: HierarchyNode {
                name: "0".into(),
                k: None,
                members: vec![0, 1, 2, 3],
                children: vec![
                    HierarchyNode { name: "0_0".into(), k: Some(2), members: vec![1, 3], children: vec![] },
                    HierarchyNode { name: "0_1".into(), k: Some(2), members: vec![0, 2], children: vec![] },
                ],
            },
        };
        let req: EditRequest = serde_json::from_str(
            r#"{"communities": ["0_0"], "extra_rows": [2, 3], "mode": "gaussian-resample", "seed": 42}"#,
        )
        .unwrap();
        let spec = req.resolve(Some(&h)).unwrap();
        assert_eq!(spec.rows(), &[1, 2, 3]);
        assert_eq!(spec.mode(), EditMode::GaussianResample { scale: 0.7 });
        assert_eq!(spec.seed(), 42);
        assert!(req.resolve(None).is_err());
        let bad: EditRequest = serde_json::from_str(r#"{"communities": ["0_9"], "mode": "midpoint-collapse"}"#).unwrap();
        assert!(matches!(bad.resolve(Some(&h)), Err(Error::Lookup(_))));
    }

    fn arb_space() -> impl Strategy<Value = EmbeddingSpace> {
        (3usize..20, 1usize..6).prop_flat_map(|(n, d)| {
            prop::collection::vec(-10.0f32..10.0, n * d).prop_map(move |data| {
                EmbeddingSpace::new((0..n).map(|i| format!("w{i}")).collect(), d, data).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn edits_are_local_and_deterministic(
            s in arb_space(),
            picks in prop::collection::vec(any::<prop::sample::Index>(), 2..8),
            seed in any::<u64>(),
            gaussian in any::<bool>(),
        ) {
            let rows: Vec<usize> = picks.iter().map(|p| p.index(s.len())).collect();
            let mode = if gaussian { EditMode::GaussianResample { scale: 0.7 } } else { EditMode::MidpointCollapse };
            let spec = ClusterEditSpec::new(rows, mode, seed).unwrap();
            prop_assume!(spec.rows().len() >= 2);
            let e = apply_edit(&s, &spec).unwrap();
            prop_assert_eq!(e.tokens(), s.tokens());
            for r in 0..s.len() {
                if spec.rows().binary_search(&r).is_err() {
                    let same = e.row(r).iter().zip(s.row(r)).all(|(a, b)| a.to_bits() == b.to_bits());
                    prop_assert!(same);
                }
            }
            prop_assert_eq!(&apply_edit(&s, &spec).unwrap(), &e);
            let mut buf = Vec::new();
            write_emb1(&e, &mut buf).unwrap();
            prop_assert_eq!(read_emb1(buf.as_slice()).unwrap(), e.clone());
            if !gaussian {
                prop_assert_eq!(apply_edit(&e, &spec).unwrap(), e);
            }
        }
    }
}
