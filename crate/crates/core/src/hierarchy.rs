//! Concept hierarchies: Louvain communities re-clustered over a descending
//! schedule of neighbor counts.
//!
//! The root `"0"` holds the whole vocabulary. For each `k` in the schedule,
//! every current leaf that is large enough gets its own neighbor graph
//! (restricted to its rows), fuzzy weights and Louvain run; a split of two or
//! more communities becomes that leaf's children. Child `c` of node `"0_3"` is
//! named `"0_3_c"`, with children ordered by size (largest first), ties by
//! smallest member row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{build_fuzzy_graph_with, DegeneratePolicy, DEFAULT_TOLERANCE};
use crate::knn::{KnnMode, NnDescentParams};
use crate::louvain::{louvain, NodeOrder, WeightedGraph, DEFAULT_MAX_AGGREGATIONS};
use crate::store::EmbeddingSpace;

pub const DEFAULT_SCHEDULE: [usize; 6] = [100, 75, 50, 25, 12, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyNode {
    pub name: String,
    /// Neighbor count of the step that produced this node; `None` for the root.
    pub k: Option<usize>,
    /// Row ids, ascending.
    pub members: Vec<usize>,
    pub children: Vec<HierarchyNode>,
}

impl HierarchyNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    /// Pre-order traversal.
    pub fn walk(&self) -> Vec<&HierarchyNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(node) = stack.pop() {
            out.push(node);
            stack.extend(node.children.iter().rev());
        }
        out
    }
}

/// Extraction settings recorded alongside the tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub min_community_size: Option<usize>,
    pub tolerance: f64,
    pub max_aggregations: usize,
    pub knn: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptHierarchy {
    pub k_schedule: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<Provenance>,
    pub root: HierarchyNode,
}

impl ConceptHierarchy {
    /// Hierarchy with only a root over rows `0..n`.
    pub fn root_only(n: usize, k_schedule: Vec<usize>) -> Self {
        Self {
            k_schedule,
            params: None,
            root: HierarchyNode {
                name: "0".into(),
                k: None,
                members: (0..n).collect(),
                children: Vec::new(),
            },
        }
    }

    pub fn nodes(&self) -> Vec<&HierarchyNode> {
        self.root.walk()
    }

    pub fn leaves(&self) -> Vec<&HierarchyNode> {
        self.nodes().into_iter().filter(|n| n.is_leaf()).collect()
    }

    /// Looks a node up by its `0_a_b` name.
    pub fn find(&self, name: &str) -> Result<&HierarchyNode> {
        let mut parts = name.split('_');
        if parts.next() != Some("0") {
            return Err(Error::Lookup(name.into()));
        }
        let mut node = &self.root;
        for part in parts {
            let idx: usize = part.parse().map_err(|_| Error::Lookup(name.into()))?;
            node = node.children.get(idx).ok_or_else(|| Error::Lookup(name.into()))?;
        }
        Ok(node)
    }

    /// For each row, the index into [`Self::leaves`] of the leaf holding it.
    pub fn leaf_assignment(&self) -> Vec<Option<usize>> {
        let n = self.root.members.iter().max().map_or(0, |m| m + 1);
        let mut out = vec![None; n];
        for (i, leaf) in self.leaves().into_iter().enumerate() {
            for &m in &leaf.members {
                out[m] = Some(i);
            }
        }
        out
    }

    /// Number of leaves after each step of the schedule.
    pub fn leaf_counts(&self) -> Vec<usize> {
        let step_of = |k: Option<usize>| -> Option<usize> {
            k.and_then(|k| self.k_schedule.iter().position(|&s| s == k))
        };
        let nodes = self.nodes();
        (0..self.k_schedule.len())
            .map(|s| {
                nodes
                    .iter()
                    .filter(|n| n.k.is_none() || step_of(n.k).is_some_and(|p| p <= s))
                    .filter(|n| {
                        n.children
                            .first()
                            .and_then(|c| step_of(c.k))
                            .is_none_or(|p| p > s)
                    })
                    .count()
            })
            .collect()
    }

    /// Checks naming, ordering and the partition property at every node.
    pub fn validate(&self) -> Result<()> {
        fn check(node: &HierarchyNode) -> Result<()> {
            if node.members.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Validation(format!("{}: members not strictly ascending", node.name)));
            }
            if node.children.is_empty() {
                return Ok(());
            }
            let mut union: Vec<usize> = Vec::with_capacity(node.members.len());
            for (i, child) in node.children.iter().enumerate() {
                let expected = format!("{}_{i}", node.name);
                if child.name != expected {
                    return Err(Error::Validation(format!(
                        "child {i} of {} is named {}, expected {expected}",
                        node.name, child.name
                    )));
                }
                if i > 0 && child_order_key(&node.children[i - 1]) > child_order_key(child) {
                    return Err(Error::Validation(format!("children of {} out of order", node.name)));
                }
                union.extend(&child.members);
                check(child)?;
            }
            union.sort_unstable();
            if union != node.members {
                return Err(Error::Validation(format!(
                    "children of {} do not partition its members",
                    node.name
                )));
            }
            Ok(())
        }
        if self.root.name != "0" || self.root.k.is_some() {
            return Err(Error::Validation("root must be named \"0\" with k = null".into()));
        }
        check(&self.root)
    }
}

fn child_order_key(node: &HierarchyNode) -> (std::cmp::Reverse<usize>, usize) {
    (
        std::cmp::Reverse(node.members.len()),
        node.members.first().copied().unwrap_or(usize::MAX),
    )
}

/// Settings for [`extract_hierarchy`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionConfig {
    /// Strictly descending, every entry at least 2.
    pub k_schedule: Vec<usize>,
    /// Leaves are re-clustered only when they hold at least
    /// `max(k + 1, min_community_size)` rows; `None` means `2k`.
    pub min_community_size: Option<usize>,
    pub knn: KnnMode,
    pub tolerance: f64,
    pub max_aggregations: usize,
    pub node_order: NodeOrder,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            k_schedule: DEFAULT_SCHEDULE.to_vec(),
            min_community_size: None,
            knn: KnnMode::NnDescent {
                params: NnDescentParams::default(),
                seed: 0,
            },
            tolerance: DEFAULT_TOLERANCE,
            max_aggregations: DEFAULT_MAX_AGGREGATIONS,
            node_order: NodeOrder::AscendingId,
        }
    }
}

impl ExtractionConfig {
    pub fn exact(k_schedule: Vec<usize>) -> Self {
        Self {
            k_schedule,
            knn: KnnMode::Exact,
            ..Self::default()
        }
    }

    fn threshold(&self, k: usize) -> usize {
        (k + 1).max(self.min_community_size.unwrap_or(2 * k))
    }

    fn provenance(&self) -> Provenance {
        let (knn, seed) = match self.knn {
            KnnMode::Exact => ("exact".to_string(), None),
            KnnMode::NnDescent { seed, .. } => ("nn-descent".to_string(), Some(seed)),
        };
        Provenance {
            min_community_size: self.min_community_size,
            tolerance: self.tolerance,
            max_aggregations: self.max_aggregations,
            knn,
            seed,
        }
    }
}

struct ArenaNode {
    name: String,
    k: Option<usize>,
    members: Vec<usize>,
    children: Vec<usize>,
}

pub fn extract_hierarchy(space: &EmbeddingSpace, config: &ExtractionConfig) -> Result<ConceptHierarchy> {
    if space.is_empty() {
        return Err(Error::Domain("cannot extract concepts from an empty space".into()));
    }
    if config.k_schedule.iter().any(|&k| k < 2) {
        return Err(Error::Domain("every k in the schedule must be at least 2".into()));
    }
    if config.k_schedule.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Domain("k schedule must be strictly descending".into()));
    }
    if config.min_community_size.is_some_and(|m| m < 2) {
        return Err(Error::Domain("minimum community size must be at least 2".into()));
    }

    let mut arena = vec![ArenaNode {
        name: "0".into(),
        k: None,
        members: (0..space.len()).collect(),
        children: Vec::new(),
    }];
    let mut leaves: Vec<usize> = vec![0];

    for &k in &config.k_schedule {
        let threshold = config.threshold(k);
        let splits: Vec<Option<Vec<Vec<usize>>>> = leaves
            .par_iter()
            .map(|&leaf| {
                let members = &arena[leaf].members;
                if members.len() < threshold {
                    return Ok(None);
                }
                split_community(space, members, k, config)
            })
            .collect::<Result<_>>()?;

        let mut next_leaves = Vec::with_capacity(leaves.len());
        for (leaf, split) in leaves.into_iter().zip(splits) {
            let Some(mut parts) = split else {
                next_leaves.push(leaf);
                continue;
            };
            parts.sort_by_key(|p| (std::cmp::Reverse(p.len()), p[0]));
            for (idx, members) in parts.into_iter().enumerate() {
                let id = arena.len();
                arena.push(ArenaNode {
                    name: format!("{}_{idx}", arena[leaf].name),
                    k: Some(k),
                    members,
                    children: Vec::new(),
                });
                arena[leaf].children.push(id);
                next_leaves.push(id);
            }
        }
        leaves = next_leaves;
    }

    fn build(arena: &mut [ArenaNode], id: usize) -> HierarchyNode {
        let children: Vec<usize> = std::mem::take(&mut arena[id].children);
        let children = children.into_iter().map(|c| build(arena, c)).collect();
        let node = &mut arena[id];
        HierarchyNode {
            name: std::mem::take(&mut node.name),
            k: node.k,
            members: std::mem::take(&mut node.members),
            children,
        }
    }
    Ok(ConceptHierarchy {
        k_schedule: config.k_schedule.clone(),
        params: Some(config.provenance()),
        root: build(&mut arena, 0),
    })
}

/// Louvain communities of `members` at neighbor count `k`, or `None` when the
/// community does not split.
fn split_community(
    space: &EmbeddingSpace,
    members: &[usize],
    k: usize,
    config: &ExtractionConfig,
) -> Result<Option<Vec<Vec<usize>>>> {
    let ng = config.knn.build(space, Some(members), k)?;
    let fuzzy = build_fuzzy_graph_with(&ng, config.tolerance, DegeneratePolicy::Saturate)?;
    let graph = WeightedGraph::from(&fuzzy);
    if graph.total_weight() <= 0.0 {
        return Ok(None);
    }
    let (partition, _) = louvain(&graph, config.max_aggregations, config.node_order)?;
    if partition.community_count() < 2 {
        return Ok(None);
    }
    Ok(Some(
        partition
            .communities()
            .into_iter()
            .map(|c| c.into_iter().map(|local| members[local]).collect())
            .collect(),
    ))
}

/// Tokens of community `name`, in row order.
pub fn community_members<'a>(h: &ConceptHierarchy, name: &str, space: &'a EmbeddingSpace) -> Result<Vec<&'a str>> {
    let node = h.find(name)?;
    node.members
        .iter()
        .map(|&row| {
            if row < space.len() {
                Ok(space.token(row))
            } else {
                Err(Error::Validation(format!("community {name} references row {row} outside the space")))
            }
        })
        .collect()
}

pub fn export_hierarchy(h: &ConceptHierarchy, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut out, h)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn import_hierarchy(path: impl AsRef<Path>) -> Result<ConceptHierarchy> {
    let h: ConceptHierarchy = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    h.validate()?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(per: usize, centers: usize, dim: usize, seed: u64) -> (EmbeddingSpace, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for c in 0..centers {
            for _ in 0..per {
                for d in 0..dim {
                    let mean = if d == c { 10.0 } else { 0.0 };
                    data.push(mean + noise.sample(&mut rng));
                }
                labels.push(c);
            }
        }
        let n = per * centers;
        let tokens = (0..n).map(|i| format!("w{i}")).collect();
        (EmbeddingSpace::new(tokens, dim, data).unwrap(), labels)
    }

    fn small_hierarchy() -> ConceptHierarchy {
        let leaf = |name: &str, members: Vec<usize>| HierarchyNode {
            name: name.into(),
            k: Some(5),
            members,
            children: vec![],
        };
        ConceptHierarchy {
            k_schedule: vec![5],
            params: None,
            root: HierarchyNode {
                name: "0".into(),
                k: None,
                members: (0..10).collect(),
                children: vec![
                    leaf("0_0", vec![0, 1, 2, 3, 4, 6, 7, 8]),
                    leaf("0_1", vec![5, 9]),
                ],
            },
        }
    }

    #[test]
    fn size_guard_keeps_root_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = (0..40).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let s = EmbeddingSpace::new((0..10).map(|i| i.to_string()).collect(), 4, data).unwrap();
        let h = extract_hierarchy(&s, &ExtractionConfig::exact(vec![100])).unwrap();
        assert!(h.root.children.is_empty());
        assert_eq!(h.root.members, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_configs() {
        let (s, _) = blobs(10, 2, 4, 0);
        assert!(extract_hierarchy(&s, &ExtractionConfig::exact(vec![5, 5])).is_err());
        assert!(extract_hierarchy(&s, &ExtractionConfig::exact(vec![3, 6])).is_err());
        assert!(extract_hierarchy(&s, &ExtractionConfig::exact(vec![1])).is_err());
        let empty = EmbeddingSpace::new(vec![], 3, vec![]).unwrap();
        assert!(matches!(
            extract_hierarchy(&empty, &ExtractionConfig::exact(vec![5])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn separated_blobs_split_and_stay_valid() {
        let (s, labels) = blobs(60, 3, 8, 3);
        let h = extract_hierarchy(&s, &ExtractionConfig::exact(vec![10, 4])).unwrap();
        h.validate().unwrap();
        assert_eq!(h.root.children.len(), 3);
        for child in &h.root.children {
            let l = labels[child.members[0]];
            assert!(child.members.iter().all(|&m| labels[m] == l));
            assert_eq!(child.k, Some(10));
        }
        let counts = h.leaf_counts();
        assert_eq!(counts[0], 3);
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        let again = extract_hierarchy(&s, &ExtractionConfig::exact(vec![10, 4])).unwrap();
        assert_eq!(h, again);
    }

    #[test]
    fn lookup_by_name() {
        let h = small_hierarchy();
        let tokens: Vec<String> = (0..10).map(|i| format!("t{i}")).collect();
        let s = EmbeddingSpace::new(tokens.clone(), 1, vec![1.0; 10]).unwrap();
        assert_eq!(community_members(&h, "0", &s).unwrap(), tokens);
        assert_eq!(community_members(&h, "0_1", &s).unwrap(), ["t5", "t9"]);
        assert!(matches!(community_members(&h, "0_99", &s), Err(Error::Lookup(_))));
        assert!(matches!(community_members(&h, "1", &s), Err(Error::Lookup(_))));
        assert!(matches!(community_members(&h, "0_x", &s), Err(Error::Lookup(_))));
    }

    #[test]
    fn json_layout() {
        let h = ConceptHierarchy::root_only(3, vec![6]);
        let v: serde_json::Value = serde_json::to_value(&h).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "k_schedule": [6],
                "root": {"name": "0", "k": null, "members": [0, 1, 2], "children": []}
            })
        );
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        let h = small_hierarchy();
        export_hierarchy(&h, &path).unwrap();
        assert_eq!(import_hierarchy(&path).unwrap(), h);

        let text = std::fs::read_to_string(&path).unwrap();
        let first = text.find("\"0_0\"").unwrap();
        let second = text.find("\"0_1\"").unwrap();
        assert!(first < second);
    }

    #[test]
    fn import_rejects_broken_partition() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut h = small_hierarchy();
        h.root.children[1].members = vec![5];
        serde_json::to_writer(File::create(&path).unwrap(), &h).unwrap();
        assert!(matches!(import_hierarchy(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn leaf_assignment_covers_rows() {
        let h = small_hierarchy();
        let a = h.leaf_assignment();
        assert_eq!(a[5], Some(1));
        assert_eq!(a[0], Some(0));
        assert!(a.iter().all(Option::is_some));
    }
}
