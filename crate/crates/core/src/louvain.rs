//! Weighted modularity and the Louvain local-move / aggregation procedure.
//!
//! The number of aggregation rounds is bounded (1 or 2): repeated aggregation
//! sums link weights into ever larger super-nodes until the weights no longer
//! track the embedding geometry. Deeper structure comes from re-clustering at
//! smaller `k` instead (see [`crate::hierarchy`]).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fuzzy::FuzzyGraph;

/// Undirected weighted graph in adjacency-list form.
///
/// A self-loop of weight `w` counts once in the total weight `m` and twice in
/// its node's degree.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    total_weight: f64,
}

impl WeightedGraph {
    /// Parallel edges are summed; `(i, i, w)` adds a self-loop.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Result<Self> {
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut self_loops = vec![0.0; n];
        for (i, j, w) in edges {
            if i >= n || j >= n {
                return Err(Error::Domain(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Domain(format!("edge ({i}, {j}) has weight {w}")));
            }
            if i == j {
                self_loops[i] += w;
            } else {
                adj[i].push((j, w));
                adj[j].push((i, w));
            }
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|e| e.0);
            list.dedup_by(|next, kept| {
                if next.0 == kept.0 {
                    kept.1 += next.1;
                    true
                } else {
                    false
                }
            });
        }
        Ok(Self::assemble(adj, self_loops))
    }

    fn assemble(adj: Vec<Vec<(usize, f64)>>, self_loops: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_loops)
            .map(|(list, s)| list.iter().map(|e| e.1).sum::<f64>() + 2.0 * s)
            .collect();
        let total_weight = degree.iter().sum::<f64>() / 2.0;
        Self {
            adj,
            self_loops,
            degree,
            total_weight,
        }
    }

    pub fn node_count(&self) -> usize {
        self.adj.len()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.adj[i]
    }

    pub fn self_loop(&self, i: usize) -> f64 {
        self.self_loops[i]
    }

    /// Weighted degree `k_i`.
    pub fn degree(&self, i: usize) -> f64 {
        self.degree[i]
    }

    /// Total edge weight `m`.
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// Collapses each community of `assignment` (dense ids `0..count`) into one
    /// node; links are summed and internal weight becomes a self-loop.
    fn aggregate(&self, assignment: &[usize], count: usize) -> Self {
        let mut self_loops = vec![0.0; count];
        let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); count];
        for (i, list) in self.adj.iter().enumerate() {
            let ci = assignment[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in list {
                let cj = assignment[j];
                if ci == cj {
                    // each undirected edge is visited from both ends
                    self_loops[ci] += 0.5 * w;
                } else {
                    adj[ci].push((cj, w));
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|e| e.0);
            list.dedup_by(|next, kept| {
                if next.0 == kept.0 {
                    kept.1 += next.1;
                    true
                } else {
                    false
                }
            });
        }
        Self::assemble(adj, self_loops)
    }
}

impl From<&FuzzyGraph> for WeightedGraph {
    fn from(g: &FuzzyGraph) -> Self {
        Self::from_edges(
            g.node_count(),
            g.edges().iter().map(|&(i, j, w)| (i as usize, j as usize, w)),
        )
        .expect("fuzzy graph edges are valid by construction")
    }
}

/// Assignment of every node to one of `count` communities, with cached
/// per-community degree and internal weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    assignment: Vec<usize>,
    count: usize,
    degree: Vec<f64>,
    internal: Vec<f64>,
}

impl Partition {
    /// Labels are renumbered densely in order of first appearance.
    pub fn new(g: &WeightedGraph, labels: &[usize]) -> Result<Self> {
        if labels.len() != g.node_count() {
            return Err(Error::Domain(format!(
                "partition covers {} nodes, graph has {}",
                labels.len(),
                g.node_count()
            )));
        }
        let (assignment, count) = renumber(labels);
        let mut degree = vec![0.0; count];
        let mut internal = vec![0.0; count];
        for (i, &c) in assignment.iter().enumerate() {
            degree[c] += g.degree(i);
            internal[c] += g.self_loop(i);
            for &(j, w) in g.neighbors(i) {
                if j > i && assignment[j] == c {
                    internal[c] += w;
                }
            }
        }
        Ok(Self {
            assignment,
            count,
            degree,
            internal,
        })
    }

    pub fn singletons(g: &WeightedGraph) -> Self {
        let labels: Vec<usize> = (0..g.node_count()).collect();
        Self::new(g, &labels).expect("sizes match")
    }

    pub fn community_of(&self, node: usize) -> usize {
        self.assignment[node]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn community_count(&self) -> usize {
        self.count
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Sum of member degrees per community.
    pub fn community_degrees(&self) -> &[f64] {
        &self.degree
    }

    /// Weight of edges (and self-loops) inside each community, each counted once.
    pub fn internal_weights(&self) -> &[f64] {
        &self.internal
    }

    /// Members of each community in ascending node order.
    pub fn communities(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count];
        for (i, &c) in self.assignment.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    /// Writes one `node_id community_id` line per node.
    pub fn write_dump<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, c) in self.assignment.iter().enumerate() {
            writeln!(out, "{i} {c}")?;
        }
        Ok(())
    }
}

fn renumber(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let assignment = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (assignment, map.len())
}

/// `Q = sum_c [ internal_c / m - (degree_c / 2m)^2 ]`.
pub fn modularity(g: &WeightedGraph, p: &Partition) -> Result<f64> {
    if p.len() != g.node_count() {
        return Err(Error::Domain("partition does not cover the graph".into()));
    }
    let m = g.total_weight();
    if m <= 0.0 {
        return Err(Error::Domain("modularity of a graph without edges".into()));
    }
    Ok(p.internal
        .iter()
        .zip(&p.degree)
        .map(|(inside, deg)| inside / m - (deg / (2.0 * m)).powi(2))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodeOrder {
    #[default]
    AscendingId,
    SeededShuffle(u64),
}

pub const DEFAULT_MAX_AGGREGATIONS: usize = 2;

/// Upper bound on local-move sweeps per level; each accepted move raises Q,
/// so this only guards against floating-point stalls.
const MAX_SWEEPS: usize = 10_000;

/// Runs Louvain and returns the partition over the original nodes with its
/// modularity.
///
/// One local-move phase runs on the input graph, followed by at most
/// `max_aggregations` rounds of aggregation + local moves. Stops early once a
/// round merges nothing.
pub fn louvain(g: &WeightedGraph, max_aggregations: usize, order: NodeOrder) -> Result<(Partition, f64)> {
    if !(1..=2).contains(&max_aggregations) {
        return Err(Error::Domain(format!(
            "max_aggregations must be 1 or 2, got {max_aggregations}"
        )));
    }
    if g.total_weight() <= 0.0 {
        return Err(Error::Domain("louvain on a graph without edges".into()));
    }
    let mut rng = match order {
        NodeOrder::AscendingId => None,
        NodeOrder::SeededShuffle(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    let mut visit = |n: usize| {
        let mut ids: Vec<usize> = (0..n).collect();
        if let Some(rng) = rng.as_mut() {
            ids.shuffle(rng);
        }
        ids
    };

    let n = g.node_count();
    let mut membership: Vec<usize> = (0..n).collect();
    let mut level = g.clone();
    let mut labels = local_moves(&level, &visit(n));
    for _ in 0..max_aggregations {
        let (dense, count) = renumber(&labels);
        for m in membership.iter_mut() {
            *m = dense[*m];
        }
        if count == level.node_count() || count == 1 {
            labels = (0..count).collect();
            break;
        }
        level = level.aggregate(&dense, count);
        labels = local_moves(&level, &visit(count));
    }
    let final_labels: Vec<usize> = membership.iter().map(|&m| labels[m]).collect();
    let partition = Partition::new(g, &final_labels)?;
    let q = modularity(g, &partition)?;
    Ok((partition, q))
}

/// Greedy local moves from singletons until no node has a positive-gain move.
/// Returns community labels (node ids of the seeding singletons; not dense).
fn local_moves(g: &WeightedGraph, order: &[usize]) -> Vec<usize> {
    let n = g.node_count();
    let two_m = 2.0 * g.total_weight();
    let mut comm: Vec<usize> = (0..n).collect();
    let mut tot: Vec<f64> = (0..n).map(|i| g.degree(i)).collect();
    let mut link = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();

    for _ in 0..MAX_SWEEPS {
        let mut moved = false;
        for &i in order {
            let ki = g.degree(i);
            if ki == 0.0 {
                continue;
            }
            let home = comm[i];
            for &(j, w) in g.neighbors(i) {
                let c = comm[j];
                if link[c] == 0.0 {
                    touched.push(c);
                }
                link[c] += w;
            }
            tot[home] -= ki;

            // Gain of inserting the isolated node into community c, times m.
            let gain = |c: usize, link_c: f64| link_c - tot[c] * ki / two_m;
            let stay = gain(home, link[home]);
            touched.sort_unstable();
            let mut best = home;
            let mut best_gain = f64::NEG_INFINITY;
            for &c in &touched {
                if c == home {
                    continue;
                }
                let gc = gain(c, link[c]);
                if gc > best_gain {
                    best_gain = gc;
                    best = c;
                }
            }
            let eps = 1e-12 * ki.max(1.0);
            let target = if best != home && best_gain > stay + eps { best } else { home };
            tot[target] += ki;
            if target != home {
                comm[i] = target;
                moved = true;
            }
            for &c in &touched {
                link[c] = 0.0;
            }
            touched.clear();
        }
        if !moved {
            break;
        }
    }
    comm
}
