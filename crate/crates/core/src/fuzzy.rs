//! Fuzzy membership weights over a neighbor graph.
//!
//! For node `i` with neighbor distances `d_j`, the directed weight is
//! `exp(-max(0, d_j - rho_i) / sigma_i)` where `rho_i` is the smallest
//! positive distance and `sigma_i` is solved so the weights sum to `log2(k)`.
//! Directed weights are merged into one undirected edge per pair with the
//! probabilistic union `a + b - a*b`.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::NeighborGraph;

pub const SIGMA_LOWER: f64 = 1e-8;
pub const SIGMA_UPPER: f64 = 1e4;
pub const SIGMA_ITERATIONS: usize = 64;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// Smallest strictly positive distance in an ascending list.
pub fn compute_rho(distances: &[f64]) -> Result<f64> {
    distances
        .iter()
        .copied()
        .find(|&d| d > 0.0)
        .ok_or(Error::DegenerateNode { node: 0 })
}

fn weight_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances
        .iter()
        .map(|&d| (-(d - rho).max(0.0) / sigma).exp())
        .sum()
}

/// Bandwidth `sigma` with `sum_j exp(-max(0, d_j - rho) / sigma) = log2(k)`.
///
/// Runs a fixed bisection over `[SIGMA_LOWER, SIGMA_UPPER]`, which keeps the
/// result monotone in every distance. Returns `saturated = true` when the weight
/// sum cannot reach the target from above, e.g. when every distance is at most
/// `rho`; `sigma` is then the lower bound.
pub fn solve_sigma(distances: &[f64], rho: f64, tolerance: f64) -> (f64, bool) {
    let target = (distances.len() as f64).log2();
    if weight_sum(distances, rho, SIGMA_LOWER) > target + tolerance {
        return (SIGMA_LOWER, true);
    }
    let (mut lo, mut hi) = (SIGMA_LOWER, SIGMA_UPPER);
    for _ in 0..SIGMA_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if weight_sum(distances, rho, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let saturated = (weight_sum(distances, rho, sigma) - target).abs() > tolerance;
    (sigma, saturated)
}

/// What to do with a node whose neighbors all sit at distance zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DegeneratePolicy {
    #[default]
    Error,
    /// Treat the node as saturated: `rho = 0`, every weight pinned at 1.
    Saturate,
}

/// Per-node directed weights, before symmetrization.
#[derive(Debug, Clone)]
pub struct DirectedWeights {
    pub k: usize,
    pub rho: Vec<f64>,
    pub sigma: Vec<f64>,
    pub saturated: Vec<bool>,
    /// Flat `N * k`, aligned with the neighbor graph's lists.
    pub weights: Vec<f64>,
}

impl DirectedWeights {
    pub fn node(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn node_sum(&self, i: usize) -> f64 {
        self.node(i).iter().sum()
    }
}

pub fn directed_weights(
    ng: &NeighborGraph,
    tolerance: f64,
    policy: DegeneratePolicy,
) -> Result<DirectedWeights> {
    let k = ng.k();
    let per_node: Vec<(f64, f64, bool, Vec<f64>)> = (0..ng.node_count())
        .into_par_iter()
        .map(|i| {
            let d: Vec<f64> = ng.distances(i).iter().map(|&x| x as f64).collect();
            let (rho, sigma, saturated) = match compute_rho(&d) {
                Ok(rho) => {
                    let (sigma, saturated) = solve_sigma(&d, rho, tolerance);
                    (rho, sigma, saturated)
                }
                Err(_) if policy == DegeneratePolicy::Saturate => (0.0, SIGMA_LOWER, true),
                Err(_) => return Err(Error::DegenerateNode { node: i }),
            };
            let w = d
                .iter()
                .map(|&dj| (-(dj - rho).max(0.0) / sigma).exp())
                .collect();
            Ok((rho, sigma, saturated, w))
        })
        .collect::<Result<_>>()?;

    let n = per_node.len();
    let mut out = DirectedWeights {
        k,
        rho: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
        saturated: Vec::with_capacity(n),
        weights: Vec::with_capacity(n * k),
    };
    for (rho, sigma, saturated, w) in per_node {
        out.rho.push(rho);
        out.sigma.push(sigma);
        out.saturated.push(saturated);
        out.weights.extend(w);
    }
    Ok(out)
}

/// Undirected weighted graph with edges `(i, j, w)`, `i < j`, `w` in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    n: usize,
    edges: Vec<(u32, u32, f64)>,
    rho: Vec<f64>,
    sigma: Vec<f64>,
    saturated: Vec<bool>,
    total_weight: f64,
}

impl FuzzyGraph {
    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Sorted by `(i, j)`.
    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn saturated(&self) -> &[bool] {
        &self.saturated
    }

    /// Sum of the stored symmetric weights (`m`).
    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    /// Writes one `i j weight` line per edge, weights with 9 significant digits.
    pub fn write_edge_list<W: Write>(&self, mut out: W) -> Result<()> {
        for &(i, j, w) in &self.edges {
            writeln!(out, "{i} {j} {w:.8e}")?;
        }
        Ok(())
    }
}

/// Probabilistic union `a + b - ab` of two membership strengths.
///
/// Evaluated as `hi + lo * (1 - hi)` so the rounded result is symmetric and
/// never falls below `max(a, b)`.
#[inline]
pub fn fuzzy_union(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    (hi + lo * (1.0 - hi)).min(1.0)
}

pub fn build_fuzzy_graph(ng: &NeighborGraph, tolerance: f64) -> Result<FuzzyGraph> {
    build_fuzzy_graph_with(ng, tolerance, DegeneratePolicy::Error)
}

pub fn build_fuzzy_graph_with(
    ng: &NeighborGraph,
    tolerance: f64,
    policy: DegeneratePolicy,
) -> Result<FuzzyGraph> {
    let directed = directed_weights(ng, tolerance, policy)?;
    Ok(symmetrize(ng, directed))
}

fn symmetrize(ng: &NeighborGraph, directed: DirectedWeights) -> FuzzyGraph {
    let n = ng.node_count();
    // (low, high, weight from low, weight from high)
    let mut halves: Vec<(u32, u32, f64, f64)> = Vec::with_capacity(n * ng.k());
    for i in 0..n {
        for (&j, &w) in ng.neighbor_ids(i).iter().zip(directed.node(i)) {
            let i = i as u32;
            if i < j {
                halves.push((i, j, w, 0.0));
            } else {
                halves.push((j, i, 0.0, w));
            }
        }
    }
    halves.par_sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let mut edges = Vec::with_capacity(halves.len());
    let mut it = halves.into_iter().peekable();
    while let Some((i, j, mut from_low, mut from_high)) = it.next() {
        while let Some(&(i2, j2, a, b)) = it.peek() {
            if (i2, j2) != (i, j) {
                break;
            }
            from_low = from_low.max(a);
            from_high = from_high.max(b);
            it.next();
        }
        let w = fuzzy_union(from_low, from_high);
        if w > 0.0 {
            edges.push((i, j, w.min(1.0)));
        }
    }
    let total_weight = edges.iter().map(|e| e.2).sum();
    FuzzyGraph {
        n,
        edges,
        rho: directed.rho,
        sigma: directed.sigma,
        saturated: directed.saturated,
        total_weight,
    }
}
