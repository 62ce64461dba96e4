//! Shared fixtures and reference oracles for integration tests.
#![allow(dead_code)]

use concept_atlas::EmbeddingSpace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

/// `n` i.i.d. standard-normal rows.
pub fn gaussian_space(n: usize, dim: usize, seed: u64) -> EmbeddingSpace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    EmbeddingSpace::new(names(n), dim, data).unwrap()
}

/// Mixture with component `c` centred at `separation * e_c` and unit noise.
pub fn planted_mixture(per: usize, comps: usize, dim: usize, separation: f32, seed: u64) -> (EmbeddingSpace, Vec<usize>) {
    assert!(comps <= dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(per * comps * dim);
    let mut labels = Vec::with_capacity(per * comps);
    for c in 0..comps {
        for _ in 0..per {
            for d in 0..dim {
                let z: f32 = StandardNormal.sample(&mut rng);
                data.push(if d == c { separation + z } else { z });
            }
            labels.push(c);
        }
    }
    (EmbeddingSpace::new(names(per * comps), dim, data).unwrap(), labels)
}

/// Erdos-Renyi graph with uniform edge weights in `[0.1, 1)`.
pub fn random_weighted_graph(n: usize, p: f64, rng: &mut impl Rng) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < p {
                edges.push((i, j, rng.random_range(0.1..1.0)));
            }
        }
    }
    edges
}

/// Modularity as the literal double sum over a dense adjacency matrix.
pub fn dense_modularity(n: usize, edges: &[(usize, usize, f64)], labels: &[usize]) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j, w) in edges {
        if i == j {
            a[i][i] += 2.0 * w;
        } else {
            a[i][j] += w;
            a[j][i] += w;
        }
    }
    let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Calls `f` once per set partition of `0..n` (restricted growth strings).
pub fn for_each_partition(n: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(labels: &mut Vec<usize>, n: usize, max: usize, f: &mut impl FnMut(&[usize])) {
        if labels.len() == n {
            f(labels);
            return;
        }
        for c in 0..=max + 1 {
            labels.push(c);
            rec(labels, n, max.max(c), f);
            labels.pop();
        }
    }
    if n == 0 {
        return;
    }
    let mut labels = vec![0];
    rec(&mut labels, n, 0, f);
}

/// Maximum modularity and one partition attaining it.
pub fn brute_force_max(n: usize, edges: &[(usize, usize, f64)]) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for_each_partition(n, &mut |l| {
        let q = dense_modularity(n, edges, l);
        if q > best.0 {
            best = (q, l.to_vec());
        }
    });
    best
}

/// Population mean and standard deviation of column `d` over `rows`.
pub fn column_stats(space: &EmbeddingSpace, rows: &[usize], d: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&r| f64::from(space.row(r)[d])).sum::<f64>() / n;
    let var = rows.iter().map(|&r| (f64::from(space.row(r)[d]) - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
