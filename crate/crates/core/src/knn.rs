//! k-nearest-neighbor graphs under cosine distance.
//!
//! Two builders share one output type: [`exact_knn`] is brute force and serves
//! as the reference, [`nn_descent`] is the approximate neighbor-descent
//! refinement for large vocabularies. Both order each neighbor list by
//! ascending `(distance, neighbor id)`.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::EmbeddingSpace;

pub const KNN1_MAGIC: &[u8; 4] = b"KNN1";
pub const KNN1_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
}

impl Metric {
    fn tag(self) -> u8 {
        match self {
            Metric::Cosine => 0,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Metric::Cosine),
            t => Err(Error::Format(format!("unknown metric tag {t}"))),
        }
    }
}

/// `1 - u.v / (|u||v|)`, accumulated in `f64` and clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = sq_norm(u);
    let nv = sq_norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine distance of a zero-norm vector".into()));
    }
    Ok(cosine_from_parts(dot(u, v), nu, nv))
}

#[inline]
fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum()
}

#[inline]
fn sq_norm(u: &[f32]) -> f64 {
    dot(u, u)
}

#[inline]
fn cosine_from_parts(dot: f64, nu: f64, nv: f64) -> f64 {
    // sqrt(n * n) == n exactly, so bitwise-equal rows land on distance 0.
    (1.0 - dot / (nu * nv).sqrt()).clamp(0.0, 2.0)
}

/// Selected rows of a space with cached squared norms. Local index `i` refers
/// to `rows[i]`.
pub(crate) struct CosineRows<'a> {
    rows: Vec<&'a [f32]>,
    sq_norms: Vec<f64>,
}

impl<'a> CosineRows<'a> {
    pub(crate) fn new(space: &'a EmbeddingSpace, subset: Option<&[usize]>) -> Result<Self> {
        let ids: Vec<usize> = match subset {
            Some(s) => s.to_vec(),
            None => (0..space.len()).collect(),
        };
        let mut rows = Vec::with_capacity(ids.len());
        let mut sq_norms = Vec::with_capacity(ids.len());
        for id in ids {
            if id >= space.len() {
                return Err(Error::Domain(format!("row {id} out of range")));
            }
            let row = space.row(id);
            let n = sq_norm(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm { row: id });
            }
            rows.push(row);
            sq_norms.push(n);
        }
        Ok(Self { rows, sq_norms })
    }

    pub(crate) fn len(&self) -> usize {
        self.rows.len()
    }

    /// Symmetric by construction: the pair is always evaluated in the same order.
    #[inline]
    pub(crate) fn distance(&self, a: usize, b: usize) -> f32 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        cosine_from_parts(dot(self.rows[a], self.rows[b]), self.sq_norms[a], self.sq_norms[b]) as f32
    }
}

#[inline]
fn by_distance_then_id(a: &(f32, u32), b: &(f32, u32)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Fixed-degree neighbor lists, stored flat as `N * k` ids and distances.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    k: usize,
    metric: Metric,
    ids: Vec<u32>,
    distances: Vec<f32>,
}

impl NeighborGraph {
    /// Builds a graph from per-node lists, checking every invariant.
    pub fn from_lists(k: usize, lists: Vec<Vec<(u32, f32)>>) -> Result<Self> {
        let n = lists.len();
        let mut ids = Vec::with_capacity(n * k);
        let mut distances = Vec::with_capacity(n * k);
        for (node, list) in lists.into_iter().enumerate() {
            if list.len() != k {
                return Err(Error::Validation(format!(
                    "node {node} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            let mut prev: Option<(f32, u32)> = None;
            for (id, d) in list {
                if id as usize >= n || id as usize == node {
                    return Err(Error::Validation(format!("node {node} lists invalid neighbor {id}")));
                }
                if !(0.0..=2.0).contains(&d) {
                    return Err(Error::Validation(format!("node {node}: distance {d} outside [0, 2]")));
                }
                if let Some(p) = prev {
                    if by_distance_then_id(&p, &(d, id)) != Ordering::Less {
                        return Err(Error::Validation(format!("node {node}: neighbor list not sorted")));
                    }
                }
                prev = Some((d, id));
                ids.push(id);
                distances.push(d);
            }
        }
        Ok(Self {
            k,
            metric: Metric::Cosine,
            ids,
            distances,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn node_count(&self) -> usize {
        self.ids.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn neighbor_ids(&self, node: usize) -> &[u32] {
        &self.ids[node * self.k..(node + 1) * self.k]
    }

    pub fn distances(&self, node: usize) -> &[f32] {
        &self.distances[node * self.k..(node + 1) * self.k]
    }

    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, f32)> + '_ {
        self.neighbor_ids(node)
            .iter()
            .zip(self.distances(node))
            .map(|(&id, &d)| (id as usize, d))
    }

    fn from_sorted(k: usize, lists: Vec<Vec<(f32, u32)>>) -> Self {
        let mut ids = Vec::with_capacity(lists.len() * k);
        let mut distances = Vec::with_capacity(lists.len() * k);
        for list in lists {
            debug_assert_eq!(list.len(), k);
            for (d, id) in list {
                ids.push(id);
                distances.push(d);
            }
        }
        Self {
            k,
            metric: Metric::Cosine,
            ids,
            distances,
        }
    }

    /// Writes the `KNN1` cache layout.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(KNN1_MAGIC)?;
        out.write_all(&KNN1_VERSION.to_le_bytes())?;
        out.write_all(&(self.node_count() as u64).to_le_bytes())?;
        out.write_all(&(self.k as u32).to_le_bytes())?;
        out.write_all(&[self.metric.tag()])?;
        for (id, d) in self.ids.iter().zip(&self.distances) {
            out.write_all(&id.to_le_bytes())?;
            out.write_all(&d.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != KNN1_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected \"KNN1\"")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != KNN1_VERSION {
            return Err(Error::Format(format!("unsupported KNN1 version {version}")));
        }
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4)?;
        let k = u32::from_le_bytes(b4) as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let metric = Metric::from_tag(tag[0])?;
        let mut lists = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut list = Vec::with_capacity(k);
            for _ in 0..k {
                r.read_exact(&mut b4)?;
                let id = u32::from_le_bytes(b4);
                r.read_exact(&mut b4)?;
                list.push((id, f32::from_le_bytes(b4)));
            }
            lists.push(list);
        }
        let mut g = Self::from_lists(k, lists)?;
        g.metric = metric;
        Ok(g)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

fn check_size(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Size("k must be positive".into()));
    }
    if n <= k {
        return Err(Error::Size(format!("need more than k={k} points, got {n}")));
    }
    if n > u32::MAX as usize {
        return Err(Error::Size(format!("{n} points exceed the u32 id range")));
    }
    Ok(())
}

/// Brute-force k nearest neighbors of every row.
pub fn exact_knn(space: &EmbeddingSpace, k: usize) -> Result<NeighborGraph> {
    exact_knn_rows(space, None, k)
}

/// Brute force restricted to `subset`; output ids index into `subset`.
pub fn exact_knn_rows(space: &EmbeddingSpace, subset: Option<&[usize]>, k: usize) -> Result<NeighborGraph> {
    check_size(subset.map_or(space.len(), <[usize]>::len), k)?;
    let rows = CosineRows::new(space, subset)?;
    Ok(exact_on(&rows, k))
}

fn exact_on(rows: &CosineRows<'_>, k: usize) -> NeighborGraph {
    let n = rows.len();
    let lists: Vec<Vec<(f32, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut all: Vec<(f32, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (rows.distance(i, j), j as u32))
                .collect();
            if k < all.len() {
                all.select_nth_unstable_by(k - 1, by_distance_then_id);
                all.truncate(k);
            }
            all.sort_unstable_by(by_distance_then_id);
            all
        })
        .collect();
    NeighborGraph::from_sorted(k, lists)
}

/// Neighbor-descent settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnDescentParams {
    pub max_iterations: usize,
    /// Fraction of `k` sampled from each candidate pool per iteration.
    pub sample_rate: f64,
    /// Stop once an iteration changes fewer than `delta * N * k` entries.
    pub convergence_delta: f64,
    /// At or below this many points the exact graph is returned instead.
    pub exact_threshold: usize,
}

impl Default for NnDescentParams {
    fn default() -> Self {
        Self {
            max_iterations: 16,
            sample_rate: 1.0,
            convergence_delta: 0.001,
            exact_threshold: 1024,
        }
    }
}

/// Approximate k nearest neighbors via neighbor descent.
///
/// Output is a pure function of `(space, k, params, seed)`; it does not depend
/// on the rayon thread count.
pub fn nn_descent(
    space: &EmbeddingSpace,
    k: usize,
    params: &NnDescentParams,
    seed: u64,
) -> Result<NeighborGraph> {
    nn_descent_rows(space, None, k, params, seed)
}

pub fn nn_descent_rows(
    space: &EmbeddingSpace,
    subset: Option<&[usize]>,
    k: usize,
    params: &NnDescentParams,
    seed: u64,
) -> Result<NeighborGraph> {
    let n = subset.map_or(space.len(), <[usize]>::len);
    check_size(n, k)?;
    if !(params.sample_rate > 0.0 && params.sample_rate <= 1.0) {
        return Err(Error::Domain(format!(
            "sample rate {} outside (0, 1]",
            params.sample_rate
        )));
    }
    let rows = CosineRows::new(space, subset)?;
    if n <= params.exact_threshold {
        return Ok(exact_on(&rows, k));
    }
    Ok(descend(&rows, k, params, seed))
}

#[derive(Clone, Copy)]
struct Slot {
    dist: f32,
    id: u32,
    is_new: bool,
}

fn node_rng(seed: u64, round: u64, phase: u64, node: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((round * 2 + phase) << 32) | node as u64);
    rng
}

/// Inserts `(dist, id)` into a sorted, full list if it beats the worst entry.
fn try_insert(list: &mut Vec<Slot>, id: u32, dist: f32) -> bool {
    let key = (dist, id);
    let last = list.last().expect("lists are never empty");
    if by_distance_then_id(&key, &(last.dist, last.id)) != Ordering::Less {
        return false;
    }
    if list.iter().any(|s| s.id == id) {
        return false;
    }
    let pos = list.partition_point(|s| by_distance_then_id(&(s.dist, s.id), &key) == Ordering::Less);
    list.insert(
        pos,
        Slot {
            dist,
            id,
            is_new: true,
        },
    );
    list.pop();
    true
}

const JOIN_CHUNK: usize = 2048;

fn descend(rows: &CosineRows<'_>, k: usize, params: &NnDescentParams, seed: u64) -> NeighborGraph {
    let n = rows.len();
    let sample = ((params.sample_rate * k as f64).ceil() as usize).clamp(1, k);

    let mut graph: Vec<Vec<Slot>> = (0..n)
        .into_par_iter()
        .map(|v| {
            let mut rng = node_rng(seed, 0, 0, v);
            let mut list: Vec<Slot> = index::sample(&mut rng, n - 1, k)
                .into_iter()
                .map(|j| {
                    let u = if j >= v { j + 1 } else { j };
                    Slot {
                        dist: rows.distance(v, u),
                        id: u as u32,
                        is_new: true,
                    }
                })
                .collect();
            list.sort_unstable_by(|a, b| by_distance_then_id(&(a.dist, a.id), &(b.dist, b.id)));
            list
        })
        .collect();

    for round in 1..=params.max_iterations as u64 {
        // Forward candidates: a sample of the new entries, all of the old ones.
        let forward: Vec<(Vec<u32>, Vec<u32>)> = graph
            .par_iter()
            .enumerate()
            .map(|(v, list)| {
                let mut fresh: Vec<u32> = list.iter().filter(|s| s.is_new).map(|s| s.id).collect();
                if fresh.len() > sample {
                    let mut rng = node_rng(seed, round, 0, v);
                    fresh.partial_shuffle(&mut rng, sample);
                    fresh.truncate(sample);
                }
                fresh.sort_unstable();
                let old: Vec<u32> = list.iter().filter(|s| !s.is_new).map(|s| s.id).collect();
                (fresh, old)
            })
            .collect();

        graph.par_iter_mut().zip(&forward).for_each(|(list, (fresh, _))| {
            for slot in list.iter_mut() {
                if fresh.binary_search(&slot.id).is_ok() {
                    slot.is_new = false;
                }
            }
        });

        let mut rev_new: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut rev_old: Vec<Vec<u32>> = vec![Vec::new(); n];
        for (v, (fresh, old)) in forward.iter().enumerate() {
            for &u in fresh {
                rev_new[u as usize].push(v as u32);
            }
            for &u in old {
                rev_old[u as usize].push(v as u32);
            }
        }

        let candidates: Vec<(Vec<u32>, Vec<u32>)> = forward
            .into_par_iter()
            .zip(rev_new.into_par_iter().zip(rev_old.into_par_iter()))
            .enumerate()
            .map(|(v, ((mut fresh, mut old), (mut rnew, mut rold)))| {
                let mut rng = node_rng(seed, round, 1, v);
                if rnew.len() > sample {
                    rnew.partial_shuffle(&mut rng, sample);
                    rnew.truncate(sample);
                }
                if rold.len() > sample {
                    rold.partial_shuffle(&mut rng, sample);
                    rold.truncate(sample);
                }
                fresh.extend(rnew);
                fresh.sort_unstable();
                fresh.dedup();
                old.extend(rold);
                old.sort_unstable();
                old.dedup();
                old.retain(|u| fresh.binary_search(u).is_err());
                (fresh, old)
            })
            .collect();

        let mut updates = 0usize;
        for start in (0..n).step_by(JOIN_CHUNK) {
            let end = (start + JOIN_CHUNK).min(n);
            let worst: Vec<f32> = graph.iter().map(|l| l[k - 1].dist).collect();
            let mut proposals: Vec<(u32, f32, u32)> = (start..end)
                .into_par_iter()
                .flat_map_iter(|v| {
                    let (fresh, old) = &candidates[v];
                    let mut out = Vec::new();
                    let mut consider = |a: u32, b: u32| {
                        if a == b {
                            return;
                        }
                        let d = rows.distance(a as usize, b as usize);
                        if d <= worst[a as usize] {
                            out.push((a, d, b));
                        }
                        if d <= worst[b as usize] {
                            out.push((b, d, a));
                        }
                    };
                    for (i, &a) in fresh.iter().enumerate() {
                        for &b in &fresh[i + 1..] {
                            consider(a, b);
                        }
                        for &b in old {
                            consider(a, b);
                        }
                    }
                    out
                })
                .collect();
            proposals.par_sort_unstable_by(|x, y| {
                x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.cmp(&y.2))
            });
            proposals.dedup_by(|x, y| x.0 == y.0 && x.2 == y.2);
            for (target, d, cand) in proposals {
                if try_insert(&mut graph[target as usize], cand, d) {
                    updates += 1;
                }
            }
        }

        if (updates as f64) < params.convergence_delta * (n * k) as f64 {
            break;
        }
    }

    let lists = graph
        .into_iter()
        .map(|l| l.into_iter().map(|s| (s.dist, s.id)).collect())
        .collect();
    NeighborGraph::from_sorted(k, lists)
}

/// How the neighbor graph is built by higher-level routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KnnMode {
    Exact,
    NnDescent { params: NnDescentParams, seed: u64 },
}

impl KnnMode {
    pub fn build(&self, space: &EmbeddingSpace, subset: Option<&[usize]>, k: usize) -> Result<NeighborGraph> {
        match self {
            KnnMode::Exact => exact_knn_rows(space, subset, k),
            KnnMode::NnDescent { params, seed } => nn_descent_rows(space, subset, k, params, *seed),
        }
    }
}

/// Fraction of `approx`'s neighbor entries that also appear in `exact`.
pub fn recall(approx: &NeighborGraph, exact: &NeighborGraph) -> f64 {
    let n = exact.node_count();
    assert_eq!(approx.node_count(), n, "graphs cover different node counts");
    let hits: usize = (0..n)
        .map(|i| {
            let truth = exact.neighbor_ids(i);
            approx
                .neighbor_ids(i)
                .iter()
                .filter(|id| truth.contains(id))
                .count()
        })
        .sum();
    hits as f64 / (n * exact.k()).max(1) as f64
}
