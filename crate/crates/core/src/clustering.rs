//! K-means over tool embeddings.
//!
//! Lloyd iterations with k-means++ seeding, Euclidean distance, and repair of
//! empty clusters by moving in the point farthest from its centroid. Several
//! independent seedings may be run; the lowest-SSE fit wins.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::par::{self, Parallelism};
use crate::rng::derive_rng;

pub const DEFAULT_CLUSTERS: usize = 30;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("cannot fit {m} clusters to {n} points")]
    TooFewPoints { m: usize, n: usize },
    #[error("cluster count must be at least 1")]
    ZeroClusters,
    #[error("vector `{id}` has dimension {got}, expected {expected}")]
    DimMismatch { id: String, got: usize, expected: usize },
    #[error("duplicate id `{0}` in clustering input")]
    DuplicateId(String),
    #[error("tool `{0}` was not part of the fitted set")]
    UnknownTool(String),
    #[error("malformed cluster model: {0}")]
    Malformed(String),
    #[error("cluster model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct KMeansOptions {
    pub m: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    /// Independent k-means++ seedings; the lowest final SSE is kept.
    pub n_init: usize,
    pub parallelism: Parallelism,
}

impl KMeansOptions {
    pub fn new(m: usize, seed: u64) -> Self {
        Self {
            m,
            seed,
            ..Self::default()
        }
    }
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            m: DEFAULT_CLUSTERS,
            seed: 0,
            max_iter: 200,
            tol: 1e-6,
            n_init: DEFAULT_N_INIT,
            parallelism: Parallelism::Sequential,
        }
    }
}

/// Restarts per fit. Lloyd's local optima are common even on a dozen
/// points, so a handful of seedings is not enough.
pub const DEFAULT_N_INIT: usize = 10;

/// Fitted partition of tools into `m` clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    m: usize,
    seed: u64,
    centroids: Vec<Embedding>,
    assignment: BTreeMap<String, usize>,
    sizes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ClusterModelFile {
    m: usize,
    seed: u64,
    centroids: Vec<Vec<f64>>,
    assignment: BTreeMap<String, usize>,
}

impl ClusterModel {
    pub fn from_parts(
        m: usize,
        seed: u64,
        centroids: Vec<Embedding>,
        assignment: BTreeMap<String, usize>,
    ) -> Result<Self, ClusterError> {
        if m == 0 {
            return Err(ClusterError::ZeroClusters);
        }
        if centroids.len() != m {
            return Err(ClusterError::Malformed(format!(
                "{} centroids for m = {m}",
                centroids.len()
            )));
        }
        let dim = centroids[0].dim();
        if centroids.iter().any(|c| c.dim() != dim) {
            return Err(ClusterError::Malformed("centroid dimensions differ".into()));
        }
        let mut sizes = vec![0; m];
        for (name, &c) in &assignment {
            if c >= m {
                return Err(ClusterError::Malformed(format!("`{name}` assigned to cluster {c} >= m")));
            }
            sizes[c] += 1;
        }
        Ok(Self {
            m,
            seed,
            centroids,
            assignment,
            sizes,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroids(&self) -> &[Embedding] {
        &self.centroids
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    pub fn cluster_of(&self, tool_name: &str) -> Result<usize, ClusterError> {
        self.assignment
            .get(tool_name)
            .copied()
            .ok_or_else(|| ClusterError::UnknownTool(tool_name.to_string()))
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignment
            .iter()
            .filter(move |(_, &c)| c == cluster)
            .map(|(n, _)| n.as_str())
    }

    /// Other clusters ordered by centroid distance from `cluster`, ties by index.
    pub fn nearest_clusters(&self, cluster: usize) -> Vec<usize> {
        let from = &self.centroids[cluster];
        let mut others: Vec<(f64, usize)> = (0..self.m)
            .filter(|&c| c != cluster)
            .map(|c| (sq_dist(from.values(), self.centroids[c].values()), c))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        others.into_iter().map(|(_, c)| c).collect()
    }

    pub fn to_json(&self) -> String {
        let file = ClusterModelFile {
            m: self.m,
            seed: self.seed,
            centroids: self.centroids.iter().map(|c| c.values().to_vec()).collect(),
            assignment: self.assignment.clone(),
        };
        serde_json::to_string_pretty(&file).expect("cluster model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ClusterError> {
        let file: ClusterModelFile = serde_json::from_str(text)?;
        let centroids = file
            .centroids
            .into_iter()
            .map(|c| Embedding::new(c).map_err(|e| ClusterError::Malformed(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(file.m, file.seed, centroids, file.assignment)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClusterError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Fit result with per-iteration diagnostics of the winning run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    /// Within-cluster SSE after every assignment step, ending with the SSE
    /// against the final centroids.
    pub sse_history: Vec<f64>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Labels in input order.
    pub labels: Vec<usize>,
}

pub fn fit_kmeans(vectors: &[(String, Embedding)], opts: &KMeansOptions) -> Result<ClusterModel, ClusterError> {
    fit_kmeans_traced(vectors, opts).map(|f| f.model)
}

pub fn fit_kmeans_traced(vectors: &[(String, Embedding)], opts: &KMeansOptions) -> Result<KMeansFit, ClusterError> {
    let n = vectors.len();
    if opts.m == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    if opts.m > n {
        return Err(ClusterError::TooFewPoints { m: opts.m, n });
    }
    let dim = vectors[0].1.dim();
    let mut seen = std::collections::HashSet::with_capacity(n);
    for (id, v) in vectors {
        if v.dim() != dim {
            return Err(ClusterError::DimMismatch {
                id: id.clone(),
                got: v.dim(),
                expected: dim,
            });
        }
        if !seen.insert(id.as_str()) {
            return Err(ClusterError::DuplicateId(id.clone()));
        }
    }
    let points: Vec<&[f64]> = vectors.iter().map(|(_, v)| v.values()).collect();

    // restarts are independent; the first run with the lowest SSE wins
    let runs = par::map_range(opts.n_init.max(1), opts.parallelism, |r| lloyd(&points, opts, r as u64));
    let mut best: Option<Run> = None;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    let run = best.expect("at least one run");
    let assignment = vectors
        .iter()
        .zip(&run.labels)
        .map(|((id, _), &c)| (id.clone(), c))
        .collect();
    let centroids = run
        .centroids
        .into_iter()
        .map(|c| Embedding::new(c).map_err(|e| ClusterError::Malformed(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let model = ClusterModel::from_parts(opts.m, opts.seed, centroids, assignment)?;
    Ok(KMeansFit {
        model,
        sse_history: run.history,
        sse: run.sse,
        iterations: run.iterations,
        converged: run.converged,
        labels: run.labels,
    })
}

struct Run {
    centroids: Vec<Vec<f64>>,
    labels: Vec<usize>,
    history: Vec<f64>,
    sse: f64,
    iterations: usize,
    converged: bool,
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_pp(points: &[&[f64]], m: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // rounding can leave target past the end; land on the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = points[next].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Nearest centroid per point (ties to the lower index) and squared distance.
fn assign(points: &[&[f64]], centroids: &[Vec<f64>], mode: Parallelism) -> Vec<(usize, f64)> {
    par::map(points, mode, |p| {
        let mut best = (0, f64::INFINITY);
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    })
}

/// Gives every empty cluster the point farthest from its current centroid,
/// taken from a cluster that can spare one.
fn repair_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], labels: &mut [(usize, f64)]) {
    let m = centroids.len();
    loop {
        let mut sizes = vec![0usize; m];
        for &(c, _) in labels.iter() {
            sizes[c] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let donor = labels
            .iter()
            .enumerate()
            .filter(|(_, (c, _))| sizes[*c] > 1)
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .expect("m <= n guarantees a donor");
        centroids[empty] = points[donor].to_vec();
        labels[donor] = (empty, 0.0);
    }
}

fn means(points: &[&[f64]], labels: &[(usize, f64)], m: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &(c, _)) in points.iter().zip(labels) {
        counts[c] += 1;
        for (s, x) in sums[c].iter_mut().zip(p.iter()) {
            *s += x;
        }
    }
    for (s, &k) in sums.iter_mut().zip(&counts) {
        if k > 0 {
            s.iter_mut().for_each(|x| *x /= k as f64);
        }
    }
    sums
}

fn total(labels: &[(usize, f64)]) -> f64 {
    labels.iter().map(|&(_, d)| d).sum()
}

fn lloyd(points: &[&[f64]], opts: &KMeansOptions, run_idx: u64) -> Run {
    let m = opts.m;
    let dim = points[0].len();
    let mut rng = derive_rng(opts.seed, "kmeans++", run_idx);
    let mut centroids = kmeans_pp(points, m, &mut rng);
    let mut labels = assign(points, &centroids, opts.parallelism);
    repair_empty(points, &mut centroids, &mut labels);
    let mut history = vec![total(&labels)];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        let updated = means(points, &labels, m, dim);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let mut next = assign(points, &centroids, opts.parallelism);
        repair_empty(points, &mut centroids, &mut next);
        history.push(total(&next));
        let changed = next.iter().zip(&labels).any(|(a, b)| a.0 != b.0);
        labels = next;
        if !changed || shift < opts.tol {
            converged = true;
            break;
        }
    }

    let mut labels: Vec<usize> = labels.into_iter().map(|(c, _)| c).collect();
    centroids = means_of(points, &labels, m, dim);
    let mut passes = 0;
    while passes < opts.max_iter && hartigan_pass(points, &mut labels, &mut centroids) {
        passes += 1;
        centroids = means_of(points, &labels, m, dim);
        history.push(sse_of(points, &labels, &centroids));
    }
    let final_sse = sse_of(points, &labels, &centroids);
    history.push(final_sse);
    Run {
        centroids,
        labels,
        history,
        sse: final_sse,
        iterations,
        converged,
    }
}

fn means_of(points: &[&[f64]], labels: &[usize], m: usize, dim: usize) -> Vec<Vec<f64>> {
    let tagged: Vec<(usize, f64)> = labels.iter().map(|&c| (c, 0.0)).collect();
    means(points, &tagged, m, dim)
}

fn sse_of(points: &[&[f64]], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points.iter().zip(labels).map(|(p, &c)| sq_dist(p, &centroids[c])).sum()
}

/// One sweep of Hartigan's single-point moves: a point leaves cluster `i`
/// for `j` when n_j/(n_j+1)·d_j² < n_i/(n_i-1)·d_i², which strictly lowers
/// the SSE. Fixed points of this rule are also Lloyd fixed points.
fn hartigan_pass(points: &[&[f64]], labels: &mut [usize], centroids: &mut [Vec<f64>]) -> bool {
    let mut sizes = vec![0usize; centroids.len()];
    for &c in labels.iter() {
        sizes[c] += 1;
    }
    let mut moved = false;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let i = *label;
        if sizes[i] < 2 {
            continue;
        }
        let ni = sizes[i] as f64;
        let leave = ni / (ni - 1.0) * sq_dist(p, &centroids[i]);
        let mut best = (i, leave);
        for (j, c) in centroids.iter().enumerate() {
            if j != i {
                let nj = sizes[j] as f64;
                let join = nj / (nj + 1.0) * sq_dist(p, c);
                if join < best.1 {
                    best = (j, join);
                }
            }
        }
        let (j, join) = best;
        // relative slack keeps rounding noise from cycling points back and forth
        if j == i || join >= leave * (1.0 - 1e-12) {
            continue;
        }
        let nj = sizes[j] as f64;
        for (c, x) in centroids[i].iter_mut().zip(p.iter()) {
            *c = (ni * *c - x) / (ni - 1.0);
        }
        for (c, x) in centroids[j].iter_mut().zip(p.iter()) {
            *c = (nj * *c + x) / (nj + 1.0);
        }
        sizes[i] -= 1;
        sizes[j] += 1;
        *label = j;
        moved = true;
    }
    moved
}
