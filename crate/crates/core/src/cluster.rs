//! K-means clustering of engagement features into pseudo-label spaces.

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{EngagementKind, EngagementVector};
use crate::{par, seed};

pub const CLUSTER_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the largest centroid displacement falls below this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest inertia wins.
    pub restarts: usize,
    /// When set, run mini-batch updates with this batch size instead of full Lloyd.
    pub mini_batch: Option<usize>,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 8,
            seed: 0,
            max_iters: 300,
            tol: 1e-6,
            restarts: 3,
            mini_batch: None,
        }
    }
}

/// Fitted centroids over one engagement feature space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub version: u32,
    pub kind: EngagementKind,
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    pub iterations_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_ids: Option<Vec<String>>,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn assign(&self, feature: &EngagementVector) -> Result<usize> {
        if feature.kind != self.kind {
            return Err(Error::Input(format!(
                "cannot assign a {:?} feature with a {:?} cluster model",
                feature.kind, self.kind
            )));
        }
        self.assign_values(&feature.values)
    }

    pub fn assign_values(&self, values: &[f64]) -> Result<usize> {
        if values.len() != self.dim {
            return Err(Error::Input(format!(
                "feature dimension {} does not match cluster dimension {}",
                values.len(),
                self.dim
            )));
        }
        Ok(nearest(&self.centroids, self.dim, values).0)
    }

    /// Sum of squared distances from `points` to their nearest centroids.
    pub fn inertia_of(&self, points: &[Vec<f64>]) -> f64 {
        par::map(points, |p| nearest(&self.centroids, self.dim, p).1)
            .into_iter()
            .sum()
    }

    pub fn with_fit_ids(mut self, ids: Vec<String>) -> Self {
        self.fit_ids = Some(ids);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.version != CLUSTER_FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported cluster model version {}",
                self.version
            )));
        }
        if self.k == 0 || self.dim == 0 || self.centroids.len() != self.k * self.dim {
            return Err(Error::Input(format!(
                "cluster model has {} values for k={} dim={}",
                self.centroids.len(),
                self.k,
                self.dim
            )));
        }
        if !(self.inertia >= 0.0) || self.centroids.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input("cluster model holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: ClusterModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_string(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_string(path)?)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[f64], dim: usize, p: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Number of distinct points (bitwise, with -0.0 folded into 0.0).
pub fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|x| (x + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Fit k-means on engagement vectors that all share one kind and dimension.
pub fn fit_clusters(features: &[EngagementVector], config: &KMeansConfig) -> Result<ClusterModel> {
    let kind = match features.first() {
        Some(f) => f.kind,
        None => return Err(Error::Fit("no features to cluster".into())),
    };
    if features.iter().any(|f| f.kind != kind) {
        return Err(Error::Input(
            "features mix comment and reaction kinds".into(),
        ));
    }
    let points: Vec<Vec<f64>> = features.iter().map(|f| f.values.clone()).collect();
    fit_points(&points, kind, config)
}

/// Fit k-means on raw points.
pub fn fit_points(
    points: &[Vec<f64>],
    kind: EngagementKind,
    config: &KMeansConfig,
) -> Result<ClusterModel> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if config.max_iters == 0 {
        return Err(Error::Config("max_iters must be positive".into()));
    }
    if !(config.tol >= 0.0) {
        return Err(Error::Config("tol must be non-negative".into()));
    }
    if config.mini_batch == Some(0) {
        return Err(Error::Config("mini_batch size must be positive".into()));
    }
    let dim = match points.first() {
        Some(p) => p.len(),
        None => return Err(Error::Fit("no points to cluster".into())),
    };
    if dim == 0 {
        return Err(Error::Input("points have dimension 0".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::Input(format!(
            "point dimension {} differs from {}",
            p.len(),
            dim
        )));
    }
    if points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Input("points contain non-finite values".into()));
    }
    let distinct = count_distinct(points);
    if distinct < k {
        return Err(Error::Fit(format!(
            "only {distinct} distinct points for k={k}"
        )));
    }

    let mut best: Option<(Vec<f64>, f64, usize)> = None;
    for restart in 0..config.restarts.max(1) {
        let mut rng = seed::rng(seed::derive_indexed(config.seed, &[restart as u64]));
        let init = kmeans_plus_plus(points, dim, k, &mut rng);
        let (centroids, iters) = match config.mini_batch {
            Some(b) => mini_batch(points, dim, init, b, config, &mut rng),
            None => lloyd(points, dim, init, config),
        };
        let inertia: f64 = par::map(points, |p| nearest(&centroids, dim, p).1)
            .into_iter()
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((centroids, inertia, iters));
        }
    }
    let (centroids, inertia, iterations_run) = best.expect("at least one restart");
    Ok(ClusterModel {
        version: CLUSTER_FORMAT_VERSION,
        kind,
        k,
        dim,
        seed: config.seed,
        centroids,
        inertia,
        iterations_run,
        fit_ids: None,
    })
}

fn kmeans_plus_plus(points: &[Vec<f64>], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let r = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, w) in d2.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            acc += w;
            pick = Some(i);
            if acc > r {
                break;
            }
        }
        // Distinct-point precondition guarantees some positive weight.
        let pick = pick.expect("a point away from every chosen centroid");
        let start = centroids.len();
        centroids.extend_from_slice(&points[pick]);
        let new_c = &centroids[start..];
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, new_c));
        }
    }
    centroids
}

fn lloyd(
    points: &[Vec<f64>],
    dim: usize,
    mut centroids: Vec<f64>,
    config: &KMeansConfig,
) -> (Vec<f64>, usize) {
    let k = centroids.len() / dim;
    let mut prev_inertia = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..config.max_iters {
        iters += 1;
        let assigned = par::map(points, |p| nearest(&centroids, dim, p));
        let inertia: f64 = assigned.iter().map(|a| a.1).sum();
        debug_assert!(
            inertia <= prev_inertia + 1e-9 * prev_inertia.abs().max(1.0),
            "inertia increased from {prev_inertia} to {inertia}"
        );
        prev_inertia = inertia;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, (c, _)) in points.iter().zip(&assigned) {
            counts[*c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        // Emptied clusters move onto the point farthest from its centroid.
        let mut far: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for j in 0..k {
            let row = &mut sums[j * dim..(j + 1) * dim];
            if counts[j] > 0 {
                let n = counts[j] as f64;
                row.iter_mut().for_each(|s| *s /= n);
            } else {
                let (i, _) = far
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |b, (i, d)| if *d > b.1 { (i, *d) } else { b },
                    );
                row.copy_from_slice(&points[i]);
                far[i] = f64::NEG_INFINITY;
            }
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(sums.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = sums;
        if shift < config.tol {
            break;
        }
    }
    (centroids, iters)
}

fn mini_batch(
    points: &[Vec<f64>],
    dim: usize,
    mut centroids: Vec<f64>,
    batch: usize,
    config: &KMeansConfig,
    rng: &mut impl Rng,
) -> (Vec<f64>, usize) {
    let k = centroids.len() / dim;
    let n = points.len();
    let mut seen = vec![0usize; k];
    let mut iters = 0;
    for _ in 0..config.max_iters {
        iters += 1;
        let picks = index::sample(rng, n, batch.min(n)).into_vec();
        let before = centroids.clone();
        let batch_pts: Vec<&Vec<f64>> = picks.iter().map(|&i| &points[i]).collect();
        let assigned = par::map(&batch_pts, |p| nearest(&before, dim, p).0);
        for (p, c) in batch_pts.iter().zip(assigned) {
            seen[c] += 1;
            let eta = 1.0 / seen[c] as f64;
            for (x, y) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(p.iter()) {
                *x = (1.0 - eta) * *x + eta * y;
            }
        }
        let shift = before
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        if shift < config.tol {
            break;
        }
    }
    (centroids, iters)
}
