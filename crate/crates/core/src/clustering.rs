//! k-means session typing: k-means++ seeding, Lloyd iterations with
//! farthest-point repair of empty clusters, and best-of-restarts selection.
//!
//! Points may carry integer-like weights so that identical session vectors
//! can be clustered once with their multiplicity; a weight-`w` point is
//! equivalent to `w` copies of it.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingModel;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

const MAGIC: &[u8; 8] = b"APPKMS01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 10,
            max_iters: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTypeModel {
    pub config: KMeansConfig,
    pub dim: usize,
    /// `k x dim`, row-major.
    centroids: Vec<f64>,
    pub inertia: f64,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
    /// Inertia after each assignment step, per restart.
    #[serde(skip)]
    pub traces: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `centroids` (`k x dim`), lowest index on ties.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

impl SessionTypeModel {
    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn centroid(&self, type_id: usize) -> &[f64] {
        &self.centroids[type_id * self.dim..(type_id + 1) * self.dim]
    }

    pub fn centroids(&self) -> impl Iterator<Item = &[f64]> {
        self.centroids.chunks_exact(self.dim)
    }

    /// Session type of `vector`: nearest centroid, ties toward the lowest index.
    pub fn assign(&self, vector: &[f64]) -> Result<usize> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "clustering::assign",
                expected: self.dim,
                got: vector.len(),
            });
        }
        Ok(nearest(vector, &self.centroids, self.dim).0)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a KMeansConfig,
            dim: usize,
            inertia: f64,
            restart_inertias: &'a [f64],
        }
        let header = serde_json::to_vec(&Header {
            config: &self.config,
            dim: self.dim,
            inertia: self.inertia,
            restart_inertias: &self.restart_inertias,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &c in &self.centroids {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        Ok(out)
    }

    /// Reads a model written by [`Self::to_bytes`]. Centroids come back at
    /// `f32` precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<SessionTypeModel> {
        #[derive(Deserialize)]
        struct Header {
            config: KMeansConfig,
            dim: usize,
            inertia: f64,
            restart_inertias: Vec<f64>,
        }
        let bad = |m: &str| Error::Clustering(format!("model file: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?)?;
        let matrix = &bytes[16 + len..];
        if header.dim == 0 || matrix.len() != header.config.k * header.dim * 4 {
            return Err(bad("matrix byte length does not match k x dim"));
        }
        Ok(SessionTypeModel {
            config: header.config,
            dim: header.dim,
            centroids: matrix
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            inertia: header.inertia,
            restart_inertias: header.restart_inertias,
            traces: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<SessionTypeModel> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Weighted inertia of `points` against `centroids`.
pub fn inertia_of(points: &[Vec<f64>], weights: &[f64], model: &SessionTypeModel) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * nearest(p, &model.centroids, model.dim).1)
        .sum()
}

pub fn kmeans_fit(vectors: &[Vec<f64>], config: &KMeansConfig) -> Result<SessionTypeModel> {
    let weights = vec![1.0; vectors.len()];
    kmeans_fit_weighted(vectors, &weights, config)
}

pub fn kmeans_fit_weighted(
    vectors: &[Vec<f64>],
    weights: &[f64],
    config: &KMeansConfig,
) -> Result<SessionTypeModel> {
    let k = config.k;
    if k == 0 {
        return Err(Error::Clustering("k must be >= 1".into()));
    }
    if config.restarts == 0 || config.max_iters == 0 {
        return Err(Error::Clustering("restarts and max_iters must be >= 1".into()));
    }
    if weights.len() != vectors.len() {
        return Err(Error::DimensionMismatch {
            context: "clustering::weights",
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(Error::Clustering("weights must be finite and positive".into()));
    }
    let total_weight: f64 = weights.iter().sum();
    if vectors.is_empty() || total_weight < k as f64 {
        return Err(Error::Clustering(format!(
            "fewer points ({total_weight}) than clusters ({k})"
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 {
        return Err(Error::Clustering("zero-dimensional points".into()));
    }
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "clustering::kmeans_fit",
                expected: dim,
                got: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Clustering("non-finite input vector".into()));
        }
    }

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut restart_inertias = Vec::with_capacity(config.restarts);
    let mut traces = Vec::with_capacity(config.restarts);
    for r in 0..config.restarts {
        let seed = derive_seed(config.seed, &["restart", &r.to_string()]);
        let (centroids, inertia, trace) = lloyd(vectors, weights, k, dim, config, seed);
        restart_inertias.push(inertia);
        traces.push(trace);
        if best.as_ref().is_none_or(|(_, b)| inertia < *b) {
            best = Some((centroids, inertia));
        }
    }
    let (centroids, inertia) = best.expect("at least one restart");
    Ok(SessionTypeModel {
        config: config.clone(),
        dim,
        centroids,
        inertia,
        restart_inertias,
        traces,
    })
}

fn plus_plus_init(vectors: &[Vec<f64>], weights: &[f64], k: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    let pick = |rng: &mut rand_chacha::ChaCha8Rng, mass: &[f64]| -> Option<usize> {
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, m) in mass.iter().enumerate() {
            acc += m;
            if u < acc {
                return Some(i);
            }
        }
        mass.iter().rposition(|&m| m > 0.0)
    };
    let mut centroids = Vec::with_capacity(k * dim);
    let first = pick(&mut rng, weights).unwrap_or(0);
    centroids.extend_from_slice(&vectors[first]);
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[first])).collect();
    for _ in 1..k {
        let mass: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        // All remaining mass sits on existing centroids: duplicate one.
        let next = pick(&mut rng, &mass).unwrap_or(0);
        centroids.extend_from_slice(&vectors[next]);
        for (d, v) in d2.iter_mut().zip(vectors) {
            *d = d.min(sq_dist(v, &vectors[next]));
        }
    }
    centroids
}

fn lloyd(
    vectors: &[Vec<f64>],
    weights: &[f64],
    k: usize,
    dim: usize,
    config: &KMeansConfig,
    seed: u64,
) -> (Vec<f64>, f64, Vec<f64>) {
    let mut centroids = plus_plus_init(vectors, weights, k, dim, seed);
    let mut labels = vec![0usize; vectors.len()];
    let mut dists = vec![0f64; vectors.len()];
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    for iter in 0..config.max_iters {
        let mut inertia = 0.0;
        for (i, v) in vectors.iter().enumerate() {
            let (j, d) = nearest(v, &centroids, dim);
            labels[i] = j;
            dists[i] = d;
            inertia += weights[i] * d;
        }
        trace.push(inertia);
        let converged = inertia == 0.0 || (prev.is_finite() && (prev - inertia) < config.tol * prev);
        if converged || iter + 1 == config.max_iters {
            break;
        }
        prev = inertia;

        let mut sums = vec![0f64; k * dim];
        let mut mass = vec![0f64; k];
        for (i, v) in vectors.iter().enumerate() {
            let j = labels[i];
            mass[j] += weights[i];
            sums[j * dim..(j + 1) * dim]
                .iter_mut()
                .zip(v)
                .for_each(|(s, x)| *s += weights[i] * x);
        }
        let empties: Vec<usize> = (0..k).filter(|&j| mass[j] == 0.0).collect();
        for j in 0..k {
            if mass[j] > 0.0 {
                for (c, s) in centroids[j * dim..(j + 1) * dim]
                    .iter_mut()
                    .zip(&sums[j * dim..(j + 1) * dim])
                {
                    *c = s / mass[j];
                }
            }
        }
        if !empties.is_empty() {
            // Farthest points from their own centroids, largest first.
            let mut order: Vec<usize> = (0..vectors.len()).collect();
            order.sort_by(|&a, &b| dists[b].total_cmp(&dists[a]).then(a.cmp(&b)));
            for (&j, &p) in empties.iter().zip(&order) {
                if dists[p] > 0.0 {
                    centroids[j * dim..(j + 1) * dim].copy_from_slice(&vectors[p]);
                }
            }
        }
    }
    let inertia = *trace.last().unwrap();
    (centroids, inertia, trace)
}

/// App whose embedding is nearest to the centroid of `type_id`; ties go to
/// the lexicographically smallest app id.
pub fn nearest_app_to_centroid(
    model: &SessionTypeModel,
    embedding: &EmbeddingModel,
    type_id: usize,
) -> Result<String> {
    if embedding.vocab.is_empty() {
        return Err(Error::Clustering("empty vocabulary".into()));
    }
    if embedding.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            context: "clustering::nearest_app_to_centroid",
            expected: model.dim,
            got: embedding.dim(),
        });
    }
    if type_id >= model.k() {
        return Err(Error::Clustering(format!("type {type_id} out of range")));
    }
    let centroid = model.centroid(type_id);
    let mut best: Option<(&str, f64)> = None;
    for (app, row) in embedding.vocab.apps().iter().zip(embedding.rows()) {
        let d: f64 = row
            .iter()
            .zip(centroid)
            .map(|(x, c)| (*x as f64 - c).powi(2))
            .sum();
        let better = match best {
            None => true,
            Some((b_app, b_d)) => d < b_d || (d == b_d && app.as_str() < b_app),
        };
        if better {
            best = Some((app, d));
        }
    }
    Ok(best.unwrap().0.to_string())
}
