//! Lloyd's k-means with k-means++ seeding, used to tokenize frame features
//! into discrete speech units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::io::Array;

pub const MAX_ITERS: usize = 300;

/// Row-major `[k x dim]` centroid matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<f32>,
    pub k: usize,
    pub dim: usize,
}

/// Discrete unit ids in `[0, codebook_size)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub ids: Vec<u32>,
    pub codebook_size: usize,
}

impl UnitSequence {
    pub fn new(ids: Vec<u32>, codebook_size: usize) -> Result<Self> {
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= codebook_size) {
            return Err(invalid(format!("unit id {bad} >= codebook size {codebook_size}")));
        }
        Ok(Self { ids, codebook_size })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Trace of one fitting run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub iterations: usize,
    /// Distortion (sum of squared distances) after every assignment step.
    pub distortion_history: Vec<f64>,
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_array(&self) -> Array {
        Array {
            dims: vec![self.k, self.dim],
            data: self.centroids.clone(),
        }
    }

    pub fn from_array(a: Array) -> Result<Self> {
        if a.dims.len() != 2 {
            return Err(Error::Shape(format!("codebook dims {:?}", a.dims)));
        }
        Ok(Self {
            k: a.dims[0],
            dim: a.dims[1],
            centroids: a.data,
        })
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k {
            let d = sq_dist(x, self.centroid(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn check_matrix(features: &[f32], dim: usize) -> Result<usize> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::Shape(format!(
            "{} feature values do not form rows of width {dim}",
            features.len()
        )));
    }
    Ok(features.len() / dim)
}

pub fn assign_units(features: &[f32], dim: usize, codebook: &Codebook) -> Result<UnitSequence> {
    if dim != codebook.dim {
        return Err(Error::Shape(format!(
            "feature dim {dim} != codebook dim {}",
            codebook.dim
        )));
    }
    let n = check_matrix(features, dim)?;
    let ids = (0..n)
        .map(|i| codebook.nearest(&features[i * dim..(i + 1) * dim]) as u32)
        .collect();
    UnitSequence::new(ids, codebook.k)
}

fn kmeans_pp_init(rows: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.len();
    let to_f64 = |r: &[f32]| r.iter().map(|&v| v as f64).collect::<Vec<_>>();
    let mut centroids = vec![to_f64(rows[rng.random_range(0..n)])];
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist64(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        let c = to_f64(rows[pick]);
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist64(r, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn sq_dist64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

fn nearest64(x: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist64(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn fit_kmeans(features: &[f32], dim: usize, k: usize, seed: u64) -> Result<KMeansFit> {
    let n = check_matrix(features, dim)?;
    if k == 0 {
        return Err(invalid("k must be positive"));
    }
    if n < k {
        return Err(invalid(format!("{n} points cannot fill {k} clusters")));
    }
    let rows: Vec<&[f32]> = features.chunks_exact(dim).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(&rows, k, &mut rng);
    let mut assign = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, r) in rows.iter().enumerate() {
            let (c, d) = nearest64(r, &centroids);
            if c != assign[i] {
                assign[i] = c;
                changed = true;
            }
            dists[i] = d;
        }
        history.push(dists.iter().sum());
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(r.iter()) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        // Empty clusters take over the point currently farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist64(rows[a], &centroids[assign[a]])
                            .total_cmp(&sq_dist64(rows[b], &centroids[assign[b]]))
                    })
                    .unwrap();
                centroids[c] = rows[far].iter().map(|&v| v as f64).collect();
                assign[far] = c;
            }
        }
    }
    let codebook = Codebook {
        centroids: centroids.iter().flatten().map(|&v| v as f32).collect(),
        k,
        dim,
    };
    Ok(KMeansFit {
        codebook,
        iterations,
        distortion_history: history,
    })
}
