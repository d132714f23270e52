//! Geo-tag analytics: frequency tables, tag-by-record occurrence vectors,
//! a two-component PCA of those vectors, and k-means over the projections.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::PairRecord;
use crate::error::{Error, Result};
use crate::rng;

/// Occurrences of every tag over all records.
pub fn tag_frequency(records: &[PairRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for tag in records.iter().flat_map(|r| &r.geo_tags) {
        *counts.entry(tag.clone()).or_insert(0) += 1;
    }
    counts
}

/// Rows are tags in order of first appearance, columns are records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagMatrix {
    pub tags: Vec<String>,
    pub counts: Vec<Vec<u32>>,
}

impl TagMatrix {
    pub fn from_records(records: &[PairRecord]) -> Self {
        let mut tags: Vec<String> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        for tag in records.iter().flat_map(|r| &r.geo_tags) {
            if !index.contains_key(tag.as_str()) {
                index.insert(tag, tags.len());
                tags.push(tag.clone());
            }
        }
        let mut counts = vec![vec![0u32; records.len()]; tags.len()];
        for (col, rec) in records.iter().enumerate() {
            for tag in &rec.geo_tags {
                counts[index[tag.as_str()]][col] += 1;
            }
        }
        Self { tags, counts }
    }

    pub fn n_records(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| r.iter().map(|&c| f64::from(c)).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    /// Unit principal axes, strongest first.
    pub components: [Vec<f64>; 2],
    /// Centered rows projected onto the two axes.
    pub projections: Vec<[f64; 2]>,
    /// Share of total variance captured by each axis.
    pub explained_variance: [f64; 2],
}

/// Flip `v` so its largest-magnitude entry is positive (first on ties).
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Two-component PCA of the rows of `rows` (covariance with `1/(n-1)`).
pub fn pca_rows(rows: &[Vec<f64>]) -> Result<PcaResult> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n < 2 || m < 2 {
        return Err(Error::TooFewPoints { k: 2, points: n.min(m) });
    }
    let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, m, |i, j| rows[i][j] - mean[j]);
    if centered.iter().all(|&x| x == 0.0) {
        return Err(Error::DegenerateVariance);
    }
    // SVD right vectors of wide matrices are not accurate enough here
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eigen = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));
    let variances: Vec<f64> = eigen.eigenvalues.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = variances.iter().sum();

    let mut components: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let mut explained = [0.0; 2];
    for (slot, &k) in order.iter().take(2).enumerate() {
        let mut axis: Vec<f64> = eigen.eigenvectors.column(k).iter().copied().collect();
        fix_sign(&mut axis);
        components[slot] = axis;
        explained[slot] = variances[k] / total;
    }
    let projections = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(PcaResult {
        components,
        projections,
        explained_variance: explained,
    })
}

pub fn pca_2d(matrix: &TagMatrix) -> Result<PcaResult> {
    pca_rows(&matrix.rows())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    /// Within-cluster sum of squares after every assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

pub const KMEANS_MAX_ITERS: usize = 100;

fn sq_dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn nearest(p: &[f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn cluster_tags(points: &[[f64; 2]], k: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::TooFewPoints { k, points: points.len() });
    }
    let mut rng = rng::substream(seed, rng::KMEANS);
    let mut chosen = vec![rng.random_range(0..points.len())];
    while chosen.len() < k {
        let centroids: Vec<[f64; 2]> = chosen.iter().map(|&i| points[i]).collect();
        let d2: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = d2.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every point coincides with a center; take the first unused one
            (0..points.len()).find(|i| !chosen.contains(i)).expect("k <= points")
        };
        chosen.push(next);
    }
    let mut centroids: Vec<[f64; 2]> = chosen.iter().map(|&i| points[i]).collect();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for (p, label) in points.iter().zip(labels.iter_mut()) {
            let (c, d) = nearest(p, &centroids);
            objective += d;
            if *label != c {
                *label = c;
                changed = true;
            }
        }
        history.push(objective);
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64; 2]> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *centroid = [
                    members.iter().map(|p| p[0]).sum::<f64>() / n,
                    members.iter().map(|p| p[1]).sum::<f64>() / n,
                ];
            }
        }
    }
    Ok(Clustering {
        labels,
        centroids,
        objective_history: history,
        iterations,
    })
}
