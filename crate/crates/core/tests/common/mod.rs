//! Independent brute-force oracles shared by the integration suites.
//!
//! Nothing here calls into the library's numeric code: every quantity is
//! recomputed from its definition with plain loops.

#![allow(dead_code)]

use rand::Rng as _;

pub mod checks;
use satret::rng::{self, Rng};

pub fn rng_for(seed: u64, name: &str) -> Rng {
    rng::substream(seed, name)
}

pub fn random_vec(r: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.random_range(-1.0..1.0)).collect()
}

pub fn unit_vec(r: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = random_vec(r, dim);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

pub fn inner(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    inner(a, b) / (inner(a, a).sqrt() * inner(b, b).sqrt())
}

/// Segments kept by the filter: area above `t_a`, score above `t_s`, and
/// fewer than `cap` passing segments that beat it (higher score, or equal
/// score at a lower index). Returned in descending score order.
pub fn kept_segments(areas: &[f64], scores: &[f64], t_a: f64, t_s: f64, cap: usize) -> Vec<usize> {
    let passes = |i: usize| areas[i] > t_a && scores[i] > t_s;
    let beats = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for i in 0..areas.len() {
        if !passes(i) {
            continue;
        }
        let better = (0..areas.len()).filter(|&j| j != i && passes(j) && beats(j, i)).count();
        if better < cap {
            kept.push((better, i));
        }
    }
    kept.sort();
    kept.into_iter().map(|(_, i)| i).collect()
}

/// Score-weighted mean of the kept embeddings.
pub fn weighted_mean(embeddings: &[Vec<f64>], scores: &[f64], kept: &[usize]) -> Vec<f64> {
    let dim = embeddings[0].len();
    let total: f64 = kept.iter().map(|&i| scores[i]).sum();
    let mut out = vec![0.0; dim];
    for &i in kept {
        for d in 0..dim {
            out[d] += scores[i] / total * embeddings[i][d];
        }
    }
    out
}

/// Recall in percent: a query hits when fewer than `k` gallery items beat
/// its ground truth (higher cosine, or equal cosine at a lower index).
pub fn recall_oracle(queries: &[Vec<f64>], gallery: &[Vec<f64>], truth: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (q, &g) in queries.iter().zip(truth) {
        let s = cosine(q, &gallery[g]);
        let better = (0..gallery.len())
            .filter(|&j| {
                let c = cosine(q, &gallery[j]);
                j != g && (c > s || (c == s && j < g))
            })
            .count();
        if better < k {
            hits += 1;
        }
    }
    100.0 * hits as f64 / queries.len() as f64
}

/// Rank list by exhaustive selection: repeatedly take the best remaining
/// gallery item, lower index first on ties.
pub fn rank_oracle(query: &[f64], gallery: &[Vec<f64>]) -> Vec<usize> {
    let sims: Vec<f64> = gallery.iter().map(|g| cosine(query, g)).collect();
    let mut left: Vec<usize> = (0..gallery.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for p in 1..left.len() {
            if sims[left[p]] > sims[left[best]] {
                best = p;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order with matching unit eigenvectors.
pub fn jacobi_eigen(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[y][y].total_cmp(&m[x][x]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Projections of the centred rows onto the top two covariance eigenvectors,
/// plus the eigenvalues, from an explicit covariance matrix.
pub fn pca_oracle(rows: &[Vec<f64>]) -> (Vec<[f64; 2]>, Vec<f64>) {
    let n = rows.len();
    let m = rows[0].len();
    let mean: Vec<f64> = (0..m).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, mu)| x - mu).collect())
        .collect();
    let mut cov = vec![vec![0.0; m]; m];
    for r in &centred {
        for a in 0..m {
            for b in 0..m {
                cov[a][b] += r[a] * r[b] / (n - 1) as f64;
            }
        }
    }
    let (values, vectors) = jacobi_eigen(&cov);
    let proj = centred
        .iter()
        .map(|r| [inner(r, &vectors[0]), inner(r, &vectors[1])])
        .collect();
    (proj, values)
}
