//! Curriculum source sampling for cross-domain fine-tuning.
//!
//! Target and source pairs are compared through frozen pair features. For
//! each target the sources are ranked by similarity; an epoch-dependent rank
//! window decides which sources are eligible, and a round-robin over targets
//! picks exactly one source per target. The similarity of the picked sources
//! to the target batch then becomes a per-sample weight vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_dims, cosine_matrix, normalized};

/// Quantile comparisons use this slack so that e.g. `3 * 0.2` still
/// includes rank quantile `0.6`.
const QUANTILE_EPS: f64 = 1e-12;

/// Unit-norm summary of one image-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairFeature(Vec<f64>);

impl PairFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// Normalized mean of an image and a text embedding.
pub fn aggregate_pair_feature(image_emb: &[f64], text_emb: &[f64]) -> Result<PairFeature> {
    check_dims([text_emb], image_emb.len())?;
    let mean: Vec<f64> = image_emb.iter().zip(text_emb).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok(PairFeature(normalized(&mean)?))
}

/// Dense similarity matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows.len(), self.rows.first().map_or(0, Vec::len))
    }
}

fn vectors(feats: &[PairFeature]) -> Vec<Vec<f64>> {
    feats.iter().map(|f| f.0.clone()).collect()
}

/// `W1(j, i)`: cosine of target `j` with source `i`.
pub fn compute_w1(target_feats: &[PairFeature], source_feats: &[PairFeature]) -> Result<SimilarityMatrix> {
    Ok(SimilarityMatrix {
        rows: cosine_matrix(&vectors(target_feats), &vectors(source_feats))?,
    })
}

/// `W2(i, j)`: cosine of selected source `i` with target `j`.
pub fn compute_w2(selected_source_feats: &[PairFeature], target_feats: &[PairFeature]) -> Result<SimilarityMatrix> {
    if selected_source_feats.len() != target_feats.len() {
        return Err(Error::DimensionMismatch {
            expected: target_feats.len(),
            got: selected_source_feats.len(),
        });
    }
    Ok(SimilarityMatrix {
        rows: cosine_matrix(&vectors(selected_source_feats), &vectors(target_feats))?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMode {
    /// Disjoint rank bands, one per epoch.
    Window,
    /// Bands grow from the most similar sources.
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    /// 1-based.
    pub epoch: usize,
    pub n_epochs: usize,
    pub increment: f64,
    pub mode: CurriculumMode,
}

impl CurriculumState {
    pub fn new(epoch: usize, n_epochs: usize, increment: f64, mode: CurriculumMode) -> Result<Self> {
        let state = Self {
            epoch,
            n_epochs,
            increment,
            mode,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epoch == 0 || self.epoch > self.n_epochs {
            return Err(Error::config("curriculum.epoch", "must lie in 1..=n_epochs"));
        }
        if !(self.increment > 0.0) || self.increment * self.n_epochs as f64 > 1.0 + QUANTILE_EPS {
            return Err(Error::config(
                "curriculum.increment",
                "must be positive with increment * n_epochs <= 1",
            ));
        }
        Ok(())
    }
}

/// Half-open rank-quantile band `(lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub const FULL: Window = Window { lo: 0.0, hi: 1.0 };

    /// Whether 0-based rank `r` of `n` falls inside the band.
    pub fn contains_rank(&self, r: usize, n: usize) -> bool {
        let q = (r + 1) as f64 / n as f64;
        q > self.lo + QUANTILE_EPS && q <= self.hi + QUANTILE_EPS
    }
}

pub fn curriculum_window(state: &CurriculumState) -> Window {
    let hi = state.epoch as f64 * state.increment;
    let lo = match state.mode {
        CurriculumMode::Window => (state.epoch - 1) as f64 * state.increment,
        CurriculumMode::Cumulative => 0.0,
    };
    Window { lo, hi }
}

/// Column indices of `row` from most to least similar; ties keep the lower
/// index first.
pub fn similarity_order(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    order
}

/// Exactly `n_targets` distinct source indices, in selection order.
///
/// Targets take turns in index order; each takes its most similar unselected
/// source inside the window. Once every window is used up, turns continue
/// over ranks below the window (closest first) and then above it.
pub fn select_source_subset(w1: &SimilarityMatrix, window: Window, n_targets: usize) -> Result<Vec<usize>> {
    let (rows, n_sources) = w1.shape();
    if rows < n_targets {
        return Err(Error::DimensionMismatch {
            expected: n_targets,
            got: rows,
        });
    }
    if n_sources < n_targets {
        return Err(Error::InsufficientSources {
            needed: n_targets,
            got: n_sources,
        });
    }
    let mut inside = Vec::with_capacity(n_targets);
    let mut fallback = Vec::with_capacity(n_targets);
    for row in &w1.rows[..n_targets] {
        let order = similarity_order(row);
        let in_window = |r: &usize| window.contains_rank(*r, n_sources);
        let quantile = |r: usize| (r + 1) as f64 / n_sources as f64;
        let below = (0..n_sources).rev().filter(|&r| quantile(r) <= window.lo + QUANTILE_EPS);
        let above = (0..n_sources).filter(|&r| quantile(r) > window.hi + QUANTILE_EPS);
        inside.push((0..n_sources).filter(in_window).map(|r| order[r]).collect::<Vec<_>>());
        fallback.push(below.chain(above).map(|r| order[r]).collect::<Vec<_>>());
    }

    let mut taken = vec![false; n_sources];
    let mut selected = Vec::with_capacity(n_targets);
    for lists in [inside, fallback] {
        round_robin(&lists, &mut taken, &mut selected, n_targets);
    }
    debug_assert_eq!(selected.len(), n_targets);
    Ok(selected)
}

fn round_robin(lists: &[Vec<usize>], taken: &mut [bool], selected: &mut Vec<usize>, goal: usize) {
    let mut cursor = vec![0usize; lists.len()];
    loop {
        let mut progressed = false;
        for (list, pos) in lists.iter().zip(cursor.iter_mut()) {
            if selected.len() == goal {
                return;
            }
            while *pos < list.len() && taken[list[*pos]] {
                *pos += 1;
            }
            if let Some(&s) = list.get(*pos) {
                taken[s] = true;
                selected.push(s);
                *pos += 1;
                progressed = true;
            }
        }
        if !progressed || selected.len() == goal {
            return;
        }
    }
}

/// Row sums of `W2`, min-max scaled and rescaled to sum to `n`; a constant
/// row-sum vector (within a relative 1e-12) yields all ones.
pub fn compute_weight_vector(w2: &SimilarityMatrix) -> Vec<f64> {
    let n = w2.rows.len();
    let sums: Vec<f64> = w2.rows.iter().map(|r| r.iter().sum()).collect();
    let min = sums.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sums.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 {
        return Vec::new();
    }
    // sums equal up to rounding count as constant
    if max - min <= 1e-12 * max.abs().max(min.abs()).max(1.0) {
        return vec![1.0; n];
    }
    let scaled: Vec<f64> = sums.iter().map(|s| (s - min) / (max - min)).collect();
    let total: f64 = scaled.iter().sum();
    scaled.iter().map(|v| v * n as f64 / total).collect()
}

/// Sampler state written per fine-tuning step when debugging is enabled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDump {
    pub step: usize,
    pub w1_shape: (usize, usize),
    pub window: Option<Window>,
    pub selected: Vec<usize>,
    pub wvec: Vec<f64>,
}
