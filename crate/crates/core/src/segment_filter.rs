//! Segment filtering and score-weighted aggregation.
//!
//! A segment survives when its area fraction exceeds the area threshold and
//! its embedding's inner product with the caption embedding exceeds the
//! score threshold; at most `max_segments` of the highest-scoring survivors
//! are kept. Survivors are averaged with their scores as weights.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::SegmentInput;
use crate::error::{Error, Result};
use crate::linalg::{check_dims, dot};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub area_threshold: f64,
    pub score_threshold: f64,
    pub max_segments: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            area_threshold: 0.2,
            score_threshold: 0.2,
            max_segments: 6,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.area_threshold) {
            return Err(Error::config("filter.area_threshold", "must lie in [0, 1)"));
        }
        if !self.score_threshold.is_finite() {
            return Err(Error::config("filter.score_threshold", "must be finite"));
        }
        if self.max_segments == 0 {
            return Err(Error::config("filter.max_segments", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    /// Position of the segment in the image's original segment list.
    pub index: usize,
    pub segment: SegmentInput,
    /// Unit-norm segment embedding.
    pub embedding: Vec<f64>,
    pub score: f64,
}

/// Indices of segments whose area is strictly above `area_threshold`.
pub fn area_survivors(areas: impl IntoIterator<Item = f64>, area_threshold: f64) -> Vec<usize> {
    areas
        .into_iter()
        .enumerate()
        .filter(|&(_, a)| a > area_threshold)
        .map(|(i, _)| i)
        .collect()
}

pub fn filter_by_area(segments: &[SegmentInput], area_threshold: f64) -> Vec<SegmentInput> {
    area_survivors(segments.iter().map(|s| s.area), area_threshold)
        .into_iter()
        .map(|i| segments[i].clone())
        .collect()
}

/// Inner product of each segment embedding with the text embedding.
pub fn score_segments(segment_embeddings: &[Vec<f64>], text_embedding: &[f64]) -> Result<Vec<f64>> {
    check_dims(segment_embeddings.iter().map(Vec::as_slice), text_embedding.len())?;
    Ok(segment_embeddings.iter().map(|e| dot(e, text_embedding)).collect())
}

/// Positions (into `scores`) kept by the score filter, highest score first.
///
/// Scores must exceed `score_threshold`; among equal scores the lower
/// position wins, and at most `max_segments` positions are returned.
pub fn select_by_score(scores: &[f64], score_threshold: f64, max_segments: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > score_threshold).collect();
    kept.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    kept.truncate(max_segments);
    kept
}

pub fn filter_by_score(scored: &[ScoredSegment], score_threshold: f64, max_segments: usize) -> Vec<ScoredSegment> {
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    // ties resolve on the original segment index, which is the input order
    select_by_score(&scores, score_threshold, max_segments)
        .into_iter()
        .map(|i| scored[i].clone())
        .collect()
}

/// Score-weighted mean of the segment embeddings. Not re-normalized.
pub fn aggregate_segments(scored: &[ScoredSegment]) -> Result<Vec<f64>> {
    let first = scored.first().ok_or(Error::EmptySegmentSet)?;
    let dim = first.embedding.len();
    check_dims(scored.iter().map(|s| s.embedding.as_slice()), dim)?;
    let total: f64 = scored.iter().map(|s| s.score).sum();
    let mut out = vec![0.0; dim];
    for s in scored {
        let w = s.score / total;
        out.iter_mut().zip(&s.embedding).for_each(|(o, e)| *o += w * e);
    }
    Ok(out)
}

/// Result of running the full filter pipeline on one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentAggregate {
    /// Weighted segment embedding; the zero vector when nothing survived.
    pub embedding: Vec<f64>,
    /// Original indices of the kept segments, highest score first.
    pub kept: Vec<usize>,
}

impl SegmentAggregate {
    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Area filter, embed survivors with `embed`, score against `text_embedding`,
/// score filter, cap, and aggregate.
pub fn segment_pipeline<F>(
    segments: &[SegmentInput],
    text_embedding: &[f64],
    config: &FilterConfig,
    mut embed: F,
) -> Result<SegmentAggregate>
where
    F: FnMut(&SegmentInput) -> Result<Vec<f64>>,
{
    let mut scored = Vec::new();
    for i in area_survivors(segments.iter().map(|s| s.area), config.area_threshold) {
        let embedding = embed(&segments[i])?;
        let score = score_segments(std::slice::from_ref(&embedding), text_embedding)?[0];
        scored.push(ScoredSegment {
            index: i,
            segment: segments[i].clone(),
            embedding,
            score,
        });
    }
    let kept = filter_by_score(&scored, config.score_threshold, config.max_segments);
    if kept.is_empty() {
        return Ok(SegmentAggregate {
            embedding: vec![0.0; text_embedding.len()],
            kept: Vec::new(),
        });
    }
    Ok(SegmentAggregate {
        embedding: aggregate_segments(&kept)?,
        kept: kept.iter().map(|s| s.index).collect(),
    })
}
