//! Retrieval evaluation: cosine ranking, R@K in both directions, MeanR, and
//! the direct-transfer versus adapted comparison.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::PairRecord;
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::linalg::cosine_matrix;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Recalls in percent. `mean_recall` averages the six directional values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub mean_recall: f64,
}

impl RecallReport {
    pub fn from_recalls(i2t: [f64; 3], t2i: [f64; 3]) -> Self {
        let mean_recall = (i2t.iter().sum::<f64>() + t2i.iter().sum::<f64>()) / 6.0;
        Self {
            i2t_r1: i2t[0],
            i2t_r5: i2t[1],
            i2t_r10: i2t[2],
            t2i_r1: t2i[0],
            t2i_r5: t2i[1],
            t2i_r10: t2i[2],
            mean_recall,
        }
    }

    pub fn recalls(&self) -> [f64; 6] {
        [self.i2t_r1, self.i2t_r5, self.i2t_r10, self.t2i_r1, self.t2i_r5, self.t2i_r10]
    }
}

/// Gallery indices per query, most similar first; ties go to the lower index.
pub fn rank(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let sims = cosine_matrix(queries, gallery)?;
    Ok(sims.iter().map(|row| rank_row(row)).collect())
}

fn rank_row(sims: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sims.len()).collect();
    // stable sort keeps ascending index among equal similarities
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(Ordering::Equal));
    order
}

/// Percent of queries whose ground-truth gallery index is within the top `k`.
pub fn recall_at_k(rankings: &[Vec<usize>], ground_truth: &[usize], k: usize) -> f64 {
    assert!(k >= 1, "k must be positive");
    assert_eq!(rankings.len(), ground_truth.len(), "one ground truth per query");
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(ground_truth)
        .filter(|(r, gt)| r.iter().take(k).any(|g| g == *gt))
        .count();
    100.0 * hits as f64 / rankings.len() as f64
}

/// Both retrieval directions for aligned image/text embeddings (pair `i`
/// matches pair `i`).
pub fn recall_report(image_embs: &[Vec<f64>], text_embs: &[Vec<f64>]) -> Result<RecallReport> {
    if image_embs.len() != text_embs.len() {
        return Err(Error::DimensionMismatch {
            expected: image_embs.len(),
            got: text_embs.len(),
        });
    }
    let gt: Vec<usize> = (0..image_embs.len()).collect();
    let i2t = rank(image_embs, text_embs)?;
    let t2i = rank(text_embs, image_embs)?;
    let at = |r: &[Vec<usize>]| RECALL_KS.map(|k| recall_at_k(r, &gt, k));
    Ok(RecallReport::from_recalls(at(&i2t), at(&t2i)))
}

pub type EmbeddingPair = (Vec<Vec<f64>>, Vec<Vec<f64>>);

/// Image and caption embeddings for every record.
pub fn encode_records(model: &DualEncoder, records: &[PairRecord]) -> Result<EmbeddingPair> {
    let images = records
        .iter()
        .map(|r| model.encode_image(&r.image))
        .collect::<Result<Vec<_>>>()?;
    let texts = records
        .iter()
        .map(|r| model.encode_caption(&r.caption_tokens))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, texts))
}

pub fn evaluate(model: &DualEncoder, records: &[PairRecord]) -> Result<RecallReport> {
    if records.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let (images, texts) = encode_records(model, records)?;
    recall_report(&images, &texts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub direct: RecallReport,
    pub adapted: RecallReport,
    pub delta_mean_recall: f64,
}

/// Evaluate the source-pretrained and the adapted model on the same split.
pub fn transfer_eval(pretrained: &DualEncoder, adapted: &DualEncoder, target_test: &[PairRecord]) -> Result<TransferReport> {
    let direct = evaluate(pretrained, target_test)?;
    let adapted = evaluate(adapted, target_test)?;
    Ok(TransferReport {
        direct,
        adapted,
        delta_mean_recall: adapted.mean_recall - direct.mean_recall,
    })
}

/// Report file contents for the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub recall: RecallReport,
    pub n_queries: usize,
    pub checkpoint_id: String,
    pub manifest_path: String,
}
