//! Contrastive pretraining of the dual encoder on source-domain pairs.
//!
//! Each batch contributes two symmetric InfoNCE terms: whole images against
//! captions, and filtered segment aggregates against captions. Segments are
//! encoded by the image tower.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::corpus::{batch_indices, BatchMode, PairRecord};
use crate::encoders::{DualEncoder, GraphEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::linalg::{check_dims, dot, normalized};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::segment_filter::{area_survivors, select_by_score, FilterConfig};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    #[serde(alias = "learning_rate")]
    pub lr: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub lr_decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Keep the parameters of the epoch with the best validation MeanR.
    pub select_best_val: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            lr: 1e-5,
            lr_decay_factor: 0.3,
            decay_every: 10,
            epochs: 15,
            batch_size: 40,
            adam: AdamConfig::default(),
            select_best_val: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config("pretrain.temperature", "must be positive"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("pretrain.lr", "must be non-negative"));
        }
        if !(self.lr_decay_factor > 0.0) || self.decay_every == 0 {
            return Err(Error::config(
                "pretrain.lr_decay_factor",
                "decay factor and period must be positive",
            ));
        }
        if self.batch_size < 2 {
            return Err(Error::config("pretrain.batch_size", "must be at least 2"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        step_decay(self.lr, self.lr_decay_factor, self.decay_every, epoch)
    }
}

pub(crate) fn step_decay(lr: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    lr * factor.powi((epoch / every) as i32)
}

fn cross_entropy_rows(logits: &[Vec<f64>]) -> f64 {
    let n = logits.len();
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[i];
    }
    total / n as f64
}

/// Symmetric InfoNCE over `left · rightᵀ / τ` with pair `i ↔ i` positive.
pub fn contrastive_loss(left: &[Vec<f64>], right: &[Vec<f64>], temperature: f64) -> Result<f64> {
    if left.len() != right.len() {
        return Err(Error::DimensionMismatch {
            expected: left.len(),
            got: right.len(),
        });
    }
    if left.len() < 2 {
        return Err(Error::BatchTooSmall(left.len()));
    }
    let dim = left[0].len();
    check_dims(left.iter().chain(right).map(Vec::as_slice), dim)?;
    let logits: Vec<Vec<f64>> = left
        .iter()
        .map(|l| right.iter().map(|r| dot(l, r) / temperature).collect())
        .collect();
    let transposed: Vec<Vec<f64>> = (0..right.len()).map(|j| logits.iter().map(|row| row[j]).collect()).collect();
    Ok(0.5 * (cross_entropy_rows(&logits) + cross_entropy_rows(&transposed)))
}

/// Tape form of [`contrastive_loss`] over `n x d` embedding rows.
pub fn contrastive_on_tape(tape: &mut Tape, left: Var, right: Var, temperature: f64) -> Var {
    let sims = tape.matmul_bt(left, right);
    let logits = tape.scale(sims, 1.0 / temperature);
    let row_loss = tape.cross_entropy_diag(logits);
    let logits_t = tape.transpose(logits);
    let col_loss = tape.cross_entropy_diag(logits_t);
    let both = tape.add(row_loss, col_loss);
    tape.scale(both, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainLoss {
    pub img2text: f64,
    pub seg2text: f64,
    pub total: f64,
}

/// Both pretraining terms for aligned batches.
///
/// `seg_mask[i]` is true when pair `i` kept at least one segment; only those
/// pairs enter the segment term, which is 0 when fewer than two remain.
/// Segment aggregates are normalized here.
pub fn pretrain_loss(
    image_embs: &[Vec<f64>],
    segment_aggs: &[Vec<f64>],
    text_embs: &[Vec<f64>],
    temperature: f64,
    seg_mask: &[bool],
) -> Result<PretrainLoss> {
    let img2text = contrastive_loss(image_embs, text_embs, temperature)?;
    let mut segs = Vec::new();
    let mut texts = Vec::new();
    for ((agg, text), &keep) in segment_aggs.iter().zip(text_embs).zip(seg_mask) {
        if keep {
            segs.push(normalized(agg)?);
            texts.push(text.clone());
        }
    }
    let seg2text = if segs.len() >= 2 {
        contrastive_loss(&segs, &texts, temperature)?
    } else {
        0.0
    };
    Ok(PretrainLoss {
        img2text,
        seg2text,
        total: img2text + seg2text,
    })
}

/// Loss nodes for one batch.
pub struct BatchGraph {
    pub img2text: Var,
    pub seg2text: Option<Var>,
    pub total: Var,
    /// Pairs that kept at least one segment.
    pub seg_mask: Vec<bool>,
}

/// Record the pretraining loss of `batch` on `tape`.
pub fn batch_graph(
    enc: &GraphEncoder<'_>,
    tape: &mut Tape,
    batch: &[&PairRecord],
    filter: &FilterConfig,
    temperature: f64,
) -> Result<BatchGraph> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let max_len = enc.model.config.max_seq_len;
    let images: Vec<_> = batch.iter().map(|r| &r.image).collect();
    let seqs = batch
        .iter()
        .map(|r| TokenSequence::wrap(&r.caption_tokens, max_len))
        .collect::<Result<Vec<_>>>()?;
    let img = enc.images(tape, &images)?;
    let txt = enc.texts(tape, &seqs)?;
    let img2text = contrastive_on_tape(tape, img, txt, temperature);

    // area survivors of every pair, encoded in one pass
    let mut seg_inputs = Vec::new();
    let mut owners = Vec::new();
    let mut spans = Vec::with_capacity(batch.len());
    for (i, rec) in batch.iter().enumerate() {
        let start = seg_inputs.len();
        for j in area_survivors(rec.segments.iter().map(|s| s.area), filter.area_threshold) {
            seg_inputs.push(&rec.segments[j].feature);
            owners.push(i);
        }
        spans.push(start..seg_inputs.len());
    }
    let mut seg_mask = vec![false; batch.len()];
    let mut seg2text = None;
    if !seg_inputs.is_empty() {
        let seg = enc.images(tape, &seg_inputs)?;
        let owner_text = tape.select_rows(txt, owners);
        let scores = tape.row_dot(seg, owner_text);
        let mut aggs = Vec::new();
        let mut kept_pairs = Vec::new();
        for (i, span) in spans.into_iter().enumerate() {
            let local: Vec<f64> = span.clone().map(|r| tape.value(scores)[[r, 0]]).collect();
            let picked = select_by_score(&local, filter.score_threshold, filter.max_segments);
            if picked.is_empty() {
                continue;
            }
            let rows: Vec<usize> = picked.iter().map(|&k| span.start + k).collect();
            let e = tape.select_rows(seg, rows.clone());
            let w = tape.select_rows(scores, rows);
            aggs.push(tape.weighted_average(e, w));
            kept_pairs.push(i);
            seg_mask[i] = true;
        }
        if kept_pairs.len() >= 2 {
            let stacked = tape.concat_rows(aggs);
            let unit = tape.l2_normalize_rows(stacked);
            let texts = tape.select_rows(txt, kept_pairs);
            seg2text = Some(contrastive_on_tape(tape, unit, texts, temperature));
        }
    }
    let total = match seg2text {
        Some(s) => tape.add(img2text, s),
        None => img2text,
    };
    Ok(BatchGraph {
        img2text,
        seg2text,
        total,
        seg_mask,
    })
}

/// One JSON-lines entry of the pretraining log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss_img2text: f64,
    pub loss_seg2text: f64,
    /// Set on the last batch of an epoch when a validation split exists.
    pub val_mean_recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Best-validation parameters, or the final ones when selection is off.
    pub model: DualEncoder,
    pub log: Vec<PretrainLogEntry>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub val_mean_recall: Option<f64>,
}

impl PretrainOutcome {
    /// Mean total loss of each epoch, in order.
    pub fn epoch_losses(&self) -> Vec<f64> {
        epoch_means(&self.log)
    }
}

pub fn epoch_means(log: &[PretrainLogEntry]) -> Vec<f64> {
    let epochs = log.iter().map(|e| e.epoch).max().unwrap_or(0);
    (1..=epochs)
        .map(|ep| {
            let rows: Vec<f64> = log
                .iter()
                .filter(|e| e.epoch == ep)
                .map(|e| e.loss_img2text + e.loss_seg2text)
                .collect();
            rows.iter().sum::<f64>() / rows.len().max(1) as f64
        })
        .collect()
}

/// Shuffled full batches for one epoch. When the split is smaller than one
/// batch, the whole split forms a single batch instead.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    if n < batch_size {
        return batch_indices(n, n.max(1), rng, BatchMode::Train);
    }
    batch_indices(n, batch_size, rng, BatchMode::Train)
}

/// Train `model` on `train`, scoring `val` after every epoch.
///
/// On a non-finite loss the current parameters are written to `dump_path`
/// (when given) before [`Error::DivergedLoss`] is returned.
pub fn pretrain(
    mut model: DualEncoder,
    train: &[PairRecord],
    val: &[PairRecord],
    filter: &FilterConfig,
    config: &ContrastiveConfig,
    seed: u64,
    dump_path: Option<PathBuf>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    filter.validate()?;
    if train.len() < 2 {
        return Err(Error::BatchTooSmall(train.len()));
    }
    let mut batch_rng = rng::substream(seed, rng::BATCHING);
    let mut adam = Adam::new(config.adam);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, DualEncoder)> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let batches = epoch_batches(train.len(), config.batch_size, &mut batch_rng);
        for (b, idx) in batches.iter().enumerate() {
            let batch: Vec<&PairRecord> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let enc = GraphEncoder::bind(&model, &mut tape);
            let graph = batch_graph(&enc, &mut tape, &batch, filter, config.temperature)?;
            let total = tape.scalar(graph.total);
            if !total.is_finite() {
                if let Some(path) = &dump_path {
                    model.save(path, "diverged")?;
                }
                return Err(Error::DivergedLoss {
                    context: format!("pretrain epoch {} batch {}", epoch + 1, b + 1),
                    value: total,
                });
            }
            let grads = enc.gradients(&tape.backward(graph.total));
            log.push(PretrainLogEntry {
                epoch: epoch + 1,
                batch: b + 1,
                lr,
                loss_img2text: tape.scalar(graph.img2text),
                loss_seg2text: graph.seg2text.map_or(0.0, |s| tape.scalar(s)),
                val_mean_recall: None,
            });
            adam.step(&mut model.params, &grads, lr);
        }
        if !val.is_empty() {
            let mr = evaluate(&model, val)?.mean_recall;
            if let Some(last) = log.last_mut() {
                last.val_mean_recall = Some(mr);
            }
            if best.as_ref().is_none_or(|(b, _, _)| mr > *b) {
                best = Some((mr, epoch + 1, model.clone()));
            }
        }
    }

    match best {
        Some((mr, epoch, kept)) if config.select_best_val => Ok(PretrainOutcome {
            model: kept,
            log,
            selected_epoch: epoch,
            val_mean_recall: Some(mr),
        }),
        _ => {
            let val_mean_recall = log.iter().rev().find_map(|e| e.val_mean_recall);
            Ok(PretrainOutcome {
                model,
                log,
                selected_epoch: config.epochs,
                val_mean_recall,
            })
        }
    }
}
