//! Weighted adversarial fine-tuning toward a shifted target domain.
//!
//! The encoder is trained with a sample-weighted triplet loss on sampled
//! source pairs while a small MLP discriminator tries to tell source pairs
//! from target pairs. Discriminator and encoder updates alternate; the
//! encoder sees the label-flipped discriminator loss.

use std::path::PathBuf;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::acss::{
    aggregate_pair_feature, compute_w1, compute_w2, compute_weight_vector, curriculum_window, select_source_subset,
    CurriculumMode, CurriculumState, PairFeature, SamplerDump, Window,
};
use crate::corpus::PairRecord;
use crate::encoders::{BoundParams, DualEncoder, GraphEncoder, ParamStore, TokenSequence};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::linalg::{check_dims, dot};
use crate::optim::{Adam, AdamConfig};
use crate::pretrain::epoch_batches;
use crate::rng::{self, Rng};
use crate::tape::{Mat, Tape, Var};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    HardestInBatch,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            mining: Mining::HardestInBatch,
        }
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

/// In-batch negatives: `for_text[i]` is an image index, `for_image[i]` a
/// text index, never equal to `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub for_text: Vec<usize>,
    pub for_image: Vec<usize>,
}

/// `sims[i][j]` is the similarity of text `i` and image `j`.
pub fn mine_negatives(sims: &[Vec<f64>], mining: Mining, rng: &mut Rng) -> Negatives {
    let n = sims.len();
    let pick = |i: usize, sim_at: &dyn Fn(usize) -> f64, rng: &mut Rng| match mining {
        Mining::HardestInBatch => (0..n)
            .filter(|&j| j != i)
            .fold(None, |best: Option<usize>, j| match best {
                Some(b) if sim_at(b) >= sim_at(j) => Some(b),
                _ => Some(j),
            })
            .expect("batch has at least two pairs"),
        Mining::Random => {
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        }
    };
    let mut for_text = Vec::with_capacity(n);
    let mut for_image = Vec::with_capacity(n);
    for i in 0..n {
        for_text.push(pick(i, &|j| sims[i][j], rng));
    }
    for i in 0..n {
        for_image.push(pick(i, &|j| sims[j][i], rng));
    }
    Negatives { for_text, for_image }
}

fn check_batch(n: usize, weights: &[f64]) -> Result<()> {
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: weights.len(),
        });
    }
    Ok(())
}

/// Per-anchor hinges `(text anchor, image anchor)` for given negatives.
pub fn triplet_hinges(text_embs: &[Vec<f64>], image_embs: &[Vec<f64>], margin: f64, negs: &Negatives) -> Vec<(f64, f64)> {
    (0..text_embs.len())
        .map(|i| {
            let pos = cosine_distance(&text_embs[i], &image_embs[i]);
            let t = (pos - cosine_distance(&text_embs[i], &image_embs[negs.for_text[i]]) + margin).max(0.0);
            let v = (pos - cosine_distance(&image_embs[i], &text_embs[negs.for_image[i]]) + margin).max(0.0);
            (t, v)
        })
        .collect()
}

/// Mean over pairs of `w_i * (text-anchor hinge + image-anchor hinge)`.
pub fn weighted_triplet_loss(
    text_embs: &[Vec<f64>],
    image_embs: &[Vec<f64>],
    weights: &[f64],
    config: &TripletConfig,
    rng: &mut Rng,
) -> Result<f64> {
    let n = text_embs.len();
    check_batch(n, weights)?;
    if image_embs.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: image_embs.len(),
        });
    }
    check_dims(text_embs.iter().chain(image_embs).map(Vec::as_slice), text_embs[0].len())?;
    let sims: Vec<Vec<f64>> = text_embs
        .iter()
        .map(|t| image_embs.iter().map(|v| dot(t, v)).collect())
        .collect();
    let negs = mine_negatives(&sims, config.mining, rng);
    let hinges = triplet_hinges(text_embs, image_embs, config.margin, &negs);
    Ok(hinges.iter().zip(weights).map(|((t, v), w)| w * (t + v)).sum::<f64>() / n as f64)
}

fn column(values: &[f64]) -> Mat {
    Mat::from_shape_vec((values.len(), 1), values.to_vec()).expect("column vector")
}

/// Tape form of [`weighted_triplet_loss`] for unit-norm `n x d` rows.
pub fn triplet_on_tape(tape: &mut Tape, text: Var, image: Var, weights: &[f64], margin: f64, negs: &Negatives) -> Var {
    let n = weights.len();
    let sims = tape.matmul_bt(text, image);
    let pos = tape.gather(sims, (0..n).map(|i| (i, i)).collect());
    let neg_t = tape.gather(sims, (0..n).map(|i| (i, negs.for_text[i])).collect());
    let neg_v = tape.gather(sims, (0..n).map(|i| (negs.for_image[i], i)).collect());
    let mut hinge = |neg: Var| {
        let gap = tape.sub(neg, pos);
        let shifted = tape.add_scalar(gap, margin);
        tape.relu(shifted)
    };
    let (h_t, h_v) = (hinge(neg_t), hinge(neg_v));
    let both = tape.add(h_t, h_v);
    let weighted = tape.mul_const(both, column(weights));
    let total = tape.sum(weighted);
    tape.scale(total, 1.0 / n as f64)
}

/// Three-layer MLP over `[text; image]`: `2d -> d -> d/2 -> 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub params: ParamStore,
}

const DISC_LAYERS: [(&str, &str); 3] = [("disc.w1", "disc.b1"), ("disc.w2", "disc.b2"), ("disc.w3", "disc.b3")];

impl Discriminator {
    fn shapes(embed_dim: usize) -> [(usize, usize); 3] {
        let hidden = (embed_dim / 2).max(1);
        [(2 * embed_dim, embed_dim), (embed_dim, hidden), (hidden, 1)]
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases.
    pub fn new(embed_dim: usize, seed: u64) -> Self {
        let mut rng = rng::substream(seed, rng::DISCRIMINATOR);
        let mut params = ParamStore::new();
        for ((w, b), (fan_in, fan_out)) in DISC_LAYERS.iter().zip(Self::shapes(embed_dim)) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.insert(*w, Mat::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)));
            params.insert(*b, Mat::zeros((1, fan_out)));
        }
        Self { params }
    }

    pub fn zeros(embed_dim: usize) -> Self {
        let mut params = ParamStore::new();
        for ((w, b), (fan_in, fan_out)) in DISC_LAYERS.iter().zip(Self::shapes(embed_dim)) {
            params.insert(*w, Mat::zeros((fan_in, fan_out)));
            params.insert(*b, Mat::zeros((1, fan_out)));
        }
        Self { params }
    }

    pub fn embed_dim(&self) -> usize {
        self.params.get("disc.w1").nrows() / 2
    }
}

/// Probability that the pair comes from the source domain.
pub fn discriminator_forward(text_emb: &[f64], image_emb: &[f64], disc: &Discriminator) -> Result<f64> {
    let d = disc.embed_dim();
    check_dims([text_emb, image_emb], d)?;
    let mut h = Mat::from_shape_vec((1, 2 * d), [text_emb, image_emb].concat()).expect("row vector");
    for (layer, (w, b)) in DISC_LAYERS.iter().enumerate() {
        h = h.dot(disc.params.get(w)) + disc.params.get(b);
        if layer < 2 {
            h.mapv_inplace(|x| x.max(0.0));
        }
    }
    Ok(1.0 / (1.0 + (-h[[0, 0]]).exp()))
}

/// Source probabilities (`n x 1`) for stacked `[text | image]` rows.
pub fn discriminator_on_tape(tape: &mut Tape, bound: &BoundParams, inputs: Var) -> Var {
    let mut h = inputs;
    for (layer, (w, b)) in DISC_LAYERS.iter().enumerate() {
        h = tape.matmul(h, bound.var(w));
        h = tape.add_row(h, bound.var(b));
        if layer < 2 {
            h = tape.relu(h);
        }
    }
    tape.sigmoid(h)
}

fn target_weights(weights: &[f64], weight_target: bool) -> Vec<f64> {
    if weight_target {
        weights.to_vec()
    } else {
        vec![1.0; weights.len()]
    }
}

/// `(disc_loss, enc_loss)` from discriminator outputs on aligned source and
/// target pairs. With `weight_target` off the target terms use weight 1.
pub fn adversarial_losses_from_probs(p_src: &[f64], p_tgt: &[f64], weights: &[f64], weight_target: bool) -> (f64, f64) {
    let n = weights.len() as f64;
    let wt = target_weights(weights, weight_target);
    let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let mut disc = 0.0;
    let mut enc = 0.0;
    for i in 0..weights.len() {
        let (s, t) = (clamp(p_src[i]), clamp(p_tgt[i]));
        disc -= weights[i] * s.ln() + wt[i] * (1.0 - t).ln();
        enc -= wt[i] * t.ln() + weights[i] * (1.0 - s).ln();
    }
    (disc / n, enc / n)
}

/// `(text, image)` embedding pairs.
pub type EmbeddedPair = (Vec<f64>, Vec<f64>);

pub fn adversarial_losses(
    src_pairs: &[EmbeddedPair],
    tgt_pairs: &[EmbeddedPair],
    weights: &[f64],
    disc: &Discriminator,
    weight_target: bool,
) -> Result<(f64, f64)> {
    if src_pairs.len() != weights.len() || tgt_pairs.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: weights.len(),
            got: src_pairs.len().max(tgt_pairs.len()),
        });
    }
    let probs = |pairs: &[EmbeddedPair]| {
        pairs
            .iter()
            .map(|(t, v)| discriminator_forward(t, v, disc))
            .collect::<Result<Vec<_>>>()
    };
    Ok(adversarial_losses_from_probs(
        &probs(src_pairs)?,
        &probs(tgt_pairs)?,
        weights,
        weight_target,
    ))
}

/// Tape form of [`adversarial_losses_from_probs`]; returns `(disc, enc)`.
pub fn adversarial_on_tape(tape: &mut Tape, p_src: Var, p_tgt: Var, weights: &[f64], weight_target: bool) -> (Var, Var) {
    let n = weights.len() as f64;
    let w = column(weights);
    let wt = column(&target_weights(weights, weight_target));
    let mut logs = |p: Var| {
        let c = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
        let log_p = tape.log(c);
        let neg = tape.scale(c, -1.0);
        let one_minus = tape.add_scalar(neg, 1.0);
        (log_p, tape.log(one_minus))
    };
    let (log_s, log_1m_s) = logs(p_src);
    let (log_t, log_1m_t) = logs(p_tgt);
    let mut weighted_sum = |a: Var, wa: &Mat, b: Var, wb: &Mat| {
        let a = tape.mul_const(a, wa.clone());
        let b = tape.mul_const(b, wb.clone());
        let both = tape.add(a, b);
        let s = tape.sum(both);
        tape.scale(s, -1.0 / n)
    };
    let disc = weighted_sum(log_s, &w, log_1m_t, &wt);
    let enc = weighted_sum(log_t, &wt, log_1m_s, &w);
    (disc, enc)
}

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Similarity-based source sampling and weighting.
    pub ss: bool,
    /// Curriculum rank windows; without it the window is the full range.
    pub cl: bool,
    /// Adversarial discriminator term.
    pub at: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            ss: true,
            cl: true,
            at: true,
        }
    }
}

impl Toggles {
    pub fn label(&self) -> &'static str {
        match (self.ss, self.cl, self.at) {
            (true, true, true) => "full",
            (false, true, true) => "w/o SS",
            (true, false, true) => "w/o CL",
            (true, true, false) => "w/o AT",
            (false, false, false) => "triplet only",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Weight of the adversarial term.
    pub beta: f64,
    #[serde(alias = "finetune_lr")]
    pub lr: f64,
    /// Discriminator learning rate; `None` means ten times `lr`.
    pub disc_lr: Option<f64>,
    pub epochs: usize,
    pub target_batch: usize,
    pub source_batch: usize,
    /// Require `source_batch == 5 * target_batch`.
    pub enforce_ratio: bool,
    pub adv_weight_target: bool,
    pub triplet: TripletConfig,
    pub curriculum_increment: f64,
    pub curriculum_mode: CurriculumMode,
    pub adam: AdamConfig,
    /// Keep the epoch with the best target-validation MeanR.
    pub select_best_val: bool,
    /// Record sampler state for every step.
    pub debug_dump: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lr: 1e-7,
            disc_lr: None,
            epochs: 5,
            target_batch: 16,
            source_batch: 80,
            enforce_ratio: true,
            adv_weight_target: true,
            triplet: TripletConfig::default(),
            curriculum_increment: 0.2,
            curriculum_mode: CurriculumMode::Window,
            adam: AdamConfig::default(),
            select_best_val: true,
            debug_dump: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::config("adapt.beta", "must be non-negative"));
        }
        if !(self.lr >= 0.0) || self.disc_lr.is_some_and(|l| !(l >= 0.0)) {
            return Err(Error::config("adapt.lr", "learning rates must be non-negative"));
        }
        if self.target_batch < 2 || self.source_batch < self.target_batch {
            return Err(Error::config(
                "adapt.target_batch",
                "need target_batch >= 2 and source_batch >= target_batch",
            ));
        }
        if self.enforce_ratio && self.source_batch != 5 * self.target_batch {
            return Err(Error::config(
                "adapt.source_batch",
                "must equal 5 * target_batch unless enforce_ratio is off",
            ));
        }
        if !(self.triplet.margin > 0.0) {
            return Err(Error::config("adapt.triplet.margin", "must be positive"));
        }
        if !(self.curriculum_increment > 0.0 && self.curriculum_increment <= 1.0) {
            return Err(Error::config("adapt.curriculum_increment", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn disc_lr(&self) -> f64 {
        self.disc_lr.unwrap_or(10.0 * self.lr)
    }

    /// Number of curriculum bands covering the rank range.
    fn curriculum_epochs(&self) -> usize {
        ((1.0 / self.curriculum_increment) + 1e-9).floor().max(1.0) as usize
    }

    /// Rank window for 1-based `epoch`; epochs past the last band stay on it.
    pub fn window_for(&self, epoch: usize, toggles: Toggles) -> Result<Option<Window>> {
        if !toggles.ss {
            return Ok(None);
        }
        if !toggles.cl {
            return Ok(Some(Window::FULL));
        }
        let bands = self.curriculum_epochs();
        let state = CurriculumState::new(epoch.min(bands), bands, self.curriculum_increment, self.curriculum_mode)?;
        Ok(Some(curriculum_window(&state)))
    }
}

/// One JSON-lines entry of the fine-tuning log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogEntry {
    pub step: usize,
    pub epoch: usize,
    pub window: Option<Window>,
    pub triplet: f64,
    pub adv_enc: Option<f64>,
    pub adv_disc: Option<f64>,
    pub wvec_min: f64,
    pub wvec_max: f64,
    /// `triplet + beta * adv_enc`.
    pub total: f64,
    /// Set on the last step of an epoch when a validation split exists.
    pub val_mean_recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: DualEncoder,
    pub discriminator: Discriminator,
    pub log: Vec<FinetuneLogEntry>,
    pub sampler_dumps: Vec<SamplerDump>,
    /// 1-based epoch whose parameters were kept.
    pub selected_epoch: usize,
    pub val_mean_recall: Option<f64>,
}

fn pair_features(model: &DualEncoder, records: &[PairRecord]) -> Result<Vec<PairFeature>> {
    records
        .iter()
        .map(|r| aggregate_pair_feature(&model.encode_image(&r.image)?, &model.encode_caption(&r.caption_tokens)?))
        .collect()
}

fn embed_pairs(enc: &GraphEncoder<'_>, tape: &mut Tape, records: &[&PairRecord]) -> Result<(Var, Var)> {
    let max_len = enc.model.config.max_seq_len;
    let images: Vec<_> = records.iter().map(|r| &r.image).collect();
    let seqs = records
        .iter()
        .map(|r| TokenSequence::wrap(&r.caption_tokens, max_len))
        .collect::<Result<Vec<_>>>()?;
    let text = enc.texts(tape, &seqs)?;
    let image = enc.images(tape, &images)?;
    Ok((text, image))
}

fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn diverged(context: String, value: f64, model: &DualEncoder, dump_path: &Option<PathBuf>) -> Error {
    if let Some(path) = dump_path {
        if let Err(e) = model.save(path, "diverged") {
            return e;
        }
    }
    Error::DivergedLoss { context, value }
}

/// Adapt `pretrained` to the target domain.
///
/// `source` and `target` are the training pairs of each domain;
/// `target_val` (possibly empty) drives checkpoint selection. Sampler
/// features come from the frozen `pretrained` encoder.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    pretrained: &DualEncoder,
    source: &[PairRecord],
    target: &[PairRecord],
    target_val: &[PairRecord],
    config: &AdaptConfig,
    toggles: Toggles,
    seed: u64,
    dump_path: Option<PathBuf>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    if target.len() < 2 {
        return Err(Error::BatchTooSmall(target.len()));
    }
    let ratio = config.source_batch as f64 / config.target_batch as f64;
    let (src_feats, tgt_feats) = if toggles.ss {
        (pair_features(pretrained, source)?, pair_features(pretrained, target)?)
    } else {
        (Vec::new(), Vec::new())
    };

    let mut model = pretrained.clone();
    let mut disc = Discriminator::new(model.config.embed_dim, seed);
    let mut enc_adam = Adam::new(config.adam);
    let mut disc_adam = Adam::new(config.adam);
    let mut batch_rng = rng::substream(seed, rng::BATCHING);
    let mut mining_rng = rng::substream(seed, rng::MINING);
    let mut log = Vec::new();
    let mut dumps = Vec::new();
    let mut best: Option<(f64, usize, DualEncoder)> = None;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let window = config.window_for(epoch, toggles)?;
        for tgt_idx in epoch_batches(target.len(), config.target_batch, &mut batch_rng) {
            step += 1;
            let n = tgt_idx.len();
            let n_src = ((ratio * n as f64).round() as usize).max(n);
            if source.len() < n_src {
                return Err(Error::InsufficientSources {
                    needed: n_src,
                    got: source.len(),
                });
            }
            let pool = sample(&mut batch_rng, source.len(), n_src).into_vec();
            let (chosen, wvec, w1_shape) = match window {
                Some(win) => {
                    let t: Vec<PairFeature> = tgt_idx.iter().map(|&i| tgt_feats[i].clone()).collect();
                    let s: Vec<PairFeature> = pool.iter().map(|&i| src_feats[i].clone()).collect();
                    let w1 = compute_w1(&t, &s)?;
                    let picked = select_source_subset(&w1, win, n)?;
                    let chosen: Vec<usize> = picked.iter().map(|&k| pool[k]).collect();
                    let sel: Vec<PairFeature> = chosen.iter().map(|&i| src_feats[i].clone()).collect();
                    let w2 = compute_w2(&sel, &t)?;
                    (chosen, compute_weight_vector(&w2), w1.shape())
                }
                None => (pool[..n].to_vec(), vec![1.0; n], (0, 0)),
            };
            if config.debug_dump {
                dumps.push(SamplerDump {
                    step,
                    w1_shape,
                    window,
                    selected: chosen.clone(),
                    wvec: wvec.clone(),
                });
            }

            let mut tape = Tape::new();
            let enc = GraphEncoder::bind(&model, &mut tape);
            let src_records: Vec<&PairRecord> = chosen.iter().map(|&i| &source[i]).collect();
            let (s_txt, s_img) = embed_pairs(&enc, &mut tape, &src_records)?;
            let sims = rows_of(&tape.value(s_txt).dot(&tape.value(s_img).t()));
            let negs = mine_negatives(&sims, config.triplet.mining, &mut mining_rng);
            let triplet = triplet_on_tape(&mut tape, s_txt, s_img, &wvec, config.triplet.margin, &negs);

            let (total, adv_enc, adv_disc) = if toggles.at {
                let tgt_records: Vec<&PairRecord> = tgt_idx.iter().map(|&i| &target[i]).collect();
                let (t_txt, t_img) = embed_pairs(&enc, &mut tape, &tgt_records)?;
                let src_in = tape.concat_cols(vec![s_txt, s_img]);
                let tgt_in = tape.concat_cols(vec![t_txt, t_img]);

                // discriminator update on detached embeddings
                let mut dt = Tape::new();
                let bound = BoundParams::bind(&mut dt, &disc.params);
                let si = dt.leaf(tape.value(src_in).clone());
                let ti = dt.leaf(tape.value(tgt_in).clone());
                let ps = discriminator_on_tape(&mut dt, &bound, si);
                let pt = discriminator_on_tape(&mut dt, &bound, ti);
                let (disc_loss, _) = adversarial_on_tape(&mut dt, ps, pt, &wvec, config.adv_weight_target);
                let disc_value = dt.scalar(disc_loss);
                if !disc_value.is_finite() {
                    return Err(diverged(
                        format!("finetune step {step} discriminator"),
                        disc_value,
                        &model,
                        &dump_path,
                    ));
                }
                let g = bound.gradients(&dt.backward(disc_loss), &disc.params);
                disc_adam.step(&mut disc.params, &g, config.disc_lr());

                // encoder term against the updated discriminator
                let bound = BoundParams::bind(&mut tape, &disc.params);
                let ps = discriminator_on_tape(&mut tape, &bound, src_in);
                let pt = discriminator_on_tape(&mut tape, &bound, tgt_in);
                let (_, enc_loss) = adversarial_on_tape(&mut tape, ps, pt, &wvec, config.adv_weight_target);
                let scaled = tape.scale(enc_loss, config.beta);
                let total = tape.add(triplet, scaled);
                (total, Some(tape.scalar(enc_loss)), Some(disc_value))
            } else {
                (triplet, None, None)
            };

            let total_value = tape.scalar(total);
            if !total_value.is_finite() {
                return Err(diverged(format!("finetune step {step}"), total_value, &model, &dump_path));
            }
            let grads = enc.gradients(&tape.backward(total));
            log.push(FinetuneLogEntry {
                step,
                epoch,
                window,
                triplet: tape.scalar(triplet),
                adv_enc,
                adv_disc,
                wvec_min: wvec.iter().cloned().fold(f64::INFINITY, f64::min),
                wvec_max: wvec.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                total: total_value,
                val_mean_recall: None,
            });
            enc_adam.step(&mut model.params, &grads, config.lr);
        }
        if !target_val.is_empty() {
            let mr = evaluate(&model, target_val)?.mean_recall;
            if let Some(last) = log.last_mut() {
                last.val_mean_recall = Some(mr);
            }
            if best.as_ref().is_none_or(|(b, _, _)| mr > *b) {
                best = Some((mr, epoch, model.clone()));
            }
        }
    }

    let (model, selected_epoch, val_mean_recall) = match best {
        Some((mr, epoch, kept)) if config.select_best_val => (kept, epoch, Some(mr)),
        _ => {
            let last = log.iter().rev().find_map(|e| e.val_mean_recall);
            (model, config.epochs, last)
        }
    };
    Ok(FinetuneOutcome {
        model,
        discriminator: disc,
        log,
        sampler_dumps: dumps,
        selected_epoch,
        val_mean_recall,
    })
}
