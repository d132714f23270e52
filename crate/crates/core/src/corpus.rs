//! Image-text pair corpora: the JSON-lines manifest format, dataset
//! splitting, batching, and a synthetic two-domain generator with a
//! controllable distribution shift.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Reserved token ids. Caption tokens in a manifest must be `>= FIRST_WORD`.
pub const PAD_TOKEN: u32 = 0;
pub const SOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
pub const FIRST_WORD: u32 = 3;

/// Row-major `height x width x 3` RGB grid with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::DimensionMismatch {
                expected: height * width * 3,
                got: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * 3;
        &self.data[at..at + 3]
    }

    fn from_nested(nested: Vec<Vec<Vec<f64>>>) -> std::result::Result<Self, String> {
        let height = nested.len();
        let width = nested.first().map_or(0, Vec::len);
        if height == 0 || width == 0 {
            return Err("pixel grid is empty".into());
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for row in nested {
            if row.len() != width {
                return Err("pixel rows have unequal widths".into());
            }
            for px in row {
                if px.len() != 3 {
                    return Err("pixels must have exactly 3 channels".into());
                }
                if px.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err("pixel values must lie in [0, 1]".into());
                }
                data.extend(px);
            }
        }
        Ok(Self { height, width, data })
    }

    fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.height)
            .map(|r| (0..self.width).map(|c| self.pixel(r, c).to_vec()).collect())
            .collect()
    }
}

/// Image content of a pair: raw pixels or a precomputed feature vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Features(Vec<f64>),
    Pixels(PixelGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum RawSegmentFeature {
    Vector(Vec<f64>),
    Pixels(Vec<Vec<Vec<f64>>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInput {
    /// Fraction of the image covered by the segment mask.
    pub area: f64,
    pub feature: ImageInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub domain: String,
    pub image: ImageInput,
    /// Caption token ids, not yet wrapped with SOS/EOS.
    pub caption_tokens: Vec<u32>,
    pub geo_tags: Vec<String>,
    pub segments: Vec<SegmentInput>,
}

const KEYS: [&str; 7] = [
    "id",
    "domain",
    "image_features",
    "image_pixels",
    "caption_tokens",
    "geo_tags",
    "segments",
];

fn malformed(line: usize, field: &str, reason: impl ToString) -> Error {
    Error::MalformedRecord {
        line,
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

fn take_field<T: DeserializeOwned>(obj: &mut Map<String, Value>, line: usize, field: &str) -> Result<Option<T>> {
    match obj.remove(field) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| malformed(line, field, e)),
    }
}

fn require<T>(v: Option<T>, line: usize, field: &str) -> Result<T> {
    v.ok_or_else(|| malformed(line, field, "missing"))
}

fn parse_record(text: &str, line: usize) -> Result<PairRecord> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(line, "<record>", e))?;
    let Value::Object(mut obj) = value else {
        return Err(malformed(line, "<record>", "expected a JSON object"));
    };
    if let Some(unknown) = obj.keys().find(|k| !KEYS.contains(&k.as_str())) {
        return Err(malformed(line, unknown, "unknown key"));
    }

    let id: String = require(take_field(&mut obj, line, "id")?, line, "id")?;
    if id.is_empty() {
        return Err(malformed(line, "id", "must be non-empty"));
    }
    let domain: String = require(take_field(&mut obj, line, "domain")?, line, "domain")?;

    let features: Option<Vec<f64>> = take_field(&mut obj, line, "image_features")?;
    let pixels: Option<Vec<Vec<Vec<f64>>>> = take_field(&mut obj, line, "image_pixels")?;
    let image = match (features, pixels) {
        (Some(_), Some(_)) => return Err(Error::MixedImageRepresentation(line)),
        (None, None) => return Err(malformed(line, "image_features", "missing image representation")),
        (Some(f), None) => {
            if f.is_empty() {
                return Err(malformed(line, "image_features", "must be non-empty"));
            }
            ImageInput::Features(f)
        }
        (None, Some(p)) => ImageInput::Pixels(PixelGrid::from_nested(p).map_err(|e| malformed(line, "image_pixels", e))?),
    };

    let caption_tokens: Vec<u32> = require(take_field(&mut obj, line, "caption_tokens")?, line, "caption_tokens")?;
    if caption_tokens.is_empty() {
        return Err(malformed(line, "caption_tokens", "must be non-empty"));
    }
    let geo_tags: Vec<String> = take_field(&mut obj, line, "geo_tags")?.unwrap_or_default();

    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawSegment {
        area: f64,
        feature: RawSegmentFeature,
    }
    let raw_segments: Vec<RawSegment> = take_field(&mut obj, line, "segments")?.unwrap_or_default();
    let mut segments = Vec::with_capacity(raw_segments.len());
    for seg in raw_segments {
        if !(0.0..=1.0).contains(&seg.area) {
            return Err(malformed(line, "segments", format!("area {} outside [0, 1]", seg.area)));
        }
        let feature = match seg.feature {
            RawSegmentFeature::Vector(v) => ImageInput::Features(v),
            RawSegmentFeature::Pixels(p) => {
                ImageInput::Pixels(PixelGrid::from_nested(p).map_err(|e| malformed(line, "segments", e))?)
            }
        };
        segments.push(SegmentInput { area: seg.area, feature });
    }

    Ok(PairRecord {
        id,
        domain,
        image,
        caption_tokens,
        geo_tags,
        segments,
    })
}

/// `(height, width)` for pixel grids, `(1, len)` for feature vectors.
fn input_shape(input: &ImageInput) -> (bool, usize, usize) {
    match input {
        ImageInput::Features(v) => (true, 1, v.len()),
        ImageInput::Pixels(p) => (false, p.height, p.width),
    }
}

/// Parse manifest text; one JSON record per non-blank line.
pub fn parse_manifest(text: &str) -> Result<Vec<PairRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut image_shape = None;
    let mut segment_shape = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec = parse_record(raw, line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        let shape = input_shape(&rec.image);
        if *image_shape.get_or_insert(shape) != shape {
            return Err(malformed(line, "image", "image shape differs from earlier records"));
        }
        for seg in &rec.segments {
            let shape = input_shape(&seg.feature);
            if *segment_shape.get_or_insert(shape) != shape {
                return Err(malformed(line, "segments", "segment feature dimension is not uniform"));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PairRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    domain: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_features: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_pixels: Option<Vec<Vec<Vec<f64>>>>,
    caption_tokens: &'a [u32],
    geo_tags: &'a [String],
    segments: Vec<SegmentOut>,
}

#[derive(Serialize)]
struct SegmentOut {
    area: f64,
    feature: RawSegmentFeature,
}

pub fn record_to_json(rec: &PairRecord) -> String {
    let (image_features, image_pixels) = match &rec.image {
        ImageInput::Features(f) => (Some(f.as_slice()), None),
        ImageInput::Pixels(p) => (None, Some(p.to_nested())),
    };
    let out = RecordOut {
        id: &rec.id,
        domain: &rec.domain,
        image_features,
        image_pixels,
        caption_tokens: &rec.caption_tokens,
        geo_tags: &rec.geo_tags,
        segments: rec
            .segments
            .iter()
            .map(|s| SegmentOut {
                area: s.area,
                feature: match &s.feature {
                    ImageInput::Features(f) => RawSegmentFeature::Vector(f.clone()),
                    ImageInput::Pixels(p) => RawSegmentFeature::Pixels(p.to_nested()),
                },
            })
            .collect(),
    };
    serde_json::to_string(&out).expect("record serialization is infallible")
}

pub fn manifest_to_string(records: &[PairRecord]) -> String {
    let mut s = String::new();
    for rec in records {
        s.push_str(&record_to_json(rec));
        s.push('\n');
    }
    s
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[PairRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_string(records)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// 7:1:2, used for the pretraining corpus.
    pub fn pretrain(seed: u64) -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed,
        }
    }

    /// 2:1:7, used for the limited-data target corpus.
    pub fn finetune(seed: u64) -> Self {
        Self {
            train: 0.2,
            val: 0.1,
            test: 0.7,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ratios = [self.train, self.val, self.test];
        if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidSplit("ratios must be positive".into()));
        }
        let sum: f64 = ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(train, val, test)` sizes for `n` items; rounding remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = (n as f64 * self.val).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        (n - val - test, val, test)
    }
}

/// Shuffle then slice into train/val/test.
pub fn split_dataset<T>(items: Vec<T>, split: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    split.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (n_train, n_val, _) = split.sizes(items.len());
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng::substream(split.seed, rng::SPLIT));

    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |range: std::ops::Range<usize>| -> Vec<T> {
        order[range]
            .iter()
            .map(|&i| slots[i].take().expect("permutation visits each index once"))
            .collect()
    };
    let train = take(0..n_train);
    let val = take(n_train..n_train + n_val);
    let test = take(n_train + n_val..order.len());
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Drop the final short batch.
    Train,
    /// Keep the final short batch.
    Eval,
}

/// Shuffled index batches over `0..n`.
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut Rng, mode: BatchMode) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

pub fn build_batches<T: Clone>(records: &[T], batch_size: usize, seed: u64, mode: BatchMode) -> Vec<Vec<T>> {
    let mut rng = rng::substream(seed, rng::BATCHING);
    batch_indices(records.len(), batch_size, &mut rng, mode)
        .into_iter()
        .map(|b| b.into_iter().map(|i| records[i].clone()).collect())
        .collect()
}

pub const SOURCE_DOMAIN: &str = "source-A";
pub const TARGET_DOMAIN: &str = "target-B";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub n_pairs: usize,
    pub feature_dim: usize,
    pub n_concepts: usize,
    pub domain_shift_strength: f64,
    pub segments_min: usize,
    pub segments_max: usize,
    pub tag_vocab: usize,
    /// Number of attribute slots in every caption template.
    pub attribute_slots: usize,
    /// Distinct values per attribute slot.
    pub attribute_values: usize,
    /// Scale of attribute prototypes relative to the unit concept prototypes.
    pub attribute_scale: f64,
    /// Standard deviation of isotropic feature noise.
    pub noise: f64,
    /// Concept-prior tilt per unit of shift strength.
    pub prior_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 512,
            feature_dim: 32,
            n_concepts: 8,
            domain_shift_strength: 1.0,
            segments_min: 3,
            segments_max: 8,
            tag_vocab: 40,
            attribute_slots: 4,
            attribute_values: 4,
            attribute_scale: 0.8,
            noise: 0.25,
            prior_skew: 1.5,
            seed: 0,
        }
    }
}

const WORDS_PER_CONCEPT: u32 = 2;
const FILLER_WORDS: u32 = 4;
const TAG_KEYS: [&str; 8] = [
    "building", "landuse", "amenity", "highway", "leisure", "natural", "power", "waterway",
];

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_pairs", self.n_pairs),
            ("feature_dim", self.feature_dim),
            ("n_concepts", self.n_concepts),
            ("segments_min", self.segments_min),
            ("tag_vocab", self.tag_vocab),
            ("attribute_slots", self.attribute_slots),
            ("attribute_values", self.attribute_values),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.segments_max < self.segments_min {
            return Err(Error::config("segments_max", "must be >= segments_min"));
        }
        if !(self.domain_shift_strength >= 0.0 && self.domain_shift_strength.is_finite()) {
            return Err(Error::config("domain_shift_strength", "must be finite and >= 0"));
        }
        if !(self.noise >= 0.0 && self.prior_skew >= 0.0 && self.attribute_scale >= 0.0) {
            return Err(Error::config("noise", "noise, prior_skew, attribute_scale must be >= 0"));
        }
        if self.feature_dim < self.semantic_dims() + 1 {
            return Err(Error::config(
                "feature_dim",
                format!("need at least {} dimensions", self.semantic_dims() + 1),
            ));
        }
        Ok(())
    }

    fn semantic_dims(&self) -> usize {
        self.n_concepts + self.attribute_slots * self.attribute_values
    }

    /// Smallest vocabulary that covers every generated caption token.
    pub fn vocab_size(&self) -> usize {
        FIRST_WORD as usize
            + self.n_concepts * WORDS_PER_CONCEPT as usize
            + self.attribute_slots * self.attribute_values
            + FILLER_WORDS as usize
    }

    /// Longest generated caption (before SOS/EOS).
    pub fn caption_len(&self) -> usize {
        WORDS_PER_CONCEPT as usize + self.attribute_slots + 2
    }
}

/// One generated domain plus the generator's ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticDomain {
    pub records: Vec<PairRecord>,
    pub concepts: Vec<usize>,
    /// `true` for segments generated as irrelevant distractors.
    pub distractors: Vec<Vec<bool>>,
    pub prototypes: Vec<Vec<f64>>,
    pub concept_prior: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub source: SyntheticDomain,
    pub target: SyntheticDomain,
}

fn gaussian(rng: &mut Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn orthonormal_basis(rng: &mut Rng, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p = crate::linalg::dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = crate::linalg::norm(&v);
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

struct Generator<'a> {
    cfg: &'a SyntheticCorpusConfig,
    attributes: Vec<Vec<Vec<f64>>>,
    distractor_basis: Vec<Vec<f64>>,
    templates: Vec<Vec<Slot>>,
    concept_tags: Vec<Vec<usize>>,
}

#[derive(Clone, Copy)]
enum Slot {
    Word(u32),
    Attribute(usize),
}

impl Generator<'_> {
    fn tag_name(i: usize) -> String {
        format!(
            "{}: {}_{i}",
            TAG_KEYS[i % TAG_KEYS.len()],
            TAG_KEYS[(i / TAG_KEYS.len()) % TAG_KEYS.len()]
        )
    }

    fn attribute_token(&self, slot: usize, value: usize) -> u32 {
        FIRST_WORD + self.cfg.n_concepts as u32 * WORDS_PER_CONCEPT + (slot * self.cfg.attribute_values + value) as u32
    }

    fn domain(&self, rng: &mut Rng, name: &str, prototypes: Vec<Vec<f64>>, prior: Vec<f64>) -> SyntheticDomain {
        let cfg = self.cfg;
        let dim = cfg.feature_dim;
        let pick = WeightedIndex::new(&prior).expect("concept prior is positive");
        let mut records = Vec::with_capacity(cfg.n_pairs);
        let mut concepts = Vec::with_capacity(cfg.n_pairs);
        let mut distractors = Vec::with_capacity(cfg.n_pairs);

        for idx in 0..cfg.n_pairs {
            let concept = pick.sample(rng);
            let values: Vec<usize> = (0..cfg.attribute_slots)
                .map(|_| rng.random_range(0..cfg.attribute_values))
                .collect();

            let mut image = prototypes[concept].clone();
            for (slot, &v) in values.iter().enumerate() {
                axpy(&mut image, cfg.attribute_scale, &self.attributes[slot][v]);
            }
            axpy(&mut image, cfg.noise, &gaussian(rng, dim));

            let caption_tokens = self.templates[concept]
                .iter()
                .map(|s| match *s {
                    Slot::Word(w) => w,
                    Slot::Attribute(slot) => self.attribute_token(slot, values[slot]),
                })
                .collect();

            let mut geo_tags: Vec<String> = self.concept_tags[concept]
                .iter()
                .filter(|_| rng.random_bool(0.8))
                .map(|&t| Self::tag_name(t))
                .collect();
            for _ in 0..rng.random_range(0..=2) {
                geo_tags.push(Self::tag_name(rng.random_range(0..cfg.tag_vocab)));
            }

            let n_segments = rng.random_range(cfg.segments_min..=cfg.segments_max);
            let n_relevant = if n_segments == 1 { 1 } else { rng.random_range(1..n_segments) };
            let mut segments = Vec::with_capacity(n_segments);
            let mut mask = Vec::with_capacity(n_segments);
            for s in 0..n_segments {
                let relevant = s < n_relevant;
                let (area, feature) = if relevant {
                    let mut f = prototypes[concept].clone();
                    let slot = rng.random_range(0..cfg.attribute_slots);
                    axpy(&mut f, cfg.attribute_scale, &self.attributes[slot][values[slot]]);
                    axpy(&mut f, cfg.noise, &gaussian(rng, dim));
                    (rng.random_range(0.25..0.6), f)
                } else {
                    let mut f = vec![0.0; dim];
                    for b in &self.distractor_basis {
                        let w: f64 = StandardNormal.sample(rng);
                        axpy(&mut f, w, b);
                    }
                    (rng.random_range(0.01..0.15), f)
                };
                segments.push(SegmentInput {
                    area,
                    feature: ImageInput::Features(feature),
                });
                mask.push(!relevant);
            }
            // interleave relevant and distractor segments deterministically
            let mut order: Vec<usize> = (0..n_segments).collect();
            order.shuffle(rng);
            let segments = order.iter().map(|&i| segments[i].clone()).collect();
            let mask = order.iter().map(|&i| mask[i]).collect();

            records.push(PairRecord {
                id: format!("{name}-{idx:05}"),
                domain: name.to_string(),
                image: ImageInput::Features(image),
                caption_tokens,
                geo_tags,
                segments,
            });
            concepts.push(concept);
            distractors.push(mask);
        }
        SyntheticDomain {
            records,
            concepts,
            distractors,
            prototypes,
            concept_prior: prior,
        }
    }
}

/// Generate a source domain A and a shifted target domain B.
///
/// Both domains share concepts, attribute prototypes and caption templates.
/// Domain B translates every concept prototype by `domain_shift_strength`
/// along a fixed random direction and tilts the concept prior so that the
/// concepts rare in A are common in B. With zero strength the two domains
/// are drawn from the same distribution.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = rng::substream(cfg.seed, rng::DATA);
    let dim = cfg.feature_dim;
    let basis = orthonormal_basis(&mut rng, dim);
    let (concept_basis, rest) = basis.split_at(cfg.n_concepts);
    let (attr_basis, distractor_basis) = rest.split_at(cfg.attribute_slots * cfg.attribute_values);

    let prototypes_a: Vec<Vec<f64>> = concept_basis.to_vec();
    let attributes: Vec<Vec<Vec<f64>>> = attr_basis.chunks(cfg.attribute_values).map(<[Vec<f64>]>::to_vec).collect();

    let shift_dir = crate::linalg::normalized(&gaussian(&mut rng, dim))?;
    let prototypes_b: Vec<Vec<f64>> = prototypes_a
        .iter()
        .map(|p| {
            let mut q = p.clone();
            axpy(&mut q, cfg.domain_shift_strength, &shift_dir);
            q
        })
        .collect();

    let tilt = cfg.prior_skew * cfg.domain_shift_strength;
    let position = |c: usize| {
        if cfg.n_concepts == 1 {
            0.0
        } else {
            c as f64 / (cfg.n_concepts - 1) as f64 - 0.5
        }
    };
    let prior_a: Vec<f64> = (0..cfg.n_concepts).map(|c| (-tilt * position(c)).exp()).collect();
    let prior_b: Vec<f64> = (0..cfg.n_concepts).map(|c| (tilt * position(c)).exp()).collect();

    let fillers: Vec<u32> = (0..FILLER_WORDS)
        .map(|i| FIRST_WORD + cfg.n_concepts as u32 * WORDS_PER_CONCEPT + (cfg.attribute_slots * cfg.attribute_values) as u32 + i)
        .collect();
    let templates = (0..cfg.n_concepts)
        .map(|c| {
            let mut slots: Vec<usize> = (0..cfg.attribute_slots).collect();
            slots.shuffle(&mut rng);
            let word = |j: u32| Slot::Word(FIRST_WORD + c as u32 * WORDS_PER_CONCEPT + j);
            let mut t = vec![Slot::Word(fillers[c % fillers.len()]), word(0), word(1)];
            t.push(Slot::Word(fillers[(c + 1) % fillers.len()]));
            t.extend(slots.into_iter().map(Slot::Attribute));
            t
        })
        .collect();

    let concept_tags = (0..cfg.n_concepts)
        .map(|_| (0..3).map(|_| rng.random_range(0..cfg.tag_vocab)).collect())
        .collect();

    let generator = Generator {
        cfg,
        attributes,
        distractor_basis: distractor_basis.to_vec(),
        templates,
        concept_tags,
    };
    let mut rng_a = rng::substream(cfg.seed, "data/source");
    let mut rng_b = rng::substream(cfg.seed, "data/target");
    let source = generator.domain(&mut rng_a, SOURCE_DOMAIN, prototypes_a, prior_a);
    let target = generator.domain(&mut rng_b, TARGET_DOMAIN, prototypes_b, prior_b);
    Ok(SyntheticCorpus { source, target })
}
