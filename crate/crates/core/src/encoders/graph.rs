//! Batched encoder forward pass recorded on a [`Tape`] for training.
//!
//! Sequences of a batch are stacked row-wise; attention is confined to each
//! sequence by the fused attention op. The arithmetic mirrors
//! [`super::ops`] so the two paths agree to rounding.

use std::collections::BTreeMap;

use super::{names, DualEncoder, ImageMode, TokenSequence};
use crate::corpus::ImageInput;
use crate::encoders::ops::{patchify, LAYER_NORM_EPS};
use crate::encoders::ParamStore;
use crate::error::{Error, Result};
use crate::tape::{Gradients, Mat, Tape, Var};

/// Tape leaves for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamStore) -> Self {
        let vars = params.iter().map(|(name, m)| (name.clone(), tape.leaf(m.clone()))).collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    /// Gradients laid out like `params`; untouched tensors get zeros.
    pub fn gradients(&self, grads: &Gradients, params: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, m) in params.iter() {
            out.insert(name.clone(), grads.get_or_zeros(self.var(name), m.dim()));
        }
        out
    }
}

pub struct GraphEncoder<'a> {
    pub model: &'a DualEncoder,
    pub bound: BoundParams,
}

impl<'a> GraphEncoder<'a> {
    pub fn bind(model: &'a DualEncoder, tape: &mut Tape) -> Self {
        Self {
            model,
            bound: BoundParams::bind(tape, &model.params),
        }
    }

    pub fn gradients(&self, grads: &Gradients) -> ParamStore {
        self.bound.gradients(grads, &self.model.params)
    }

    fn block(&self, tape: &mut Tape, tower: &str, layer: usize, h: Var, lens: &[usize]) -> Var {
        let cfg = &self.model.config;
        let p = |leaf: &str| self.bound.var(&names::block(tower, layer, leaf));
        let q = tape.matmul(h, p("attn.w_q"));
        let k = tape.matmul(h, p("attn.w_k"));
        let v = tape.matmul(h, p("attn.w_v"));
        let heads = tape.attention(q, k, v, lens.to_vec(), cfg.n_heads);
        let attended = tape.matmul(heads, p("attn.w_o"));
        let residual = tape.add(h, attended);
        let mut out = tape.layer_norm(residual, LAYER_NORM_EPS);
        if cfg.layer_norm_affine {
            out = tape.mul_row(out, p("ln1.gamma"));
            out = tape.add_row(out, p("ln1.beta"));
        }
        if cfg.mlp {
            let hidden = tape.matmul(out, p("mlp.w1"));
            let hidden = tape.add_row(hidden, p("mlp.b1"));
            let hidden = tape.relu(hidden);
            let proj = tape.matmul(hidden, p("mlp.w2"));
            let proj = tape.add_row(proj, p("mlp.b2"));
            let residual = tape.add(out, proj);
            out = tape.layer_norm(residual, LAYER_NORM_EPS);
            if cfg.layer_norm_affine {
                out = tape.mul_row(out, p("ln2.gamma"));
                out = tape.add_row(out, p("ln2.beta"));
            }
        }
        out
    }

    fn run_blocks(&self, tape: &mut Tape, tower: &str, mut h: Var, lens: &[usize]) -> Var {
        for l in 0..self.model.config.n_layers {
            h = self.block(tape, tower, l, h, lens);
        }
        h
    }

    /// Unit-norm image embeddings, one row per input.
    pub fn images(&self, tape: &mut Tape, images: &[&ImageInput]) -> Result<Var> {
        let cfg = &self.model.config;
        if images.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let per_image = cfg.image_tokens();
        let width = cfg.image_input_width();
        let mut raw = Vec::with_capacity(images.len() * per_image * width);
        for image in images {
            match (image, cfg.image) {
                (ImageInput::Features(f), ImageMode::Features { .. }) => {
                    self.model.check_features(f)?;
                    raw.extend_from_slice(f);
                }
                (ImageInput::Pixels(grid), ImageMode::Pixels { .. }) => {
                    self.model.check_pixels(grid)?;
                    raw.extend(patchify(grid, cfg.patch_size)?.iter());
                }
                (ImageInput::Features(f), _) => self.model.check_features(f)?,
                (ImageInput::Pixels(g), _) => self.model.check_pixels(g)?,
            }
        }
        let inputs = tape.leaf(Mat::from_shape_vec((images.len() * per_image, width), raw).expect("input rows"));
        let projected = tape.matmul(inputs, self.bound.var("image.proj.w"));
        let projected = tape.add_row(projected, self.bound.var("image.proj.b"));
        let stacked = tape.concat_rows(vec![self.bound.var("image.cls"), projected]);

        let seq_len = per_image + 1;
        let mut rows = Vec::with_capacity(images.len() * seq_len);
        let mut positions = Vec::with_capacity(images.len() * seq_len);
        for i in 0..images.len() {
            rows.push(0);
            rows.extend((0..per_image).map(|j| 1 + i * per_image + j));
            positions.extend(0..seq_len);
        }
        let tokens = tape.select_rows(stacked, rows);
        let pos = tape.select_rows(self.bound.var("image.pos"), positions);
        let h = tape.add(tokens, pos);

        let lens = vec![seq_len; images.len()];
        let h = self.run_blocks(tape, names::IMAGE, h, &lens);
        let cls = tape.select_rows(h, (0..images.len()).map(|i| i * seq_len).collect());
        Ok(tape.l2_normalize_rows(cls))
    }

    /// Unit-norm text embeddings taken at each sequence's EOS position.
    pub fn texts(&self, tape: &mut Tape, sequences: &[TokenSequence]) -> Result<Var> {
        let cfg = &self.model.config;
        if sequences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut lens = Vec::with_capacity(sequences.len());
        let mut eos_rows = Vec::with_capacity(sequences.len());
        for seq in sequences {
            if seq.len() > cfg.max_seq_len {
                return Err(Error::InvalidTokens(format!(
                    "sequence of {} exceeds max_seq_len {}",
                    seq.len(),
                    cfg.max_seq_len
                )));
            }
            if let Some(&bad) = seq.ids().iter().find(|&&t| t as usize >= cfg.vocab_size) {
                return Err(Error::InvalidTokens(format!("token {bad} outside vocabulary")));
            }
            ids.extend(seq.ids().iter().map(|&t| t as usize));
            positions.extend(0..seq.len());
            eos_rows.push(ids.len() - 1);
            lens.push(seq.len());
        }
        let tok = tape.select_rows(self.bound.var("text.tok"), ids);
        let pos = tape.select_rows(self.bound.var("text.pos"), positions);
        let h = tape.add(tok, pos);
        let h = self.run_blocks(tape, names::TEXT, h, &lens);
        let eos = tape.select_rows(h, eos_rows);
        Ok(tape.l2_normalize_rows(eos))
    }
}
