//! Dual transformer encoders for images (or precomputed image features)
//! and caption token sequences, sharing one embedding width.
//!
//! The image tower embeds patches (or projects a feature vector), prepends a
//! learned CLS token, adds positional rows, runs post-norm attention blocks
//! and returns the L2-normalized CLS activation. The text tower wraps the
//! caption in SOS/EOS, adds token and positional embeddings, runs the same
//! kind of blocks and returns the normalized activation at EOS. Segments go
//! through the image tower.

pub mod graph;
pub mod ops;
pub mod params;

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageInput, PixelGrid, EOS_TOKEN, FIRST_WORD, SOS_TOKEN};
use crate::error::{Error, Result};
use crate::rng;
use crate::tape::Mat;

pub use graph::{BoundParams, GraphEncoder};
pub use ops::{
    encoder_block, layer_norm, multi_head_self_attention, patchify, patchify_and_embed, softmax, AttentionParams, BlockParams,
    LayerNormParams, MlpParams, PatchEmbedParams,
};
pub use params::ParamStore;

/// How the image tower reads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageMode {
    /// Precomputed feature vectors, projected to one token.
    Features { dim: usize },
    /// `height x width x 3` pixel grids cut into square patches.
    Pixels { height: usize, width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image: ImageMode,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    /// Longest wrapped sequence, SOS and EOS included.
    pub max_seq_len: usize,
    /// Add a ReLU feed-forward sub-layer after attention in every block.
    pub mlp: bool,
    /// Learned per-dimension scale and shift after each layer norm.
    pub layer_norm_affine: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image: ImageMode::Features { dim: 32 },
            patch_size: 4,
            embed_dim: 16,
            n_heads: 2,
            n_layers: 1,
            vocab_size: 64,
            max_seq_len: 16,
            mlp: false,
            layer_norm_affine: true,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder.patch_size", self.patch_size),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.n_heads", self.n_heads),
            ("encoder.n_layers", self.n_layers),
            ("encoder.vocab_size", self.vocab_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config("encoder.n_heads", "embed_dim must be divisible by n_heads"));
        }
        if self.max_seq_len < 3 {
            return Err(Error::config(
                "encoder.max_seq_len",
                "must leave room for SOS, one token and EOS",
            ));
        }
        if self.vocab_size <= FIRST_WORD as usize {
            return Err(Error::config("encoder.vocab_size", "must exceed the reserved token ids"));
        }
        match self.image {
            ImageMode::Features { dim: 0 } => {
                return Err(Error::config("encoder.image.dim", "must be positive"));
            }
            ImageMode::Pixels { height, width }
                if height == 0 || height % self.patch_size != 0 || width % self.patch_size != 0 =>
            {
                return Err(Error::config(
                    "encoder.image",
                    "height and width must be positive multiples of patch_size",
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Tokens per image after patching, CLS excluded.
    pub fn image_tokens(&self) -> usize {
        match self.image {
            ImageMode::Features { .. } => 1,
            ImageMode::Pixels { height, width } => (height / self.patch_size) * (width / self.patch_size),
        }
    }

    /// Input width of the image projection.
    pub fn image_input_width(&self) -> usize {
        match self.image {
            ImageMode::Features { dim } => dim,
            ImageMode::Pixels { .. } => self.patch_size * self.patch_size * 3,
        }
    }

    fn mlp_hidden(&self) -> usize {
        2 * self.embed_dim
    }
}

/// Caption ids wrapped as `[SOS, tokens.., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    /// Validate an already wrapped sequence.
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if ids.first() != Some(&SOS_TOKEN) {
            return Err(Error::InvalidTokens("first token must be SOS".into()));
        }
        if ids.last() != Some(&EOS_TOKEN) || ids.len() < 2 {
            return Err(Error::MissingEos);
        }
        if ids[..ids.len() - 1].contains(&EOS_TOKEN) {
            return Err(Error::InvalidTokens("EOS must appear exactly once, at the end".into()));
        }
        if ids[1..].contains(&SOS_TOKEN) {
            return Err(Error::InvalidTokens("SOS may only open the sequence".into()));
        }
        Ok(Self(ids))
    }

    /// Wrap caption tokens, truncating the caption to fit `max_len`.
    pub fn wrap(caption: &[u32], max_len: usize) -> Result<Self> {
        if caption.is_empty() {
            return Err(Error::InvalidTokens("caption is empty".into()));
        }
        if let Some(&bad) = caption.iter().find(|&&t| t < FIRST_WORD) {
            return Err(Error::InvalidTokens(format!("caption uses reserved id {bad}")));
        }
        let keep = caption.len().min(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(keep + 2);
        ids.push(SOS_TOKEN);
        ids.extend_from_slice(&caption[..keep]);
        ids.push(EOS_TOKEN);
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn eos_position(&self) -> usize {
        self.0.len() - 1
    }
}

/// Parameter name helpers; every tensor is addressed by a dotted path.
pub(crate) mod names {
    pub const IMAGE: &str = "image";
    pub const TEXT: &str = "text";

    pub fn block(tower: &str, layer: usize, leaf: &str) -> String {
        format!("{tower}.block{layer}.{leaf}")
    }
}

/// Image and text towers plus their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl DualEncoder {
    /// Fresh model; weights uniform in `±1/sqrt(embed_dim)`, norms at identity.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let mut shapes: Vec<(String, (usize, usize), Init)> = vec![
            ("image.proj.w".into(), (config.image_input_width(), d), Init::Uniform),
            ("image.proj.b".into(), (1, d), Init::Zeros),
            ("image.pos".into(), (config.image_tokens() + 1, d), Init::Uniform),
            ("image.cls".into(), (1, d), Init::Uniform),
            ("text.tok".into(), (config.vocab_size, d), Init::Uniform),
            ("text.pos".into(), (config.max_seq_len, d), Init::Uniform),
        ];
        for tower in [names::IMAGE, names::TEXT] {
            for l in 0..config.n_layers {
                for w in ["attn.w_q", "attn.w_k", "attn.w_v", "attn.w_o"] {
                    shapes.push((names::block(tower, l, w), (d, d), Init::Uniform));
                }
                if config.layer_norm_affine {
                    shapes.push((names::block(tower, l, "ln1.gamma"), (1, d), Init::Ones));
                    shapes.push((names::block(tower, l, "ln1.beta"), (1, d), Init::Zeros));
                }
                if config.mlp {
                    let h = config.mlp_hidden();
                    shapes.push((names::block(tower, l, "mlp.w1"), (d, h), Init::Uniform));
                    shapes.push((names::block(tower, l, "mlp.b1"), (1, h), Init::Zeros));
                    shapes.push((names::block(tower, l, "mlp.w2"), (h, d), Init::Uniform));
                    shapes.push((names::block(tower, l, "mlp.b2"), (1, d), Init::Zeros));
                    if config.layer_norm_affine {
                        shapes.push((names::block(tower, l, "ln2.gamma"), (1, d), Init::Ones));
                        shapes.push((names::block(tower, l, "ln2.beta"), (1, d), Init::Zeros));
                    }
                }
            }
        }
        shapes.sort_by(|a, b| a.0.cmp(&b.0));

        let mut rng = rng::substream(config.seed, rng::INIT);
        let mut params = ParamStore::new();
        for (name, (r, c), init) in shapes {
            let m = match init {
                Init::Zeros => Mat::zeros((r, c)),
                Init::Ones => Mat::ones((r, c)),
                Init::Uniform => {
                    let bound = 1.0 / (d as f64).sqrt();
                    Mat::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
                }
            };
            params.insert(name, m);
        }
        Ok(Self { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = DualEncoder::new(config.clone())?;
        if !reference.params.same_layout(&params) {
            return Err(Error::IncompatibleCheckpoint(
                "parameter names or shapes do not match the encoder configuration".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub(crate) fn block_params(&self, tower: &str, layer: usize) -> BlockParams<'_> {
        let p = |leaf: &str| self.params.get(&names::block(tower, layer, leaf));
        let norm = |g: &str, b: &str| {
            self.config
                .layer_norm_affine
                .then(|| LayerNormParams { gamma: p(g), beta: p(b) })
        };
        BlockParams {
            attention: AttentionParams {
                w_q: p("attn.w_q"),
                w_k: p("attn.w_k"),
                w_v: p("attn.w_v"),
                w_o: p("attn.w_o"),
            },
            norm: norm("ln1.gamma", "ln1.beta"),
            mlp: self.config.mlp.then(|| MlpParams {
                w1: p("mlp.w1"),
                b1: p("mlp.b1"),
                w2: p("mlp.w2"),
                b2: p("mlp.b2"),
                norm: norm("ln2.gamma", "ln2.beta"),
            }),
        }
    }

    pub fn patch_params(&self) -> PatchEmbedParams<'_> {
        PatchEmbedParams {
            w_p: self.params.get("image.proj.w"),
            b_p: self.params.get("image.proj.b"),
            e_pos: self.params.get("image.pos"),
            cls_token: self.params.get("image.cls"),
        }
    }

    pub(crate) fn check_pixels(&self, grid: &PixelGrid) -> Result<()> {
        match self.config.image {
            ImageMode::Pixels { height, width } if grid.height == height && grid.width == width => Ok(()),
            ImageMode::Pixels { height, width } => Err(Error::DimensionMismatch {
                expected: height * width,
                got: grid.height * grid.width,
            }),
            ImageMode::Features { dim } => Err(Error::DimensionMismatch {
                expected: dim,
                got: grid.data.len(),
            }),
        }
    }

    pub(crate) fn check_features(&self, f: &[f64]) -> Result<()> {
        match self.config.image {
            ImageMode::Features { dim } if f.len() == dim => Ok(()),
            ImageMode::Features { dim } => Err(Error::DimensionMismatch {
                expected: dim,
                got: f.len(),
            }),
            ImageMode::Pixels { height, width } => Err(Error::DimensionMismatch {
                expected: height * width * 3,
                got: f.len(),
            }),
        }
    }

    /// Image token sequence (CLS first) before the attention blocks.
    pub fn image_tokens(&self, image: &ImageInput) -> Result<Mat> {
        let p = self.patch_params();
        match image {
            ImageInput::Pixels(grid) => {
                self.check_pixels(grid)?;
                patchify_and_embed(grid, self.config.patch_size, &p)
            }
            ImageInput::Features(f) => {
                self.check_features(f)?;
                let x = Mat::from_shape_vec((1, f.len()), f.clone()).expect("row vector");
                let projected = x.dot(p.w_p) + p.b_p;
                ops::prepend_cls_with_positions(&projected, p.cls_token, p.e_pos)
            }
        }
    }

    fn run_blocks(&self, tower: &str, mut h: Mat) -> Mat {
        for l in 0..self.config.n_layers {
            h = encoder_block(&h, &self.block_params(tower, l), self.config.n_heads);
        }
        h
    }

    /// Unit-norm CLS activation for an image, feature vector or segment.
    pub fn encode_image(&self, image: &ImageInput) -> Result<Vec<f64>> {
        let h = self.run_blocks(names::IMAGE, self.image_tokens(image)?);
        crate::linalg::normalized(h.row(0).as_slice().expect("standard layout"))
    }

    pub fn text_tokens(&self, tokens: &TokenSequence) -> Result<Mat> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidTokens(format!(
                "sequence of {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.ids().iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::InvalidTokens(format!("token {bad} outside vocabulary")));
        }
        let tok = self.params.get("text.tok");
        let pos = self.params.get("text.pos");
        Ok(Mat::from_shape_fn((tokens.len(), self.config.embed_dim), |(i, j)| {
            tok[[tokens.ids()[i] as usize, j]] + pos[[i, j]]
        }))
    }

    /// Unit-norm activation at the EOS position.
    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        let h = self.run_blocks(names::TEXT, self.text_tokens(tokens)?);
        crate::linalg::normalized(h.row(tokens.eos_position()).as_slice().expect("standard layout"))
    }

    pub fn encode_caption(&self, caption: &[u32]) -> Result<Vec<f64>> {
        self.encode_text(&TokenSequence::wrap(caption, self.config.max_seq_len)?)
    }

    pub fn to_bytes(&self, stage: &str) -> Result<Vec<u8>> {
        let header = ModelHeader {
            encoder: self.config.clone(),
            stage: stage.to_string(),
        };
        params::encode_checkpoint(&header, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, ModelHeader)> {
        let (header, store): (ModelHeader, ParamStore) = params::decode_checkpoint(bytes)?;
        Ok((Self::from_parts(header.encoder.clone(), store)?, header))
    }

    pub fn save(&self, path: impl AsRef<Path>, stage: &str) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(stage)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, ModelHeader)> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Checkpoint header of a saved [`DualEncoder`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub encoder: EncoderConfig,
    /// Training stage that produced the weights, e.g. `pretrain`.
    pub stage: String,
}

enum Init {
    Zeros,
    Ones,
    /// `±1/sqrt(embed_dim)`
    Uniform,
}
