//! Plain forward math for a single sequence: patch embedding, softmax,
//! multi-head self-attention, and the post-norm encoder block.
//!
//! Inference and evaluation run through these functions. The training path
//! in [`super::graph`] records the same computation on a tape.

use ndarray::{s, Array1, Axis};

use crate::corpus::PixelGrid;
use crate::error::{Error, Result};
use crate::tape::{layer_norm_row, softmax_row_inplace, Mat};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_row_inplace(&mut out);
    out
}

pub struct AttentionParams<'a> {
    pub w_q: &'a Mat,
    pub w_k: &'a Mat,
    pub w_v: &'a Mat,
    pub w_o: &'a Mat,
}

pub struct LayerNormParams<'a> {
    pub gamma: &'a Mat,
    pub beta: &'a Mat,
}

pub struct MlpParams<'a> {
    pub w1: &'a Mat,
    pub b1: &'a Mat,
    pub w2: &'a Mat,
    pub b2: &'a Mat,
    pub norm: Option<LayerNormParams<'a>>,
}

pub struct BlockParams<'a> {
    pub attention: AttentionParams<'a>,
    /// Learned affine after the residual norm; `None` leaves it standardized.
    pub norm: Option<LayerNormParams<'a>>,
    pub mlp: Option<MlpParams<'a>>,
}

pub struct PatchEmbedParams<'a> {
    /// `patch_pixels x d`
    pub w_p: &'a Mat,
    /// `1 x d`
    pub b_p: &'a Mat,
    /// `(n_patches + 1) x d`; row 0 belongs to the CLS token.
    pub e_pos: &'a Mat,
    /// `1 x d`
    pub cls_token: &'a Mat,
}

/// Row-major patches of `patch x patch` pixels, each flattened row-major with
/// interleaved RGB channels.
pub fn patchify(image: &PixelGrid, patch: usize) -> Result<Mat> {
    if patch == 0 || !image.height.is_multiple_of(patch) || !image.width.is_multiple_of(patch) {
        return Err(Error::NonDivisibleImage {
            height: image.height,
            width: image.width,
            patch,
        });
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let per_patch = patch * patch * 3;
    let mut out = Mat::zeros((gh * gw, per_patch));
    for pr in 0..gh {
        for pc in 0..gw {
            let mut row = out.row_mut(pr * gw + pc);
            let mut at = 0;
            for r in 0..patch {
                for c in 0..patch {
                    for &v in image.pixel(pr * patch + r, pc * patch + c) {
                        row[at] = v;
                        at += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// CLS token followed by projected patches, each plus its positional row.
pub fn patchify_and_embed(image: &PixelGrid, patch: usize, params: &PatchEmbedParams) -> Result<Mat> {
    let patches = patchify(image, patch)?;
    if patches.ncols() != params.w_p.nrows() {
        return Err(Error::DimensionMismatch {
            expected: params.w_p.nrows(),
            got: patches.ncols(),
        });
    }
    let projected = patches.dot(params.w_p) + params.b_p;
    prepend_cls_with_positions(&projected, params.cls_token, params.e_pos)
}

pub(crate) fn prepend_cls_with_positions(tokens: &Mat, cls: &Mat, e_pos: &Mat) -> Result<Mat> {
    let n = tokens.nrows() + 1;
    if e_pos.nrows() < n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: e_pos.nrows(),
        });
    }
    let seq = ndarray::concatenate(Axis(0), &[cls.view(), tokens.view()]).expect("CLS and tokens share width");
    Ok(seq + e_pos.slice(s![..n, ..]))
}

/// Multi-head self-attention on one `len x d` sequence.
///
/// Each head works on a `d / heads` column slice of the shared projections
/// and scales its logits by `1/sqrt(d / heads)`; head outputs are
/// concatenated and mapped by `W_O`.
pub fn multi_head_self_attention(e: &Mat, params: &AttentionParams, heads: usize) -> Mat {
    let d = e.ncols();
    assert!(heads > 0 && d.is_multiple_of(heads), "embed dim must be divisible by heads");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = (e.dot(params.w_q), e.dot(params.w_k), e.dot(params.w_v));
    let mut concat = Mat::zeros(e.dim());
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qs = q.slice(s![.., cols.clone()]);
        let ks = k.slice(s![.., cols.clone()]);
        let vs = v.slice(s![.., cols.clone()]);
        let mut logits = qs.dot(&ks.t()) * scale;
        for mut row in logits.rows_mut() {
            softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
        }
        concat.slice_mut(s![.., cols]).assign(&logits.dot(&vs));
    }
    concat.dot(params.w_o)
}

/// Per-token standardization with optional learned affine.
pub fn layer_norm(x: &Mat, affine: Option<&LayerNormParams>) -> Mat {
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let (y, _) = layer_norm_row(row.as_slice().expect("standard layout"), LAYER_NORM_EPS);
        row.assign(&Array1::from(y));
    }
    if let Some(p) = affine {
        out = out * p.gamma + p.beta;
    }
    out
}

/// `LayerNorm(E + MSA(E))`, followed by `LayerNorm(H + MLP(H))` when the
/// optional feed-forward sub-layer is present.
pub fn encoder_block(e: &Mat, params: &BlockParams, heads: usize) -> Mat {
    let attended = multi_head_self_attention(e, &params.attention, heads);
    let h = layer_norm(&(e + &attended), params.norm.as_ref());
    match &params.mlp {
        None => h,
        Some(mlp) => {
            let hidden = (h.dot(mlp.w1) + mlp.b1).mapv(|x| x.max(0.0));
            let out = hidden.dot(mlp.w2) + mlp.b2;
            layer_norm(&(&h + &out), mlp.norm.as_ref())
        }
    }
}
