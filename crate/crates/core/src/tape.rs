//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates adjoints. Attention, layer norm and
//! the contrastive cross-entropy are fused ops with hand-written backward
//! passes so that a training step stays a few hundred nodes.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<(usize, usize)>),
    RowDot(Var, Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropyDiag {
        logits: Var,
        probs: Mat,
    },
    Attention(Box<AttentionCache>),
    WeightedAverage {
        emb: Var,
        w: Var,
    },
    Mean(Var),
    Sum(Var),
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    lens: Vec<usize>,
    heads: usize,
    scale: f64,
    /// Attention probabilities per (sequence, head), sequence-major.
    probs: Vec<Mat>,
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, or zeros of `shape` if `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

pub(crate) fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        softmax_row_inplace(row.as_slice_mut().expect("standard layout"));
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node {
            value: value.as_standard_layout().into_owned(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// `a + row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Elementwise product with an untracked constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let v = self.value(a).select(Axis(0), &rows);
        self.push(v, Op::SelectRows(a, rows))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts))
    }

    /// Column vector of the entries of `a` at `positions`.
    pub fn gather(&mut self, a: Var, positions: Vec<(usize, usize)>) -> Var {
        let m = self.value(a);
        let v = Mat::from_shape_fn((positions.len(), 1), |(i, _)| m[positions[i]]);
        self.push(v, Op::Gather(a, positions))
    }

    /// Per-row inner products of equally shaped `a` and `b`, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let v = (self.value(a) * self.value(b)).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::RowDot(a, b))
    }

    /// Per-row standardization (population variance) without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let (y, inv) = layer_norm_row(row.as_slice().expect("standard layout"), eps);
            row.as_slice_mut().expect("standard layout").copy_from_slice(&y);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x: a, inv_std })
    }

    /// Scale every row to unit L2 norm; all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut out = x.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            if n > 0.0 {
                row /= n;
            }
        }
        self.push(out, Op::L2NormalizeRows { x: a, norms })
    }

    /// Mean over rows of `-log softmax(row_i)[i]` for a square logit matrix.
    pub fn cross_entropy_diag(&mut self, logits: Var) -> Var {
        let l = self.value(logits);
        let n = l.nrows();
        assert_eq!(n, l.ncols(), "cross_entropy_diag needs a square matrix");
        let probs = softmax_rows(l);
        let loss = (0..n).map(|i| -probs[[i, i]].ln()).sum::<f64>() / n as f64;
        // recompute through log-sum-exp for accuracy when a probability underflows
        let loss = if loss.is_finite() {
            loss
        } else {
            (0..n)
                .map(|i| {
                    let row = l.row(i);
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    max + row.mapv(|x| (x - max).exp()).sum().ln() - row[i]
                })
                .sum::<f64>()
                / n as f64
        };
        self.push(Mat::from_elem((1, 1), loss), Op::CrossEntropyDiag { logits, probs })
    }

    /// Multi-head scaled dot-product self-attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `T x d` with `T = lens.iter().sum()`. Head `h` uses
    /// columns `h*d/heads .. (h+1)*d/heads`; attention never crosses a
    /// sequence boundary. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lens: Vec<usize>, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (total, d) = qm.dim();
        assert_eq!(lens.iter().sum::<usize>(), total, "sequence lengths do not cover the input");
        assert_eq!(d % heads, 0, "embed dim not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((total, d));
        let mut probs = Vec::with_capacity(lens.len() * heads);
        let mut offset = 0;
        for &len in &lens {
            for h in 0..heads {
                let rows = offset..offset + len;
                let cols = h * dh..(h + 1) * dh;
                let qs = qm.slice(s![rows.clone(), cols.clone()]);
                let ks = km.slice(s![rows.clone(), cols.clone()]);
                let vs = vm.slice(s![rows.clone(), cols.clone()]);
                let p = softmax_rows(&(qs.dot(&ks.t()) * scale));
                out.slice_mut(s![rows, cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
            offset += len;
        }
        let cache = AttentionCache {
            q,
            k,
            v,
            lens,
            heads,
            scale,
            probs,
        };
        self.push(out, Op::Attention(Box::new(cache)))
    }

    /// `Σ w_i e_i / Σ w_i` for `emb: k x d`, `w: k x 1`; returns `1 x d`.
    pub fn weighted_average(&mut self, emb: Var, w: Var) -> Var {
        let (e, wm) = (self.value(emb), self.value(w));
        let total = wm.sum();
        let v = wm.t().dot(e) / total;
        self.push(v, Op::WeightedAverage { emb, w })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a).mean().expect("mean of an empty matrix");
        self.push(Mat::from_elem((1, 1), v), Op::Mean(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), v), Op::Sum(a))
    }

    /// Adjoints of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::ones((1, 1)));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    acc(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::MatMulBt(a, b) => {
                    acc(&mut grads, *a, g.dot(self.value(*b)));
                    acc(&mut grads, *b, g.t().dot(self.value(*a)));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &g * self.value(*row));
                    acc(&mut grads, *row, gr);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, &g * c),
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let mask = self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|s| s * (1.0 - s)));
                }
                Op::Log(a) => acc(&mut grads, *a, &g / self.value(*a)),
                Op::Clamp(a, lo, hi) => {
                    let mask = self.value(*a).mapv(|x| if x >= *lo && x <= *hi { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        acc(&mut grads, p, g.slice(s![at..at + n, ..]).to_owned());
                        at += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., at..at + n]).to_owned());
                        at += n;
                    }
                }
                Op::Gather(a, positions) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (i, &pos) in positions.iter().enumerate() {
                        ga[pos] += g[[i, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowDot(a, b) => {
                    let ga = self.value(*b) * &g;
                    let gb = self.value(*a) * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let d = y.ncols() as f64;
                    let mut gx = Mat::zeros(y.dim());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let (gy, yr) = (g.row(r), y.row(r));
                        let mean_g = gy.sum() / d;
                        let mean_gy = gy.dot(&yr) / d;
                        for c in 0..y.ncols() {
                            gx[[r, c]] = inv * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::L2NormalizeRows { x, norms } => {
                    let y = &node.value;
                    let mut gx = Mat::zeros(y.dim());
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let (gy, yr) = (g.row(r), y.row(r));
                        let proj = gy.dot(&yr);
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (gy[c] - yr[c] * proj) / n;
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropyDiag { logits, probs } => {
                    let n = probs.nrows();
                    let mut gl = probs.clone();
                    for i in 0..n {
                        gl[[i, i]] -= 1.0;
                    }
                    gl *= g[[0, 0]] / n as f64;
                    acc(&mut grads, *logits, gl);
                }
                Op::Attention(cache) => {
                    let (gq, gk, gv) = self.attention_backward(cache, &g);
                    acc(&mut grads, cache.q, gq);
                    acc(&mut grads, cache.k, gk);
                    acc(&mut grads, cache.v, gv);
                }
                Op::WeightedAverage { emb, w } => {
                    let (e, wm) = (self.value(*emb), self.value(*w));
                    let total = wm.sum();
                    let out = &node.value;
                    // d/de_i = w_i/W g ; d/dw_i = (e_i - out)·g / W
                    let ge = wm.dot(&g) / total;
                    let gw = (e - out).dot(&g.t()) / total;
                    acc(&mut grads, *emb, ge);
                    acc(&mut grads, *w, gw);
                }
                Op::Mean(a) => {
                    let dim = self.value(*a).dim();
                    let n = (dim.0 * dim.1) as f64;
                    acc(&mut grads, *a, Mat::from_elem(dim, g[[0, 0]] / n));
                }
                Op::Sum(a) => {
                    let dim = self.value(*a).dim();
                    acc(&mut grads, *a, Mat::from_elem(dim, g[[0, 0]]));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn attention_backward(&self, cache: &AttentionCache, g: &Mat) -> (Mat, Mat, Mat) {
        let (qm, km, vm) = (self.value(cache.q), self.value(cache.k), self.value(cache.v));
        let d = qm.ncols();
        let dh = d / cache.heads;
        let mut gq = Mat::zeros(qm.dim());
        let mut gk = Mat::zeros(km.dim());
        let mut gv = Mat::zeros(vm.dim());
        let mut offset = 0;
        let mut probs = cache.probs.iter();
        for &len in &cache.lens {
            for h in 0..cache.heads {
                let p = probs.next().expect("one probability matrix per (sequence, head)");
                let rows = offset..offset + len;
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![rows.clone(), cols.clone()]);
                let qs = qm.slice(s![rows.clone(), cols.clone()]);
                let ks = km.slice(s![rows.clone(), cols.clone()]);
                let vs = vm.slice(s![rows.clone(), cols.clone()]);
                let gp = go.dot(&vs.t());
                let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                let gs = p * &(&gp - &row_dot) * cache.scale;
                gv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&gs.dot(&ks));
                gk.slice_mut(s![rows, cols]).assign(&gs.t().dot(&qs));
            }
            offset += len;
        }
        (gq, gk, gv)
    }
}

/// Standardize one row; returns the row and `1/sqrt(var + eps)`.
pub(crate) fn layer_norm_row(x: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}
