//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar (1×1) node walks the tape in reverse and
//! returns the gradient of that scalar with respect to every node that was
//! created with `requires_grad`, or that depends on one.
//!
//! Expensive compound operations (attention, layer norm, softmax losses)
//! are fused into single nodes with hand-written backward passes.

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::par;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Constant sparse matrix in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut trips: Vec<(usize, usize, f64)>) -> Self {
        trips.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(trips.len());
        let mut values: Vec<f64> = Vec::with_capacity(trips.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in trips {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut trips = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                trips.push((self.indices[k], r, self.values[k]));
            }
        }
        Self::from_triplets(self.cols, self.rows, trips)
    }

    /// Sparse-dense product `self · x`.
    pub fn matmul(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows(), "spmm shape mismatch");
        let n = x.ncols();
        let mut out = Mat::zeros((self.rows, n));
        par::for_each_row_mut(&mut out, |r, row| {
            for k in self.indptr[r]..self.indptr[r + 1] {
                let w = self.values[k];
                let src = x.row(self.indices[k]);
                for (o, s) in row.iter_mut().zip(src.iter()) {
                    *o += w * s;
                }
            }
        });
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                out[[r, self.indices[k]]] += self.values[k];
            }
        }
        out
    }
}

/// Layout of a batch of equal-length sequences stacked row-wise.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub seq_len: usize,
    /// `key_valid[b * seq_len + j]` is false for padding keys.
    pub key_valid: Vec<bool>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    L2NormRows {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Rc<Vec<usize>>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SpMM {
        x: Var,
        at: Rc<Csr>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        probs: Mat,
    },
    HybridNll {
        node_logits: Var,
        text_logits: Var,
        lambda: f64,
        targets: Rc<Vec<usize>>,
        pa: Mat,
        pb: Mat,
    },
    KlStdNormal {
        mu: Var,
        logvar: Var,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreached.
    pub fn get_or_zeros(&self, v: Var, like: &Mat) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(like.raw_dim()))
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Mat) -> Mat {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row.mapv_inplace(|x| x / z);
    }
    p
}

fn scalar(x: f64) -> Mat {
    Mat::from_elem((1, 1), x)
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = par::matmul(self.value(a).view(), self.value(b).view());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = par::matmul(self.value(a).view(), self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Adds the 1×n row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.nrows(), 1, "add_row expects a single row");
        let out = self.value(a) + bv;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::AddRow(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Multiplies `a` by the 1×1 node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let out = self.value(a) * c;
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with 1×n `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Scales each row to unit Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(out, Op::L2NormRows { x, norms }, ng)
    }

    /// Selects rows `idx` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let out = xv.select(Axis(0), &idx);
        let ng = self.ng(x);
        self.push(out, Op::Gather { x, idx }, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols row counts differ");
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows column counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(out, Op::SliceCols { x, start }, ng)
    }

    /// Constant sparse matrix times `x`. `at` must be the transpose of `a`.
    pub fn spmm(&mut self, a: &Csr, at: Rc<Csr>, x: Var) -> Var {
        let out = a.matmul(self.value(x));
        let ng = self.ng(x);
        self.push(out, Op::SpMM { x, at }, ng)
    }

    /// Bidirectional multi-head scaled dot-product attention over the
    /// sequences described by `layout`. Padding keys are masked out.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<SeqLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        let l = layout.seq_len;
        assert_eq!(qv.nrows(), layout.batch * l, "attention row count mismatch");
        assert_eq!(width % heads, 0, "width not divisible by heads");
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let key_valid: &[bool] = &layout.key_valid;
        let per_seq = par::map_indexed(layout.batch, |b| {
            let mut out = vec![0.0; l * width];
            let mut probs = vec![0.0; heads * l * l];
            let base = b * l;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..l {
                    let p = &mut probs[(h * l + i) * l..(h * l + i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..l {
                        if !key_valid[base + j] {
                            p[j] = f64::NEG_INFINITY;
                            continue;
                        }
                        let mut d = 0.0;
                        for c in c0..c0 + dh {
                            d += qv[[base + i, c]] * kv[[base + j, c]];
                        }
                        p[j] = d * scale;
                        mx = mx.max(p[j]);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut() {
                        *pj = if pj.is_finite() { (*pj - mx).exp() } else { 0.0 };
                        z += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let o = &mut out[i * width..(i + 1) * width];
                    for j in 0..l {
                        let w = p[j];
                        if w == 0.0 {
                            continue;
                        }
                        for c in c0..c0 + dh {
                            o[c] += w * vv[[base + j, c]];
                        }
                    }
                }
            }
            (out, probs)
        });
        let mut out = Mat::zeros((layout.batch * l, width));
        let mut probs = Vec::with_capacity(layout.batch * heads * l * l);
        for (b, (o, p)) in per_seq.into_iter().enumerate() {
            out.slice_mut(s![b * l..(b + 1) * l, ..])
                .assign(&Mat::from_shape_vec((l, width), o).unwrap());
            probs.extend(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = scalar(self.value(x).iter().map(|v| v * v).sum());
        let ng = self.ng(x);
        self.push(out, Op::SumSquares(x), ng)
    }

    /// Mean over rows of softmax cross-entropy against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per row required");
        let probs = softmax_rows(lv);
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[[i, t]].ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        self.push(
            scalar(loss),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            ng,
        )
    }

    /// Mean over rows of `-ln(λ·softmax(a)[y] + (1-λ)·softmax(b)[y])`.
    pub fn hybrid_nll(
        &mut self,
        node_logits: Var,
        text_logits: Var,
        lambda: f64,
        targets: Rc<Vec<usize>>,
    ) -> Var {
        let pa = softmax_rows(self.value(node_logits));
        let pb = softmax_rows(self.value(text_logits));
        let n = targets.len() as f64;
        let loss = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(lambda * pa[[i, t]] + (1.0 - lambda) * pb[[i, t]]).ln())
            .sum::<f64>()
            / n;
        let ng = self.ng(node_logits) || self.ng(text_logits);
        self.push(
            scalar(loss),
            Op::HybridNll {
                node_logits,
                text_logits,
                lambda,
                targets,
                pa,
                pb,
            },
            ng,
        )
    }

    /// Sum over all entries of the KL divergence from N(mu, exp(logvar))
    /// to N(0, 1).
    pub fn kl_std_normal(&mut self, mu: Var, logvar: Var) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        let total = m
            .iter()
            .zip(lv.iter())
            .map(|(&m, &l)| 0.5 * (m * m + l.exp() - 1.0 - l))
            .sum::<f64>();
        let ng = self.ng(mu) || self.ng(logvar);
        self.push(scalar(total), Op::KlStdNormal { mu, logvar }, ng)
    }

    /// Differentiates the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, par::matmul(g.view(), self.value(*b).t()));
                }
                if self.ng(*b) {
                    acc(*b, par::matmul(self.value(*a).t(), g.view()));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, par::matmul(g.view(), self.value(*b).view()));
                }
                if self.ng(*b) {
                    acc(*b, par::matmul(g.t(), self.value(*a).view()));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.ng(*b) {
                    acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.ng(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                if self.ng(*a) {
                    acc(*a, g * c);
                }
                if self.ng(*s) {
                    let d = (g * self.value(*a)).sum();
                    acc(*s, scalar(d));
                }
            }
            Op::Exp(a) => acc(*a, g * &node.value),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*a, d);
            }
            Op::Gelu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| *d *= gelu_grad(x));
                acc(*a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                if self.ng(*beta) {
                    acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gamma) {
                    acc(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.raw_dim());
                    for (r, (mut out, (dh, xh))) in dx
                        .rows_mut()
                        .into_iter()
                        .zip(dxhat.rows().into_iter().zip(xhat.rows()))
                        .enumerate()
                    {
                        let s1 = dh.sum();
                        let s2 = dh.dot(&xh);
                        let k = rstd[r] / n;
                        for c in 0..out.len() {
                            out[c] = k * (n * dh[c] - s1 - xh[c] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::L2NormRows { x, norms } => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, (mut d, yr)) in dx.rows_mut().into_iter().zip(y.rows()).enumerate() {
                    let dot = d.dot(&yr);
                    let inv = 1.0 / norms[r];
                    for c in 0..d.len() {
                        d[c] = (d[c] - yr[c] * dot) * inv;
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { x, idx } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                for (i, &src) in idx.iter().enumerate() {
                    let mut row = dx.row_mut(src);
                    row += &g.row(i);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                acc(*a, g.slice(s![.., ..ca]).to_owned());
                acc(*b, g.slice(s![.., ca..]).to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let r = self.value(p).nrows();
                    acc(p, g.slice(s![r0..r0 + r, ..]).to_owned());
                    r0 += r;
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = Mat::zeros(self.value(*x).raw_dim());
                dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*x, dx);
            }
            Op::SpMM { x, at } => acc(*x, at.matmul(g)),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, layout, probs, g);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Sum(x) => {
                let c = g[[0, 0]];
                acc(*x, Mat::from_elem(self.value(*x).raw_dim(), c));
            }
            Op::SumSquares(x) => {
                let c = 2.0 * g[[0, 0]];
                acc(*x, self.value(*x) * c);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = g[[0, 0]] / targets.len() as f64;
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= 1.0;
                }
                acc(*logits, d * c);
            }
            Op::HybridNll {
                node_logits,
                text_logits,
                lambda,
                targets,
                pa,
                pb,
            } => {
                let c = g[[0, 0]] / targets.len() as f64;
                let mut da = Mat::zeros(pa.raw_dim());
                let mut db = Mat::zeros(pb.raw_dim());
                for (i, &t) in targets.iter().enumerate() {
                    let p = lambda * pa[[i, t]] + (1.0 - lambda) * pb[[i, t]];
                    let wa = -c * lambda * pa[[i, t]] / p;
                    let wb = -c * (1.0 - lambda) * pb[[i, t]] / p;
                    for j in 0..pa.ncols() {
                        let ind = if j == t { 1.0 } else { 0.0 };
                        da[[i, j]] = wa * (ind - pa[[i, j]]);
                        db[[i, j]] = wb * (ind - pb[[i, j]]);
                    }
                }
                acc(*node_logits, da);
                acc(*text_logits, db);
            }
            Op::KlStdNormal { mu, logvar } => {
                let c = g[[0, 0]];
                if self.ng(*mu) {
                    acc(*mu, self.value(*mu) * c);
                }
                if self.ng(*logvar) {
                    acc(*logvar, self.value(*logvar).mapv(|l| 0.5 * c * (l.exp() - 1.0)));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
        probs: &[f64],
        g: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.ncols();
        let l = layout.seq_len;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let per_seq = par::map_indexed(layout.batch, |b| {
            let base = b * l;
            let mut dq = vec![0.0; l * width];
            let mut dk = vec![0.0; l * width];
            let mut dv = vec![0.0; l * width];
            let mut dp = vec![0.0; l];
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..l {
                    let p = &probs[((b * heads + h) * l + i) * l..((b * heads + h) * l + i + 1) * l];
                    let mut dot = 0.0;
                    for j in 0..l {
                        let mut d = 0.0;
                        for c in c0..c0 + dh {
                            d += g[[base + i, c]] * vv[[base + j, c]];
                            dv[j * width + c] += p[j] * g[[base + i, c]];
                        }
                        dp[j] = d;
                        dot += d * p[j];
                    }
                    for j in 0..l {
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in c0..c0 + dh {
                            dq[i * width + c] += ds * kv[[base + j, c]];
                            dk[j * width + c] += ds * qv[[base + i, c]];
                        }
                    }
                }
            }
            (dq, dk, dv)
        });
        let rows = layout.batch * l;
        let mut dq = Mat::zeros((rows, width));
        let mut dk = Mat::zeros((rows, width));
        let mut dv = Mat::zeros((rows, width));
        for (b, (a, bk, c)) in per_seq.into_iter().enumerate() {
            let r = s![b * l..(b + 1) * l, ..];
            dq.slice_mut(r).assign(&Mat::from_shape_vec((l, width), a).unwrap());
            dk.slice_mut(r).assign(&Mat::from_shape_vec((l, width), bk).unwrap());
            dv.slice_mut(r).assign(&Mat::from_shape_vec((l, width), c).unwrap());
        }
        (dq, dk, dv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(inputs[which]).
    fn check<F>(inputs: &[Mat], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let h = 1e-5;
        for (w, base) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[w], base);
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let mut perturbed = inputs.to_vec();
                    let flat = perturbed[w].as_slice_mut().unwrap();
                    flat[idx] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = perturbed.into_iter().map(|m| t.param(m)).collect();
                    let o = build(&mut t, &vs);
                    t.scalar(o)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.as_slice().unwrap()[idx];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(
                    err < 1e-5 || (a - numeric).abs() < 1e-8,
                    "input {w} entry {idx}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_bias_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 2), rand_mat(&mut rng, 1, 2)];
        check(&inputs, |t, v| {
            let m = t.matmul(v[0], v[1]);
            let y = t.add_row(m, v[2]);
            let y = t.gelu(y);
            t.sum_squares(y)
        });
    }

    #[test]
    fn layer_norm_and_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![rand_mat(&mut rng, 3, 5), rand_mat(&mut rng, 1, 5), rand_mat(&mut rng, 1, 5), rand_mat(&mut rng, 3, 5)];
        check(&inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let z = t.l2_normalize_rows(y);
            let w = t.mul(z, v[3]);
            t.sum_squares(w)
        });
    }

    #[test]
    fn attention_gradients_with_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = Rc::new(SeqLayout {
            batch: 2,
            seq_len: 3,
            key_valid: vec![true, true, false, true, true, true],
        });
        let inputs = vec![rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 6, 4), rand_mat(&mut rng, 6, 4)];
        check(&inputs, |t, v| {
            let a = t.attention(v[0], v[1], v[2], 2, layout.clone());
            let w = t.mul(a, v[3]);
            t.sum(w)
        });
    }

    #[test]
    fn losses_and_structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 4, 3), rand_mat(&mut rng, 1, 1)];
        let targets = Rc::new(vec![0, 2, 1, 2]);
        check(&inputs, |t, v| {
            let s = t.exp(v[2]);
            let a = t.scale_by(v[0], s);
            let ce = t.cross_entropy(a, targets.clone());
            let h = t.hybrid_nll(v[0], v[1], 0.3, targets.clone());
            let cat = t.concat_cols(v[0], v[1]);
            let sl = t.slice_cols(cat, 1, 4);
            let rows = t.concat_rows(&[sl, v[1]]);
            let gathered = t.gather_rows(rows, Rc::new(vec![0, 5, 5, 2]));
            let mu = t.slice_cols(gathered, 0, 1);
            let lv = t.slice_cols(gathered, 1, 2);
            let kl = t.kl_std_normal(mu, lv);
            let lr = t.leaky_relu(v[1], 0.01);
            let mt = t.matmul_t(lr, v[0]);
            let ms = t.mean(mt);
            let x = t.add(ce, h);
            let x = t.add(x, kl);
            t.sub(x, ms)
        });
    }

    #[test]
    fn sparse_product_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Csr::from_triplets(3, 4, vec![(0, 1, 0.5), (1, 0, 2.0), (1, 3, -1.0), (2, 2, 1.5)]);
        let at = Rc::new(a.transpose());
        let inputs = vec![rand_mat(&mut rng, 4, 2)];
        check(&inputs, |t, v| {
            let y = t.spmm(&a, at.clone(), v[0]);
            let y = t.relu(y);
            t.sum_squares(y)
        });
        assert_eq!(a.transpose().transpose(), a);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::ones((2, 2)));
        let p = tape.param(Mat::ones((2, 2)));
        let y = tape.mul(c, p);
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &Mat::ones((2, 2)));
    }
}
