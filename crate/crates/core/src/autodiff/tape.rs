//! Reverse-mode tape over row-major 2-D tensors.
//!
//! Every node holds a dense `rows × cols` value. Batched ray computations use
//! one row per ray, so geometry and network layers are recorded as a handful
//! of whole-batch nodes rather than millions of scalar ones.

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{MarfError, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulCol(Var, Var),
    AddCol(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Recip(Var),
    Sqrt(Var),
    Abs(Var),
    Exp(Var),
    Cos(Var),
    Square(Var),
    Softplus(Var),
    MaxZero(Var),
    LeakyRelu(Var, f64),
    RowSum(Var),
    RowMean(Var),
    MeanRows(Var),
    SumAll(Var),
    Cross(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    RowInvStd { x: Var },
    Concat(Vec<Var>),
    Slice { a: Var, start: usize },
    Reshape(Var),
    RepeatRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Where { mask: Vec<bool>, a: Var, b: Var },
    Opaque { name: String },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Layer-normalization epsilon, matching the usual framework default.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-writer record of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    stopped: Vec<Tensor>,
    frozen: Option<std::collections::VecDeque<Tensor>>,
}

/// Adjoints of the leaves reached by a reverse sweep.
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a leaf, `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(|a| a.as_ref())
    }

    /// Gradient with respect to a leaf, zero-filled when unreached.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch {:?} vs {:?}", a.dim(), b.dim());
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stopped: Vec::new(),
            frozen: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.dim(), (1, 1), "scalar() on a non-scalar node");
        t[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.constant(Tensor::zeros((rows, cols)))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        let v = match self.frozen.as_mut().and_then(|f| f.pop_front()) {
            Some(f) if f.dim() == self.value(a).dim() => f,
            _ => self.value(a).clone(),
        };
        self.stopped.push(v.clone());
        self.push(Op::StopGrad, v, false)
    }

    /// Values produced by every `stop_grad` so far, in call order.
    pub fn stopped_values(&self) -> &[Tensor] {
        &self.stopped
    }

    /// Makes subsequent `stop_grad` calls emit these values in order instead
    /// of their inputs, so a finite-difference sweep sees the same constants
    /// the reverse sweep treated as fixed.
    pub fn freeze_stopped(&mut self, values: Vec<Tensor>) {
        self.frozen = Some(values.into());
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "add");
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "sub");
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "mul");
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "div");
        let v = self.value(a) / self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Div(a, b), v, ng)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let v = self.value(a) * f;
        let ng = self.ng(a);
        self.push(Op::Scale(a, f), v, ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn offset(&mut self, a: Var, f: f64) -> Var {
        let v = self.value(a) + f;
        let ng = self.ng(a);
        self.push(Op::Offset(a), v, ng)
    }

    /// `a[i, j] * c[i, 0]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (ra, _) = self.shape(a);
        assert_eq!(self.shape(c), (ra, 1), "mul_col: column shape");
        let v = self.value(a) * self.value(c);
        let ng = self.ng(a) || self.ng(c);
        self.push(Op::MulCol(a, c), v, ng)
    }

    /// `a[i, j] + c[i, 0]`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let (ra, _) = self.shape(a);
        assert_eq!(self.shape(c), (ra, 1), "add_col: column shape");
        let v = self.value(a) + self.value(c);
        let ng = self.ng(a) || self.ng(c);
        self.push(Op::AddCol(a, c), v, ng)
    }

    /// `a[i, j] + r[0, j]`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (_, ca) = self.shape(a);
        assert_eq!(self.shape(r), (1, ca), "add_row: row shape");
        let v = self.value(a) + self.value(r);
        let ng = self.ng(a) || self.ng(r);
        self.push(Op::AddRow(a, r), v, ng)
    }

    /// `a[i, j] * r[0, j]`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let (_, ca) = self.shape(a);
        assert_eq!(self.shape(r), (1, ca), "mul_row: row shape");
        let v = self.value(a) * self.value(r);
        let ng = self.ng(a) || self.ng(r);
        self.push(Op::MulRow(a, r), v, ng)
    }

    /// `1 / a`, with `1/0` defined as 0 so masked-out rows stay finite.
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x == 0.0 { 0.0 } else { 1.0 / x });
        let ng = self.ng(a);
        self.push(Op::Recip(a), v, ng)
    }

    /// Square root. The derivative at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let ng = self.ng(a);
        self.push(Op::Sqrt(a), v, ng)
    }

    /// Absolute value; derivative at 0 is +1.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(Op::Abs(a), v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.ng(a);
        self.push(Op::Exp(a), v, ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::cos);
        let ng = self.ng(a);
        self.push(Op::Cos(a), v, ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let ng = self.ng(a);
        self.push(Op::Square(a), v, ng)
    }

    /// `ln(1 + e^a)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ng = self.ng(a);
        self.push(Op::Softplus(a), v, ng)
    }

    /// `max(a, 0)`; derivative at 0 is 0.
    pub fn max_zero(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(Op::MaxZero(a), v, ng)
    }

    /// Leaky rectifier; derivative at 0 uses the positive-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(Op::LeakyRelu(a, slope), v, ng)
    }

    /// Per-row sum, `rows × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(Op::RowSum(a), v, ng)
    }

    /// Per-row mean, `rows × 1`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1 as f64;
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1)) / cols;
        let ng = self.ng(a);
        self.push(Op::RowMean(a), v, ng)
    }

    /// Mean over rows, `1 × cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let rows = self.shape(a).0 as f64;
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0)) / rows;
        let ng = self.ng(a);
        self.push(Op::MeanRows(a), v, ng)
    }

    /// Sum of all entries, `1 × 1`. Summation runs row-major.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(Op::SumAll(a), Tensor::from_elem((1, 1), total), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn dot_rows(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.row_sum(m)
    }

    pub fn norm_rows(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let s = self.row_sum(sq);
        self.sqrt(s)
    }

    /// Row-wise unit vectors; zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let n = self.norm_rows(a);
        let inv = self.recip(n);
        self.mul_col(a, inv)
    }

    /// Row-wise cross product of `rows × 3` tensors.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, 3, "cross needs 3 columns");
        same_shape(self.value(a), self.value(b), "cross");
        let v = cross_rows(self.value(a), self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Cross(a, b), v, ng)
    }

    /// `x Wᵀ + b` with `W` shaped `out × in` and `b` shaped `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (_, cin) = self.shape(x);
        let (wout, win) = self.shape(w);
        assert_eq!(cin, win, "linear: input width {cin} vs weight {win}");
        let mut v = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            assert_eq!(self.shape(b), (1, wout), "linear: bias shape");
            v += self.value(b);
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(Op::Linear { x, w, b }, v, ng)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine part.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut out = Tensor::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (row, mut orow) in xv.outer_iter().zip(out.outer_iter_mut()) {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(s);
            Zip::from(&mut orow).and(&row).for_each(|o, &v| *o = (v - mean) * s);
        }
        let ng = self.ng(x);
        self.push(Op::LayerNorm { x, inv_std }, out, ng)
    }

    /// Per-row `1 / sqrt(var + eps)`, the scale used by [`Tape::layer_norm`].
    pub fn row_inv_std(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.ncols() as f64;
        let v = Tensor::from_shape_fn((xv.nrows(), 1), |(i, _)| {
            let row = xv.row(i);
            let mean = row.sum() / cols;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
            1.0 / (var + LAYER_NORM_EPS).sqrt()
        });
        let ng = self.ng(x);
        self.push(Op::RowInvStd { x }, v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros((rows, cols));
        let mut at = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.nrows(), rows, "concat: row mismatch");
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Op::Concat(parts.to_vec()), v, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(Op::Slice { a, start }, v, ng)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape: element count");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Tensor::from_shape_vec((rows, cols), data).expect("reshape");
        let ng = self.ng(a);
        self.push(Op::Reshape(a), v, ng)
    }

    /// Each row repeated `n` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        let (rows, cols) = src.dim();
        let v = Tensor::from_shape_fn((rows * n, cols), |(i, j)| src[[i / n, j]]);
        let ng = self.ng(a);
        self.push(Op::RepeatRows(a, n), v, ng)
    }

    /// Output row `k` is input row `idx[k]`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let src = self.value(a);
        let cols = src.ncols();
        let mut v = Tensor::zeros((idx.len(), cols));
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(k).assign(&src.row(i));
        }
        let ng = self.ng(a);
        self.push(Op::GatherRows(a, idx), v, ng)
    }

    /// Row-wise select: rows with `mask[i]` come from `a`, others from `b`.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Var {
        same_shape(self.value(a), self.value(b), "select_rows");
        assert_eq!(mask.len(), self.shape(a).0, "select_rows: mask length");
        let mut v = self.value(b).clone();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                v.row_mut(i).assign(&self.value(a).row(i));
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Where { mask, a, b }, v, ng)
    }

    /// Element-wise map with no derivative rule. A reverse sweep that
    /// reaches this node fails with [`MarfError::UnsupportedOp`].
    pub fn opaque(&mut self, a: Var, name: &str, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(
            Op::Opaque {
                name: name.to_string(),
            },
            v,
            ng,
        )
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.shape(out) != (1, 1) {
            return Err(MarfError::InvalidInput(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(out)
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(out.0 + 1, || None);
        let mut leaves: Vec<Option<Tensor>> = Vec::new();
        leaves.resize_with(out.0 + 1, || None);
        if !self.ng(out) {
            return Ok(Gradients { adj: leaves });
        }
        adj[out.0] = Some(Tensor::ones((1, 1)));

        for i in (0..=out.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(g);
                }
                Op::StopGrad => {}
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *b, || -&g);
                }
                Op::Mul(a, b) => {
                    self.acc(&mut adj, *a, || &g * self.value(*b));
                    self.acc(&mut adj, *b, || &g * self.value(*a));
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    self.acc(&mut adj, *a, || &g / bv);
                    self.acc(&mut adj, *b, || {
                        let mut r = -&g * self.value(*a);
                        r /= bv;
                        r /= bv;
                        r
                    });
                }
                Op::Scale(a, f) => self.acc(&mut adj, *a, || &g * *f),
                Op::Offset(a) => self.acc(&mut adj, *a, || g.clone()),
                Op::MulCol(a, c) => {
                    self.acc(&mut adj, *a, || &g * self.value(*c));
                    self.acc(&mut adj, *c, || {
                        (&g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1))
                    });
                }
                Op::AddCol(a, c) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *c, || g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::AddRow(a, r) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *r, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(a, r) => {
                    self.acc(&mut adj, *a, || &g * self.value(*r));
                    self.acc(&mut adj, *r, || {
                        (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0))
                    });
                }
                Op::Recip(a) => {
                    let y = &node.value;
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r).and(y).for_each(|r, &y| *r *= -y * y);
                        r
                    });
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r)
                            .and(y)
                            .for_each(|r, &y| *r = if y > 0.0 { *r * 0.5 / y } else { 0.0 });
                        r
                    });
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r)
                            .and(x)
                            .for_each(|r, &x| *r = if x >= 0.0 { *r } else { -*r });
                        r
                    });
                }
                Op::Exp(a) => self.acc(&mut adj, *a, || &g * &node.value),
                Op::Cos(a) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r).and(x).for_each(|r, &x| *r *= -x.sin());
                        r
                    });
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r).and(x).for_each(|r, &x| *r *= 2.0 * x);
                        r
                    });
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r).and(x).for_each(|r, &x| *r *= sigmoid(x));
                        r
                    });
                }
                Op::MaxZero(a) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r)
                            .and(x)
                            .for_each(|r, &x| *r = if x > 0.0 { *r } else { 0.0 });
                        r
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        Zip::from(&mut r)
                            .and(x)
                            .for_each(|r, &x| *r = if x >= 0.0 { *r } else { *r * slope });
                        r
                    });
                }
                Op::RowSum(a) => {
                    let cols = self.shape(*a).1;
                    self.acc(&mut adj, *a, || broadcast_col(&g, cols));
                }
                Op::RowMean(a) => {
                    let cols = self.shape(*a).1;
                    self.acc(&mut adj, *a, || broadcast_col(&g, cols) / cols as f64);
                }
                Op::MeanRows(a) => {
                    let rows = self.shape(*a).0;
                    self.acc(&mut adj, *a, || {
                        let mut r = Tensor::zeros(self.shape(*a));
                        r += &g;
                        r / rows as f64
                    });
                }
                Op::SumAll(a) => {
                    let g0 = g[[0, 0]];
                    self.acc(&mut adj, *a, || Tensor::from_elem(self.shape(*a), g0));
                }
                Op::Cross(a, b) => {
                    self.acc(&mut adj, *a, || cross_rows(self.value(*b), &g));
                    self.acc(&mut adj, *b, || cross_rows(&g, self.value(*a)));
                }
                Op::Linear { x, w, b } => {
                    self.acc(&mut adj, *x, || g.dot(self.value(*w)));
                    self.acc(&mut adj, *w, || g.t().dot(self.value(*x)));
                    if let Some(b) = b {
                        self.acc(&mut adj, *b, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::LayerNorm { x, inv_std } => {
                    let xhat = &node.value;
                    self.acc(&mut adj, *x, || {
                        let cols = xhat.ncols() as f64;
                        let mut r = Tensor::zeros(xhat.dim());
                        for (((mut rrow, grow), xrow), &s) in r
                            .outer_iter_mut()
                            .zip(g.outer_iter())
                            .zip(xhat.outer_iter())
                            .zip(inv_std.iter())
                        {
                            let mg = grow.sum() / cols;
                            let mgx = grow.dot(&xrow) / cols;
                            Zip::from(&mut rrow)
                                .and(&grow)
                                .and(&xrow)
                                .for_each(|r, &gv, &xv| *r = s * (gv - mg - xv * mgx));
                        }
                        r
                    });
                }
                Op::RowInvStd { x } => {
                    let xv = self.value(*x);
                    let s = &node.value;
                    self.acc(&mut adj, *x, || {
                        let cols = xv.ncols() as f64;
                        let mut r = Tensor::zeros(xv.dim());
                        for (i, (mut rrow, xrow)) in
                            r.outer_iter_mut().zip(xv.outer_iter()).enumerate()
                        {
                            let mean = xrow.sum() / cols;
                            let si = s[[i, 0]];
                            let k = -g[[i, 0]] * si * si * si / cols;
                            Zip::from(&mut rrow)
                                .and(&xrow)
                                .for_each(|r, &x| *r = k * (x - mean));
                        }
                        r
                    });
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        self.acc(&mut adj, p, || g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::Slice { a, start } => {
                    let w = g.ncols();
                    self.acc(&mut adj, *a, || {
                        let mut r = Tensor::zeros(self.shape(*a));
                        r.slice_mut(s![.., *start..*start + w]).assign(&g);
                        r
                    });
                }
                Op::Reshape(a) => {
                    self.acc(&mut adj, *a, || {
                        let data: Vec<f64> = g.iter().copied().collect();
                        Tensor::from_shape_vec(self.shape(*a), data).expect("reshape")
                    });
                }
                Op::RepeatRows(a, n) => {
                    self.acc(&mut adj, *a, || {
                        let (rows, cols) = self.shape(*a);
                        let mut r = Tensor::zeros((rows, cols));
                        for (k, grow) in g.outer_iter().enumerate() {
                            let mut rrow = r.row_mut(k / n);
                            rrow += &grow;
                        }
                        r
                    });
                }
                Op::GatherRows(a, idx) => {
                    self.acc(&mut adj, *a, || {
                        let mut r = Tensor::zeros(self.shape(*a));
                        for (k, &i) in idx.iter().enumerate() {
                            let mut rrow = r.row_mut(i);
                            rrow += &g.row(k);
                        }
                        r
                    });
                }
                Op::Where { mask, a, b } => {
                    self.acc(&mut adj, *a, || {
                        let mut r = g.clone();
                        for (i, &m) in mask.iter().enumerate() {
                            if !m {
                                r.row_mut(i).fill(0.0);
                            }
                        }
                        r
                    });
                    self.acc(&mut adj, *b, || {
                        let mut r = g.clone();
                        for (i, &m) in mask.iter().enumerate() {
                            if m {
                                r.row_mut(i).fill(0.0);
                            }
                        }
                        r
                    });
                }
                Op::Opaque { name, .. } => {
                    return Err(MarfError::UnsupportedOp(name.clone()));
                }
            }
        }
        Ok(Gradients { adj: leaves })
    }

    fn acc(&self, adj: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let c = contribution();
        match &mut adj[v.0] {
            Some(a) => *a += &c,
            slot @ None => *slot = Some(c),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_col(g: &Tensor, cols: usize) -> Tensor {
    let rows = g.nrows();
    Tensor::from_shape_fn((rows, cols), |(i, _)| g[[i, 0]])
}

pub(crate) fn cross_rows(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(a.dim());
    for ((mut o, a), b) in out.outer_iter_mut().zip(a.outer_iter()).zip(b.outer_iter()) {
        o[0] = a[1] * b[2] - a[2] * b[1];
        o[1] = a[2] * b[0] - a[0] * b[2];
        o[2] = a[0] * b[1] - a[1] * b[0];
    }
    out
}
