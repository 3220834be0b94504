//! Forward-mode derivatives recorded on a [`Tape`].
//!
//! A [`Dual`] pairs a primal node with up to a few tangent nodes. Because the
//! tangents are ordinary tape nodes, a scalar built from them can be swept in
//! reverse like any other loss.

use super::tape::{Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Dual {
    pub p: Var,
    /// One entry per channel; `None` is an exact zero tangent.
    pub t: Vec<Option<Var>>,
}

impl Dual {
    pub fn constant(p: Var, channels: usize) -> Self {
        Self {
            p,
            t: vec![None; channels],
        }
    }

    pub fn new(p: Var, t: Vec<Option<Var>>) -> Self {
        Self { p, t }
    }

    pub fn channels(&self) -> usize {
        self.t.len()
    }

    /// Tangent of channel `k` as a dense tensor value.
    pub fn tangent_value(&self, tape: &Tape, k: usize) -> Tensor {
        match self.t[k] {
            Some(v) => tape.value(v).clone(),
            None => Tensor::zeros(tape.shape(self.p)),
        }
    }
}

fn zip_t(
    a: &Dual,
    b: &Dual,
    mut f: impl FnMut(Option<Var>, Option<Var>) -> Option<Var>,
) -> Vec<Option<Var>> {
    assert_eq!(a.channels(), b.channels(), "dual channel count mismatch");
    a.t.iter().zip(&b.t).map(|(&x, &y)| f(x, y)).collect()
}

fn sum_opt(tape: &mut Tape, a: Option<Var>, b: Option<Var>) -> Option<Var> {
    match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)),
        (x, None) | (None, x) => x,
    }
}

impl Tape {
    pub fn d_add(&mut self, a: &Dual, b: &Dual) -> Dual {
        let p = self.add(a.p, b.p);
        let t = zip_t(a, b, |x, y| sum_opt(self, x, y));
        Dual::new(p, t)
    }

    pub fn d_sub(&mut self, a: &Dual, b: &Dual) -> Dual {
        let p = self.sub(a.p, b.p);
        let t = zip_t(a, b, |x, y| match (x, y) {
            (Some(x), Some(y)) => Some(self.sub(x, y)),
            (Some(x), None) => Some(x),
            (None, Some(y)) => Some(self.neg(y)),
            (None, None) => None,
        });
        Dual::new(p, t)
    }

    pub fn d_mul(&mut self, a: &Dual, b: &Dual) -> Dual {
        let p = self.mul(a.p, b.p);
        let t = zip_t(a, b, |x, y| {
            let l = x.map(|x| self.mul(x, b.p));
            let r = y.map(|y| self.mul(a.p, y));
            sum_opt(self, l, r)
        });
        Dual::new(p, t)
    }

    /// Product with a non-dual tensor of the same shape (dropout masks,
    /// derivative masks).
    pub fn d_mul_const(&mut self, a: &Dual, c: Var) -> Dual {
        let p = self.mul(a.p, c);
        let t = a.t.iter().map(|x| x.map(|x| self.mul(x, c))).collect();
        Dual::new(p, t)
    }

    pub fn d_scale(&mut self, a: &Dual, f: f64) -> Dual {
        let p = self.scale(a.p, f);
        let t = a.t.iter().map(|x| x.map(|x| self.scale(x, f))).collect();
        Dual::new(p, t)
    }

    pub fn d_neg(&mut self, a: &Dual) -> Dual {
        self.d_scale(a, -1.0)
    }

    pub fn d_offset(&mut self, a: &Dual, f: f64) -> Dual {
        let p = self.offset(a.p, f);
        Dual::new(p, a.t.clone())
    }

    pub fn d_mul_col(&mut self, a: &Dual, c: &Dual) -> Dual {
        let p = self.mul_col(a.p, c.p);
        let t = zip_t(a, c, |x, y| {
            let l = x.map(|x| self.mul_col(x, c.p));
            let r = y.map(|y| self.mul_col(a.p, y));
            sum_opt(self, l, r)
        });
        Dual::new(p, t)
    }

    pub fn d_add_col(&mut self, a: &Dual, c: &Dual) -> Dual {
        let p = self.add_col(a.p, c.p);
        let t = zip_t(a, c, |x, y| match (x, y) {
            (Some(x), Some(y)) => Some(self.add_col(x, y)),
            (Some(x), None) => Some(x),
            (None, Some(y)) => {
                let z = self.zeros(self.shape(a.p).0, self.shape(a.p).1);
                Some(self.add_col(z, y))
            }
            (None, None) => None,
        });
        Dual::new(p, t)
    }

    /// Adds a parameter row; the row carries no tangent.
    pub fn d_add_row(&mut self, a: &Dual, r: Var) -> Dual {
        let p = self.add_row(a.p, r);
        Dual::new(p, a.t.clone())
    }

    /// Multiplies by a parameter row; the row carries no tangent.
    pub fn d_mul_row(&mut self, a: &Dual, r: Var) -> Dual {
        let p = self.mul_row(a.p, r);
        let t = a.t.iter().map(|x| x.map(|x| self.mul_row(x, r))).collect();
        Dual::new(p, t)
    }

    /// `x Wᵀ + b` for a non-dual weight and bias.
    pub fn d_linear(&mut self, x: &Dual, w: Var, b: Option<Var>) -> Dual {
        let p = self.linear(x.p, w, b);
        let t = x.t.iter().map(|t| t.map(|t| self.linear(t, w, None))).collect();
        Dual::new(p, t)
    }

    pub fn d_recip(&mut self, a: &Dual) -> Dual {
        let p = self.recip(a.p);
        let t = a
            .t
            .iter()
            .map(|x| {
                x.map(|x| {
                    let y2 = self.square(p);
                    let m = self.mul(x, y2);
                    self.neg(m)
                })
            })
            .collect();
        Dual::new(p, t)
    }

    /// Square root; zero tangent where the primal is 0.
    pub fn d_sqrt(&mut self, a: &Dual) -> Dual {
        let p = self.sqrt(a.p);
        let t = if a.t.iter().any(Option::is_some) {
            let inv = self.recip(p);
            let half = self.scale(inv, 0.5);
            a.t.iter().map(|x| x.map(|x| self.mul(x, half))).collect()
        } else {
            a.t.clone()
        };
        Dual::new(p, t)
    }

    pub fn d_div(&mut self, a: &Dual, b: &Dual) -> Dual {
        let inv = self.d_recip(b);
        self.d_mul(a, &inv)
    }

    /// Absolute value; the sign at 0 is +1.
    pub fn d_abs(&mut self, a: &Dual) -> Dual {
        let p = self.abs(a.p);
        let t = if a.t.iter().any(Option::is_some) {
            let sign = self
                .value(a.p)
                .mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 });
            let sign = self.constant(sign);
            a.t.iter().map(|x| x.map(|x| self.mul(x, sign))).collect()
        } else {
            a.t.clone()
        };
        Dual::new(p, t)
    }

    pub fn d_square(&mut self, a: &Dual) -> Dual {
        let p = self.square(a.p);
        let t = a
            .t
            .iter()
            .map(|x| {
                x.map(|x| {
                    let m = self.mul(x, a.p);
                    self.scale(m, 2.0)
                })
            })
            .collect();
        Dual::new(p, t)
    }

    /// Leaky rectifier; the derivative at 0 uses the positive-side slope.
    pub fn d_leaky_relu(&mut self, a: &Dual, slope: f64) -> Dual {
        let p = self.leaky_relu(a.p, slope);
        let t = if a.t.iter().any(Option::is_some) {
            let d = self
                .value(a.p)
                .mapv(|v| if v >= 0.0 { 1.0 } else { slope });
            let d = self.constant(d);
            a.t.iter().map(|x| x.map(|x| self.mul(x, d))).collect()
        } else {
            a.t.clone()
        };
        Dual::new(p, t)
    }

    /// Row standardization without the affine part.
    ///
    /// The tangent `s (t - mean t - x̂ mean(x̂ t))` is built from tape ops, so
    /// it stays differentiable in reverse.
    pub fn d_layer_norm(&mut self, a: &Dual) -> Dual {
        let p = self.layer_norm(a.p);
        let t = if a.t.iter().any(Option::is_some) {
            let s = self.row_inv_std(a.p);
            a.t.iter()
                .map(|x| {
                    x.map(|x| {
                        let mt = self.row_mean(x);
                        let nmt = self.neg(mt);
                        let centered = self.add_col(x, nmt);
                        let xt = self.mul(p, x);
                        let mxt = self.row_mean(xt);
                        let proj = self.mul_col(p, mxt);
                        let d = self.sub(centered, proj);
                        self.mul_col(d, s)
                    })
                })
                .collect()
        } else {
            a.t.clone()
        };
        Dual::new(p, t)
    }

    pub fn d_row_sum(&mut self, a: &Dual) -> Dual {
        let p = self.row_sum(a.p);
        let t = a.t.iter().map(|x| x.map(|x| self.row_sum(x))).collect();
        Dual::new(p, t)
    }

    pub fn d_dot_rows(&mut self, a: &Dual, b: &Dual) -> Dual {
        let m = self.d_mul(a, b);
        self.d_row_sum(&m)
    }

    pub fn d_norm_rows(&mut self, a: &Dual) -> Dual {
        let sq = self.d_dot_rows(a, a);
        self.d_sqrt(&sq)
    }

    /// Row-wise unit vectors; zero rows stay zero with zero tangent.
    pub fn d_normalize_rows(&mut self, a: &Dual) -> Dual {
        let n = self.d_norm_rows(a);
        let inv = self.d_recip(&n);
        self.d_mul_col(a, &inv)
    }

    pub fn d_cross(&mut self, a: &Dual, b: &Dual) -> Dual {
        let p = self.cross(a.p, b.p);
        let t = zip_t(a, b, |x, y| {
            let l = x.map(|x| self.cross(x, b.p));
            let r = y.map(|y| self.cross(a.p, y));
            sum_opt(self, l, r)
        });
        Dual::new(p, t)
    }

    /// Column concatenation; a missing tangent in a mixed channel is
    /// materialized as zeros.
    pub fn d_concat_cols(&mut self, parts: &[&Dual]) -> Dual {
        let k = parts[0].channels();
        let ps: Vec<Var> = parts.iter().map(|d| d.p).collect();
        let p = self.concat_cols(&ps);
        let mut t = Vec::with_capacity(k);
        for ch in 0..k {
            if parts.iter().all(|d| d.t[ch].is_none()) {
                t.push(None);
                continue;
            }
            let cols: Vec<Var> = parts
                .iter()
                .map(|d| match d.t[ch] {
                    Some(v) => v,
                    None => {
                        let (r, c) = self.shape(d.p);
                        self.zeros(r, c)
                    }
                })
                .collect();
            t.push(Some(self.concat_cols(&cols)));
        }
        Dual::new(p, t)
    }

    pub fn d_slice_cols(&mut self, a: &Dual, start: usize, len: usize) -> Dual {
        let p = self.slice_cols(a.p, start, len);
        let t = a
            .t
            .iter()
            .map(|x| x.map(|x| self.slice_cols(x, start, len)))
            .collect();
        Dual::new(p, t)
    }

    pub fn d_reshape(&mut self, a: &Dual, rows: usize, cols: usize) -> Dual {
        let p = self.reshape(a.p, rows, cols);
        let t = a
            .t
            .iter()
            .map(|x| x.map(|x| self.reshape(x, rows, cols)))
            .collect();
        Dual::new(p, t)
    }

    pub fn d_repeat_rows(&mut self, a: &Dual, n: usize) -> Dual {
        let p = self.repeat_rows(a.p, n);
        let t = a.t.iter().map(|x| x.map(|x| self.repeat_rows(x, n))).collect();
        Dual::new(p, t)
    }

    pub fn d_gather_rows(&mut self, a: &Dual, idx: &[usize]) -> Dual {
        let p = self.gather_rows(a.p, idx.to_vec());
        let t = a
            .t
            .iter()
            .map(|x| x.map(|x| self.gather_rows(x, idx.to_vec())))
            .collect();
        Dual::new(p, t)
    }

    pub fn d_select_rows(&mut self, mask: &[bool], a: &Dual, b: &Dual) -> Dual {
        let p = self.select_rows(mask.to_vec(), a.p, b.p);
        let t = zip_t(a, b, |x, y| {
            if x.is_none() && y.is_none() {
                return None;
            }
            let (r, c) = self.shape(a.p);
            let x = x.unwrap_or_else(|| self.zeros(r, c));
            let y = y.unwrap_or_else(|| self.zeros(r, c));
            Some(self.select_rows(mask.to_vec(), x, y))
        });
        Dual::new(p, t)
    }
}
