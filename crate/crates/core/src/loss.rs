//! Training losses, their weights and schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape, Tensor, Var};
use crate::data::SupervisionSample;
use crate::error::{MarfError, Result};
use crate::network::{embed_dual, forward_dual, split_atoms, Bound, Head, NetworkParams};
use crate::raycast::{intersect_dual, select_winners};

/// `clamp((epoch - offset) / duration, 0, 1)`.
pub fn linear_ease(epoch: f64, duration: f64, offset: f64) -> f64 {
    if duration <= 0.0 {
        return if epoch >= offset { 1.0 } else { 0.0 };
    }
    ((epoch - offset) / duration).clamp(0.0, 1.0)
}

/// `-½ (cos(π e_l) - 1)`.
pub fn sinusoidal_ease(epoch: f64, duration: f64, offset: f64) -> f64 {
    -0.5 * ((std::f64::consts::PI * linear_ease(epoch, duration, offset)).cos() - 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant(f64),
    Linear {
        duration: f64,
        #[serde(default)]
        offset: f64,
    },
    Sinusoidal {
        duration: f64,
        #[serde(default)]
        offset: f64,
    },
    /// `a + b · inner`.
    Affine { a: f64, b: f64, of: Box<Schedule> },
}

impl Schedule {
    pub fn at(&self, epoch: f64) -> f64 {
        match self {
            Schedule::Constant(v) => *v,
            Schedule::Linear { duration, offset } => linear_ease(epoch, *duration, *offset),
            Schedule::Sinusoidal { duration, offset } => sinusoidal_ease(epoch, *duration, *offset),
            Schedule::Affine { a, b, of } => a + b * of.at(epoch),
        }
    }

    fn scaled(&self, f: f64) -> Self {
        match self {
            Schedule::Constant(v) => Schedule::Constant(*v),
            Schedule::Linear { duration, offset } => Schedule::Linear {
                duration: duration * f,
                offset: offset * f,
            },
            Schedule::Sinusoidal { duration, offset } => Schedule::Sinusoidal {
                duration: duration * f,
                offset: offset * f,
            },
            Schedule::Affine { a, b, of } => Schedule::Affine {
                a: *a,
                b: *b,
                of: Box::new(of.scaled(f)),
            },
        }
    }

    fn scale_value(&self, f: f64) -> Self {
        Schedule::Affine {
            a: 0.0,
            b: f,
            of: Box::new(self.clone()),
        }
    }
}

pub const TERM_NAMES: [&str; 11] = ["p", "n", "s", "h", "r", "ih", "im", "sigma", "mv", "z", "bce"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub p: Schedule,
    pub n: Schedule,
    pub s: Schedule,
    pub h: Schedule,
    pub r: Schedule,
    pub ih: Schedule,
    pub im: Schedule,
    pub sigma: Schedule,
    pub mv: Schedule,
    pub z: Schedule,
    /// Hit-classification weight of the PRIF head.
    pub bce: Schedule,
}

impl Default for LossWeights {
    fn default() -> Self {
        use Schedule::*;
        Self {
            p: Constant(2.0),
            n: Affine {
                a: 0.0,
                b: 0.25,
                of: Box::new(Sinusoidal {
                    duration: 85.0,
                    offset: 15.0,
                }),
            },
            s: Constant(10.0),
            h: Constant(100.0),
            r: Constant(5e-4),
            ih: Constant(20.0),
            im: Constant(300.0),
            sigma: Affine {
                a: 0.1,
                b: -0.09,
                of: Box::new(Linear {
                    duration: 40.0,
                    offset: 0.0,
                }),
            },
            mv: Affine {
                a: 0.0,
                b: 0.1,
                of: Box::new(Linear {
                    duration: 50.0,
                    offset: 0.0,
                }),
            },
            z: Affine {
                a: 0.0,
                b: 1e-4,
                of: Box::new(Linear {
                    duration: 30.0,
                    offset: 0.0,
                }),
            },
            bce: Constant(1.0),
        }
    }
}

impl LossWeights {
    fn all(&self) -> [&Schedule; 11] {
        [
            &self.p, &self.n, &self.s, &self.h, &self.r, &self.ih, &self.im, &self.sigma, &self.mv, &self.z,
            &self.bce,
        ]
    }

    fn all_mut(&mut self) -> [&mut Schedule; 11] {
        [
            &mut self.p,
            &mut self.n,
            &mut self.s,
            &mut self.h,
            &mut self.r,
            &mut self.ih,
            &mut self.im,
            &mut self.sigma,
            &mut self.mv,
            &mut self.z,
            &mut self.bce,
        ]
    }

    /// Weight values at an epoch, in [`TERM_NAMES`] order.
    pub fn at(&self, epoch: f64) -> [f64; 11] {
        self.all().map(|s| s.at(epoch))
    }

    /// Stretches every schedule's time axis by `f` (for shorter runs).
    pub fn time_scaled(&self, f: f64) -> Self {
        let mut out = self.clone();
        for s in out.all_mut() {
            *s = s.scaled(f);
        }
        out
    }

    /// Multiplies one term's weight by `f`.
    pub fn with_factor(mut self, term: &str, f: f64) -> Result<Self> {
        let k = term_index(term)?;
        let s = &mut self.all_mut()[k];
        **s = s.scale_value(f);
        Ok(self)
    }

    /// Disables a term.
    pub fn without(mut self, term: &str) -> Result<Self> {
        let k = term_index(term)?;
        *self.all_mut()[k] = Schedule::Constant(0.0);
        Ok(self)
    }
}

pub fn term_index(term: &str) -> Result<usize> {
    TERM_NAMES
        .iter()
        .position(|&t| t == term)
        .ok_or_else(|| MarfError::InvalidInput(format!("unknown loss term {term:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MultiviewMode {
    /// Forward-mode tangents along q̂, differentiated in reverse.
    Analytic,
    /// Central differences over q̂ with the given step.
    FiniteDifference { h: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub multiview: MultiviewMode,
    /// PRIF head: add the normal loss (at twice its weight) using normals
    /// from origin derivatives.
    pub prif_normal: bool,
    /// PRIF head: add the multi-view loss on the predicted point.
    pub prif_multiview: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            multiview: MultiviewMode::Analytic,
            prif_normal: false,
            prif_multiview: false,
        }
    }
}

/// Per-term values and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: [f64; 11],
    pub weights: [f64; 11],
    pub total: f64,
}

impl LossBreakdown {
    pub fn get(&self, term: &str) -> f64 {
        self.terms[term_index(term).expect("known term")]
    }

    /// Weighted sum recomputed from the parts.
    pub fn weighted_sum(&self) -> f64 {
        self.terms.iter().zip(&self.weights).map(|(t, w)| t * w).sum()
    }
}

/// A batch of supervision rows as dense tensors.
#[derive(Clone, Debug)]
pub struct Batch {
    pub o: Tensor,
    pub q: Tensor,
    pub p_gt: Tensor,
    pub n_gt: Tensor,
    pub s_gt: Tensor,
    pub h_gt: Vec<bool>,
    pub m_gt: Vec<bool>,
    pub shape: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[SupervisionSample]) -> Self {
        let b = samples.len();
        let mut out = Self {
            o: Tensor::zeros((b, 3)),
            q: Tensor::zeros((b, 3)),
            p_gt: Tensor::zeros((b, 3)),
            n_gt: Tensor::zeros((b, 3)),
            s_gt: Tensor::zeros((b, 1)),
            h_gt: Vec::with_capacity(b),
            m_gt: Vec::with_capacity(b),
            shape: Vec::with_capacity(b),
        };
        for (i, s) in samples.iter().enumerate() {
            let q = s.ray.unit_direction();
            let (h, m) = s.gates();
            let n = s.n_gt.map(|n| n.normalize()).unwrap_or_default();
            let p = s.p_gt.unwrap_or_default();
            for k in 0..3 {
                out.o[[i, k]] = s.ray.origin[k];
                out.q[[i, k]] = q[k];
                out.p_gt[[i, k]] = p[k];
                out.n_gt[[i, k]] = n[k];
            }
            out.s_gt[[i, 0]] = if m { s.s_gt.unwrap_or(0.0) } else { 0.0 };
            out.h_gt.push(h);
            out.m_gt.push(m);
            out.shape.push(s.shape);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.h_gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h_gt.is_empty()
    }

    /// Foot of perpendicular and moment embedding, row per ray.
    pub fn embedding(&self) -> Tensor {
        let mut x = Tensor::zeros((self.len(), 9));
        for i in 0..self.len() {
            let q = nalgebra::Vector3::new(self.q[[i, 0]], self.q[[i, 1]], self.q[[i, 2]]);
            let o = nalgebra::Vector3::new(self.o[[i, 0]], self.o[[i, 1]], self.o[[i, 2]]);
            let m = o.cross(&q);
            let f = q.cross(&m);
            for k in 0..3 {
                x[[i, k]] = q[k];
                x[[i, 3 + k]] = m[k];
                x[[i, 6 + k]] = f[k];
            }
        }
        x
    }
}

/// Random state a batch evaluation depends on, drawn up front.
#[derive(Clone, Debug)]
pub struct BatchRandomness {
    /// One keep-mask per hidden layer (`B × width`), or none to disable dropout.
    pub masks: Option<Vec<Tensor>>,
    /// Partner ray of each ray for the inscription terms.
    pub permutation: Vec<usize>,
}

impl BatchRandomness {
    pub fn none(batch: usize) -> Self {
        Self {
            masks: None,
            permutation: (0..batch).collect(),
        }
    }
}

/// Tape handles of each term (in [`TERM_NAMES`] order) and the total.
pub struct LossGraph {
    pub terms: [Var; 11],
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Winning candidate per ray.
    pub winners: Vec<usize>,
    pub predicted_hit: Vec<bool>,
    /// Rays whose winning normal was degenerate and left out of the normal term.
    pub degenerate_normals: usize,
}

fn col(tape: &mut Tape, flags: impl Iterator<Item = bool>) -> Var {
    let v: Vec<f64> = flags.map(|f| f as u8 as f64).collect();
    let n = v.len();
    tape.constant(Tensor::from_shape_vec((n, 1), v).expect("column"))
}

fn gather_const(t: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros((idx.len(), t.ncols()));
    for (k, &i) in idx.iter().enumerate() {
        out.row_mut(k).assign(&t.row(i));
    }
    out
}

fn repeat_const(t: &Tensor, n: usize) -> Tensor {
    Tensor::from_shape_fn((t.nrows() * n, t.ncols()), |(i, j)| t[[i / n, j]])
}

/// `Σ_rows Σ_channels |t|²` of a dual's tangents.
fn tangent_energy(tape: &mut Tape, d: &Dual) -> Option<Var> {
    let mut acc: Option<Var> = None;
    for t in d.t.iter().flatten() {
        let sq = tape.square(*t);
        let s = tape.sum_all(sq);
        acc = Some(match acc {
            Some(a) => tape.add(a, s),
            None => s,
        });
    }
    acc
}

fn zero_scalar(tape: &mut Tape) -> Var {
    tape.zeros(1, 1)
}

fn axis_dirs(tape: &mut Tape, rows: usize) -> Vec<Option<Var>> {
    (0..3)
        .map(|k| {
            let e = Tensor::from_shape_fn((rows, 3), |(_, j)| (j == k) as u8 as f64);
            Some(tape.constant(e))
        })
        .collect()
}

fn latent_rows(tape: &mut Tape, params: &NetworkParams, bound: &Bound, shapes: &[usize]) -> Option<Var> {
    (params.config.latent_dim > 0).then(|| tape.gather_rows(bound.latents(), shapes.to_vec()))
}

fn mask_rows(tape: &mut Tape, masks: &Option<Vec<Tensor>>, idx: Option<&[usize]>) -> Option<Vec<Var>> {
    masks.as_ref().map(|ms| {
        ms.iter()
            .map(|m| match idx {
                Some(idx) => tape.constant(gather_const(m, idx)),
                None => tape.constant(m.clone()),
            })
            .collect()
    })
}

/// Mean squared norm of the distinct latent vectors referenced by the batch.
fn latent_loss(tape: &mut Tape, params: &NetworkParams, bound: &Bound, shapes: &[usize]) -> Var {
    if params.config.latent_dim == 0 || shapes.is_empty() {
        return zero_scalar(tape);
    }
    let mut ids = shapes.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let n = ids.len() as f64;
    let z = tape.gather_rows(bound.latents(), ids);
    let sq = tape.square(z);
    let s = tape.sum_all(sq);
    tape.scale(s, 1.0 / n)
}

/// Builds every loss term for a batch on `tape`.
pub fn build_loss(
    tape: &mut Tape,
    params: &NetworkParams,
    bound: &Bound,
    batch: &Batch,
    randomness: &BatchRandomness,
    config: &LossConfig,
    epoch: f64,
) -> Result<LossGraph> {
    if batch.is_empty() {
        return Err(MarfError::InvalidInput("empty batch".into()));
    }
    if randomness.permutation.len() != batch.len() {
        return Err(MarfError::InvalidInput("permutation length must match the batch".into()));
    }
    let weights = config.weights.at(epoch);
    let (terms, winners, predicted_hit, degenerate_normals) = match params.config.head {
        Head::Marf => marf_terms(tape, params, bound, batch, randomness, config, &weights)?,
        Head::Prif => prif_terms(tape, params, bound, batch, randomness, config, &weights)?,
    };
    let mut total: Option<Var> = None;
    let mut values = [0.0; 11];
    for (k, (&v, &w)) in terms.iter().zip(&weights).enumerate() {
        values[k] = tape.scalar(v);
        if w == 0.0 {
            continue;
        }
        let wv = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, wv),
            None => wv,
        });
    }
    let total = match total {
        Some(t) => t,
        None => zero_scalar(tape),
    };
    let breakdown = LossBreakdown {
        terms: values,
        weights,
        total: tape.scalar(total),
    };
    Ok(LossGraph {
        terms,
        total,
        breakdown,
        winners,
        predicted_hit,
        degenerate_normals,
    })
}

type Terms = ([Var; 11], Vec<usize>, Vec<bool>, usize);

fn marf_terms(
    tape: &mut Tape,
    params: &NetworkParams,
    bound: &Bound,
    batch: &Batch,
    rnd: &BatchRandomness,
    config: &LossConfig,
    weights: &[f64; 11],
) -> Result<Terms> {
    let b = batch.len();
    let n = params.config.n_atoms;
    let bf = b as f64;
    let bn = (b * n) as f64;

    let x = tape.constant(batch.embedding());
    let z = latent_rows(tape, params, bound, &batch.shape);
    let masks = mask_rows(tape, &rnd.masks, None);
    let raw = forward_dual(tape, params, bound, &Dual::constant(x, 0), z, masks.as_deref())?;
    let (centers, radii) = split_atoms(tape, &raw, n);

    let orep = Dual::constant(tape.constant(repeat_const(&batch.o, n)), 0);
    let qrep = Dual::constant(tape.constant(repeat_const(&batch.q, n)), 0);
    let ix = intersect_dual(tape, &orep, &qrep, &centers, &radii);
    let sil = ix.silhouette_values(tape);
    let winners = select_winners(&ix.hit, &ix.t, &sil, n);
    let idx: Vec<usize> = winners.iter().enumerate().map(|(i, &w)| i * n + w).collect();
    let hit: Vec<bool> = idx.iter().map(|&k| ix.hit[k]).collect();

    let p_w = tape.gather_rows(ix.point.p, idx.clone());
    let n_w = tape.gather_rows(ix.normal.p, idx.clone());
    let s_w = tape.gather_rows(ix.signed_silhouette.p, idx.clone());

    let both: Vec<bool> = hit.iter().zip(&batch.h_gt).map(|(&a, &b)| a && b).collect();

    // Intersection.
    let pgt = tape.constant(batch.p_gt.clone());
    let diff = tape.sub(p_w, pgt);
    let dist = tape.norm_rows(diff);
    let g = col(tape, both.iter().copied());
    let gd = tape.mul(dist, g);
    let sum = tape.sum_all(gd);
    let l_p = tape.scale(sum, 1.0 / bf);

    // Normal, as 1 - cos.
    let nvals = tape.value(n_w);
    let degenerate: Vec<bool> = (0..b)
        .map(|i| both[i] && nvals.row(i).dot(&nvals.row(i)) < 0.25)
        .collect();
    let degenerate_normals = degenerate.iter().filter(|&&d| d).count();
    let ngt = tape.constant(batch.n_gt.clone());
    let cos = tape.dot_rows(n_w, ngt);
    let dev = tape.neg(cos);
    let dev = tape.offset(dev, 1.0);
    let gn = col(tape, (0..b).map(|i| both[i] && !degenerate[i]));
    let gd = tape.mul(dev, gn);
    let sum = tape.sum_all(gd);
    let l_n = tape.scale(sum, 1.0 / bf);

    // Silhouette terms.
    let sgt = tape.constant(batch.s_gt.clone());
    let e = tape.sub(s_w, sgt);
    let e2 = tape.square(e);
    let gm = col(tape, batch.m_gt.iter().copied());
    let e2 = tape.mul(e2, gm);
    let sum = tape.sum_all(e2);
    let l_s = tape.scale(sum, 1.0 / bf);

    let pos = tape.max_zero(s_w);
    let pos2 = tape.square(pos);
    let gh = col(tape, batch.h_gt.iter().copied());
    let pos2 = tape.mul(pos2, gh);
    let sum = tape.sum_all(pos2);
    let l_h = tape.scale(sum, 1.0 / bf);

    // Maximality: |sg(r) + 1 - r|.
    let sg = tape.stop_grad(radii.p);
    let a = tape.offset(sg, 1.0);
    let d = tape.sub(a, radii.p);
    let d = tape.abs(d);
    let sum = tape.sum_all(d);
    let l_r = tape.scale(sum, 1.0 / bn);

    // Inscription against the partner ray.
    let partner_rows: Vec<usize> = (0..b * n).map(|k| rnd.permutation[k / n]).collect();
    let po = Dual::constant(tape.constant(gather_const(&batch.o, &partner_rows)), 0);
    let pq_t = gather_const(&batch.q, &partner_rows);
    let pq = Dual::constant(tape.constant(pq_t), 0);
    let pix = intersect_dual(tape, &po, &pq, &centers, &radii);
    let ppgt = tape.constant(gather_const(&batch.p_gt, &partner_rows));
    let ahead = tape.sub(ppgt, pix.point.p);
    let ahead = tape.dot_rows(pq.p, ahead);
    let ahead = tape.max_zero(ahead);
    let gih = col(tape, partner_rows.iter().zip(&pix.hit).map(|(&pb, &h)| h && batch.h_gt[pb]));
    let ahead = tape.mul(ahead, gih);
    let sum = tape.sum_all(ahead);
    let l_ih = tape.scale(sum, 1.0 / bn);

    let clamped = tape.max_zero(pix.signed_silhouette.p);
    let psgt = tape.constant(gather_const(&batch.s_gt, &partner_rows));
    let gap = tape.sub(psgt, clamped);
    let gap = tape.max_zero(gap);
    let gap2 = tape.square(gap);
    let gim = col(tape, partner_rows.iter().map(|&pb| batch.m_gt[pb]));
    let gap2 = tape.mul(gap2, gim);
    let sum = tape.sum_all(gap2);
    let l_im = tape.scale(sum, 1.0 / bn);

    // Specialization: per-candidate spread around the batch centroid.
    let per_ray = tape.reshape(centers.p, b, 3 * n);
    let centroid = tape.mean_rows(per_ray);
    let neg = tape.neg(centroid);
    let spread = tape.add_row(per_ray, neg);
    let sq = tape.square(spread);
    let sum = tape.sum_all(sq);
    let l_sigma = tape.scale(sum, 1.0 / bn);

    // Multi-view consistency on rays that hit in both prediction and truth.
    let sub: Vec<usize> = (0..b).filter(|&i| both[i]).collect();
    let l_mv = if weights[8] == 0.0 || sub.is_empty() {
        zero_scalar(tape)
    } else {
        let sub_winner: Vec<usize> = sub.iter().map(|&i| winners[i]).collect();
        let shapes: Vec<usize> = sub.iter().map(|&i| batch.shape[i]).collect();
        let q = gather_const(&batch.q, &sub);
        let o = gather_const(&batch.p_gt, &sub);
        let energy = match config.multiview {
            MultiviewMode::Analytic => {
                let rows = sub.len();
                let dirs = axis_dirs(tape, rows);
                let qd = Dual::new(tape.constant(q), dirs);
                let od = Dual::constant(tape.constant(o), 3);
                let xd = embed_dual(tape, &qd, &od);
                let z = latent_rows(tape, params, bound, &shapes);
                let m = mask_rows(tape, &rnd.masks, Some(&sub));
                let out = forward_dual(tape, params, bound, &xd, z, m.as_deref())?;
                let atom = winning_atom(tape, &out, &sub_winner, n);
                let c = tape.d_slice_cols(&atom, 0, 3);
                let r = tape.d_slice_cols(&atom, 3, 1);
                let r = tape.d_abs(&r);
                let ec = tangent_energy(tape, &c);
                let er = tangent_energy(tape, &r);
                match (ec, er) {
                    (Some(a), Some(b)) => tape.add(a, b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => zero_scalar(tape),
                }
            }
            MultiviewMode::FiniteDifference { h } => {
                let mut acc: Option<Var> = None;
                for k in 0..3 {
                    let mut outs = Vec::with_capacity(2);
                    for sgn in [1.0, -1.0] {
                        let mut qs = q.clone();
                        qs.column_mut(k).mapv_inplace(|v| v + sgn * h);
                        let qd = Dual::constant(tape.constant(qs), 0);
                        let od = Dual::constant(tape.constant(o.clone()), 0);
                        let xd = embed_dual(tape, &qd, &od);
                        let z = latent_rows(tape, params, bound, &shapes);
                        let m = mask_rows(tape, &rnd.masks, Some(&sub));
                        let out = forward_dual(tape, params, bound, &xd, z, m.as_deref())?;
                        let atom = winning_atom(tape, &out, &sub_winner, n);
                        let c = tape.slice_cols(atom.p, 0, 3);
                        let r = tape.slice_cols(atom.p, 3, 1);
                        let r = tape.abs(r);
                        outs.push(tape.concat_cols(&[c, r]));
                    }
                    let d = tape.sub(outs[0], outs[1]);
                    let d = tape.scale(d, 0.5 / h);
                    let sq = tape.square(d);
                    let s = tape.sum_all(sq);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, s),
                        None => s,
                    });
                }
                acc.expect("three axes")
            }
        };
        tape.scale(energy, 1.0 / sub.len() as f64)
    };

    let l_z = latent_loss(tape, params, bound, &batch.shape);
    let l_bce = zero_scalar(tape);
    Ok((
        [l_p, l_n, l_s, l_h, l_r, l_ih, l_im, l_sigma, l_mv, l_z, l_bce],
        winners,
        hit,
        degenerate_normals,
    ))
}

/// Row `w_i` of the per-atom view of output row `i`.
fn winning_atom(tape: &mut Tape, out: &Dual, winners: &[usize], n: usize) -> Dual {
    let rows = tape.shape(out.p).0;
    let per_atom = tape.d_reshape(out, rows * n, 4);
    let idx: Vec<usize> = winners.iter().enumerate().map(|(i, &w)| i * n + w).collect();
    tape.d_gather_rows(&per_atom, &idx)
}

fn prif_terms(
    tape: &mut Tape,
    params: &NetworkParams,
    bound: &Bound,
    batch: &Batch,
    rnd: &BatchRandomness,
    config: &LossConfig,
    weights: &[f64; 11],
) -> Result<Terms> {
    let b = batch.len();
    let bf = b as f64;
    let need_normal = config.prif_normal && weights[1] != 0.0;
    let channels = if need_normal { 3 } else { 0 };
    let q = Dual::constant(tape.constant(batch.q.clone()), channels);
    let o = if need_normal {
        let dirs = axis_dirs(tape, b);
        Dual::new(tape.constant(batch.o.clone()), dirs)
    } else {
        Dual::constant(tape.constant(batch.o.clone()), 0)
    };
    let x = embed_dual(tape, &q, &o);
    let z = latent_rows(tape, params, bound, &batch.shape);
    let masks = mask_rows(tape, &rnd.masks, None);
    let raw = forward_dual(tape, params, bound, &x, z, masks.as_deref())?;
    let t = tape.d_slice_cols(&raw, 0, 1);
    let logit = tape.slice_cols(raw.p, 1, 1);
    let foot = tape.d_slice_cols(&x, 6, 3);
    let step = tape.d_mul_col(&q, &t);
    let p = tape.d_add(&foot, &step);
    let hit: Vec<bool> = tape.value(logit).iter().map(|&v| v > 0.0).collect();

    let pgt = tape.constant(batch.p_gt.clone());
    let diff = tape.sub(p.p, pgt);
    let dist = tape.norm_rows(diff);
    let gh = col(tape, batch.h_gt.iter().copied());
    let gd = tape.mul(dist, gh);
    let sum = tape.sum_all(gd);
    let l_p = tape.scale(sum, 1.0 / bf);

    // Binary cross-entropy on rays with a defined label.
    let sp = tape.softplus(logit);
    let y = col(tape, batch.h_gt.iter().copied());
    let yl = tape.mul(y, logit);
    let bce = tape.sub(sp, yl);
    let gl = col(tape, (0..b).map(|i| batch.h_gt[i] || batch.m_gt[i]));
    let bce = tape.mul(bce, gl);
    let sum = tape.sum_all(bce);
    let l_bce = tape.scale(sum, 1.0 / bf);

    let both: Vec<bool> = (0..b).map(|i| hit[i] && batch.h_gt[i]).collect();
    let mut degenerate_normals = 0;
    let l_n = if need_normal {
        let tv: Vec<Var> = p.t.iter().map(|t| t.expect("origin tangents")).collect();
        let mut acc: Option<Var> = None;
        for (i, j, k) in [(0, 1, 2), (1, 2, 0), (2, 0, 1)] {
            let c = tape.cross(tv[j], tv[k]);
            let qi = tape.slice_cols(q.p, i, 1);
            let c = tape.mul_col(c, qi);
            acc = Some(match acc {
                Some(a) => tape.add(a, c),
                None => c,
            });
        }
        let raw_n = tape.neg(acc.expect("three terms"));
        let lens: Vec<f64> = tape
            .value(raw_n)
            .outer_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let ok: Vec<bool> = (0..b).map(|i| both[i] && lens[i] >= 1e-9).collect();
        degenerate_normals = (0..b).filter(|&i| both[i] && !ok[i]).count();
        let unit = tape.normalize_rows(raw_n);
        let ngt = tape.constant(batch.n_gt.clone());
        let cos = tape.dot_rows(unit, ngt);
        let dev = tape.neg(cos);
        let dev = tape.offset(dev, 1.0);
        let g = col(tape, ok.iter().copied());
        let dev = tape.mul(dev, g);
        let sum = tape.sum_all(dev);
        // The baseline adds the normal term at twice its scheduled weight.
        tape.scale(sum, 2.0 / bf)
    } else {
        zero_scalar(tape)
    };

    let sub: Vec<usize> = (0..b).filter(|&i| both[i]).collect();
    let l_mv = if config.prif_multiview && weights[8] != 0.0 && !sub.is_empty() {
        let rows = sub.len();
        let shapes: Vec<usize> = sub.iter().map(|&i| batch.shape[i]).collect();
        let dirs = axis_dirs(tape, rows);
        let qd = Dual::new(tape.constant(gather_const(&batch.q, &sub)), dirs);
        let od = Dual::constant(tape.constant(gather_const(&batch.p_gt, &sub)), 3);
        let xd = embed_dual(tape, &qd, &od);
        let z = latent_rows(tape, params, bound, &shapes);
        let m = mask_rows(tape, &rnd.masks, Some(&sub));
        let out = forward_dual(tape, params, bound, &xd, z, m.as_deref())?;
        let t = tape.d_slice_cols(&out, 0, 1);
        let foot = tape.d_slice_cols(&xd, 6, 3);
        let step = tape.d_mul_col(&qd, &t);
        let pp = tape.d_add(&foot, &step);
        let e = tangent_energy(tape, &pp).expect("three channels");
        tape.scale(e, 1.0 / rows as f64)
    } else {
        zero_scalar(tape)
    };

    let l_z = latent_loss(tape, params, bound, &batch.shape);
    let zero = zero_scalar(tape);
    Ok((
        [l_p, l_n, zero, zero, zero, zero, zero, zero, l_mv, l_z, l_bce],
        vec![0; b],
        hit,
        degenerate_normals,
    ))
}
