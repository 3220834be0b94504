//! Batched ray casting through a learned or fixed field.
//!
//! The same differentiable intersection is used by training (reverse mode),
//! and by the renderer's normal and curvature passes (forward mode along the
//! ray origin).

use nalgebra::{Matrix3, SymmetricEigen};

use crate::autodiff::{sigmoid, Dual, Tape, Tensor, Var};
use crate::error::{MarfError, Result};
use crate::geometry::{argmin_first, candidate_metric, canonicalize, MedialAtom, Ray, Vec3};
use crate::network::{
    embed_dual, embed_rays, forward_dual, split_atoms, Bound, Head, NetworkParams,
};

/// Ray/atom intersections for `rows` (ray, atom) pairs.
pub struct DualIntersections {
    pub hit: Vec<bool>,
    /// Near root when hitting, projection of the center otherwise.
    pub point: Dual,
    /// `|proj - c| - r`, unclamped.
    pub signed_silhouette: Dual,
    /// Unit `p - c`; zero rows where `p = c`.
    pub normal: Dual,
    /// `q̂ · (p - o)` per row.
    pub t: Vec<f64>,
}

impl DualIntersections {
    pub fn silhouette_values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.signed_silhouette.p)
            .iter()
            .map(|s| s.max(0.0))
            .collect()
    }
}

/// Intersects row `i` of `(o, q)` with atom `(c_i, r_i)`. `q` rows must be unit.
pub fn intersect_dual(tape: &mut Tape, o: &Dual, q: &Dual, c: &Dual, r: &Dual) -> DualIntersections {
    let oc = tape.d_sub(o, c);
    let b = tape.d_dot_rows(q, &oc);
    let oc2 = tape.d_dot_rows(&oc, &oc);
    let r2 = tape.d_square(r);
    let b2 = tape.d_square(&b);
    let inner = tape.d_sub(&oc2, &r2);
    let delta = tape.d_sub(&b2, &inner);
    let hit: Vec<bool> = tape.value(delta.p).iter().map(|&d| d >= 0.0).collect();
    let rows = hit.len();
    let zero = Dual::constant(tape.zeros(rows, 1), o.channels());
    let safe = tape.d_select_rows(&hit, &delta, &zero);
    let root = tape.d_sqrt(&safe);
    // t = -b - sqrt(delta) for hits, -b for misses.
    let nb = tape.d_neg(&b);
    let t_hit = tape.d_sub(&nb, &root);
    let t = tape.d_select_rows(&hit, &t_hit, &nb);
    let step = tape.d_mul_col(q, &t);
    let point = tape.d_add(o, &step);
    let qb = tape.d_mul_col(q, &b);
    let proj = tape.d_sub(o, &qb);
    let pc = tape.d_sub(&proj, c);
    let dist = tape.d_norm_rows(&pc);
    let signed_silhouette = tape.d_sub(&dist, r);
    let rel = tape.d_sub(&point, c);
    let normal = tape.d_normalize_rows(&rel);
    let t = tape.value(t.p).iter().copied().collect();
    DualIntersections {
        hit,
        point,
        signed_silhouette,
        normal,
        t,
    }
}

/// Winning candidate per ray from per-row outcomes laid out as `b n + i`.
pub fn select_winners(hit: &[bool], t: &[f64], silhouette: &[f64], n: usize) -> Vec<usize> {
    let rays = hit.len() / n;
    (0..rays)
        .map(|b| {
            let rows = b * n..(b + 1) * n;
            let any = hit[rows.clone()].iter().any(|&h| h);
            argmin_first(rows.map(|k| candidate_metric(hit[k], t[k], silhouette[k], any)))
        })
        .collect()
}

pub fn ray_matrix(rays: &[Ray]) -> (Tensor, Tensor) {
    let mut o = Tensor::zeros((rays.len(), 3));
    let mut q = Tensor::zeros((rays.len(), 3));
    for (i, r) in rays.iter().enumerate() {
        let u = r.unit_direction();
        for k in 0..3 {
            o[[i, k]] = r.origin[k];
            q[[i, k]] = u[k];
        }
    }
    (o, q)
}

pub fn row_vec3(t: &Tensor, i: usize) -> Vec3 {
    Vec3::new(t[[i, 0]], t[[i, 1]], t[[i, 2]])
}

/// Anything that maps a ray to candidate surface points.
#[derive(Clone, Debug)]
pub enum Field<'a> {
    /// Learned atoms, optionally conditioned on a latent vector.
    Marf {
        params: &'a NetworkParams,
        latent: Option<Vec<f64>>,
    },
    /// Displacement-plus-logit baseline.
    Prif {
        params: &'a NetworkParams,
        latent: Option<Vec<f64>>,
    },
    /// Atoms that ignore the ray.
    FixedAtoms(Vec<MedialAtom>),
}

impl<'a> Field<'a> {
    pub fn from_params(params: &'a NetworkParams, latent: Option<Vec<f64>>) -> Self {
        match params.config.head {
            Head::Marf => Field::Marf { params, latent },
            Head::Prif => Field::Prif { params, latent },
        }
    }

    pub fn is_medial(&self) -> bool {
        !matches!(self, Field::Prif { .. })
    }

    pub fn n_candidates(&self) -> usize {
        match self {
            Field::Marf { params, .. } => params.config.n_atoms,
            Field::Prif { .. } => 1,
            Field::FixedAtoms(a) => a.len(),
        }
    }
}

/// Result of casting one ray through a field.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub hit: bool,
    pub point: Vec3,
    pub winner: usize,
    /// Winning atom (medial fields only).
    pub atom: Option<MedialAtom>,
    pub medial_normal: Option<Vec3>,
    pub signed_silhouette: f64,
}

/// Number of batched network evaluations a cast issues per ray: one.
pub const FORWARDS_PER_RAY: usize = 1;

fn latent_rows(tape: &mut Tape, latent: &Option<Vec<f64>>, rows: usize) -> Option<Var> {
    latent.as_ref().map(|z| {
        let t = Tensor::from_shape_fn((rows, z.len()), |(_, j)| z[j]);
        tape.constant(t)
    })
}

/// Candidate atoms for each ray as duals (`Bn` rows), tangents following `o`.
fn atoms_dual(
    tape: &mut Tape,
    field: &Field,
    bound: Option<&Bound>,
    o: &Dual,
    q: &Dual,
) -> Result<(Dual, Dual)> {
    let rows = tape.shape(o.p).0;
    let k = o.channels();
    match field {
        Field::Marf { params, latent } => {
            params.check_latent(latent.as_deref())?;
            let x = embed_dual(tape, q, o);
            let z = latent_rows(tape, latent, rows);
            let raw = forward_dual(tape, params, bound.expect("bound params"), &x, z, None)?;
            Ok(split_atoms(tape, &raw, params.config.n_atoms))
        }
        Field::FixedAtoms(atoms) => {
            let n = atoms.len();
            let c = Tensor::from_shape_fn((rows * n, 3), |(i, j)| atoms[i % n].center[j]);
            let r = Tensor::from_shape_fn((rows * n, 1), |(i, _)| atoms[i % n].radius);
            Ok((
                Dual::constant(tape.constant(c), k),
                Dual::constant(tape.constant(r), k),
            ))
        }
        Field::Prif { .. } => Err(MarfError::InvalidInput("PRIF fields have no atoms".into())),
    }
}

const TRACE_CHUNK: usize = 4096;

/// Casts every ray once through the field.
pub fn trace(field: &Field, rays: &[Ray]) -> Result<Vec<Trace>> {
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(TRACE_CHUNK) {
        out.extend(trace_chunk(field, chunk)?);
    }
    Ok(out)
}

fn trace_chunk(field: &Field, rays: &[Ray]) -> Result<Vec<Trace>> {
    if let Field::Prif { params, latent } = field {
        params.check_latent(latent.as_deref())?;
        let canon: Vec<_> = rays.iter().map(canonicalize).collect::<Result<_>>()?;
        let raw = params.predict_raw(&canon, latent.as_deref())?;
        return Ok(canon
            .iter()
            .enumerate()
            .map(|(i, c)| Trace {
                hit: raw[[i, 1]] > 0.0,
                point: c.foot + c.q_hat * raw[[i, 0]],
                winner: 0,
                atom: None,
                medial_normal: None,
                signed_silhouette: f64::NAN,
            })
            .collect());
    }
    let mut tape = Tape::new();
    let bound = match field {
        Field::Marf { params, .. } => Some(params.bind(&mut tape, false)),
        _ => None,
    };
    let n = field.n_candidates();
    let (o, q) = ray_matrix(rays);
    let o = Dual::constant(tape.constant(o), 0);
    let q = Dual::constant(tape.constant(q), 0);
    let (c, r) = atoms_dual(&mut tape, field, bound.as_ref(), &o, &q)?;
    let orep = tape.d_repeat_rows(&o, n);
    let qrep = tape.d_repeat_rows(&q, n);
    let ix = intersect_dual(&mut tape, &orep, &qrep, &c, &r);
    let sil = ix.silhouette_values(&tape);
    let winners = select_winners(&ix.hit, &ix.t, &sil, n);
    let pv = tape.value(ix.point.p);
    let nv = tape.value(ix.normal.p);
    let cv = tape.value(c.p);
    let rv = tape.value(r.p);
    let sv = tape.value(ix.signed_silhouette.p);
    Ok(winners
        .iter()
        .enumerate()
        .map(|(b, &w)| {
            let k = b * n + w;
            let normal = row_vec3(nv, k);
            Trace {
                hit: ix.hit[k],
                point: row_vec3(pv, k),
                winner: w,
                atom: Some(MedialAtom::new(row_vec3(cv, k), rv[[k, 0]])),
                medial_normal: (ix.hit[k] && normal.norm() > 0.5).then_some(normal),
                signed_silhouette: sv[[k, 0]],
            }
        })
        .collect())
}

/// First-order surface quantities at a ray's hit point.
#[derive(Clone, Debug, PartialEq)]
pub struct DifferentialFrame {
    /// `∂p/∂o_i`.
    pub tangents: [Vec3; 3],
    /// Normal from the tangents; `None` when they are degenerate.
    pub analytical_normal: Option<Vec3>,
    /// `∂n̂/∂o_i` of the medial normal, as columns (medial fields only).
    pub normal_jacobian: Option<Matrix3<f64>>,
}

/// Normal of the hit-point field from its origin derivatives:
/// `n' = -Σ q̂_i (t_j × t_k)` over cyclic `(i, j, k)`.
pub fn normal_from_tangents(q_hat: &Vec3, t: &[Vec3; 3]) -> Result<Vec3> {
    let n = -(t[1].cross(&t[2]) * q_hat.x + t[2].cross(&t[0]) * q_hat.y + t[0].cross(&t[1]) * q_hat.z);
    let len = n.norm();
    if !(len >= 1e-9) {
        return Err(MarfError::DegenerateNormal(format!(
            "tangent cross products vanish (|n'| = {len:e})"
        )));
    }
    Ok(n / len)
}

/// Forward-mode pass along the three origin axes for each ray.
///
/// Returns one frame per ray; rays whose winner misses get `None`.
pub fn differential(field: &Field, rays: &[Ray]) -> Result<Vec<Option<DifferentialFrame>>> {
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(TRACE_CHUNK / 4) {
        out.extend(differential_chunk(field, chunk)?);
    }
    Ok(out)
}

fn axis_tangents(tape: &mut Tape, rows: usize) -> Vec<Option<Var>> {
    (0..3)
        .map(|k| {
            let e = Tensor::from_shape_fn((rows, 3), |(_, j)| (j == k) as u8 as f64);
            Some(tape.constant(e))
        })
        .collect()
}

fn differential_chunk(field: &Field, rays: &[Ray]) -> Result<Vec<Option<DifferentialFrame>>> {
    let rows = rays.len();
    let mut tape = Tape::new();
    let (o0, q0) = ray_matrix(rays);
    let o_p = tape.constant(o0);
    let q_p = tape.constant(q0.clone());
    let dirs = axis_tangents(&mut tape, rows);
    let o = Dual::new(o_p, dirs);
    let q = Dual::constant(q_p, 3);

    if let Field::Prif { params, latent } = field {
        params.check_latent(latent.as_deref())?;
        let bound = params.bind(&mut tape, false);
        let x = embed_dual(&mut tape, &q, &o);
        let z = latent_rows(&mut tape, latent, rows);
        let raw = forward_dual(&mut tape, params, &bound, &x, z, None)?;
        let t = tape.d_slice_cols(&raw, 0, 1);
        let foot = tape.d_slice_cols(&x, 6, 3);
        let step = tape.d_mul_col(&q, &t);
        let p = tape.d_add(&foot, &step);
        let logits = tape.value(raw.p).column(1).to_vec();
        let tans: Vec<Tensor> = (0..3).map(|k| p.tangent_value(&tape, k)).collect();
        return Ok((0..rows)
            .map(|b| {
                (sigmoid(logits[b]) > 0.5).then(|| {
                    let tangents = [0, 1, 2].map(|k| row_vec3(&tans[k], b));
                    DifferentialFrame {
                        tangents,
                        analytical_normal: normal_from_tangents(&row_vec3(&q0, b), &tangents).ok(),
                        normal_jacobian: None,
                    }
                })
            })
            .collect());
    }

    let bound = match field {
        Field::Marf { params, .. } => Some(params.bind(&mut tape, false)),
        _ => None,
    };
    let n = field.n_candidates();
    let (c, r) = atoms_dual(&mut tape, field, bound.as_ref(), &o, &q)?;
    let orep = tape.d_repeat_rows(&o, n);
    let qrep = tape.d_repeat_rows(&q, n);
    // Selection runs on primal values only, so pick winners first and then
    // differentiate just the winning rows.
    let ix = intersect_dual(&mut tape, &orep, &qrep, &c, &r);
    let sil = ix.silhouette_values(&tape);
    let winners = select_winners(&ix.hit, &ix.t, &sil, n);
    let idx: Vec<usize> = winners.iter().enumerate().map(|(b, &w)| b * n + w).collect();
    let p = tape.d_gather_rows(&ix.point, &idx);
    let nrm = tape.d_gather_rows(&ix.normal, &idx);
    let tp: Vec<Tensor> = (0..3).map(|k| p.tangent_value(&tape, k)).collect();
    let tn: Vec<Tensor> = (0..3).map(|k| nrm.tangent_value(&tape, k)).collect();
    Ok(idx
        .iter()
        .enumerate()
        .map(|(b, &k)| {
            ix.hit[k].then(|| {
                let tangents = [0, 1, 2].map(|ch| row_vec3(&tp[ch], b));
                let j = Matrix3::from_columns(&[0, 1, 2].map(|ch| row_vec3(&tn[ch], b)));
                DifferentialFrame {
                    tangents,
                    analytical_normal: normal_from_tangents(&row_vec3(&q0, b), &tangents).ok(),
                    normal_jacobian: Some(j),
                }
            })
        })
        .collect())
}

/// Principal curvatures and directions from a normal field's derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeOperator {
    /// `(I - n̂n̂ᵀ) ∇_o n̂`.
    pub matrix: Matrix3<f64>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub v1: Vec3,
    pub v2: Vec3,
    pub mean_curvature: f64,
    pub gaussian_curvature: f64,
}

/// Curvature from the unit normal and `J = ∇_o n̂` (columns per origin axis).
///
/// Principal curvatures come from the symmetric part of `P J P`. The right
/// projection removes the oblique component `J` picks up because moving the
/// origin slides the hit point along the ray, not along the surface.
pub fn shape_operator(normal: &Vec3, jacobian: &Matrix3<f64>) -> Result<ShapeOperator> {
    let n = normal.normalize();
    let proj = Matrix3::identity() - n * n.transpose();
    let d = proj * jacobian;
    let s = proj * jacobian * proj;
    let sym = (s + s.transpose()) * 0.5;
    if !sym.iter().all(|v| v.is_finite()) {
        return Err(MarfError::Numerical("non-finite shape operator".into()));
    }
    let eig = SymmetricEigen::new(sym);
    let drop = (0..3)
        .max_by(|&a, &b| {
            let da = eig.eigenvectors.column(a).dot(&n).abs();
            let db = eig.eigenvectors.column(b).dot(&n).abs();
            da.total_cmp(&db)
        })
        .expect("three eigenpairs");
    let mut keep: Vec<(f64, Vec3)> = (0..3)
        .filter(|&i| i != drop)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).into_owned()))
        .collect();
    keep.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (kappa1, v1) = keep[0];
    let (kappa2, v2) = keep[1];
    Ok(ShapeOperator {
        matrix: d,
        kappa1,
        kappa2,
        v1,
        v2,
        mean_curvature: 0.5 * d.trace(),
        gaussian_curvature: kappa1 * kappa2,
    })
}

/// Origin-derivative tangents of an arbitrary (non-differentiable) hit-point
/// caster by central differences.
pub fn finite_difference_tangents(
    cast: impl Fn(&Ray) -> Option<Vec3>,
    ray: &Ray,
    h: f64,
) -> Option<[Vec3; 3]> {
    let mut t = [Vec3::zeros(); 3];
    for (k, tk) in t.iter_mut().enumerate() {
        let mut e = Vec3::zeros();
        e[k] = h;
        let plus = cast(&Ray::new(ray.origin + e, ray.direction).ok()?)?;
        let minus = cast(&Ray::new(ray.origin - e, ray.direction).ok()?)?;
        *tk = (plus - minus) / (2.0 * h);
    }
    Some(t)
}

/// Embedding used by every batched path, exposed for callers that build
/// their own tapes.
pub fn embed(rays: &[Ray]) -> Result<Tensor> {
    let canon: Vec<_> = rays.iter().map(canonicalize).collect::<Result<_>>()?;
    Ok(embed_rays(&canon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::intersect_atom;
    use crate::network::{init_params, NetworkConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    #[test]
    fn batched_intersection_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let atoms: Vec<MedialAtom> = (0..4)
            .map(|_| MedialAtom::new(rand_vec(&mut rng, 0.5), rng.random_range(0.1..0.6)))
            .collect();
        let rays: Vec<Ray> = (0..200)
            .map(|_| Ray::new(rand_vec(&mut rng, 2.0), rand_vec(&mut rng, 1.0)).unwrap())
            .collect();
        let traces = trace(&Field::FixedAtoms(atoms.clone()), &rays).unwrap();
        for (ray, tr) in rays.iter().zip(&traces) {
            let outs: Vec<_> = atoms.iter().map(|a| intersect_atom(ray, a).unwrap()).collect();
            let sel = crate::geometry::select_candidate(ray, &outs).unwrap();
            assert_eq!(sel.winner_index, tr.winner);
            let o = &outs[sel.winner_index];
            assert_eq!(o.hit, tr.hit);
            assert!((o.hit_point - tr.point).norm() < 1e-12);
            assert!((o.signed_silhouette - tr.signed_silhouette).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_normal_and_curvature() {
        let field = Field::FixedAtoms(vec![MedialAtom::new(Vec3::zeros(), 0.5)]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rays: Vec<Ray> = (0..50)
            .map(|_| {
                let d = rand_vec(&mut rng, 1.0).normalize();
                let off = rand_vec(&mut rng, 0.3);
                Ray::new(off - d * 2.0, d).unwrap()
            })
            .collect();
        let traces = trace(&field, &rays).unwrap();
        let frames = differential(&field, &rays).unwrap();
        for ((tr, fr), ray) in traces.iter().zip(&frames).zip(&rays) {
            if !tr.hit {
                assert!(fr.is_none());
                continue;
            }
            let fr = fr.as_ref().unwrap();
            let truth = tr.point.normalize();
            if ray.unit_direction().dot(&truth).abs() < 0.05 {
                continue;
            }
            let n = fr.analytical_normal.unwrap();
            assert!(n.dot(&truth) > 1.0 - 1e-9, "{n} vs {truth}");
            let so = shape_operator(&tr.medial_normal.unwrap(), fr.normal_jacobian.as_ref().unwrap())
                .unwrap();
            assert!((so.mean_curvature - 2.0).abs() < 1e-6);
            assert!((so.kappa1 - 2.0).abs() < 1e-6 && (so.kappa2 - 2.0).abs() < 1e-6);
            assert!((so.matrix.transpose() * truth).norm() < 1e-6);
        }
    }

    #[test]
    fn network_trace_runs_once_per_ray() {
        let cfg = NetworkConfig {
            hidden_layers: 2,
            width: 8,
            n_atoms: 2,
            ..NetworkConfig::default()
        };
        let p = init_params(&cfg, 1, 0).unwrap();
        let field = Field::from_params(&p, None);
        let rays = vec![Ray::new(Vec3::new(0.0, 0.0, -2.0), Vec3::z()).unwrap(); 3];
        let tr = trace(&field, &rays).unwrap();
        assert_eq!(tr.len(), 3);
        assert_eq!(tr[0], tr[2]);
        let fr = differential(&field, &rays).unwrap();
        assert_eq!(fr.len(), 3);
    }
}
