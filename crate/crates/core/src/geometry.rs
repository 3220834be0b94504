//! Oriented rays and medial atoms.
//!
//! Everything here is a pure function of its arguments. Rays are treated as
//! full lines: an intersection behind the ray origin (negative parameter) is
//! still a valid hit, which matches an observer placed infinitely far away.

use nalgebra::Vector3;

use crate::error::{MarfError, Result};

pub type Vec3 = Vector3<f64>;

/// A ray `o + t q`. The direction need not be unit length.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let len = direction.norm();
        if !(len > 0.0) || !len.is_finite() || !origin.iter().all(|v| v.is_finite()) {
            return Err(MarfError::InvalidInput(format!(
                "ray needs a finite origin and a nonzero direction, got o={origin:?} q={direction:?}"
            )));
        }
        Ok(Self { origin, direction })
    }

    pub fn unit_direction(&self) -> Vec3 {
        self.direction / self.direction.norm()
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.unit_direction() * t
    }
}

/// Four-degree-of-freedom line embedding `(q̂, m, o⊥)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CanonicalRay {
    pub q_hat: Vec3,
    /// Moment `o × q̂`.
    pub moment: Vec3,
    /// Perpendicular foot `q̂ × m`, the point of the line closest to the origin.
    pub foot: Vec3,
}

impl CanonicalRay {
    /// The 9-vector fed to the network.
    pub fn to_array(&self) -> [f64; 9] {
        [
            self.q_hat.x,
            self.q_hat.y,
            self.q_hat.z,
            self.moment.x,
            self.moment.y,
            self.moment.z,
            self.foot.x,
            self.foot.y,
            self.foot.z,
        ]
    }
}

pub fn canonicalize(ray: &Ray) -> Result<CanonicalRay> {
    let len = ray.direction.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(MarfError::InvalidInput(
            "cannot canonicalize a ray with zero-length direction".into(),
        ));
    }
    let q_hat = ray.direction / len;
    let moment = ray.origin.cross(&q_hat);
    let foot = q_hat.cross(&moment);
    Ok(CanonicalRay {
        q_hat,
        moment,
        foot,
    })
}

/// A sphere candidate for the medial axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedialAtom {
    pub center: Vec3,
    pub radius: f64,
}

impl MedialAtom {
    pub fn new(center: Vec3, radius: f64) -> Self {
        Self { center, radius }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntersectionOutcome {
    pub hit: bool,
    pub discriminant: f64,
    /// Near root when hitting, otherwise the projection of the center onto the line.
    pub hit_point: Vec3,
    /// `|proj - c| - r`; negative when the atom overlaps the line.
    pub signed_silhouette: f64,
    /// `max(0, signed_silhouette)`.
    pub silhouette: f64,
    pub medial_normal: Option<Vec3>,
    /// Line parameter of `hit_point` measured from the ray origin along q̂.
    pub t: f64,
}

/// Ray/atom intersection using the near root of the quadratic.
pub fn intersect_atom(ray: &Ray, atom: &MedialAtom) -> Result<IntersectionOutcome> {
    if !(atom.radius >= 0.0) || !atom.radius.is_finite() {
        return Err(MarfError::InvalidInput(format!(
            "atom radius must be finite and non-negative, got {}",
            atom.radius
        )));
    }
    let q = ray.unit_direction();
    let oc = ray.origin - atom.center;
    let b = q.dot(&oc);
    let delta = b * b - (oc.norm_squared() - atom.radius * atom.radius);
    let proj = ray.origin - q * b;
    let signed_silhouette = (proj - atom.center).norm() - atom.radius;
    if delta >= 0.0 {
        let t = -b - delta.sqrt();
        let p = ray.origin + q * t;
        let normal = medial_normal(&p, atom)?;
        Ok(IntersectionOutcome {
            hit: true,
            discriminant: delta,
            hit_point: p,
            signed_silhouette,
            silhouette: signed_silhouette.max(0.0),
            medial_normal: Some(normal),
            t,
        })
    } else {
        Ok(IntersectionOutcome {
            hit: false,
            discriminant: delta,
            hit_point: proj,
            signed_silhouette,
            silhouette: signed_silhouette.max(0.0),
            medial_normal: None,
            t: -b,
        })
    }
}

/// Unit vector from the atom center to `p`.
pub fn medial_normal(p: &Vec3, atom: &MedialAtom) -> Result<Vec3> {
    let d = p - atom.center;
    let len = d.norm();
    if !(len > 0.0) || !len.is_finite() {
        return Err(MarfError::DegenerateNormal(format!(
            "hit point coincides with atom center {:?}",
            atom.center
        )));
    }
    Ok(d / len)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSelection {
    pub winner_index: usize,
    pub per_candidate_metric: Vec<f64>,
}

/// Selection metric of one candidate given whether any candidate hits.
///
/// Hits rank by their line parameter, misses rank by silhouette distance but
/// only when no candidate hits at all.
#[inline]
pub fn candidate_metric(hit: bool, t: f64, silhouette: f64, any_hit: bool) -> f64 {
    if hit {
        t
    } else if any_hit {
        f64::INFINITY
    } else {
        silhouette
    }
}

/// Index of the smallest metric, first index on ties.
pub fn argmin_first(metrics: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::INFINITY;
    for (i, m) in metrics.into_iter().enumerate() {
        if i == 0 || m < best_value {
            best = i;
            best_value = m;
        }
    }
    best
}

pub fn select_candidate(ray: &Ray, outcomes: &[IntersectionOutcome]) -> Result<CandidateSelection> {
    if outcomes.is_empty() {
        return Err(MarfError::InvalidInput(
            "candidate selection needs at least one outcome".into(),
        ));
    }
    let q = ray.unit_direction();
    let any_hit = outcomes.iter().any(|o| o.hit);
    let per_candidate_metric: Vec<f64> = outcomes
        .iter()
        .map(|o| candidate_metric(o.hit, q.dot(&(o.hit_point - ray.origin)), o.silhouette, any_hit))
        .collect();
    let winner_index = argmin_first(per_candidate_metric.iter().copied());
    Ok(CandidateSelection {
        winner_index,
        per_candidate_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn canonicalize_line_through_origin() {
        let c = canonicalize(&Ray::new(v(0., 0., -2.), v(0., 0., 3.)).unwrap()).unwrap();
        assert_eq!(c.q_hat, v(0., 0., 1.));
        assert_eq!(c.moment, v(0., 0., 0.));
        assert_eq!(c.foot, v(0., 0., 0.));
    }

    #[test]
    fn canonicalize_offset_line() {
        let c = canonicalize(&Ray::new(v(0., 2., -5.), v(0., 0., 1.)).unwrap()).unwrap();
        assert!(close(&c.moment, &v(2., 0., 0.), 1e-15));
        assert!(close(&c.foot, &v(0., 2., 0.), 1e-15));
    }

    #[test]
    fn canonicalize_slides_along_direction() {
        let q = v(0.3, -0.4, 0.2).normalize();
        let o = v(0.1, 0.7, -0.3);
        let a = canonicalize(&Ray::new(o, q).unwrap()).unwrap();
        let b = canonicalize(&Ray::new(o + q * 5.0, q).unwrap()).unwrap();
        assert!(close(&a.moment, &b.moment, 1e-12));
        assert!(close(&a.foot, &b.foot, 1e-12));
        assert!(close(&a.q_hat, &b.q_hat, 0.0));
    }

    #[test]
    fn zero_direction_is_rejected() {
        assert!(matches!(
            Ray::new(v(0., 0., 0.), v(0., 0., 0.)),
            Err(MarfError::InvalidInput(_))
        ));
        let raw = Ray {
            origin: v(0., 0., 0.),
            direction: v(0., 0., 0.),
        };
        assert!(matches!(canonicalize(&raw), Err(MarfError::InvalidInput(_))));
    }

    #[test]
    fn axis_aligned_hit() {
        let ray = Ray::new(v(0., 0., -2.), v(0., 0., 1.)).unwrap();
        let out = intersect_atom(&ray, &MedialAtom::new(v(0., 0., 0.), 1.0)).unwrap();
        assert!(out.hit);
        assert_eq!(out.discriminant, 1.0);
        assert!(close(&out.hit_point, &v(0., 0., -1.), 1e-15));
        assert!(close(&out.medial_normal.unwrap(), &v(0., 0., -1.), 1e-15));
        assert_eq!(out.silhouette, 0.0);
        assert!(out.signed_silhouette <= 0.0);
    }

    #[test]
    fn offset_miss() {
        let ray = Ray::new(v(0., 2., -5.), v(0., 0., 1.)).unwrap();
        let out = intersect_atom(&ray, &MedialAtom::new(v(0., 0., 0.), 1.0)).unwrap();
        assert!(!out.hit);
        assert_eq!(out.discriminant, -3.0);
        assert!(close(&out.hit_point, &v(0., 2., 0.), 1e-15));
        assert_eq!(out.silhouette, 1.0);
        assert!(out.medial_normal.is_none());
    }

    #[test]
    fn tangent_line_grazes() {
        let ray = Ray::new(v(0., 1., -5.), v(0., 0., 1.)).unwrap();
        let out = intersect_atom(&ray, &MedialAtom::new(v(0., 0., 0.), 1.0)).unwrap();
        assert!(out.hit);
        assert_eq!(out.discriminant, 0.0);
        assert!(close(&out.hit_point, &v(0., 1., 0.), 1e-15));
    }

    #[test]
    fn zero_radius_hit_is_degenerate() {
        let ray = Ray::new(v(0., 0., -5.), v(0., 0., 1.)).unwrap();
        let err = intersect_atom(&ray, &MedialAtom::new(v(0., 0., 0.), 0.0)).unwrap_err();
        assert!(matches!(err, MarfError::DegenerateNormal(_)));
    }

    #[test]
    fn selection_prefers_nearest_hit() {
        let ray = Ray::new(v(0., 0., -5.), v(0., 0., 1.)).unwrap();
        let far = intersect_atom(&ray, &MedialAtom::new(v(0., 0., -1.), 1.0)).unwrap();
        let near = intersect_atom(&ray, &MedialAtom::new(v(0., 0., -2.5), 1.0)).unwrap();
        assert_eq!(far.t, 3.0);
        assert_eq!(near.t, 1.5);
        let sel = select_candidate(&ray, &[far, near]).unwrap();
        assert_eq!(sel.winner_index, 1);
    }

    #[test]
    fn selection_hit_beats_miss() {
        let ray = Ray::new(v(0., 0., -5.), v(0., 0., 1.)).unwrap();
        let hit = intersect_atom(&ray, &MedialAtom::new(v(0., 0., 0.), 1.0)).unwrap();
        let miss = intersect_atom(&ray, &MedialAtom::new(v(0., 3., 0.), 1.0)).unwrap();
        let sel = select_candidate(&ray, &[hit, miss]).unwrap();
        assert_eq!(sel.winner_index, 0);
        assert_eq!(sel.per_candidate_metric[1], f64::INFINITY);
    }

    #[test]
    fn selection_all_miss_uses_silhouette() {
        let ray = Ray::new(v(0., 0., -5.), v(0., 0., 1.)).unwrap();
        let a = intersect_atom(&ray, &MedialAtom::new(v(0., 1.5, 0.), 1.0)).unwrap();
        let b = intersect_atom(&ray, &MedialAtom::new(v(0., 1.2, 0.), 1.0)).unwrap();
        assert!((a.silhouette - 0.5).abs() < 1e-15 && (b.silhouette - 0.2).abs() < 1e-15);
        assert_eq!(select_candidate(&ray, &[a, b]).unwrap().winner_index, 1);
    }

    #[test]
    fn selection_ties_take_first() {
        assert_eq!(argmin_first([1.0, 0.5, 0.5]), 1);
        assert_eq!(argmin_first([f64::INFINITY, f64::INFINITY]), 0);
    }

    #[test]
    fn medial_normal_examples() {
        let atom = MedialAtom::new(v(0., 0., 0.), 1.0);
        assert_eq!(medial_normal(&v(0., 0., -1.), &atom).unwrap(), v(0., 0., -1.));
        let n = medial_normal(&v(1., 1., 0.), &atom).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert!(close(&n, &v(s, s, 0.), 1e-15));
        assert!(medial_normal(&v(0., 0., 0.), &atom).is_err());
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| v(x, y, z))
    }

    fn direction() -> impl Strategy<Value = Vec3> {
        vec3().prop_filter("nonzero", |d| d.norm() > 1e-3)
    }

    proptest! {
        #[test]
        fn canonical_invariance(o in vec3(), q in direction(), t in -3.0..3.0f64, lambda in 0.01..10.0f64) {
            let a = canonicalize(&Ray::new(o, q).unwrap()).unwrap();
            let b = canonicalize(&Ray::new(o + q * t, q * lambda).unwrap()).unwrap();
            prop_assert!(close(&a.q_hat, &b.q_hat, 1e-9));
            prop_assert!(close(&a.moment, &b.moment, 1e-9));
            prop_assert!(close(&a.foot, &b.foot, 1e-9));
        }

        #[test]
        fn canonical_orthogonality(o in vec3(), q in direction()) {
            let c = canonicalize(&Ray::new(o, q).unwrap()).unwrap();
            prop_assert!((c.q_hat.norm() - 1.0).abs() <= 1e-9);
            prop_assert!(c.moment.dot(&c.q_hat).abs() <= 1e-9);
            prop_assert!(c.foot.dot(&c.q_hat).abs() <= 1e-9);
            prop_assert!((c.moment.norm() - c.foot.norm()).abs() <= 1e-9);
        }

        #[test]
        fn hit_points_lie_on_atom(o in vec3(), q in direction(), c in vec3(), r in 0.01..2.0f64) {
            let out = intersect_atom(&Ray::new(o, q).unwrap(), &MedialAtom::new(c, r));
            if let Ok(out) = out {
                if out.hit {
                    prop_assert!(((out.hit_point - c).norm() - r).abs() <= 1e-6 * r.max(1.0));
                } else {
                    prop_assert!(out.silhouette >= 0.0);
                }
            }
        }

        #[test]
        fn selection_is_relabeling_stable(ms in proptest::collection::vec(0.0..1.0f64, 1..8), rot in 0usize..8) {
            // Distinct metrics so the winner is unique.
            let mut ms = ms;
            for (i, m) in ms.iter_mut().enumerate() { *m += i as f64 * 1e-3; }
            let n = ms.len();
            let rot = rot % n;
            let w = argmin_first(ms.iter().copied());
            let permuted: Vec<f64> = (0..n).map(|i| ms[(i + rot) % n]).collect();
            let wp = argmin_first(permuted.iter().copied());
            prop_assert_eq!((wp + rot) % n, w);
        }
    }
}
