//! Ground-truth shapes and the line-casting oracle.
//!
//! Shape specs are `+`-separated primitives:
//! `sphere:r[@x,y,z]`, `torus:R,r[@x,y,z]`, `box:hx,hy,hz[@x,y,z]`,
//! `capsule:h,r[@x,y,z]` and `mesh:path.obj`. Tori and capsules are aligned
//! with the y axis.

use std::path::PathBuf;

use crate::error::{MarfError, Result};
use crate::geometry::Vec3;

use super::mesh::{slab, TriangleMesh};

#[derive(Clone, Debug)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Torus { center: Vec3, major: f64, minor: f64 },
    Box { center: Vec3, half: Vec3 },
    Capsule { center: Vec3, half_height: f64, radius: f64 },
    Mesh { path: PathBuf, mesh: Box<TriangleMesh> },
}

/// First intersection of a full line with a shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CastHit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
}

#[derive(Clone, Debug)]
pub struct ShapeSource {
    pub spec: String,
    pub parts: Vec<Primitive>,
    /// `x_normalized = scale x + offset`, stored as `[scale, ox, oy, oz]`.
    pub normalization: [f64; 4],
    pub watertight: bool,
}

fn parse_floats(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| MarfError::InvalidInput(format!("{what}: cannot parse numbers in {s:?}")))?;
    if v.len() != n || v.iter().any(|x| !x.is_finite()) {
        return Err(MarfError::InvalidInput(format!(
            "{what}: expected {n} finite numbers, got {s:?}"
        )));
    }
    Ok(v)
}

fn positive(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|&x| x > 0.0) {
        Ok(())
    } else {
        Err(MarfError::InvalidInput(format!("{what}: dimensions must be positive")))
    }
}

impl ShapeSource {
    pub fn parse(spec: &str) -> Result<Self> {
        let mut parts = Vec::new();
        let mut has_mesh = false;
        for item in spec.split('+') {
            let item = item.trim();
            let (kind, rest) = item.split_once(':').ok_or_else(|| {
                MarfError::InvalidInput(format!("shape spec {item:?} needs the form kind:params"))
            })?;
            if kind == "mesh" {
                let path = PathBuf::from(rest);
                let mesh = TriangleMesh::load_obj(&path)?;
                parts.push(Primitive::Mesh {
                    path,
                    mesh: Box::new(mesh),
                });
                has_mesh = true;
                continue;
            }
            let (dims, center) = match rest.split_once('@') {
                Some((d, c)) => {
                    let c = parse_floats(c, 3, kind)?;
                    (d, Vec3::new(c[0], c[1], c[2]))
                }
                None => (rest, Vec3::zeros()),
            };
            let prim = match kind {
                "sphere" => {
                    let d = parse_floats(dims, 1, kind)?;
                    positive(&d, kind)?;
                    Primitive::Sphere {
                        center,
                        radius: d[0],
                    }
                }
                "torus" => {
                    let d = parse_floats(dims, 2, kind)?;
                    positive(&d, kind)?;
                    Primitive::Torus {
                        center,
                        major: d[0],
                        minor: d[1],
                    }
                }
                "box" => {
                    let d = parse_floats(dims, 3, kind)?;
                    positive(&d, kind)?;
                    Primitive::Box {
                        center,
                        half: Vec3::new(d[0], d[1], d[2]),
                    }
                }
                "capsule" => {
                    let d = parse_floats(dims, 2, kind)?;
                    positive(&d, kind)?;
                    Primitive::Capsule {
                        center,
                        half_height: d[0],
                        radius: d[1],
                    }
                }
                other => {
                    return Err(MarfError::InvalidInput(format!("unknown shape kind {other:?}")))
                }
            };
            parts.push(prim);
        }
        let mut shape = Self {
            spec: spec.to_string(),
            parts,
            normalization: [1.0, 0.0, 0.0, 0.0],
            watertight: !has_mesh,
        };
        if has_mesh {
            shape.normalize_meshes()?;
        } else {
            let r = shape.bounding_radius();
            if r > 1.0 + 1e-12 {
                return Err(MarfError::InvalidInput(format!(
                    "analytic shape {spec:?} extends to radius {r}, outside the unit sphere"
                )));
            }
        }
        Ok(shape)
    }

    /// Largest distance of the surface from the origin.
    pub fn bounding_radius(&self) -> f64 {
        self.parts
            .iter()
            .map(|p| match p {
                Primitive::Sphere { center, radius } => center.norm() + radius,
                Primitive::Torus {
                    center,
                    major,
                    minor,
                } => center.norm() + major + minor,
                Primitive::Box { center, half } => center.norm() + half.norm(),
                Primitive::Capsule {
                    center,
                    half_height,
                    radius,
                } => center.norm() + half_height + radius,
                Primitive::Mesh { mesh, .. } => {
                    mesh.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Scales and translates mesh parts so their joint bounding sphere
    /// (centered on the bounding box) becomes the unit sphere. Mixing meshes
    /// with analytic parts is not supported.
    fn normalize_meshes(&mut self) -> Result<()> {
        if self.parts.iter().any(|p| !matches!(p, Primitive::Mesh { .. })) {
            return Err(MarfError::InvalidInput(
                "mesh shapes cannot be combined with analytic primitives".into(),
            ));
        }
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in &self.parts {
            if let Primitive::Mesh { mesh, .. } = p {
                for v in &mesh.vertices {
                    lo = lo.inf(v);
                    hi = hi.sup(v);
                }
            }
        }
        let c = (lo + hi) * 0.5;
        let mut r: f64 = 0.0;
        for p in &self.parts {
            if let Primitive::Mesh { mesh, .. } = p {
                for v in &mesh.vertices {
                    r = r.max((v - c).norm());
                }
            }
        }
        if !(r > 0.0) {
            return Err(MarfError::Format("mesh has zero extent".into()));
        }
        let scale = 1.0 / r;
        let offset = -c * scale;
        for p in &mut self.parts {
            if let Primitive::Mesh { mesh, .. } = p {
                mesh.transform(scale, offset);
            }
        }
        self.normalization = [scale, offset.x, offset.y, offset.z];
        Ok(())
    }

    /// Nearest intersection along the full line `o + t q̂` (`q̂` unit).
    pub fn cast(&self, origin: &Vec3, dir: &Vec3) -> Option<CastHit> {
        self.parts
            .iter()
            .filter_map(|p| cast_primitive(p, origin, dir))
            .min_by(|a, b| a.t.total_cmp(&b.t))
    }

    /// Points spread over the surface, for brute-force distance oracles.
    pub fn sample_surface(&self, per_part: usize, seed: u64) -> Vec<Vec3> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for p in &self.parts {
            let mut count = 0;
            let mut guard = 0;
            while count < per_part && guard < per_part * 200 {
                guard += 1;
                let d = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                if d.norm() < 1e-6 {
                    continue;
                }
                let d = d.normalize();
                let o = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ) * 0.2;
                if let Some(h) = cast_primitive(p, &o, &d) {
                    out.push(h.point);
                    count += 1;
                }
            }
        }
        out
    }
}

/// Closed-form (or polished sphere-traced) intersection with one primitive.
pub fn cast_primitive(p: &Primitive, o: &Vec3, d: &Vec3) -> Option<CastHit> {
    match p {
        Primitive::Sphere { center, radius } => sphere_hit(o, d, center, *radius),
        Primitive::Box { center, half } => {
            let rel = o - center;
            let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
            let (t0, _) = slab(&rel, &inv, &-half, half)?;
            let point = o + d * t0;
            let local = point - center;
            let mut axis = 0;
            let mut best = f64::INFINITY;
            for k in 0..3 {
                let gap = (local[k].abs() - half[k]).abs();
                if gap < best {
                    best = gap;
                    axis = k;
                }
            }
            let mut normal = Vec3::zeros();
            normal[axis] = local[axis].signum();
            Some(CastHit { t: t0, point, normal })
        }
        Primitive::Capsule {
            center,
            half_height,
            radius,
        } => {
            let rel = o - center;
            let mut best: Option<CastHit> = None;
            let mut take = |h: Option<CastHit>| {
                if let Some(h) = h {
                    if best.is_none_or(|b| h.t < b.t) {
                        best = Some(h);
                    }
                }
            };
            // Cylinder around the y axis.
            let a = d.x * d.x + d.z * d.z;
            if a > 1e-15 {
                let b = rel.x * d.x + rel.z * d.z;
                let c = rel.x * rel.x + rel.z * rel.z - radius * radius;
                let disc = b * b - a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a;
                    let y = rel.y + t * d.y;
                    if y.abs() <= *half_height {
                        let pl = rel + d * t;
                        take(Some(CastHit {
                            t,
                            point: o + d * t,
                            normal: Vec3::new(pl.x, 0.0, pl.z).normalize(),
                        }));
                    }
                }
            }
            for s in [-1.0, 1.0] {
                let cap = center + Vec3::new(0.0, s * half_height, 0.0);
                take(sphere_hit(o, d, &cap, *radius).filter(|h| (h.point.y - center.y) * s >= *half_height));
            }
            best
        }
        Primitive::Torus {
            center,
            major,
            minor,
        } => torus_hit(o, d, center, *major, *minor),
        Primitive::Mesh { mesh, .. } => mesh.cast_line(o, d).map(|h| CastHit {
            t: h.t,
            point: h.point,
            normal: h.normal,
        }),
    }
}

fn sphere_hit(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<CastHit> {
    let oc = o - c;
    let b = d.dot(&oc);
    let delta = b * b - (oc.norm_squared() - r * r);
    if delta < 0.0 {
        return None;
    }
    let t = -b - delta.sqrt();
    let point = o + d * t;
    Some(CastHit {
        t,
        point,
        normal: (point - c) / r,
    })
}

fn torus_sdf(p: &Vec3, major: f64, minor: f64) -> f64 {
    let q = (p.x * p.x + p.z * p.z).sqrt() - major;
    (q * q + p.y * p.y).sqrt() - minor
}

fn torus_normal(p: &Vec3, major: f64) -> Vec3 {
    let rho = (p.x * p.x + p.z * p.z).sqrt();
    let ring = if rho > 0.0 {
        Vec3::new(p.x / rho * major, 0.0, p.z / rho * major)
    } else {
        Vec3::new(major, 0.0, 0.0)
    };
    (p - ring).normalize()
}

/// Sphere tracing from where the line enters the bounding sphere, then a
/// few Newton steps on the distance function.
fn torus_hit(o: &Vec3, d: &Vec3, center: &Vec3, major: f64, minor: f64) -> Option<CastHit> {
    let rel = o - center;
    let bound = major + minor + 1e-3;
    let b = d.dot(&rel);
    let disc = b * b - (rel.norm_squared() - bound * bound);
    if disc < 0.0 {
        return None;
    }
    let (mut t, t_end) = (-b - disc.sqrt(), -b + disc.sqrt());
    for _ in 0..2000 {
        let dist = torus_sdf(&(rel + d * t), major, minor);
        if dist < 1e-10 {
            for _ in 0..4 {
                let p = rel + d * t;
                let f = torus_sdf(&p, major, minor);
                let g = torus_normal(&p, major).dot(d);
                if g.abs() < 1e-12 {
                    break;
                }
                let step = f / g;
                if step.abs() > 1e-6 {
                    break;
                }
                t -= step;
            }
            let p = rel + d * t;
            return Some(CastHit {
                t,
                point: o + d * t,
                normal: torus_normal(&p, major),
            });
        }
        t += dist;
        if t > t_end {
            return None;
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::mesh::icosphere;

    #[test]
    fn sphere_oracle() {
        let s = ShapeSource::parse("sphere:0.5").unwrap();
        let h = s.cast(&Vec3::new(0.0, 0.0, -2.0), &Vec3::z()).unwrap();
        assert!((h.point - Vec3::new(0.0, 0.0, -0.5)).norm() < 1e-15);
        assert_eq!(h.normal, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn box_miss_and_hit() {
        let s = ShapeSource::parse("box:0.5,0.5,0.5").unwrap();
        assert!(s.cast(&Vec3::new(0.0, 0.8, -2.0), &Vec3::z()).is_none());
        let h = s.cast(&Vec3::new(0.1, 0.2, 3.0), &Vec3::z()).unwrap();
        assert!((h.point.z + 0.5).abs() < 1e-12);
        assert_eq!(h.normal, Vec3::new(0.0, 0.0, -1.0));
    }

    #[test]
    fn torus_points_lie_on_surface() {
        let s = ShapeSource::parse("torus:0.6,0.25").unwrap();
        let d = Vec3::new(0.2, -1.0, 0.3).normalize();
        let h = s.cast(&Vec3::new(0.6, 0.0, 0.0), &d).unwrap();
        assert!(torus_sdf(&h.point, 0.6, 0.25).abs() < 1e-9);
        assert!(h.normal.dot(&d) < 0.0);
        // Through the hole along the axis.
        assert!(s.cast(&Vec3::zeros(), &Vec3::y()).is_none());
    }

    #[test]
    fn capsule_caps_and_side() {
        let s = ShapeSource::parse("capsule:0.4,0.3").unwrap();
        let top = s.cast(&Vec3::new(0.0, 2.0, 0.0), &-Vec3::y()).unwrap();
        assert!((top.point.y - 0.7).abs() < 1e-12);
        let side = s.cast(&Vec3::new(-2.0, 0.1, 0.0), &Vec3::x()).unwrap();
        assert!((side.point.x + 0.3).abs() < 1e-12);
        assert_eq!(side.normal, Vec3::new(-1.0, 0.0, 0.0));
    }

    #[test]
    fn union_and_bad_specs() {
        let s = ShapeSource::parse("sphere:0.3@0.5,0,0+sphere:0.3@-0.5,0,0").unwrap();
        let h = s.cast(&Vec3::new(-3.0, 0.0, 0.0), &Vec3::x()).unwrap();
        assert!((h.point.x + 0.8).abs() < 1e-12);
        for bad in ["", "sphere", "sphere:-1", "cube:1", "sphere:2", "torus:0.5"] {
            assert!(ShapeSource::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn mesh_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ico.obj");
        let mut m = icosphere(2, 3.0);
        m.transform(1.0, Vec3::new(5.0, -1.0, 2.0));
        std::fs::write(&path, m.to_obj()).unwrap();
        let s = ShapeSource::parse(&format!("mesh:{}", path.display())).unwrap();
        let Primitive::Mesh { mesh, .. } = &s.parts[0] else {
            panic!()
        };
        let (c, r) = mesh.bounding_sphere();
        assert!(c.norm() < 1e-6);
        assert!((r - 1.0).abs() < 1e-9);
        assert!(mesh.vertices.iter().all(|v| v.norm() <= 1.0 + 1e-12));
    }
}
