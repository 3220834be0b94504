//! Orthographic views, per-pixel ground truth and silhouette distances.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Ray, Vec3};

use super::kdtree::KdTree;
use super::shapes::ShapeSource;

/// Directions on a Fibonacci spiral running from pole to pole.
pub fn sample_views(count: usize) -> Vec<Vec3> {
    if count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![Vec3::z()];
    }
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let z = 1.0 - 2.0 * i as f64 / (count - 1) as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
        })
        .collect()
}

/// Orthographic camera looking along `direction`; the canvas spans
/// `[-1, 1]²` on the plane through the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrthoCamera {
    pub direction: Vec3,
    pub right: Vec3,
    pub up: Vec3,
    pub width: usize,
    pub height: usize,
}

impl OrthoCamera {
    pub fn new(direction: Vec3, up_hint: Option<Vec3>, width: usize, height: usize) -> Self {
        let dir = direction.normalize();
        let hint = up_hint.map(|u| u.normalize()).unwrap_or_else(Vec3::y);
        let hint = if dir.dot(&hint).abs() > 0.99 {
            if dir.dot(&Vec3::x()).abs() > 0.99 {
                Vec3::z()
            } else {
                Vec3::x()
            }
        } else {
            hint
        };
        let right = dir.cross(&hint).normalize();
        let up = right.cross(&dir);
        Self {
            direction: dir,
            right,
            up,
            width,
            height,
        }
    }

    /// Canvas coordinates of pixel `(row, col)`.
    pub fn pixel_uv(&self, row: usize, col: usize) -> (f64, f64) {
        let u = -1.0 + (2 * col + 1) as f64 / self.width as f64;
        let v = 1.0 - (2 * row + 1) as f64 / self.height as f64;
        (u, v)
    }

    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let (u, v) = self.pixel_uv(row, col);
        Ray {
            origin: self.right * u + self.up * v,
            direction: self.direction,
        }
    }

    /// Pixel whose footprint contains the projection of `p`, if on canvas.
    pub fn project(&self, p: &Vec3) -> Option<(usize, usize)> {
        let u = p.dot(&self.right);
        let v = p.dot(&self.up);
        let col = ((u + 1.0) * 0.5 * self.width as f64).floor();
        let row = ((1.0 - v) * 0.5 * self.height as f64).floor();
        (col >= 0.0 && row >= 0.0 && (col as usize) < self.width && (row as usize) < self.height)
            .then(|| (row as usize, col as usize))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum PixelStatus {
    Miss = 0,
    Hit = 1,
    Missing = 2,
}

impl PixelStatus {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::Miss),
            1 => Some(Self::Hit),
            2 => Some(Self::Missing),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub status: PixelStatus,
    pub p: [f32; 3],
    pub n: [f32; 3],
    pub s: f32,
}

impl Pixel {
    pub const EMPTY: Pixel = Pixel {
        status: PixelStatus::Missing,
        p: [0.0; 3],
        n: [0.0; 3],
        s: 0.0,
    };

    pub fn point(&self) -> Vec3 {
        Vec3::new(self.p[0] as f64, self.p[1] as f64, self.p[2] as f64)
    }

    pub fn normal(&self) -> Vec3 {
        Vec3::new(self.n[0] as f64, self.n[1] as f64, self.n[2] as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMap {
    pub direction: Vec3,
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub pixels: Vec<Pixel>,
}

impl ViewMap {
    pub fn camera(&self) -> OrthoCamera {
        OrthoCamera::new(self.direction, None, self.width, self.height)
    }

    pub fn count(&self, status: PixelStatus) -> usize {
        self.pixels.iter().filter(|p| p.status == status).count()
    }
}

fn to_f32(v: &Vec3) -> [f32; 3] {
    [v.x as f32, v.y as f32, v.z as f32]
}

/// Casts every pixel; silhouettes are left at zero for a later pass.
///
/// The first hit along the line is a back face when its normal points along
/// the ray. That only happens on open meshes and such pixels carry no data.
pub fn render_view(shape: &ShapeSource, direction: &Vec3, width: usize, height: usize) -> ViewMap {
    let cam = OrthoCamera::new(*direction, None, width, height);
    let pixels = (0..width * height)
        .into_par_iter()
        .map(|k| {
            let ray = cam.ray(k / width, k % width);
            match shape.cast(&ray.origin, &cam.direction) {
                Some(h) if h.normal.dot(&cam.direction) > 0.0 && !shape.watertight => Pixel::EMPTY,
                Some(h) => Pixel {
                    status: PixelStatus::Hit,
                    p: to_f32(&h.point),
                    n: to_f32(&h.normal),
                    s: 0.0,
                },
                None => Pixel {
                    status: PixelStatus::Miss,
                    ..Pixel::EMPTY
                },
            }
        })
        .collect();
    ViewMap {
        direction: cam.direction,
        width,
        height,
        pixels,
    }
}

/// Extra clearance beyond the unit sphere the silhouette march covers.
pub const MARCH_MARGIN: f64 = 0.05;
const MIN_STEP: f64 = 1e-4;
const MIN_SILHOUETTE: f64 = 1e-6;

/// Approximate distance from a line to a point cloud.
///
/// The line is marched through the unit-plus-margin ball with steps of a
/// quarter of the current nearest-point distance. At each step the nearest
/// cloud point's exact distance to the line is recorded; the minimum wins.
pub fn march_silhouette(tree: &KdTree, cloud: &[Vec3], origin: &Vec3, dir: &Vec3) -> f64 {
    let foot_t = -origin.dot(dir);
    let foot = origin + dir * foot_t;
    if tree.is_empty() {
        return (foot.norm() - 1.0).abs().max(MIN_SILHOUETTE);
    }
    let line_dist = |p: &Vec3| {
        let rel = p - origin;
        (rel - dir * rel.dot(dir)).norm()
    };
    let r = 1.0 + MARCH_MARGIN;
    let half = (r * r - foot.norm_squared()).max(0.0).sqrt();
    let (mut t, end) = (foot_t - half, foot_t + half);
    let mut best = f64::INFINITY;
    loop {
        let x = origin + dir * t;
        let (i, d) = tree.nearest(&x).expect("non-empty tree");
        best = best.min(line_dist(&cloud[i]));
        if t >= end {
            break;
        }
        t = (t + (0.25 * d).max(MIN_STEP)).min(end);
    }
    best.max(MIN_SILHOUETTE)
}

/// Fills `s` for every miss pixel from the hit points of all given views.
pub fn approximate_silhouettes(views: &mut [ViewMap]) {
    let cloud: Vec<Vec3> = views
        .iter()
        .flat_map(|v| v.pixels.iter().filter(|p| p.status == PixelStatus::Hit).map(|p| p.point()))
        .collect();
    let tree = KdTree::new(&cloud);
    for view in views.iter_mut() {
        let cam = view.camera();
        let width = view.width;
        view.pixels.par_iter_mut().enumerate().for_each(|(k, px)| {
            if px.status == PixelStatus::Miss {
                let ray = cam.ray(k / width, k % width);
                px.s = march_silhouette(&tree, &cloud, &ray.origin, &cam.direction) as f32;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antipodal_pair() {
        let v = sample_views(2);
        assert!((v[0] + v[1]).norm() < 1e-6);
    }

    #[test]
    fn spiral_spacing_and_balance() {
        let v = sample_views(50);
        let mut min_angle = f64::INFINITY;
        for i in 0..v.len() {
            assert!((v[i].norm() - 1.0).abs() < 1e-12);
            for j in 0..i {
                min_angle = min_angle.min(v[i].dot(&v[j]).clamp(-1.0, 1.0).acos().to_degrees());
            }
        }
        assert!(min_angle >= 15.0, "{min_angle}");
        let mean: Vec3 = v.iter().sum::<Vec3>() / 50.0;
        assert!(mean.norm() < 0.05);
    }

    #[test]
    fn camera_basis_is_orthonormal() {
        for d in sample_views(30) {
            let c = OrthoCamera::new(d, None, 4, 4);
            assert!(c.right.dot(&c.direction).abs() < 1e-12);
            assert!(c.up.dot(&c.direction).abs() < 1e-12);
            assert!((c.up.norm() - 1.0).abs() < 1e-12);
            let r = c.ray(1, 2);
            assert_eq!(c.project(&(r.origin + d * 0.3)), Some((1, 2)));
        }
    }

    #[test]
    fn sphere_view_coverage_and_center() {
        let s = ShapeSource::parse("sphere:0.5").unwrap();
        let v = render_view(&s, &Vec3::new(0.3, -0.2, 0.9).normalize(), 64, 64);
        let frac = v.count(PixelStatus::Hit) as f64 / (64.0 * 64.0);
        assert!((frac - std::f64::consts::PI * 0.25 / 4.0).abs() < 0.01, "{frac}");
        assert_eq!(v.count(PixelStatus::Missing), 0);
        let d = Vec3::new(1.0, 2.0, -0.5).normalize();
        let v = render_view(&s, &d, 33, 33);
        let c = v.pixels[16 * 33 + 16];
        assert_eq!(c.status, PixelStatus::Hit);
        assert!((c.point() + d * 0.5).norm() < 1e-6);
    }

    #[test]
    fn open_mesh_back_faces_are_missing() {
        // A single triangle facing +z seen from both sides.
        let m = crate::data::mesh::TriangleMesh::parse_obj("v -1 -1 0\nv 1 -1 0\nv 0 1 0\nf 1 2 3\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tri.obj");
        std::fs::write(&path, m.to_obj()).unwrap();
        let s = ShapeSource::parse(&format!("mesh:{}", path.display())).unwrap();
        let front = render_view(&s, &-Vec3::z(), 9, 9);
        let back = render_view(&s, &Vec3::z(), 9, 9);
        assert!(front.count(PixelStatus::Hit) > 0 && front.count(PixelStatus::Missing) == 0);
        assert!(back.count(PixelStatus::Missing) > 0 && back.count(PixelStatus::Hit) == 0);
    }
}
