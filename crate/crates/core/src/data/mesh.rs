//! Triangle meshes: OBJ loading, a bounding-volume hierarchy and line casting.

use std::path::Path;

use crate::error::{MarfError, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    bvh: Vec<BvhNode>,
    order: Vec<usize>,
}

#[derive(Clone, Debug)]
struct BvhNode {
    lo: Vec3,
    hi: Vec3,
    /// Leaf: range into `order`. Inner: children indices.
    start: usize,
    end: usize,
    left: usize,
    right: usize,
    leaf: bool,
}

/// Line/mesh hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeshHit {
    pub t: f64,
    pub point: Vec3,
    /// Geometric normal of the triangle, oriented by its winding.
    pub normal: Vec3,
    pub triangle: usize,
}

const EPS_DET: f64 = 1e-14;

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        if let Some(bad) = triangles.iter().flatten().find(|&&i| i >= vertices.len()) {
            return Err(MarfError::Format(format!(
                "triangle references vertex {bad} but only {} exist",
                vertices.len()
            )));
        }
        let mut mesh = Self {
            vertices,
            triangles,
            bvh: Vec::new(),
            order: Vec::new(),
        };
        mesh.build_bvh();
        Ok(mesh)
    }

    /// Reads vertices and faces from a Wavefront OBJ file. Polygons are
    /// triangulated as fans; texture and normal indices are ignored.
    pub fn load_obj(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_obj(&text)
    }

    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.split_whitespace();
            match it.next() {
                Some("v") => {
                    let c: Vec<f64> = it
                        .take(3)
                        .map(|s| s.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| MarfError::Format(format!("OBJ line {}: {e}", lineno + 1)))?;
                    if c.len() != 3 {
                        return Err(MarfError::Format(format!(
                            "OBJ line {}: vertex needs 3 coordinates",
                            lineno + 1
                        )));
                    }
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                Some("f") => {
                    let mut idx = Vec::new();
                    for tok in it {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first.parse().map_err(|_| {
                            MarfError::Format(format!("OBJ line {}: bad face index {tok:?}", lineno + 1))
                        })?;
                        let resolved = if i > 0 {
                            i - 1
                        } else if i < 0 {
                            vertices.len() as i64 + i
                        } else {
                            -1
                        };
                        if resolved < 0 {
                            return Err(MarfError::Format(format!(
                                "OBJ line {}: face index {i} out of range",
                                lineno + 1
                            )));
                        }
                        idx.push(resolved as usize);
                    }
                    if idx.len() < 3 {
                        return Err(MarfError::Format(format!(
                            "OBJ line {}: face needs at least 3 vertices",
                            lineno + 1
                        )));
                    }
                    for k in 1..idx.len() - 1 {
                        triangles.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        if triangles.is_empty() {
            return Err(MarfError::Format("OBJ file has no faces".into()));
        }
        Self::new(vertices, triangles)
    }

    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }

    /// Center of the axis-aligned bounding box and the largest vertex distance
    /// from it.
    pub fn bounding_sphere(&self) -> (Vec3, f64) {
        let (lo, hi) = bounds(self.vertices.iter().copied());
        let c = (lo + hi) * 0.5;
        let r = self
            .vertices
            .iter()
            .map(|v| (v - c).norm())
            .fold(0.0, f64::max);
        (c, r)
    }

    /// Applies `x ↦ scale x + offset` to every vertex.
    pub fn transform(&mut self, scale: f64, offset: Vec3) {
        for v in &mut self.vertices {
            *v = *v * scale + offset;
        }
        self.build_bvh();
    }

    fn tri(&self, k: usize) -> [Vec3; 3] {
        let t = self.triangles[k];
        [self.vertices[t[0]], self.vertices[t[1]], self.vertices[t[2]]]
    }

    fn build_bvh(&mut self) {
        self.order = (0..self.triangles.len()).collect();
        self.bvh.clear();
        let centroids: Vec<Vec3> = (0..self.triangles.len())
            .map(|k| {
                let [a, b, c] = self.tri(k);
                (a + b + c) / 3.0
            })
            .collect();
        if !self.order.is_empty() {
            let n = self.order.len();
            self.build_node(0, n, &centroids);
        }
    }

    fn build_node(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let (lo, hi) = bounds(self.order[start..end].iter().flat_map(|&k| self.tri(k)));
        let id = self.bvh.len();
        self.bvh.push(BvhNode {
            lo,
            hi,
            start,
            end,
            left: 0,
            right: 0,
            leaf: true,
        });
        if end - start <= 4 {
            return id;
        }
        let (clo, chi) = bounds(self.order[start..end].iter().map(|&k| centroids[k]));
        let ext = chi - clo;
        let axis = if ext.x >= ext.y && ext.x >= ext.z {
            0
        } else if ext.y >= ext.z {
            1
        } else {
            2
        };
        let mid = start + (end - start) / 2;
        self.order[start..end]
            .select_nth_unstable_by(mid - start, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]));
        let left = self.build_node(start, mid, centroids);
        let right = self.build_node(mid, end, centroids);
        let node = &mut self.bvh[id];
        node.leaf = false;
        node.left = left;
        node.right = right;
        id
    }

    /// Smallest-parameter intersection of the full line `o + t q̂`, any sign of `t`.
    pub fn cast_line(&self, origin: &Vec3, dir: &Vec3) -> Option<MeshHit> {
        let mut best: Option<MeshHit> = None;
        if self.bvh.is_empty() {
            return None;
        }
        let inv = Vec3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.bvh[id];
            let Some((t0, _)) = slab(origin, &inv, &node.lo, &node.hi) else {
                continue;
            };
            if best.is_some_and(|b| t0 > b.t) {
                continue;
            }
            if node.leaf {
                for &k in &self.order[node.start..node.end] {
                    let [a, b, c] = self.tri(k);
                    if let Some((t, n)) = moller_trumbore(origin, dir, &a, &b, &c) {
                        if best.is_none_or(|h| t < h.t) {
                            best = Some(MeshHit {
                                t,
                                point: origin + dir * t,
                                normal: n,
                                triangle: k,
                            });
                        }
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        best
    }
}

fn bounds(points: impl Iterator<Item = Vec3>) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (lo, hi)
}

/// Entry/exit parameters of a line through an axis-aligned box.
pub(crate) fn slab(o: &Vec3, inv: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if inv[k].is_infinite() {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) * inv[k];
        let b = (hi[k] - o[k]) * inv[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Möller–Trumbore for a full line. Returns the parameter and the unit
/// geometric normal; degenerate triangles never hit.
pub fn moller_trumbore(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<(f64, Vec3)> {
    let e1 = b - a;
    let e2 = c - a;
    let n = e1.cross(&e2);
    let nl = n.norm();
    if nl < EPS_DET {
        return None;
    }
    let pvec = d.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < EPS_DET * nl {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = o - a;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = d.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some((e2.dot(&qvec) * inv, n / nl))
}

/// Subdivided icosahedron projected onto a sphere, outward winding.
pub fn icosphere(subdivisions: usize, radius: f64) -> TriangleMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: usize, b: usize, v: &mut Vec<Vec3>| {
            *cache.entry((a.min(b), a.max(b))).or_insert_with(|| {
                v.push(((v[a] + v[b]) * 0.5).normalize());
                v.len() - 1
            })
        };
        let mut nf = Vec::with_capacity(f.len() * 4);
        for [a, b, c] in f {
            let ab = mid(a, b, &mut v);
            let bc = mid(b, c, &mut v);
            let ca = mid(c, a, &mut v);
            nf.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = nf;
    }
    let v = v.into_iter().map(|p| p * radius).collect();
    TriangleMesh::new(v, f).expect("valid icosphere")
}
