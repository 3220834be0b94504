//! Image synthesis from a ray field: one cast per pixel, optional
//! forward-mode differentiation, then per-mode shading into an 8-bit image.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Rotation3, Unit};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RenderConfig, TranslucencyParams, WardParams};
use crate::data::views::OrthoCamera;
use crate::error::{MarfError, Result};
use crate::geometry::{Ray, Vec3};
use crate::network::forward_rows;
use crate::raycast::{differential, shape_operator, trace, DifferentialFrame, Field, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    Lambertian,
    CandidateColor,
    MedialAxis,
    MedialRadius,
    MedialNormalRgb,
    AnalyticalNormalRgb,
    MeanCurvature,
    Translucency,
    Ward,
}

impl RenderMode {
    pub const ALL: [RenderMode; 9] = [
        RenderMode::Lambertian,
        RenderMode::CandidateColor,
        RenderMode::MedialAxis,
        RenderMode::MedialRadius,
        RenderMode::MedialNormalRgb,
        RenderMode::AnalyticalNormalRgb,
        RenderMode::MeanCurvature,
        RenderMode::Translucency,
        RenderMode::Ward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RenderMode::Lambertian => "lambertian",
            RenderMode::CandidateColor => "candidate_color",
            RenderMode::MedialAxis => "medial_axis",
            RenderMode::MedialRadius => "medial_radius",
            RenderMode::MedialNormalRgb => "medial_normal_rgb",
            RenderMode::AnalyticalNormalRgb => "analytical_normal_rgb",
            RenderMode::MeanCurvature => "mean_curvature",
            RenderMode::Translucency => "translucency",
            RenderMode::Ward => "ward",
        }
    }

    /// Whether the mode runs the forward-mode passes on a medial field.
    pub fn differentiates(self) -> bool {
        matches!(
            self,
            RenderMode::AnalyticalNormalRgb | RenderMode::MeanCurvature | RenderMode::Ward
        )
    }

    /// Modes that read atoms or medial normals and so have no PRIF meaning.
    fn needs_atoms(self) -> bool {
        !matches!(self, RenderMode::Lambertian | RenderMode::AnalyticalNormalRgb)
    }
}

impl FromStr for RenderMode {
    type Err = MarfError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
            MarfError::InvalidInput(format!("unknown render mode {s:?}; expected one of {names:?}"))
        })
    }
}

impl std::fmt::Display for RenderMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// 8-bit RGB raster, row-major from the top-left.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        self.pixels[row * self.width + col]
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_ppm())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |m: &str| MarfError::Format(format!("{}: {m}", path.display()));
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if start == i {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("not an 8-bit P6 image"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad size"));
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let data = &bytes[(i + 1).min(bytes.len())..];
        if data.len() != width * height * 3 {
            return Err(bad("pixel data does not match the header size"));
        }
        Ok(Self {
            width,
            height,
            pixels: data.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStats {
    pub mode: RenderMode,
    pub width: usize,
    pub height: usize,
    pub hit: usize,
    pub miss: usize,
    /// Hit pixels whose normal or curvature could not be formed.
    pub degenerate: usize,
    /// Rays pushed through the network by the primary cast.
    pub forward_evaluations: u64,
    /// Rays pushed through the network by the forward-mode passes.
    pub differential_evaluations: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Rendering {
    pub image: Image,
    pub stats: RenderStats,
    /// Winning candidate per pixel, `None` on misses.
    pub winners: Vec<Option<usize>>,
}

pub const BACKGROUND: [u8; 3] = [24, 24, 32];
/// Sentinel for degenerate pixels.
pub const DEGENERATE: [u8; 3] = [255, 0, 255];
pub const MEDIAL_DOT: [u8; 3] = [255, 48, 0];

/// Fixed candidate palette, indexed by winner modulo its length.
pub const PALETTE: [[u8; 3]; 16] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 190],
    [0, 128, 128],
    [170, 110, 40],
    [255, 225, 25],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [0, 0, 128],
];

const ALBEDO: f64 = 0.8;
const AMBIENT: f64 = 0.12;
/// Radius mapped to the top of the radius colormap.
const RADIUS_RANGE: f64 = 1.0;
/// Mean curvature mapped to either end of the curvature colormap.
const CURVATURE_RANGE: f64 = 4.0;
const WARD_CLAMP: f64 = 1e-4;
const SPECULAR: f64 = 0.2;
const TRANSLUCENT: f64 = 0.15;
const TRANSLUCENT_TINT: [f64; 3] = [1.0, 0.55, 0.35];

pub fn camera(cfg: &RenderConfig) -> Result<OrthoCamera> {
    camera_for(Vec3::from(cfg.direction), cfg)
}

pub fn camera_for(direction: Vec3, cfg: &RenderConfig) -> Result<OrthoCamera> {
    let up = Vec3::from(cfg.up);
    if !(direction.norm() > 0.0 && up.norm() > 0.0) || !direction.iter().chain(up.iter()).all(|v| v.is_finite()) {
        return Err(MarfError::InvalidInput("camera direction and up must be finite and nonzero".into()));
    }
    if direction.normalize().cross(&up.normalize()).norm() < 1e-6 {
        return Err(MarfError::InvalidInput("camera direction is parallel to up".into()));
    }
    Ok(OrthoCamera::new(direction, Some(up), cfg.width, cfg.height))
}

/// `count` view directions turned about the up axis in equal steps.
pub fn orbit_directions(direction: Vec3, up: Vec3, count: usize) -> Vec<Vec3> {
    let axis = Unit::new_normalize(up);
    (0..count)
        .map(|k| Rotation3::from_axis_angle(&axis, std::f64::consts::TAU * k as f64 / count as f64) * direction)
        .collect()
}

/// Evenly spaced blends from `a` to `b`, both ends included.
pub fn latent_path(a: &[f64], b: &[f64], steps: usize) -> Vec<Vec<f64>> {
    let denom = steps.saturating_sub(1).max(1) as f64;
    (0..steps)
        .map(|k| {
            let t = k as f64 / denom;
            a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect()
        })
        .collect()
}

/// Translucency coefficient `max(q̂·(s n̂ − l̂), 0)^p / (r + ε)`, with `q̂` the
/// ray direction and `l̂` the direction the light travels.
pub fn translucency_coeff(radius: f64, normal: &Vec3, q_hat: &Vec3, l_hat: &Vec3, p: &TranslucencyParams) -> f64 {
    let x = q_hat.dot(&(normal * p.distortion - l_hat)).max(0.0);
    x.powf(p.sharpness) / (radius + p.epsilon)
}

/// Anisotropic Ward coefficient. `q_hat` points to the viewer and `l_hat` to
/// the light; grazing configurations return 0.
pub fn ward_coeff(normal: &Vec3, v1: &Vec3, v2: &Vec3, q_hat: &Vec3, l_hat: &Vec3, p: &WardParams) -> f64 {
    let (nl, nq) = (normal.dot(l_hat), normal.dot(q_hat));
    if nl <= WARD_CLAMP || nq <= WARD_CLAMP {
        return 0.0;
    }
    let h = (l_hat + q_hat).normalize();
    let (x, y) = (h.dot(v1) / p.a1, h.dot(v2) / p.a2);
    let e = (-2.0 * (x * x + y * y) / (1.0 + normal.dot(&h))).exp();
    e / (4.0 * std::f64::consts::PI * p.a1 * p.a2 * (nl * nq).sqrt())
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb(c: [f64; 3]) -> [u8; 3] {
    c.map(to_u8)
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Sequential map for values in `[0, 1]`: dark blue, teal, yellow.
fn sequential(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops = [[0.15, 0.1, 0.45], [0.1, 0.6, 0.55], [0.98, 0.9, 0.15]];
    if t < 0.5 {
        lerp3(stops[0], stops[1], t * 2.0)
    } else {
        lerp3(stops[1], stops[2], t * 2.0 - 1.0)
    }
}

/// Two-ended map for values in `[-1, 1]`: blue, white, red.
fn diverging(t: f64) -> [f64; 3] {
    let t = t.clamp(-1.0, 1.0);
    if t < 0.0 {
        lerp3([1.0, 1.0, 1.0], [0.2, 0.3, 0.85], -t)
    } else {
        lerp3([1.0, 1.0, 1.0], [0.85, 0.15, 0.15], t)
    }
}

fn normal_rgb(n: &Vec3) -> [u8; 3] {
    rgb([0, 1, 2].map(|i| 0.5 * (n[i] + 1.0)))
}

fn diffuse(n: &Vec3, to_light: &Vec3) -> f64 {
    AMBIENT + (1.0 - AMBIENT) * n.dot(to_light).max(0.0)
}

struct Lighting {
    /// Ray direction.
    view: Vec3,
    /// From the surface towards the light.
    to_light: Vec3,
    /// Direction of the transmitted light in translucency mode.
    transmitted: Vec3,
}

impl Lighting {
    fn new(camera: &OrthoCamera, cfg: &RenderConfig) -> Result<Self> {
        let view = camera.direction;
        let to_light = match cfg.light {
            Some(l) => {
                let l = Vec3::from(l);
                if !(l.norm() > 0.0) {
                    return Err(MarfError::InvalidInput("light direction must be nonzero".into()));
                }
                l.normalize()
            }
            None => -view,
        };
        // A headlight transmits nothing, so the default back-lights instead.
        let transmitted = match cfg.light {
            Some(_) => -to_light,
            None => view,
        };
        Ok(Self {
            view,
            to_light,
            transmitted,
        })
    }
}

/// Renders one image. Misses become background; pixels whose normal or
/// curvature cannot be formed are drawn in the sentinel color and counted.
pub fn render(field: &Field, camera: &OrthoCamera, mode: RenderMode, cfg: &RenderConfig) -> Result<Rendering> {
    if !field.is_medial() && mode.needs_atoms() {
        return Err(MarfError::InvalidInput(format!("render mode {mode} needs a medial field")));
    }
    let start = Instant::now();
    let light = Lighting::new(camera, cfg)?;
    let (w, h) = (camera.width, camera.height);
    let rays: Vec<Ray> = (0..h * w).map(|i| camera.ray(i / w, i % w)).collect();

    let before = forward_rows();
    let traces = trace(field, &rays)?;
    let forward_evaluations = forward_rows() - before;

    // PRIF has no medial normals, so its shaded modes always differentiate.
    let want_frames = mode.differentiates() || !field.is_medial();
    let hit_idx: Vec<usize> = (0..traces.len()).filter(|&i| traces[i].hit).collect();
    let mut frames: Vec<Option<DifferentialFrame>> = vec![None; traces.len()];
    let before = forward_rows();
    if want_frames && !hit_idx.is_empty() {
        let hit_rays: Vec<Ray> = hit_idx.iter().map(|&i| rays[i]).collect();
        for (&i, f) in hit_idx.iter().zip(differential(field, &hit_rays)?) {
            frames[i] = f;
        }
    }
    let differential_evaluations = forward_rows() - before;

    let mut image = Image::new(w, h, BACKGROUND);
    let shaded: Vec<Option<[u8; 3]>> = traces
        .par_iter()
        .zip(frames.par_iter())
        .map(|(t, f)| t.hit.then(|| shade(t, f.as_ref(), mode, &light, cfg).unwrap_or(DEGENERATE)))
        .collect();
    let mut degenerate = 0;
    for (px, s) in image.pixels.iter_mut().zip(&shaded) {
        if let Some(c) = s {
            *px = *c;
            degenerate += (*c == DEGENERATE) as usize;
        }
    }
    if mode == RenderMode::MedialAxis {
        for t in traces.iter().filter(|t| t.hit) {
            if let Some((r, c)) = t.atom.and_then(|a| camera.project(&a.center)) {
                image.pixels[r * w + c] = MEDIAL_DOT;
            }
        }
    }
    let hit = hit_idx.len();
    Ok(Rendering {
        image,
        winners: traces.iter().map(|t| t.hit.then_some(t.winner)).collect(),
        stats: RenderStats {
            mode,
            width: w,
            height: h,
            hit,
            miss: traces.len() - hit,
            degenerate,
            forward_evaluations,
            differential_evaluations,
            seconds: start.elapsed().as_secs_f64(),
        },
    })
}

/// Color of a hit pixel, `None` when the pixel is degenerate.
fn shade(t: &Trace, f: Option<&DifferentialFrame>, mode: RenderMode, light: &Lighting, cfg: &RenderConfig) -> Option<[u8; 3]> {
    let analytical = || f.and_then(|f| f.analytical_normal).map(|n| orient(n, &light.view));
    // Normal used for lighting: the medial one where it exists.
    let normal = match t.atom {
        Some(_) => t.medial_normal,
        None => analytical(),
    };
    let grey = |n: &Vec3| {
        let v = ALBEDO * diffuse(n, &light.to_light);
        rgb([v, v, v])
    };
    match mode {
        RenderMode::Lambertian | RenderMode::MedialAxis => normal.map(|n| grey(&n)),
        RenderMode::CandidateColor => Some(PALETTE[t.winner % PALETTE.len()]),
        RenderMode::MedialRadius => t.atom.map(|a| rgb(sequential(a.radius / RADIUS_RANGE))),
        RenderMode::MedialNormalRgb => t.medial_normal.map(|n| normal_rgb(&n)),
        RenderMode::AnalyticalNormalRgb => analytical().map(|n| normal_rgb(&n)),
        RenderMode::MeanCurvature => {
            let s = curvature(t, f)?;
            Some(rgb(diverging(s.mean_curvature / CURVATURE_RANGE)))
        }
        RenderMode::Translucency => {
            let n = normal?;
            let r = t.atom?.radius;
            let base = ALBEDO * diffuse(&n, &light.to_light);
            let k = TRANSLUCENT * translucency_coeff(r, &n, &light.view, &light.transmitted, &cfg.translucency);
            Some(rgb(TRANSLUCENT_TINT.map(|c| base + k * c)))
        }
        RenderMode::Ward => {
            let n = normal?;
            let s = curvature(t, f)?;
            let to_viewer = -light.view;
            let spec = ward_coeff(&n, &s.v1, &s.v2, &to_viewer, &light.to_light, &cfg.ward);
            let v = ALBEDO * diffuse(&n, &light.to_light) + SPECULAR * spec * n.dot(&light.to_light).max(0.0);
            Some(rgb([v, v, v]))
        }
    }
}

fn orient(n: Vec3, view: &Vec3) -> Vec3 {
    if n.dot(view) > 0.0 {
        -n
    } else {
        n
    }
}

fn curvature(t: &Trace, f: Option<&DifferentialFrame>) -> Option<crate::raycast::ShapeOperator> {
    let n = t.medial_normal?;
    let j = f?.normal_jacobian?;
    shape_operator(&n, &j).ok().filter(|s| s.mean_curvature.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::MedialAtom;

    fn sphere() -> Field<'static> {
        Field::FixedAtoms(vec![MedialAtom::new(Vec3::zeros(), 0.5)])
    }

    fn small(mode_light: Option<[f64; 3]>) -> RenderConfig {
        RenderConfig {
            width: 33,
            height: 33,
            light: mode_light,
            ..RenderConfig::default()
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in RenderMode::ALL {
            assert_eq!(m.name().parse::<RenderMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
        assert!("phong".parse::<RenderMode>().is_err());
    }

    #[test]
    fn headlight_peaks_at_the_center() {
        let cfg = small(None);
        let cam = camera(&cfg).unwrap();
        let img = render(&sphere(), &cam, RenderMode::Lambertian, &cfg).unwrap().image;
        let (mut best, mut at) = (0, (0, 0));
        for r in 0..33 {
            for c in 0..33 {
                let v = img.get(r, c)[0];
                if v > best {
                    (best, at) = (v, (r, c));
                }
            }
        }
        assert_eq!(img.get(16, 16)[0], best, "brightest at {at:?}");
    }

    #[test]
    fn exact_sphere_radius_is_flat() {
        let cfg = small(None);
        let cam = camera(&cfg).unwrap();
        let out = render(&sphere(), &cam, RenderMode::MedialRadius, &cfg).unwrap();
        let hits: Vec<_> = out.image.pixels.iter().filter(|p| **p != BACKGROUND).collect();
        assert!(hits.len() > 100);
        assert!(hits.iter().all(|p| *p == hits[0]));
    }

    #[test]
    fn every_mode_renders_the_sphere_cleanly() {
        let cfg = small(Some([0.3, 0.5, 0.8]));
        let cam = camera(&cfg).unwrap();
        for m in RenderMode::ALL {
            let out = render(&sphere(), &cam, m, &cfg).unwrap();
            assert_eq!(out.stats.hit + out.stats.miss, 33 * 33);
            assert_eq!(out.stats.degenerate, 0, "{m}");
        }
    }

    #[test]
    fn translucency_examples() {
        let p = TranslucencyParams::default();
        let q = Vec3::z();
        // q̂·(s n̂ − l̂) = 1 with n̂ ⊥ q̂ and l̂ = −q̂.
        let v = translucency_coeff(0.2, &Vec3::x(), &q, &(-q), &p);
        assert!((v - 4.0).abs() < 1e-12);
        assert_eq!(translucency_coeff(0.2, &Vec3::x(), &q, &q, &p), 0.0);
        let mut last = f64::INFINITY;
        for r in [0.05, 0.1, 0.3, 0.9] {
            let v = translucency_coeff(r, &Vec3::z(), &q, &(-q), &p);
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn ward_examples() {
        let a = 0.2;
        let p = WardParams { a1: a, a2: a };
        let n = Vec3::z();
        let v = ward_coeff(&n, &Vec3::x(), &Vec3::y(), &n, &n, &p);
        assert!((v - 1.0 / (4.0 * std::f64::consts::PI * a * a)).abs() < 1e-12);

        let p = WardParams { a1: 0.05, a2: 0.3 };
        let swapped = WardParams { a1: 0.3, a2: 0.05 };
        let q = Vec3::new(0.3, -0.2, 1.0).normalize();
        let l = Vec3::new(-0.1, 0.4, 1.0).normalize();
        let (v1, v2) = (Vec3::new(1.0, 1.0, 0.0).normalize(), Vec3::new(-1.0, 1.0, 0.0).normalize());
        let x = ward_coeff(&n, &v1, &v2, &q, &l, &p);
        let y = ward_coeff(&n, &v2, &v1, &q, &l, &swapped);
        assert!((x - y).abs() < 1e-12 * x.abs().max(1.0));

        let grazing = Vec3::new(1.0, 0.0, 2e-4).normalize();
        let below = Vec3::new(1.0, 0.0, 5e-5).normalize();
        let edge = ward_coeff(&n, &v1, &v2, &n, &grazing, &p);
        assert!(edge.is_finite() && edge > 0.0);
        assert_eq!(ward_coeff(&n, &v1, &v2, &n, &below, &p), 0.0);
    }

    #[test]
    fn orbit_turns_about_up() {
        let d = orbit_directions(Vec3::new(1.0, 0.0, 0.0), Vec3::y(), 8);
        assert_eq!(d.len(), 8);
        assert!((d[2] - Vec3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        for w in d.windows(2) {
            assert!((w[0].angle(&w[1]) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::new(3, 2, [1, 2, 3]);
        img.pixels[4] = [200, 100, 0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        img.write_ppm(&p).unwrap();
        assert!(img.to_ppm().starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Image::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn parallel_up_is_rejected() {
        let cfg = RenderConfig {
            direction: [0.0, 2.0, 0.0],
            ..RenderConfig::default()
        };
        assert!(camera(&cfg).is_err());
    }

    #[test]
    fn latent_path_ends() {
        let p = latent_path(&[0.0, 2.0], &[1.0, 0.0], 5);
        assert_eq!(p.len(), 5);
        assert_eq!(p[0], vec![0.0, 2.0]);
        assert_eq!(p[4], vec![1.0, 0.0]);
        assert_eq!(p[2], vec![0.5, 1.0]);
    }
}
