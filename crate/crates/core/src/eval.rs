//! Reconstruction metrics and the chord-ray evaluation protocol.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{sample_views, KdTree, ShapeSource};
use crate::error::{MarfError, Result};
use crate::geometry::{Ray, Vec3};
use crate::raycast::{differential, trace, Field};
use crate::rng::stream;

/// Rays along chords between viewpoints on the unit sphere.
///
/// Pairs are drawn uniformly without replacement until `budget` is reached
/// (all pairs when fewer exist); each chord gets a random orientation.
pub fn protocol_rays(viewpoints: usize, budget: usize, seed: u64) -> Vec<Ray> {
    let pts = sample_views(viewpoints);
    let v = pts.len();
    if v < 2 {
        return Vec::new();
    }
    let pairs = v * (v - 1) / 2;
    let mut rng = stream(seed, &[viewpoints as u64, budget as u64], "protocol");
    let chosen: Vec<usize> = if budget >= pairs {
        (0..pairs).collect()
    } else {
        let mut idx = index::sample(&mut rng, pairs, budget).into_vec();
        idx.sort_unstable();
        idx
    };
    chosen
        .into_iter()
        .map(|k| {
            let (i, j) = unrank_pair(k, v);
            let (a, b) = if rng.random::<bool>() { (i, j) } else { (j, i) };
            Ray {
                origin: pts[a],
                direction: (pts[b] - pts[a]).normalize(),
            }
        })
        .collect()
}

/// `k`-th pair `(i, j)`, `i < j`, in row-major order of the upper triangle.
fn unrank_pair(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    while k >= n - 1 - i {
        k -= n - 1 - i;
        i += 1;
    }
    (i, i + 1 + k)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_hits(pred: &[bool], gt: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Empty denominators (nothing predicted or nothing to find) count as
    /// perfect agreement only when the other side is empty too.
    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    pub fn iou(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp + self.fn_)
    }
}

/// `(precision, recall, IoU)` of predicted against true hit sets.
pub fn classification_metrics(pred: &[bool], gt: &[bool]) -> (f64, f64, f64) {
    let c = Confusion::from_hits(pred, gt);
    (c.precision(), c.recall(), c.iou())
}

fn mean_nn_distance(from: &[Vec3], to: &KdTree) -> f64 {
    let sum: f64 = from
        .par_iter()
        .map(|p| to.nearest(p).expect("non-empty").1)
        .collect::<Vec<_>>()
        .iter()
        .sum();
    sum / from.len() as f64
}

/// Mean nearest-neighbour distance U→V plus V→U.
pub fn chamfer(u: &[Vec3], v: &[Vec3]) -> Result<f64> {
    if u.is_empty() || v.is_empty() {
        return Err(MarfError::InvalidInput("chamfer distance of an empty cloud".into()));
    }
    Ok(mean_nn_distance(u, &KdTree::new(v)) + mean_nn_distance(v, &KdTree::new(u)))
}

pub fn chamfer_brute_force(u: &[Vec3], v: &[Vec3]) -> f64 {
    let one = |a: &[Vec3], b: &[Vec3]| {
        a.iter()
            .map(|p| b.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    one(u, v) + one(v, u)
}

fn mean_nn_cosine(from: &[Vec3], from_n: &[Vec3], to: &KdTree, to_n: &[Vec3]) -> f64 {
    let parts: Vec<f64> = from
        .par_iter()
        .zip(from_n)
        .map(|(p, n)| n.dot(&to_n[to.nearest(p).expect("non-empty").0]))
        .collect();
    parts.iter().sum::<f64>() / from.len() as f64
}

/// Two-directional nearest-neighbour normal agreement: `(sum / 2, sum)`.
pub fn cosine_metric(u: &[Vec3], un: &[Vec3], v: &[Vec3], vn: &[Vec3]) -> Result<(f64, f64)> {
    if u.is_empty() || v.is_empty() || u.len() != un.len() || v.len() != vn.len() {
        return Err(MarfError::InvalidInput("cosine metric needs non-empty clouds with one normal per point".into()));
    }
    let raw = mean_nn_cosine(u, un, &KdTree::new(v), vn) + mean_nn_cosine(v, vn, &KdTree::new(u), un);
    Ok((raw / 2.0, raw))
}

pub fn cosine_brute_force(u: &[Vec3], un: &[Vec3], v: &[Vec3], vn: &[Vec3]) -> f64 {
    let one = |a: &[Vec3], an: &[Vec3], b: &[Vec3], bn: &[Vec3]| {
        a.iter()
            .zip(an)
            .map(|(p, n)| {
                let j = (0..b.len())
                    .min_by(|&x, &y| (p - b[x]).norm().total_cmp(&(p - b[y]).norm()))
                    .expect("non-empty");
                n.dot(&bn[j])
            })
            .sum::<f64>()
            / a.len() as f64
    };
    (one(u, un, v, vn) + one(v, vn, u, un)) / 2.0
}

/// Hits, points and normals of one side of an evaluation.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub hit: Vec<bool>,
    pub points: Vec<Vec3>,
    /// Normals from the winning atom (medial fields).
    pub medial_normals: Option<Vec<Option<Vec3>>>,
    /// Normals from origin derivatives of the hit point.
    pub analytical_normals: Vec<Option<Vec3>>,
}

/// Ground truth from the shape's exact caster.
pub fn predict_oracle(shape: &ShapeSource, rays: &[Ray]) -> Predictions {
    let hits: Vec<_> = rays.par_iter().map(|r| shape.cast(&r.origin, &r.direction)).collect();
    Predictions {
        hit: hits.iter().map(|h| h.is_some()).collect(),
        points: hits.iter().map(|h| h.map(|h| h.point).unwrap_or_default()).collect(),
        medial_normals: None,
        analytical_normals: hits.iter().map(|h| h.map(|h| h.normal)).collect(),
    }
}

const EVAL_CHUNK: usize = 2048;

pub fn predict_field(field: &Field, rays: &[Ray]) -> Result<Predictions> {
    let parts: Vec<Result<(Vec<_>, Vec<_>)>> = rays
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| Ok((trace(field, chunk)?, differential(field, chunk)?)))
        .collect();
    let mut out = Predictions {
        medial_normals: field.is_medial().then(Vec::new),
        ..Predictions::default()
    };
    for part in parts {
        let (traces, frames) = part?;
        for (t, f) in traces.into_iter().zip(frames) {
            out.hit.push(t.hit);
            out.points.push(t.point);
            if let Some(m) = out.medial_normals.as_mut() {
                m.push(t.medial_normal);
            }
            out.analytical_normals.push(f.and_then(|f| f.analytical_normal));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub cd: f64,
    /// Analytical-normal COS in `[-1, 1]`.
    pub cos: f64,
    /// Unhalved two-directional sum behind `cos`.
    pub cos_raw: f64,
    /// Medial-normal COS (medial fields only).
    pub cos_medial: Option<f64>,
    pub cos_medial_raw: Option<f64>,
    pub rays: usize,
    pub samples: usize,
    /// True positives whose analytical normal was degenerate and left out of `cos`.
    pub degenerate_normals: usize,
    pub seed: u64,
    pub notes: Vec<String>,
}

/// Compares predictions with ground truth on the same rays.
pub fn score(pred: &Predictions, gt: &Predictions, samples: usize, seed: u64) -> Result<EvalReport> {
    if pred.hit.len() != gt.hit.len() {
        return Err(MarfError::InvalidInput("prediction and ground truth cover different rays".into()));
    }
    let c = Confusion::from_hits(&pred.hit, &gt.hit);
    let mut notes = Vec::new();
    let mut tp: Vec<usize> = (0..pred.hit.len()).filter(|&i| pred.hit[i] && gt.hit[i]).collect();
    if tp.len() < samples {
        notes.push(format!("only {} true-positive hits for a budget of {samples}; using all", tp.len()));
    } else {
        tp.shuffle(&mut stream(seed, &[], "tp-sample"));
        tp.truncate(samples);
        tp.sort_unstable();
    }
    let (mut cd, mut cos, mut cos_raw) = (f64::NAN, f64::NAN, f64::NAN);
    let (mut cos_medial, mut cos_medial_raw) = (None, None);
    let mut degenerate = 0;
    if tp.is_empty() {
        notes.push("no true-positive hits; CD and COS undefined".into());
    } else {
        let u: Vec<Vec3> = tp.iter().map(|&i| pred.points[i]).collect();
        let v: Vec<Vec3> = tp.iter().map(|&i| gt.points[i]).collect();
        let vn: Vec<Vec3> = tp.iter().map(|&i| gt.analytical_normals[i].unwrap_or_default()).collect();
        cd = chamfer(&u, &v)?;
        let ok: Vec<usize> = (0..tp.len()).filter(|&k| pred.analytical_normals[tp[k]].is_some()).collect();
        degenerate = tp.len() - ok.len();
        if !ok.is_empty() {
            let ua: Vec<Vec3> = ok.iter().map(|&k| u[k]).collect();
            let uan: Vec<Vec3> = ok.iter().map(|&k| pred.analytical_normals[tp[k]].expect("filtered")).collect();
            (cos, cos_raw) = cosine_metric(&ua, &uan, &v, &vn)?;
        }
        if let Some(m) = &pred.medial_normals {
            let ok: Vec<usize> = (0..tp.len()).filter(|&k| m[tp[k]].is_some()).collect();
            if !ok.is_empty() {
                let um: Vec<Vec3> = ok.iter().map(|&k| u[k]).collect();
                let umn: Vec<Vec3> = ok.iter().map(|&k| m[tp[k]].expect("filtered")).collect();
                let (a, b) = cosine_metric(&um, &umn, &v, &vn)?;
                cos_medial = Some(a);
                cos_medial_raw = Some(b);
            }
        }
    }
    Ok(EvalReport {
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        precision: c.precision(),
        recall: c.recall(),
        iou: c.iou(),
        cd,
        cos,
        cos_raw,
        cos_medial,
        cos_medial_raw,
        rays: pred.hit.len(),
        samples: tp.len(),
        degenerate_normals: degenerate,
        seed,
        notes,
    })
}

/// Runs the chord protocol for a field (or the oracle itself when `field` is `None`).
pub fn evaluate(field: Option<&Field>, shape: &ShapeSource, cfg: &EvalConfig) -> Result<EvalReport> {
    let rays = protocol_rays(cfg.viewpoints, cfg.ray_budget, cfg.seed);
    let gt = predict_oracle(shape, &rays);
    let pred = match field {
        Some(f) => predict_field(f, &rays)?,
        None => gt.clone(),
    };
    score(&pred, &gt, cfg.samples, cfg.seed)
}

pub const RESULTS_HEADER: &str =
    "checkpoint,shape,seed,tp,fp,fn,tn,precision,recall,iou,cd,cos,cos_medial,rays,samples";

/// Appends a report row keyed by `(checkpoint, shape, seed)`.
pub fn append_results(path: &Path, checkpoint: &str, shape: &str, r: &EvalReport) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\""));
    writeln!(
        f,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        quote(checkpoint),
        quote(shape),
        r.seed,
        r.tp,
        r.fp,
        r.fn_,
        r.tn,
        r.precision,
        r.recall,
        r.iou,
        r.cd,
        r.cos,
        r.cos_medial.map(|c| c.to_string()).unwrap_or_default(),
        r.rays,
        r.samples
    )?;
    Ok(())
}
