//! Python bindings: geometry, datasets, training, rendering, evaluation and
//! the gradient check, with structured results returned as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};

use marf::config::RunConfig;
use marf::data::{Dataset, ShapeSource};
use marf::geometry::{canonicalize, intersect_atom, MedialAtom, Ray, Vec3};
use marf::gradcheck::{run_gradcheck, GradcheckConfig};
use marf::raycast::{trace, Field};
use marf::render::{camera_for, render, RenderMode};
use marf::trainer::Trainer;
use marf::MarfError;

fn err(e: MarfError) -> PyErr {
    match e {
        MarfError::InvalidInput(_) => PyValueError::new_err(e.to_string()),
        MarfError::Io(_) | MarfError::Format(_) | MarfError::Json(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::from(a)
}

fn to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => py.None().into_bound(py),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn dict<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Ray/atom intersection: hit flag, point, silhouette distance, normal and `t`.
#[pyfunction]
fn intersect<'py>(
    py: Python<'py>,
    origin: [f64; 3],
    direction: [f64; 3],
    center: [f64; 3],
    radius: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let ray = Ray::new(v3(origin), v3(direction)).map_err(err)?;
    let o = intersect_atom(&ray, &MedialAtom::new(v3(center), radius)).map_err(err)?;
    dict(
        py,
        &serde_json::json!({
            "hit": o.hit,
            "point": [o.hit_point.x, o.hit_point.y, o.hit_point.z],
            "silhouette": o.silhouette,
            "signed_silhouette": o.signed_silhouette,
            "normal": o.medial_normal.map(|n| [n.x, n.y, n.z]),
            "t": o.t,
        }),
    )
}

/// Canonical ray coordinates `(q_hat, moment, foot)`.
#[pyfunction]
fn canonical_ray(origin: [f64; 3], direction: [f64; 3]) -> PyResult<([f64; 3], [f64; 3], [f64; 3])> {
    let c = canonicalize(&Ray::new(v3(origin), v3(direction)).map_err(err)?).map_err(err)?;
    Ok((c.q_hat.into(), c.moment.into(), c.foot.into()))
}

/// Chamfer distance between two point lists.
#[pyfunction]
fn chamfer(u: Vec<[f64; 3]>, v: Vec<[f64; 3]>) -> PyResult<f64> {
    let u: Vec<Vec3> = u.into_iter().map(v3).collect();
    let v: Vec<Vec3> = v.into_iter().map(v3).collect();
    marf::eval::chamfer(&u, &v).map_err(err)
}

/// `(precision, recall, iou)` of two hit masks.
#[pyfunction]
fn classification_metrics(pred: Vec<bool>, gt: Vec<bool>) -> PyResult<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(PyValueError::new_err("masks differ in length"));
    }
    Ok(marf::eval::classification_metrics(&pred, &gt))
}

/// Preset configuration as a dict.
#[pyfunction]
fn preset<'py>(py: Python<'py>, name: &str) -> PyResult<Bound<'py, PyAny>> {
    dict(py, &RunConfig::preset(name).map_err(err)?)
}

/// Loss weights of a preset at an epoch, keyed by term.
#[pyfunction]
#[pyo3(signature = (epoch, preset = "paper"))]
fn loss_weights(epoch: f64, preset: &str) -> PyResult<Vec<(String, f64)>> {
    let w = RunConfig::preset(preset).map_err(err)?.loss.weights.at(epoch);
    Ok(marf::loss::TERM_NAMES.iter().map(|s| s.to_string()).zip(w).collect())
}

/// Learning rate of a preset at an optimizer step within an epoch.
#[pyfunction]
#[pyo3(signature = (step, epoch, preset = "paper"))]
fn lr_at(step: u64, epoch: usize, preset: &str) -> PyResult<f64> {
    Ok(RunConfig::preset(preset).map_err(err)?.train.lr_at(step, epoch))
}

#[pyfunction]
#[pyo3(signature = (seed = 0, terms = None, perturb = 0.0))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, terms: Option<Vec<String>>, perturb: f64) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg = GradcheckConfig {
        seed,
        perturb,
        ..GradcheckConfig::default()
    };
    if let Some(t) = terms {
        cfg.terms = t;
    }
    let report = py.detach(|| run_gradcheck(&cfg)).map_err(err)?;
    dict(py, &report)
}

/// Ground-truth supervision maps.
#[pyclass(name = "Dataset", module = "marf_py")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (shapes, views = 20, resolution = 64, seed = 0))]
    fn generate(py: Python<'_>, shapes: Vec<String>, views: usize, resolution: usize, seed: u64) -> PyResult<Self> {
        let shapes: Vec<ShapeSource> = shapes.iter().map(|s| ShapeSource::parse(s)).collect::<Result<_, _>>().map_err(err)?;
        let inner = py.detach(|| Dataset::generate(&shapes, views, resolution, resolution, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::read(&path).map_err(err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[getter]
    fn shapes(&self) -> Vec<String> {
        self.inner.provenance.shapes.clone()
    }

    #[getter]
    fn views(&self) -> usize {
        self.inner.view_count()
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        (self.inner.width, self.inner.height)
    }
}

/// Training state: network, optimizer moments and counters.
#[pyclass(name = "Trainer", module = "marf_py")]
struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    /// `overrides` is a JSON object merged over the preset.
    #[new]
    #[pyo3(signature = (preset = "desk", overrides = None, num_shapes = 1))]
    fn new(preset: &str, overrides: Option<&str>, num_shapes: usize) -> PyResult<Self> {
        let mut cfg = RunConfig::preset(preset).map_err(err)?;
        if let Some(o) = overrides {
            let v: serde_json::Value = serde_json::from_str(o).map_err(|e| PyValueError::new_err(e.to_string()))?;
            cfg = cfg.merged(&v).map_err(err)?;
        }
        Ok(Self {
            inner: Trainer::new(cfg, num_shapes).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Trainer::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.epoch
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        dict(py, &self.inner.config)
    }

    fn is_done(&self) -> bool {
        self.inner.is_done()
    }

    /// One epoch; returns the mean loss terms, learning rate and timing.
    fn train_epoch<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyAny>> {
        let r = py.detach(|| self.inner.train_epoch(&dataset.inner)).map_err(err)?;
        let terms: serde_json::Map<String, serde_json::Value> = marf::loss::TERM_NAMES
            .iter()
            .zip(r.loss.terms)
            .map(|(k, v)| (k.to_string(), v.into()))
            .collect();
        dict(
            py,
            &serde_json::json!({
                "epoch": r.epoch, "lr": r.lr, "total": r.loss.total,
                "terms": terms, "steps": r.steps, "wall_secs": r.wall_secs,
            }),
        )
    }

    /// Winning atom per ray as `(hit, point, center, radius, winner)`.
    #[pyo3(signature = (origins, directions, shape_id = 0))]
    fn trace(
        &self,
        origins: Vec<[f64; 3]>,
        directions: Vec<[f64; 3]>,
        shape_id: usize,
    ) -> PyResult<Vec<(bool, [f64; 3], Option<([f64; 3], f64)>, usize)>> {
        if origins.len() != directions.len() {
            return Err(PyValueError::new_err("origins and directions differ in length"));
        }
        let rays: Vec<Ray> = origins
            .into_iter()
            .zip(directions)
            .map(|(o, d)| Ray::new(v3(o), v3(d)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let field = Field::from_params(&self.inner.params, self.inner.params.latent_of(shape_id));
        let t = trace(&field, &rays).map_err(err)?;
        Ok(t
            .into_iter()
            .map(|t| (t.hit, t.point.into(), t.atom.map(|a| (a.center.into(), a.radius)), t.winner))
            .collect())
    }

    /// Chord-protocol metrics against an analytic or mesh shape.
    #[pyo3(signature = (shape, shape_id = 0))]
    fn evaluate<'py>(&self, py: Python<'py>, shape: &str, shape_id: usize) -> PyResult<Bound<'py, PyAny>> {
        let shape = ShapeSource::parse(shape).map_err(err)?;
        let params = &self.inner.params;
        let field = Field::from_params(params, params.latent_of(shape_id));
        let cfg = &self.inner.config.eval;
        let report = py.detach(|| marf::eval::evaluate(Some(&field), &shape, cfg)).map_err(err)?;
        dict(py, &report)
    }

    /// Binary PPM bytes and render stats.
    #[pyo3(signature = (mode = "lambertian", width = 128, height = 128, direction = None, shape_id = 0))]
    fn render<'py>(
        &self,
        py: Python<'py>,
        mode: &str,
        width: usize,
        height: usize,
        direction: Option<[f64; 3]>,
        shape_id: usize,
    ) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyAny>)> {
        let mode: RenderMode = mode.parse().map_err(err)?;
        let mut cfg = self.inner.config.render.clone();
        cfg.width = width;
        cfg.height = height;
        if let Some(d) = direction {
            cfg.direction = d;
        }
        let cam = camera_for(v3(cfg.direction), &cfg).map_err(err)?;
        let params = &self.inner.params;
        let field = Field::from_params(params, params.latent_of(shape_id));
        let out = render(&field, &cam, mode, &cfg).map_err(err)?;
        Ok((PyBytes::new(py, &out.image.to_ppm()), dict(py, &out.stats)?))
    }
}

#[pymodule]
fn marf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(intersect, m)?)?;
    m.add_function(wrap_pyfunction!(canonical_ray, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(preset, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weights, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
