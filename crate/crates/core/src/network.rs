//! The ray-to-atoms MLP and its PRIF-style baseline head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape, Tensor, Var};
use crate::error::{MarfError, Result};
use crate::geometry::{CanonicalRay, MedialAtom, Vec3};

/// Width of the ray embedding `(q̂, m, o⊥)`.
pub const RAY_DIM: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Marf,
    Prif,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub hidden_layers: usize,
    pub width: usize,
    pub n_atoms: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
    pub latent_dim: usize,
    pub head: Head,
    /// Small final weights plus atoms spread on a sphere in the final bias.
    /// Turning this off leaves the final layer at the plain fan-in init.
    pub principled_init: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 4,
            width: 128,
            n_atoms: 8,
            leaky_slope: 0.01,
            dropout_rate: 0.01,
            latent_dim: 0,
            head: Head::Marf,
            principled_init: true,
        }
    }
}

impl NetworkConfig {
    pub fn paper() -> Self {
        Self {
            hidden_layers: 8,
            width: 512,
            n_atoms: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers < 2 || self.hidden_layers % 2 != 0 {
            return Err(MarfError::InvalidInput(format!(
                "hidden_layers must be even and at least 2, got {}",
                self.hidden_layers
            )));
        }
        if self.width == 0 || self.n_atoms == 0 {
            return Err(MarfError::InvalidInput("width and n_atoms must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(MarfError::InvalidInput(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.leaky_slope.is_finite()) {
            return Err(MarfError::InvalidInput("leaky_slope must be finite".into()));
        }
        Ok(())
    }

    /// Hidden layers that re-read the ray embedding (and latent).
    pub fn is_skip_layer(&self, i: usize) -> bool {
        i == self.hidden_layers / 2 || i + 1 == self.hidden_layers
    }

    pub fn hidden_input_dim(&self, i: usize) -> usize {
        if i == 0 {
            RAY_DIM + self.latent_dim
        } else if self.is_skip_layer(i) {
            self.width + RAY_DIM + self.latent_dim
        } else {
            self.width
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            Head::Marf => 4 * self.n_atoms,
            Head::Prif => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
    Norm,
    Latent,
}

/// All trainable tensors. The latent table is always the last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub names: Vec<String>,
    pub kinds: Vec<ParamKind>,
    pub tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn latent_index(&self) -> usize {
        self.tensors.len() - 1
    }

    pub fn latents(&self) -> &Tensor {
        &self.tensors[self.latent_index()]
    }

    pub fn num_shapes(&self) -> usize {
        self.latents().nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Final-layer weight, useful for tests that isolate the bias atoms.
    pub fn output_weight_mut(&mut self) -> &mut Tensor {
        let i = 4 * self.config.hidden_layers;
        &mut self.tensors[i]
    }

    pub fn output_bias(&self) -> &Tensor {
        &self.tensors[4 * self.config.hidden_layers + 1]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Places every tensor on the tape. Parameters are differentiable leaves
    /// when `trainable`, constants otherwise.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Forward pass for a single ray, no dropout.
    pub fn forward(&self, ray: &CanonicalRay, latent: Option<&[f64]>) -> Result<Vec<MedialAtom>> {
        if self.config.head != Head::Marf {
            return Err(MarfError::InvalidInput("forward needs a MARF head".into()));
        }
        Ok(self.predict_atoms(&[*ray], latent)?.remove(0))
    }

    /// Batched inference of atom candidates.
    pub fn predict_atoms(
        &self,
        rays: &[CanonicalRay],
        latent: Option<&[f64]>,
    ) -> Result<Vec<Vec<MedialAtom>>> {
        let raw = self.predict_raw(rays, latent)?;
        let n = self.config.n_atoms;
        Ok(raw
            .outer_iter()
            .map(|row| {
                (0..n)
                    .map(|i| {
                        MedialAtom::new(
                            Vec3::new(row[4 * i], row[4 * i + 1], row[4 * i + 2]),
                            row[4 * i + 3].abs(),
                        )
                    })
                    .collect()
            })
            .collect())
    }

    /// Batched raw network output (`rays × output_dim`), no dropout.
    pub fn predict_raw(&self, rays: &[CanonicalRay], latent: Option<&[f64]>) -> Result<Tensor> {
        self.check_latent(latent)?;
        let mut out = Tensor::zeros((rays.len(), self.config.output_dim()));
        for (chunk_idx, chunk) in rays.chunks(INFERENCE_CHUNK).enumerate() {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(embed_rays(chunk));
            let z = latent.map(|z| {
                let row = Tensor::from_shape_fn((chunk.len(), z.len()), |(_, j)| z[j]);
                tape.constant(row)
            });
            let y = forward_dual(&mut tape, self, &bound, &Dual::constant(x, 0), z, None)?;
            let start = chunk_idx * INFERENCE_CHUNK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(tape.value(y.p));
        }
        Ok(out)
    }

    /// PRIF head: signed displacement from the perpendicular foot and hit logit.
    pub fn prif_forward(&self, ray: &CanonicalRay, latent: Option<&[f64]>) -> Result<(f64, f64)> {
        if self.config.head != Head::Prif {
            return Err(MarfError::InvalidInput("prif_forward needs a PRIF head".into()));
        }
        let raw = self.predict_raw(&[*ray], latent)?;
        Ok((raw[[0, 0]], raw[[0, 1]]))
    }

    pub fn check_latent(&self, latent: Option<&[f64]>) -> Result<()> {
        match (self.config.latent_dim, latent) {
            (0, None) => Ok(()),
            (0, Some(_)) => Err(MarfError::InvalidInput(
                "latent given to an unconditioned network".into(),
            )),
            (_, None) => Err(MarfError::InvalidInput(
                "conditioned network needs a latent vector".into(),
            )),
            (d, Some(z)) if z.len() != d => Err(MarfError::InvalidInput(format!(
                "latent has {} entries, network expects {d}",
                z.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Latent row of a training shape.
    pub fn latent_of(&self, shape: usize) -> Option<Vec<f64>> {
        if self.config.latent_dim == 0 {
            return None;
        }
        Some(self.latents().row(shape).to_vec())
    }
}

const INFERENCE_CHUNK: usize = 4096;

/// Tape handles of every tensor in [`NetworkParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn latents(&self) -> Var {
        *self.vars.last().expect("bound params")
    }
}

/// PRIF head point from displacement: `o⊥ + t q̂`.
pub fn prif_point(ray: &CanonicalRay, t: f64) -> Vec3 {
    ray.foot + ray.q_hat * t
}

/// Row-per-ray embedding matrix.
pub fn embed_rays(rays: &[CanonicalRay]) -> Tensor {
    let mut x = Tensor::zeros((rays.len(), RAY_DIM));
    for (mut row, r) in x.outer_iter_mut().zip(rays) {
        for (dst, v) in row.iter_mut().zip(r.to_array()) {
            *dst = v;
        }
    }
    x
}

/// Differentiable embedding `(q, o × q, q × (o × q))`. Directions are used as
/// given, so tangents along `q` are taken on the raw 3-vector.
pub fn embed_dual(tape: &mut Tape, q: &Dual, o: &Dual) -> Dual {
    let m = tape.d_cross(o, q);
    let foot = tape.d_cross(q, &m);
    tape.d_concat_cols(&[q, &m, &foot])
}

/// Bernoulli keep-masks, scaled by `1 / (1 - p)`, one per hidden layer.
pub fn sample_dropout_masks(config: &NetworkConfig, rows: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let p = config.dropout_rate;
    let keep = 1.0 / (1.0 - p);
    (0..config.hidden_layers)
        .map(|_| {
            Tensor::from_shape_fn((rows, config.width), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            })
        })
        .collect()
}

thread_local! {
    static FORWARD_ROWS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Rays pushed through the network on the current thread so far.
pub fn forward_rows() -> u64 {
    FORWARD_ROWS.with(|c| c.get())
}

/// Raw network output for a batch of embedded rays.
///
/// `latent` holds one latent row per input row. `masks`, when given, are
/// constant dropout multipliers per hidden layer.
pub fn forward_dual(
    tape: &mut Tape,
    params: &NetworkParams,
    bound: &Bound,
    x: &Dual,
    latent: Option<Var>,
    masks: Option<&[Var]>,
) -> Result<Dual> {
    let cfg = &params.config;
    let (rows, cols) = tape.shape(x.p);
    FORWARD_ROWS.with(|c| c.set(c.get() + rows as u64));
    if cols != RAY_DIM {
        return Err(MarfError::InvalidInput(format!(
            "ray embedding must have {RAY_DIM} columns, got {cols}"
        )));
    }
    let z = match (cfg.latent_dim, latent) {
        (0, None) => None,
        (d, Some(z)) if d > 0 && tape.shape(z) == (rows, d) => {
            Some(Dual::constant(z, x.channels()))
        }
        _ => {
            return Err(MarfError::InvalidInput(format!(
                "latent input does not match latent_dim {}",
                cfg.latent_dim
            )))
        }
    };
    if let Some(m) = masks {
        if m.len() != cfg.hidden_layers {
            return Err(MarfError::InvalidInput("one dropout mask per hidden layer".into()));
        }
    }
    let with_skip = |tape: &mut Tape, h: &Dual| match &z {
        Some(z) => tape.d_concat_cols(&[h, x, z]),
        None => tape.d_concat_cols(&[h, x]),
    };
    let mut h = match &z {
        Some(z) => tape.d_concat_cols(&[x, z]),
        None => x.clone(),
    };
    for i in 0..cfg.hidden_layers {
        if i > 0 && cfg.is_skip_layer(i) {
            h = with_skip(tape, &h);
        }
        let [w, b, g, o] = [0, 1, 2, 3].map(|k| bound.vars[4 * i + k]);
        let a = tape.d_linear(&h, w, Some(b));
        let a = tape.d_layer_norm(&a);
        let a = tape.d_mul_row(&a, g);
        let a = tape.d_add_row(&a, o);
        let mut a = tape.d_leaky_relu(&a, cfg.leaky_slope);
        if let Some(m) = masks {
            a = tape.d_mul_const(&a, m[i]);
        }
        h = a;
    }
    let h = tape.d_concat_cols(&[&h, x]);
    let k = 4 * cfg.hidden_layers;
    Ok(tape.d_linear(&h, bound.vars[k], Some(bound.vars[k + 1])))
}

/// Splits a raw MARF output (`B × 4n`) into centers (`Bn × 3`) and radii
/// (`Bn × 1`, absolute value applied). Row `b n + i` is atom `i` of ray `b`.
pub fn split_atoms(tape: &mut Tape, raw: &Dual, n_atoms: usize) -> (Dual, Dual) {
    let rows = tape.shape(raw.p).0;
    let per_atom = tape.d_reshape(raw, rows * n_atoms, 4);
    let centers = tape.d_slice_cols(&per_atom, 0, 3);
    let r = tape.d_slice_cols(&per_atom, 3, 1);
    let radii = tape.d_abs(&r);
    (centers, radii)
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Fan-in uniform initialization for rectifier networks.
fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, slope: f64) -> Tensor {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let bound = gain * (3.0 / cols as f64).sqrt();
    uniform(rng, rows, cols, bound)
}

/// Default medial atom centers: uniform on the sphere of radius 0.6.
pub const BIAS_ATOM_DISTANCE: f64 = 0.6;
pub const BIAS_ATOM_RADIUS: f64 = 0.1;
pub const LATENT_INIT_STD: f64 = 0.01;

pub fn init_params(config: &NetworkConfig, num_shapes: usize, seed: u64) -> Result<NetworkParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, kind: ParamKind, t: Tensor| {
        names.push(name);
        kinds.push(kind);
        tensors.push(t);
    };
    for i in 0..config.hidden_layers {
        let fan_in = config.hidden_input_dim(i);
        let w = he_uniform(&mut rng, config.width, fan_in, config.leaky_slope);
        let b = uniform(&mut rng, 1, config.width, 1.0 / (fan_in as f64).sqrt());
        push(format!("hidden{i}.weight"), ParamKind::Weight, w);
        push(format!("hidden{i}.bias"), ParamKind::Bias, b);
        push(format!("hidden{i}.gain"), ParamKind::Norm, Tensor::ones((1, config.width)));
        push(format!("hidden{i}.offset"), ParamKind::Norm, Tensor::zeros((1, config.width)));
    }
    let fan_in = config.width + RAY_DIM;
    let out = config.output_dim();
    let mut w = he_uniform(&mut rng, out, fan_in, config.leaky_slope);
    let mut b = uniform(&mut rng, 1, out, 1.0 / (fan_in as f64).sqrt());
    if config.head == Head::Marf && config.principled_init {
        w *= 0.05;
        for i in 0..config.n_atoms {
            let dir = loop {
                let v = Vec3::new(
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                    StandardNormal.sample(&mut rng),
                );
                let n = v.norm();
                if n > 1e-9 {
                    break v / n;
                }
            };
            let c = dir * BIAS_ATOM_DISTANCE;
            b[[0, 4 * i]] = c.x;
            b[[0, 4 * i + 1]] = c.y;
            b[[0, 4 * i + 2]] = c.z;
            b[[0, 4 * i + 3]] = BIAS_ATOM_RADIUS;
        }
    }
    push("out.weight".into(), ParamKind::Weight, w);
    push("out.bias".into(), ParamKind::Bias, b);
    let normal = Normal::new(0.0, LATENT_INIT_STD).expect("valid std");
    let latents = Tensor::from_shape_fn((num_shapes, config.latent_dim), |_| normal.sample(&mut rng));
    push("latents".into(), ParamKind::Latent, latents);
    Ok(NetworkParams {
        config: config.clone(),
        names,
        kinds,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{canonicalize, Ray};

    fn small() -> NetworkConfig {
        NetworkConfig {
            hidden_layers: 2,
            width: 16,
            n_atoms: 3,
            ..NetworkConfig::default()
        }
    }

    fn random_ray(rng: &mut ChaCha8Rng) -> CanonicalRay {
        let o = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let q = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        canonicalize(&Ray::new(o, q).unwrap()).unwrap()
    }

    #[test]
    fn zero_final_weights_give_bias_atoms() {
        let mut p = init_params(&small(), 1, 4).unwrap();
        p.output_weight_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let atoms = p.forward(&random_ray(&mut rng), None).unwrap();
            for a in atoms {
                assert!((a.center.norm() - 0.6).abs() < 1e-9);
                assert!((a.radius - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&small(), 2, 7).unwrap();
        let b = init_params(&small(), 2, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params(&small(), 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn skip_widths() {
        let cfg = NetworkConfig {
            latent_dim: 5,
            ..NetworkConfig::default()
        };
        let p = init_params(&cfg, 3, 0).unwrap();
        assert_eq!(p.tensors[0].dim(), (128, 9 + 5));
        assert_eq!(p.tensors[4].dim(), (128, 128));
        assert_eq!(p.tensors[8].dim(), (128, 128 + 9 + 5));
        assert_eq!(p.tensors[12].dim(), (128, 128 + 9 + 5));
        assert_eq!(p.tensors[16].dim(), (32, 128 + 9));
        assert_eq!(p.latents().dim(), (3, 5));
    }

    #[test]
    fn latent_mismatch_is_rejected() {
        let cfg = NetworkConfig {
            latent_dim: 2,
            ..small()
        };
        let p = init_params(&cfg, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_ray(&mut rng);
        assert!(p.forward(&r, None).is_err());
        assert!(p.forward(&r, Some(&[0.0])).is_err());
        assert!(p.forward(&r, Some(&[0.0, 0.1])).is_ok());
    }

    #[test]
    fn odd_depth_is_rejected() {
        let cfg = NetworkConfig {
            hidden_layers: 3,
            ..small()
        };
        assert!(init_params(&cfg, 1, 0).is_err());
    }

    #[test]
    fn prif_head_shape() {
        let cfg = NetworkConfig {
            head: Head::Prif,
            ..small()
        };
        let p = init_params(&cfg, 1, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random_ray(&mut rng);
        let (t, logit) = p.prif_forward(&r, None).unwrap();
        assert!(t.is_finite() && logit.is_finite());
        assert_eq!(prif_point(&r, 0.0), r.foot);
        assert!(p.forward(&r, None).is_err());
    }
}
