//! Run configuration: one JSON document with a section per stage, plus the
//! `paper` and `desk` presets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{MarfError, Result};
use crate::loss::LossConfig;
use crate::network::NetworkConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub views: usize,
    pub resolution: usize,
    pub stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            views: 50,
            resolution: 200,
            stride: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub viewpoints: usize,
    pub ray_budget: usize,
    /// True-positive hit points sampled per side for CD and COS.
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            viewpoints: 4000,
            ray_budget: 100_000,
            samples: 30_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TranslucencyParams {
    pub epsilon: f64,
    pub distortion: f64,
    pub sharpness: f64,
}

impl Default for TranslucencyParams {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            distortion: 0.08,
            sharpness: 16.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WardParams {
    pub a1: f64,
    pub a2: f64,
}

impl Default for WardParams {
    fn default() -> Self {
        Self { a1: 0.05, a2: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Viewing direction (camera looks along it).
    pub direction: [f64; 3],
    pub up: [f64; 3],
    /// Direction from the surface towards the light; `None` uses a headlight.
    pub light: Option<[f64; 3]>,
    pub translucency: TranslucencyParams,
    pub ward: WardParams,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            direction: [-0.5, -0.4, -0.7],
            up: [0.0, 1.0, 0.0],
            light: None,
            translucency: TranslucencyParams::default(),
            ward: WardParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::paper()
    }
}

pub const PRESETS: [&str; 2] = ["paper", "desk"];

/// Epochs of the desk preset.
pub const DESK_EPOCHS: usize = 50;

impl RunConfig {
    /// The full-scale hyperparameters.
    pub fn paper() -> Self {
        Self {
            network: NetworkConfig::paper(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            render: RenderConfig::default(),
        }
    }

    /// CPU-sized substitute: a 4×128 network with 8 atoms on 64² maps from
    /// 20 views, with every epoch-based schedule compressed to the shorter run.
    /// Dropout is off and the cosine tail decays further, since a short run
    /// has no time to average out the noise either adds to the radii.
    pub fn desk() -> Self {
        let epochs = DESK_EPOCHS;
        let hold = (epochs * 3).div_ceil(20);
        let mut loss = LossConfig::default();
        loss.weights = loss.weights.time_scaled(epochs as f64 / 200.0);
        Self {
            network: NetworkConfig {
                dropout_rate: 0.0,
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                epochs,
                final_lr: 1e-5,
                hold_epochs: hold,
                decay_epochs: epochs - hold,
                batch_size: 2,
                ..TrainConfig::default()
            },
            data: DataConfig {
                views: 20,
                resolution: 64,
                stride: 2,
            },
            loss,
            eval: EvalConfig {
                viewpoints: 200,
                ray_budget: 10_000,
                samples: 3000,
                seed: 0,
            },
            render: RenderConfig {
                width: 128,
                height: 128,
                ..RenderConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            _ => Err(MarfError::InvalidInput(format!(
                "unknown preset {name:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    /// Overlays a partial JSON document on `self`. Unknown keys are rejected.
    pub fn merged(&self, overrides: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, overrides);
        let out: Self = serde_json::from_value(base).map_err(|e| MarfError::InvalidInput(format!("config: {e}")))?;
        out.validate()?;
        Ok(out)
    }

    /// Reads a config file. A top-level `"preset"` key selects the base.
    pub fn from_file(path: &Path, default_preset: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut v: Value =
            serde_json::from_str(&text).map_err(|e| MarfError::Format(format!("{}: {e}", path.display())))?;
        let preset = match v.as_object_mut().and_then(|o| o.remove("preset")) {
            Some(Value::String(s)) => s,
            Some(_) => return Err(MarfError::InvalidInput("\"preset\" must be a string".into())),
            None => default_preset.to_string(),
        };
        Self::preset(&preset)?.merged(&v)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if self.data.views == 0 || self.data.resolution == 0 || self.data.stride == 0 {
            return Err(MarfError::InvalidInput("data views, resolution and stride must be positive".into()));
        }
        if self.data.stride > self.data.resolution {
            return Err(MarfError::InvalidInput("stride exceeds resolution".into()));
        }
        if self.eval.viewpoints < 2 || self.eval.ray_budget == 0 {
            return Err(MarfError::InvalidInput("eval needs at least 2 viewpoints and a positive ray budget".into()));
        }
        if self.render.width == 0 || self.render.height == 0 {
            return Err(MarfError::InvalidInput("render size must be positive".into()));
        }
        let t = &self.render.translucency;
        if !(t.epsilon > 0.0 && t.sharpness >= 1.0) {
            return Err(MarfError::InvalidInput("translucency needs epsilon > 0 and sharpness >= 1".into()));
        }
        if !(self.render.ward.a1 > 0.0 && self.render.ward.a2 > 0.0) {
            return Err(MarfError::InvalidInput("ward roughness must be positive".into()));
        }
        let lw = self.loss.weights.clone();
        for e in 0..=self.train.epochs.max(1) {
            if lw.at(e as f64).iter().any(|&w| !(w >= 0.0)) {
                return Err(MarfError::InvalidInput(format!("negative loss weight at epoch {e}")));
            }
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() && !is_schedule(v) => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Schedules are replaced whole rather than merged key by key.
fn is_schedule(v: &Value) -> bool {
    v.as_object().is_some_and(|o| {
        o.len() == 1 && o.keys().all(|k| ["constant", "linear", "sinusoidal", "affine"].contains(&k.as_str()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn presets_validate() {
        for p in PRESETS {
            RunConfig::preset(p).unwrap().validate().unwrap();
        }
        let d = RunConfig::desk();
        assert_eq!((d.network.hidden_layers, d.network.width, d.network.n_atoms), (4, 128, 8));
        assert_eq!((d.data.views, d.data.resolution), (20, 64));
        let p = RunConfig::paper();
        assert_eq!((p.network.hidden_layers, p.network.width), (8, 512));
        assert_eq!(p.train.epochs, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let d = RunConfig::desk();
        assert!(d.merged(&json!({"train": {"epochz": 3}})).is_err());
        assert!(d.merged(&json!({"bogus": {}})).is_err());
    }

    #[test]
    fn partial_overrides_keep_the_rest() {
        let d = RunConfig::desk();
        let m = d
            .merged(&json!({"train": {"seed": 7}, "loss": {"weights": {"mv": {"constant": 0.0}}}}))
            .unwrap();
        assert_eq!(m.train.seed, 7);
        assert_eq!(m.train.epochs, d.train.epochs);
        assert_eq!(m.loss.weights.mv, crate::loss::Schedule::Constant(0.0));
        assert_eq!(m.loss.weights.p, d.loss.weights.p);
    }

    #[test]
    fn json_round_trip() {
        let d = RunConfig::desk();
        let s = serde_json::to_string(&d).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), d);
    }
}
