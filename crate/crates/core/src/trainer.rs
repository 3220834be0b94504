//! Optimization loop: learning-rate schedule, Adam with decoupled weight
//! decay, gradient clipping, checkpoints and per-epoch metrics.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor};
use crate::config::RunConfig;
use crate::data::{make_batches, Dataset, SubImage};
use crate::error::{MarfError, Result};
use crate::loss::{build_loss, Batch, BatchRandomness, LossBreakdown, TERM_NAMES};
use crate::network::{init_params, sample_dropout_masks, NetworkParams, ParamKind};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs to run. May stop short of `hold_epochs + decay_epochs`, which
    /// leaves the schedule as if the run would continue.
    pub epochs: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub hold_epochs: usize,
    pub final_lr: f64,
    pub decay_epochs: usize,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Sub-images per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            warmup_steps: 100,
            peak_lr: 5e-4,
            hold_epochs: 30,
            final_lr: 1e-4,
            decay_epochs: 170,
            weight_decay: 5e-6,
            grad_clip_norm: 1.0,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hold_epochs + self.decay_epochs < self.epochs {
            return Err(MarfError::InvalidInput(format!(
                "hold_epochs + decay_epochs must cover epochs ({} + {} < {})",
                self.hold_epochs, self.decay_epochs, self.epochs
            )));
        }
        if !(self.peak_lr > 0.0 && self.final_lr > 0.0) {
            return Err(MarfError::InvalidInput("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(MarfError::InvalidInput("epochs and batch_size must be positive".into()));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(MarfError::InvalidInput("grad_clip_norm must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` (0-based) taken during `epoch`.
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step as f64 / self.warmup_steps as f64);
        }
        if epoch < self.hold_epochs {
            return self.peak_lr;
        }
        if self.decay_epochs == 0 {
            return self.final_lr;
        }
        let x = ((epoch - self.hold_epochs) as f64 / self.decay_epochs as f64).min(1.0);
        self.final_lr + (self.peak_lr - self.final_lr) * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        let z: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.dim())).collect();
        Self { m: z.clone(), v: z }
    }

    /// One update with bias correction for step `t` (1-based). Weight
    /// decay shrinks weight matrices only and is applied before the moment step.
    pub fn update(&mut self, params: &mut NetworkParams, grads: &[Tensor], lr: f64, t: u64, cfg: &TrainConfig) {
        let c1 = 1.0 - cfg.beta1.powi(t as i32);
        let c2 = 1.0 - cfg.beta2.powi(t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.tensors[i];
            if params.kinds[i] == ParamKind::Weight && cfg.weight_decay != 0.0 {
                let f = 1.0 - lr * cfg.weight_decay;
                p.mapv_inplace(|x| x * f);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// Loss and averaged gradient over independently evaluated batch items.
pub fn batch_gradient(
    params: &NetworkParams,
    items: &[(Batch, BatchRandomness)],
    config: &RunConfig,
    epoch: f64,
) -> Result<(Vec<LossBreakdown>, Vec<Tensor>)> {
    let results: Vec<Result<(LossBreakdown, Vec<Tensor>)>> = items
        .par_iter()
        .map(|(batch, rnd)| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let g = build_loss(&mut tape, params, &bound, batch, rnd, &config.loss, epoch)?;
            if !g.breakdown.total.is_finite() {
                return Err(MarfError::Numerical(format!("non-finite loss {:?}", g.breakdown)));
            }
            let grads = tape.backward(g.total)?;
            let out: Vec<Tensor> = bound
                .vars
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| grads.wrt(v, t.dim()))
                .collect();
            Ok((g.breakdown, out))
        })
        .collect();
    let mut breakdowns = Vec::with_capacity(items.len());
    let mut sum: Option<Vec<Tensor>> = None;
    for r in results {
        let (b, g) = r?;
        breakdowns.push(b);
        match &mut sum {
            None => sum = Some(g),
            Some(s) => {
                for (a, b) in s.iter_mut().zip(&g) {
                    *a += b;
                }
            }
        }
    }
    let mut grads = sum.ok_or_else(|| MarfError::InvalidInput("empty optimizer step".into()))?;
    let k = items.len() as f64;
    for g in grads.iter_mut() {
        g.mapv_inplace(|v| v / k);
    }
    Ok((breakdowns, grads))
}

/// Mean of breakdowns, term by term.
pub fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    if items.is_empty() {
        return out;
    }
    let k = items.len() as f64;
    for b in items {
        for i in 0..out.terms.len() {
            out.terms[i] += b.terms[i];
        }
        out.total += b.total;
    }
    for t in out.terms.iter_mut() {
        *t /= k;
    }
    out.total /= k;
    out.weights = items[0].weights;
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
    pub loss: LossBreakdown,
    pub steps: usize,
    pub wall_secs: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub params: NetworkParams,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(config: RunConfig, num_shapes: usize) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config.network, num_shapes, config.train.seed)?;
        let adam = AdamState::zeros_like(&params);
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    /// Supervision tensors and random draws for one sub-image of a step.
    pub fn prepare_item(&self, dataset: &Dataset, sub: &SubImage, batch_index: usize, item: usize) -> (Batch, BatchRandomness) {
        let samples = dataset.sub_image_samples(sub, self.config.data.stride);
        let batch = Batch::from_samples(&samples);
        let counters = [self.epoch as u64, batch_index as u64, item as u64];
        let seed = self.config.train.seed;
        let masks = (self.config.network.dropout_rate > 0.0).then(|| {
            let mut rng = stream(seed, &counters, "dropout");
            sample_dropout_masks(&self.config.network, batch.len(), &mut rng)
        });
        let mut permutation: Vec<usize> = (0..batch.len()).collect();
        permutation.shuffle(&mut stream(seed, &counters, "partner"));
        (batch, BatchRandomness { masks, permutation })
    }

    /// One optimizer step over prepared items.
    pub fn train_step(&mut self, items: &[(Batch, BatchRandomness)]) -> Result<(LossBreakdown, f64)> {
        let epoch = self.epoch;
        let (breakdowns, mut grads) = batch_gradient(&self.params, items, &self.config, epoch as f64)?;
        let mean = mean_breakdown(&breakdowns);
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(MarfError::Numerical(format!("non-finite gradient at epoch {epoch}, step {}", self.step)));
        }
        clip_global_norm(&mut grads, self.config.train.grad_clip_norm);
        let lr = self.config.train.lr_at(self.step, epoch);
        self.adam.update(&mut self.params, &grads, lr, self.step + 1, &self.config.train);
        self.step += 1;
        Ok((mean, lr))
    }

    pub fn train_epoch(&mut self, dataset: &Dataset) -> Result<EpochReport> {
        if self.config.network.latent_dim > 0 && dataset.shapes.len() != self.params.num_shapes() {
            return Err(MarfError::InvalidInput(format!(
                "dataset has {} shapes but the latent table has {}",
                dataset.shapes.len(),
                self.params.num_shapes()
            )));
        }
        let start = Instant::now();
        let batches = make_batches(
            dataset,
            self.config.data.stride,
            self.config.train.batch_size,
            self.config.train.seed,
            self.epoch,
        );
        let mut all = Vec::with_capacity(batches.len() * self.config.train.batch_size);
        let mut lr = 0.0;
        for (bi, subs) in batches.iter().enumerate() {
            let items: Vec<(Batch, BatchRandomness)> = subs
                .iter()
                .enumerate()
                .map(|(k, s)| self.prepare_item(dataset, s, bi, k))
                .collect();
            let (mean, step_lr) = self.train_step(&items).map_err(|e| match e {
                MarfError::Numerical(msg) => MarfError::Numerical(format!(
                    "{msg}; epoch {} batch {bi}, sub-images {:?}",
                    self.epoch, subs
                )),
                other => other,
            })?;
            lr = step_lr;
            for _ in 0..items.len() {
                all.push(mean.clone());
            }
        }
        self.epoch += 1;
        Ok(EpochReport {
            epoch: self.epoch - 1,
            lr,
            loss: mean_breakdown(&all),
            steps: batches.len(),
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains to `config.train.epochs`, appending to the metrics CSV and
    /// saving a checkpoint after every epoch when paths are given.
    pub fn run(
        &mut self,
        dataset: &Dataset,
        checkpoint: Option<&Path>,
        metrics: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochReport),
    ) -> Result<Vec<EpochReport>> {
        let mut reports = Vec::new();
        while !self.is_done() {
            let r = self.train_epoch(dataset)?;
            if let Some(m) = metrics {
                append_metrics(m, &r)?;
            }
            if let Some(c) = checkpoint {
                self.save(c)?;
            }
            on_epoch(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut manifest = Vec::new();
        let mut blob = Vec::new();
        let groups: [(&str, &Vec<Tensor>); 3] = [
            ("param", &self.params.tensors),
            ("adam_m", &self.adam.m),
            ("adam_v", &self.adam.v),
        ];
        for (group, tensors) in groups {
            for (i, t) in tensors.iter().enumerate() {
                manifest.push(TensorEntry {
                    group: group.into(),
                    name: self.params.names[i].clone(),
                    kind: self.params.kinds[i],
                    shape: [t.nrows(), t.ncols()],
                });
                for v in t.iter() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.train.seed,
            num_shapes: self.params.num_shapes(),
            tensors: manifest,
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + json.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| MarfError::Format(format!("{}: {m}", path.display()));
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let mut at = CHECKPOINT_MAGIC.len();
        let len = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        if bytes.len() - at < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[at..at + len]).map_err(|e| bad(&format!("header: {e}")))?;
        at += len;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", header.version)));
        }
        let blob = &bytes[at..];
        if hex(&Sha256::digest(blob)) != header.blob_sha256 {
            return Err(bad("tensor data checksum mismatch"));
        }
        let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 8).sum();
        if expected != blob.len() {
            return Err(bad("tensor data size does not match the manifest"));
        }
        header.config.validate().map_err(|e| bad(&e.to_string()))?;
        let mut params = init_params(&header.config.network, header.num_shapes, header.config.train.seed)
            .map_err(|e| bad(&e.to_string()))?;
        let n = params.tensors.len();
        if header.tensors.len() != 3 * n {
            return Err(bad("manifest does not match the network layout"));
        }
        let mut off = 0;
        let mut groups: Vec<Vec<Tensor>> = vec![Vec::new(), Vec::new(), Vec::new()];
        for (k, e) in header.tensors.iter().enumerate() {
            let i = k % n;
            if e.name != params.names[i] || [e.shape[0], e.shape[1]] != [params.tensors[i].nrows(), params.tensors[i].ncols()] {
                return Err(bad(&format!("tensor {} does not match the network layout", e.name)));
            }
            let count = e.shape[0] * e.shape[1];
            let vals: Vec<f64> = blob[off..off + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            off += count * 8;
            groups[k / n].push(Tensor::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("shape checked"));
        }
        let v = groups.pop().expect("three groups");
        let m = groups.pop().expect("three groups");
        params.tensors = groups.pop().expect("three groups");
        Ok(Self {
            config: header.config,
            params,
            adam: AdamState { m, v },
            epoch: header.epoch,
            step: header.step,
        })
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 10] = b"MARFCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    group: String,
    name: String,
    kind: ParamKind,
    shape: [usize; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    config: RunConfig,
    epoch: usize,
    step: u64,
    seed: u64,
    num_shapes: usize,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads only the network parameters of a checkpoint.
pub fn load_params(path: &Path) -> Result<(RunConfig, NetworkParams)> {
    let t = Trainer::load(path)?;
    Ok((t.config, t.params))
}

pub fn metrics_header() -> String {
    let mut cols = vec!["epoch".to_string(), "lr".to_string()];
    cols.extend(TERM_NAMES.iter().map(|t| t.to_string()));
    cols.push("total".into());
    cols.push("wall_secs".into());
    cols.join(",")
}

pub fn metrics_row(r: &EpochReport) -> String {
    let mut cols = vec![r.epoch.to_string(), r.lr.to_string()];
    cols.extend(r.loss.terms.iter().map(|v| v.to_string()));
    cols.push(r.loss.total.to_string());
    cols.push(format!("{:.3}", r.wall_secs));
    cols.join(",")
}

/// Appends one row, writing the header first if the file is new or empty.
pub fn append_metrics(path: &Path, r: &EpochReport) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", metrics_header())?;
    }
    writeln!(f, "{}", metrics_row(r))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_checkpoints() {
        let c = TrainConfig::default();
        assert!((c.lr_at(50, 0) - 2.5e-4).abs() < 1e-12);
        assert!((c.lr_at(10_000, 30) - 5e-4).abs() < 1e-12);
        assert!((c.lr_at(10_000, 115) - 3e-4).abs() < 1e-12);
        assert!((c.lr_at(10_000, 200) - 1e-4).abs() < 1e-12);
        assert_eq!(c.lr_at(10_000, 29), 5e-4);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_elem((2, 2), 5.0)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 10.0).abs() < 1e-12);
        let after = g[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-9);
        let mut small = vec![Tensor::from_elem((1, 2), 0.1)];
        let copy = small.clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, copy);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.hold_epochs = 29;
        assert!(c.validate().is_err());
        c.epochs = 100;
        assert!(c.validate().is_ok());
    }
}
