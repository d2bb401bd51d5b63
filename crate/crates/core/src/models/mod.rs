//! Learnable components: affine dynamics network, tracking controller,
//! conditional VAE and the behaviour-cloning baseline policy.
//!
//! Every network sees standardized inputs. Dynamics outputs are scaled by the
//! per-dimension spread of finite-difference derivatives in the data, the
//! controller emits standardized actions and the CVAE decoder predicts
//! one-step state increments in units of their spread.

mod bc;
mod controller;
mod cvae;
mod dynamics;

use serde::{Deserialize, Serialize};

use crate::datastore::{Checkpoint, DataError, Dataset};
use crate::diffcore::{DiffError, MlpParams, Tape, Tensor, Var};

pub use bc::BcPolicy;
pub use controller::CtrlModel;
pub use cvae::{cvae_generate, cvae_generate_with, cvae_loss, CvaeLoss, CvaeModel};
pub use dynamics::{extract_affine, DynModel, DynStructure};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} requires the affine structure")]
    NotAffine(&'static str),
    #[error("missing normalization statistics")]
    MissingNormalization,
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
}

/// Training stage a model has completed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Untrained,
    Dynamics,
    Controller,
    Robust,
    Cvae,
    Bc,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Untrained => "untrained",
            Phase::Dynamics => "dynamics",
            Phase::Controller => "controller",
            Phase::Robust => "robust",
            Phase::Cvae => "cvae",
            Phase::Bc => "bc",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| ModelError::Checkpoint(format!("unknown phase {s:?}")))
    }
}

/// Dataset statistics shared by all networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub u_mean: Vec<f64>,
    pub u_std: Vec<f64>,
    /// Spread of `(x_{i+1} − x_i)/Δt`, the unit of dynamics outputs and of
    /// the controller's virtual-input feature.
    pub dx_scale: Vec<f64>,
    pub dt: f64,
}

impl Normalizer {
    pub fn from_dataset(data: &Dataset) -> Self {
        let (n, dt) = (data.n(), data.manifest.dt);
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0usize;
        for t in &data.trajectories {
            for w in t.states.chunks_exact(n).collect::<Vec<_>>().windows(2) {
                for j in 0..n {
                    let d = (w[1][j] - w[0][j]) / dt;
                    sum[j] += d;
                    sq[j] += d * d;
                }
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        let dx_scale = (0..n)
            .map(|j| {
                let mean = sum[j] / c;
                (sq[j] / c - mean * mean).max(0.0).sqrt().max(1e-3)
            })
            .collect();
        let norm = &data.manifest.norm;
        Self {
            x_mean: norm.state_mean.clone(),
            x_std: norm.state_std.clone(),
            u_mean: norm.action_mean.clone(),
            u_std: norm.action_std.clone(),
            dx_scale,
            dt,
        }
    }

    /// Identity statistics, for tests.
    pub fn identity(n: usize, m: usize, dt: f64) -> Self {
        Self {
            x_mean: vec![0.0; n],
            x_std: vec![1.0; n],
            u_mean: vec![0.0; m],
            u_std: vec![1.0; m],
            dx_scale: vec![1.0; n],
            dt,
        }
    }

    pub fn n(&self) -> usize {
        self.x_mean.len()
    }

    pub fn m(&self) -> usize {
        self.u_mean.len()
    }

    /// Per-dimension loss weights `1/σ_x`.
    pub fn inv_x_std(&self) -> Vec<f64> {
        inv(&self.x_std)
    }

    /// Spread of one-step state increments.
    pub fn delta_scale(&self) -> Vec<f64> {
        self.dx_scale.iter().map(|s| s * self.dt).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let (n, m) = (self.n(), self.m());
        if n == 0 || m == 0 || self.x_std.len() != n || self.dx_scale.len() != n || self.u_std.len() != m {
            return Err(ModelError::MissingNormalization);
        }
        let scales = self.x_std.iter().chain(&self.u_std).chain(&self.dx_scale);
        if scales.clone().any(|s| !(*s > 0.0)) || !(self.dt > 0.0) {
            return Err(ModelError::MissingNormalization);
        }
        Ok(())
    }
}

pub(crate) fn inv(v: &[f64]) -> Vec<f64> {
    v.iter().map(|s| 1.0 / s).collect()
}

pub(crate) fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|s| -s).collect()
}

/// `(v − mean) / std` column-wise, tape-free.
pub(crate) fn standardize(t: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ((v, mu), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - mu) * (1.0 / s);
        }
    }
    out
}

/// Same arithmetic as [`standardize`], recorded.
pub(crate) fn standardize_tape(tape: &mut Tape, v: Var, mean: &[f64], std: &[f64]) -> Result<Var, DiffError> {
    let shifted = tape.shift_cols(v, &neg(mean))?;
    tape.scale_cols(shifted, &inv(std))
}

pub(crate) fn check_cols(t: &Tensor, cols: usize, what: &str) -> Result<(), ModelError> {
    if t.shape().len() != 2 || t.cols() != cols {
        return Err(ModelError::Shape(format!("{what} has shape {:?}, expected [_, {cols}]", t.shape())));
    }
    Ok(())
}

/// Named tensors of an MLP for checkpointing (`prefix.i.weight`, `prefix.i.bias`).
pub(crate) fn named_tensors(prefix: &str, p: &MlpParams) -> Vec<(String, Tensor)> {
    p.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.weight"), l.weight.clone()),
                (format!("{prefix}.{i}.bias"), l.bias.clone()),
            ]
        })
        .collect()
}

/// Rebuilds an MLP from checkpoint tensors named by [`named_tensors`].
pub(crate) fn mlp_from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<MlpParams, ModelError> {
    let mut layers = Vec::new();
    for i in 0.. {
        let w = ckpt.tensor(&format!("{prefix}.{i}.weight"));
        let b = ckpt.tensor(&format!("{prefix}.{i}.bias"));
        match (w, b) {
            (Some(w), Some(b)) => {
                if w.shape().len() != 2 || b.shape() != [1, w.cols()] {
                    return Err(ModelError::Checkpoint(format!("layer {prefix}.{i} shapes")));
                }
                if let Some(prev) = layers.last() {
                    let prev: &crate::diffcore::Dense = prev;
                    if prev.weight.cols() != w.rows() {
                        return Err(ModelError::Checkpoint(format!("layer {prefix}.{i} does not chain")));
                    }
                }
                layers.push(crate::diffcore::Dense {
                    weight: w.clone(),
                    bias: b.clone(),
                });
            }
            _ => break,
        }
    }
    if layers.is_empty() {
        return Err(ModelError::Checkpoint(format!("no layers named {prefix}")));
    }
    Ok(MlpParams { layers })
}

/// Metadata every model stores in the checkpoint `extra` field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelMeta {
    pub norm: Normalizer,
    #[serde(default)]
    pub latent_dim: Option<usize>,
    #[serde(default)]
    pub train_gain: Option<f64>,
    #[serde(default)]
    pub heldout_loss: Option<f64>,
}

pub(crate) fn meta_from(ckpt: &Checkpoint) -> Result<ModelMeta, ModelError> {
    let meta: ModelMeta =
        serde_json::from_value(ckpt.header.extra.clone()).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    meta.norm.validate()?;
    Ok(meta)
}
