//! The three-phase training pipeline (dynamics, tracking controller,
//! noise-injected refinement) plus the reference generator and the
//! behaviour-cloning baseline.
//!
//! Window losses are measured in standardized state units and averaged over
//! the batch and the `τ` predicted samples of each window:
//! `L = 1/(Bτ) Σ_b Σ_k ‖(x_e − x̂) / σ_x‖²`.

mod dynamics;
mod generative;
mod tracking;
mod windows;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{DataError, Dataset};
use crate::diffcore::{DiffError, GradMap, Tensor};
use crate::models::{ModelError, Phase};
use crate::odeint::{Method, OdeError, SolverConfig};
use crate::plants::PlantError;

pub use dynamics::{dynamics_loss, train_dynamics};
pub use generative::{train_bc, train_cvae};
pub use tracking::{refine_robust, tracking_loss, train_controller, BatchPolicy, ModelNdi};
pub use windows::{split_trajectories, window_starts, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("phase order: {0}")]
    PhaseOrder(String),
    #[error("{phase} loss diverged at epoch {epoch}")]
    Diverged { phase: &'static str, epoch: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPath {
    /// Continuous adjoint, works with either solver.
    Adjoint,
    /// Reverse mode through the recorded RK4 stages.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Window length in samples.
    pub tau: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    /// Rows per independently differentiated sub-batch.
    pub chunk: usize,
    pub epsilon: f64,
    pub epsilon_r: f64,
    /// Noise std in standardized state units.
    pub sigma_x: f64,
    /// Feedback gain `K_n` used while training the controller.
    pub train_gain: f64,
    pub max_epochs: usize,
    pub refine_epochs: usize,
    pub cvae_epochs: usize,
    pub bc_epochs: usize,
    pub seed: u64,
    pub gradient: GradientPath,
    pub method: Method,
    /// RK4 steps per sample period (initial step divisor for Dopri5).
    pub substeps: usize,
    pub atol: f64,
    pub rtol: f64,
    pub dyn_hidden: Vec<usize>,
    pub ctrl_hidden: Vec<usize>,
    pub cvae_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub lr_dyn: f64,
    pub lr_ctrl: f64,
    pub lr_cvae: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub holdout_fraction: f64,
    /// Consecutive epochs with relative change below `converge_tol` that
    /// count as converged for the CVAE.
    pub converge_epochs: usize,
    pub converge_tol: f64,
    /// Cap on windows used for held-out and evaluation losses.
    pub eval_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small networks and batches sized for a laptop CPU.
    pub fn desk() -> Self {
        Self {
            tau: 16,
            batch_size: 256,
            batches_per_epoch: 4,
            chunk: 128,
            epsilon: 3e-5,
            epsilon_r: 6e-5,
            sigma_x: 0.25,
            train_gain: 0.1,
            max_epochs: 300,
            refine_epochs: 100,
            cvae_epochs: 300,
            bc_epochs: 300,
            seed: 0,
            gradient: GradientPath::Direct,
            method: Method::Rk4,
            substeps: 1,
            atol: 1e-4,
            rtol: 1e-4,
            dyn_hidden: vec![64, 64],
            ctrl_hidden: vec![64, 64],
            cvae_hidden: vec![64, 64],
            latent_dim: 8,
            lr_dyn: 0.01,
            lr_ctrl: 0.01,
            lr_cvae: 0.001,
            lr_decay: 0.5,
            decay_every: 100,
            holdout_fraction: 0.1,
            converge_epochs: 20,
            converge_tol: 0.01,
            eval_windows: 512,
        }
    }

    /// Published hyperparameters: 800/320-wide ELU networks, batch 2048,
    /// adjoint gradients through an adaptive solver at 1e-4 tolerances.
    pub fn paper() -> Self {
        Self {
            batch_size: 2048,
            chunk: 256,
            epsilon: 0.01,
            epsilon_r: 0.02,
            max_epochs: 500,
            refine_epochs: 500,
            cvae_epochs: 500,
            bc_epochs: 500,
            gradient: GradientPath::Adjoint,
            method: Method::Dopri5,
            substeps: 5,
            dyn_hidden: vec![800, 800],
            ctrl_hidden: vec![320, 320],
            cvae_hidden: vec![320, 320],
            lr_ctrl: 0.001,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, TrainError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(TrainError::Config(format!("unknown preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.tau == 0 {
            return bad("tau must be at least 1");
        }
        if self.batch_size == 0 || self.batches_per_epoch == 0 || self.chunk == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.epsilon > 0.0) || !(self.epsilon_r > 0.0) {
            return bad("epsilon and epsilon_r must be positive");
        }
        if !(self.sigma_x >= 0.0) || !self.sigma_x.is_finite() {
            return bad("sigma_x must be non-negative");
        }
        if !self.train_gain.is_finite() || self.train_gain < 0.0 {
            return bad("train_gain must be non-negative");
        }
        if self.substeps == 0 || !(self.atol > 0.0) || !(self.rtol > 0.0) {
            return bad("solver settings must be positive");
        }
        if self.gradient == GradientPath::Direct && self.method != Method::Rk4 {
            return bad("the direct gradient path requires rk4");
        }
        if [self.lr_dyn, self.lr_ctrl, self.lr_cvae, self.lr_decay].iter().any(|v| !(*v > 0.0)) {
            return bad("learning rates and decay must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must be in [0, 1)");
        }
        if self.latent_dim == 0 || self.eval_windows == 0 || self.converge_epochs == 0 {
            return bad("latent_dim, eval_windows and converge_epochs must be positive");
        }
        Ok(())
    }

    /// Solver for a plant sampled every `dt` seconds.
    pub fn solver(&self, dt: f64) -> SolverConfig {
        let mut s = match self.method {
            Method::Rk4 => SolverConfig::rk4(dt / self.substeps as f64),
            Method::Dopri5 => {
                let mut s = SolverConfig::dopri5(self.atol, self.rtol);
                s.step = dt / self.substeps as f64;
                s
            }
        };
        s.horizon = self.tau.max(2);
        s
    }

    pub(crate) fn adam(&self, lr: f64) -> crate::diffcore::AdamConfig {
        crate::diffcore::AdamConfig {
            lr,
            decay_factor: self.lr_decay,
            decay_every: self.decay_every,
            ..Default::default()
        }
    }
}

/// One row of the per-epoch loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// The stop threshold was reached before the epoch cap.
    pub converged: bool,
    pub heldout_loss: Option<f64>,
    /// Mean loss over the last quarter of epochs is below the first quarter's.
    pub decreasing: bool,
}

impl TrainReport {
    pub(crate) fn finish(mut self) -> Self {
        let l: Vec<f64> = self.history.iter().map(|r| r.loss).collect();
        let q = (l.len() / 4).max(1);
        self.decreasing = l.len() >= 2 && mean(&l[l.len() - q..]) < mean(&l[..q]);
        self
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.loss)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Independent random streams used by the trainers.
pub(crate) mod stream {
    pub const DYNAMICS: u64 = 1;
    pub const TRACKING: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const CVAE: u64 = 4;
    pub const BC: u64 = 5;
}

/// Sums `(loss, grads)` over fixed row chunks in order, so the result does
/// not depend on the thread count.
pub(crate) fn chunked<F>(rows: usize, chunk: usize, f: F) -> Result<(f64, GradMap), TrainError>
where
    F: Fn(std::ops::Range<usize>) -> Result<(f64, GradMap), TrainError> + Sync,
{
    let ranges: Vec<_> = (0..rows).step_by(chunk).map(|s| s..(s + chunk).min(rows)).collect();
    let parts = ranges.into_par_iter().map(&f).collect::<Result<Vec<_>, _>>()?;
    let mut it = parts.into_iter();
    let (mut loss, mut grads) = it.next().expect("at least one chunk");
    for (l, g) in it {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Rows `r` of a `[B, c]` tensor.
pub(crate) fn take_rows(t: &Tensor, r: std::ops::Range<usize>) -> Tensor {
    let c = t.cols();
    Tensor::from_rows(r.len(), c, t.data()[r.start * c..r.end * c].to_vec())
}

pub(crate) fn check_dataset(data: &Dataset, tau: usize) -> Result<(), TrainError> {
    data.validate()?;
    if data.trajectories.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    if data.steps() < tau + 1 {
        return Err(TrainError::Config(format!(
            "trajectories have {} samples, windows need {}",
            data.steps(),
            tau + 1
        )));
    }
    Ok(())
}

pub(crate) fn check_finite(loss: f64, phase: &'static str, epoch: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged { phase, epoch })
    }
}
