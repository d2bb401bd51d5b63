//! Robust model-based imitation learning.
//!
//! A continuous-time, input-affine dynamics model is fitted to expert
//! demonstrations through a differentiable ODE solver, a tracking controller
//! is trained through the frozen model so that it approximates nonlinear
//! dynamics inversion (NDI), and a noise-injected refinement phase adds
//! sliding-mode-like robustness. A conditional VAE supplies references at
//! inference time.
//!
//! Modules, bottom-up:
//!
//! - [`diffcore`]: tensors, tape-based reverse mode, ELU MLPs, Adam.
//! - [`odeint`]: RK4 / Dormand–Prince integration with zero-order-hold
//!   inputs, adjoint sensitivities and a taped RK4 reference path.
//! - [`plants`]: analytic input-affine plants, NDI and SMC laws, experts.
//! - [`models`]: affine dynamics net, tracking controller, CVAE.
//! - [`train`]: the three training phases plus CVAE training.
//! - [`evalkit`]: closed-loop rollouts, metrics, sweeps, BC baseline.
//! - [`datastore`]: dataset, checkpoint and report files.

pub mod datastore;
pub mod diffcore;
pub mod evalkit;
pub mod models;
pub mod odeint;
pub mod plants;
pub mod train;

pub mod rng;
