//! Integration of actuated dynamics on an output grid.
//!
//! The grid `t_0 < t_1 < ... < t_N` doubles as the zero-order-hold sample
//! grid: integration restarts at every grid point, so no step ever crosses a
//! control discontinuity. Right-hand sides receive the index of the interval
//! being integrated and can look up held inputs by index instead of by time.

mod adjoint;
mod steppers;
mod taped;
mod zoh;

use serde::{Deserialize, Serialize};

use crate::diffcore::DiffError;

pub use adjoint::{integrate_with_grad, AdjointResult, AdjointState};
use steppers::{dopri5_step, rk4_step};
pub use taped::{integrate_taped, TapedFunc};
pub use zoh::ZohInput;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("time {t} outside [{lo}, {hi})")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite derivative at t = {t}")]
    NonFinite { t: f64 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("invalid solver config: {0}")]
    Config(String),
    #[error("model evaluation failed: {0}")]
    Model(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Classical fourth-order Runge–Kutta with a fixed step.
    Rk4,
    /// Dormand–Prince 5(4) with per-component error control.
    Dopri5,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    /// Fixed step for RK4, initial step for Dopri5 (seconds).
    pub step: f64,
    pub atol: f64,
    pub rtol: f64,
    /// Output samples per training window after the initial state.
    pub horizon: usize,
    pub max_steps: usize,
    pub min_step: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            step: 0.025,
            atol: 1e-4,
            rtol: 1e-4,
            horizon: 16,
            max_steps: 100_000,
            min_step: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            method: Method::Rk4,
            step,
            ..Self::default()
        }
    }

    pub fn dopri5(atol: f64, rtol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            step: 0.01,
            atol,
            rtol,
            ..Self::default()
        }
    }

    /// Checks tolerances and horizon; with `sample_dt` also that the fixed
    /// step divides the sample period.
    pub fn validate(&self, sample_dt: Option<f64>) -> Result<(), OdeError> {
        if !(self.atol > 0.0) || !(self.rtol > 0.0) {
            return Err(OdeError::Config("tolerances must be positive".into()));
        }
        if self.horizon < 2 {
            return Err(OdeError::Config("horizon must be at least 2".into()));
        }
        if !(self.step > 0.0) {
            return Err(OdeError::Config("step must be positive".into()));
        }
        if let (Method::Rk4, Some(dt)) = (self.method, sample_dt) {
            let ratio = dt / self.step;
            if self.step > dt * (1.0 + 1e-12) || (ratio - ratio.round()).abs() > 1e-9 {
                return Err(OdeError::Config(format!(
                    "rk4 step {} must divide the sample period {}",
                    self.step, dt
                )));
            }
        }
        Ok(())
    }

    /// Number of fixed steps used on an interval of length `span`.
    pub(crate) fn rk4_steps(&self, span: f64) -> usize {
        ((span.abs() / self.step) - 1e-9).ceil().max(1.0) as usize
    }
}

/// Right-hand side `ẋ = f(t, x)` of a (possibly batched) system.
pub trait OdeFunc {
    fn dim(&self) -> usize;

    /// `segment` is the index `i` of the grid interval `[t_i, t_{i+1}]`
    /// being integrated.
    fn eval(&self, segment: usize, t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), OdeError>;
}

/// A right-hand side with learnable parameters `p` that can produce
/// vector–Jacobian products.
pub trait AdjointFunc: OdeFunc {
    fn num_params(&self) -> usize;

    /// Writes `f(t, x)` to `f_out`, `aᵀ ∂f/∂x` to `ax_out` and `aᵀ ∂f/∂p` to
    /// `ap_out`.
    #[allow(clippy::too_many_arguments)]
    fn vjp(
        &self,
        segment: usize,
        t: f64,
        x: &[f64],
        a: &[f64],
        f_out: &mut [f64],
        ax_out: &mut [f64],
        ap_out: &mut [f64],
    ) -> Result<(), OdeError>;
}

impl<F> OdeFunc for (usize, F)
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    fn dim(&self) -> usize {
        self.0
    }

    fn eval(&self, _segment: usize, t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), OdeError> {
        (self.1)(t, x, dx);
        Ok(())
    }
}

pub(crate) fn check_grid(t_grid: &[f64]) -> Result<(), OdeError> {
    if t_grid.len() < 2 {
        return Err(OdeError::Grid("need at least two output times".into()));
    }
    if t_grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(OdeError::Grid("output times must be strictly increasing".into()));
    }
    Ok(())
}

/// Integrates one interval in place, forwards or backwards in time.
///
/// `err_dims` limits adaptive error control to the leading components.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_interval<R>(
    rhs: &mut R,
    t0: f64,
    t1: f64,
    y: &mut [f64],
    cfg: &SolverConfig,
    err_dims: usize,
    h_hint: &mut f64,
) -> Result<(), OdeError>
where
    R: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let span = t1 - t0;
    match cfg.method {
        Method::Rk4 => {
            let steps = cfg.rk4_steps(span);
            let h = span / steps as f64;
            let mut work = steppers::Rk4Work::new(y.len());
            for k in 0..steps {
                let t = t0 + k as f64 * h;
                rk4_step(rhs, t, h, y, &mut work)?;
            }
            Ok(())
        }
        Method::Dopri5 => {
            let dir = span.signum();
            let mut t = t0;
            let mut h = h_hint.abs().min(span.abs()).max(cfg.min_step) * dir;
            let mut work = steppers::DopriWork::new(y.len());
            let mut taken = 0usize;
            while (t1 - t) * dir > 0.0 {
                if (t + h - t1) * dir > 0.0 {
                    h = t1 - t;
                }
                let err = dopri5_step(rhs, t, h, y, &mut work, cfg.atol, cfg.rtol, err_dims)?;
                taken += 1;
                if taken > cfg.max_steps {
                    return Err(OdeError::StepUnderflow { t, h });
                }
                let factor = if err == 0.0 {
                    5.0
                } else {
                    (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
                };
                if err <= 1.0 {
                    t = if (t + h - t1) * dir >= 0.0 { t1 } else { t + h };
                    y.copy_from_slice(&work.y_new);
                    *h_hint = h.abs();
                    h *= factor;
                } else {
                    h *= factor.min(1.0);
                    if h.abs() < cfg.min_step {
                        return Err(OdeError::StepUnderflow { t, h });
                    }
                }
            }
            Ok(())
        }
    }
}

/// States at every grid time. The first output is `x0` exactly.
pub fn integrate<F: OdeFunc + ?Sized>(
    f: &F,
    x0: &[f64],
    t_grid: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Vec<f64>>, OdeError> {
    integrate_with_jumps(f, x0, t_grid, cfg, None)
}

/// Like [`integrate`], but adds `jumps[i]` to the state at grid time `i`
/// (for `i >= 1`) before integration continues. Outputs are post-jump.
pub fn integrate_with_jumps<F: OdeFunc + ?Sized>(
    f: &F,
    x0: &[f64],
    t_grid: &[f64],
    cfg: &SolverConfig,
    jumps: Option<&[Vec<f64>]>,
) -> Result<Vec<Vec<f64>>, OdeError> {
    check_grid(t_grid)?;
    if x0.len() != f.dim() {
        return Err(OdeError::Grid(format!(
            "initial state has {} values, system has {}",
            x0.len(),
            f.dim()
        )));
    }
    let mut out = Vec::with_capacity(t_grid.len());
    out.push(x0.to_vec());
    let mut y = x0.to_vec();
    let mut h_hint = cfg.step;
    for seg in 0..t_grid.len() - 1 {
        let mut rhs = |t: f64, x: &[f64], dx: &mut [f64]| {
            f.eval(seg, t, x, dx)?;
            if dx.iter().any(|v| !v.is_finite()) {
                return Err(OdeError::NonFinite { t });
            }
            Ok(())
        };
        solve_interval(&mut rhs, t_grid[seg], t_grid[seg + 1], &mut y, cfg, x0.len(), &mut h_hint)?;
        if let Some(j) = jumps.and_then(|j| j.get(seg + 1)) {
            for (v, d) in y.iter_mut().zip(j) {
                *v += d;
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay() -> (usize, impl Fn(f64, &[f64], &mut [f64])) {
        (1, |_t: f64, x: &[f64], dx: &mut [f64]| dx[0] = -x[0])
    }

    #[test]
    fn constant_solution() {
        let f = (2, |_t: f64, _x: &[f64], dx: &mut [f64]| dx.fill(0.0));
        let out = integrate(&f, &[1.5, -2.0], &[0.0, 0.5, 1.0], &SolverConfig::rk4(0.1)).unwrap();
        assert!(out.iter().all(|x| x == &[1.5, -2.0]));
    }

    #[test]
    fn rk4_exponential_decay() {
        let out = integrate(&decay(), &[1.0], &[0.0, 1.0], &SolverConfig::rk4(0.01)).unwrap();
        assert!((out[1][0] - (-1.0f64).exp()).abs() < 1e-6);
        assert_eq!(out[0], vec![1.0]);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let err = |h: f64| {
            let out = integrate(&decay(), &[1.0], &[0.0, 1.0], &SolverConfig::rk4(h)).unwrap();
            (out[1][0] - (-1.0f64).exp()).abs()
        };
        let (e1, e2, e3) = (err(0.1), err(0.05), err(0.025));
        for ratio in [e1 / e2, e2 / e3] {
            assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn dopri_meets_tolerance() {
        let cfg = SolverConfig::dopri5(1e-8, 1e-8);
        let out = integrate(&decay(), &[1.0], &[0.0, 0.5, 1.0, 2.0], &cfg).unwrap();
        assert!((out[3][0] - (-2.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn zoh_ramp_up_then_down() {
        let z = ZohInput::from_times(&[0.0, 0.1], 1, vec![1.0, -1.0]).unwrap();
        struct Ramp(ZohInput);
        impl OdeFunc for Ramp {
            fn dim(&self) -> usize {
                1
            }
            fn eval(&self, seg: usize, _t: f64, _x: &[f64], dx: &mut [f64]) -> Result<(), OdeError> {
                dx[0] = self.0.sample(seg)[0];
                Ok(())
            }
        }
        for cfg in [SolverConfig::rk4(0.01), SolverConfig::dopri5(1e-4, 1e-4)] {
            let out = integrate(&Ramp(z.clone()), &[0.0], &[0.0, 0.1, 0.2], &cfg).unwrap();
            assert!((out[1][0] - 0.1).abs() < 1e-12);
            assert!(out[2][0].abs() < 1e-12);
        }
    }

    #[test]
    fn grid_and_config_validation() {
        assert!(integrate(&decay(), &[1.0], &[0.0, 0.0], &SolverConfig::rk4(0.1)).is_err());
        assert!(integrate(&decay(), &[1.0, 2.0], &[0.0, 1.0], &SolverConfig::rk4(0.1)).is_err());
        let mut cfg = SolverConfig::rk4(0.03);
        assert!(cfg.validate(Some(0.05)).is_err());
        cfg.step = 0.025;
        assert!(cfg.validate(Some(0.05)).is_ok());
        cfg.horizon = 1;
        assert!(cfg.validate(None).is_err());
    }

    #[test]
    fn non_finite_derivative_reported() {
        let f = (1, |_t: f64, _x: &[f64], dx: &mut [f64]| dx[0] = f64::NAN);
        assert!(matches!(
            integrate(&f, &[0.0], &[0.0, 1.0], &SolverConfig::rk4(0.5)),
            Err(OdeError::NonFinite { .. })
        ));
    }

    #[test]
    fn jumps_are_added_at_grid_points() {
        let f = (1, |_t: f64, _x: &[f64], dx: &mut [f64]| dx[0] = 1.0);
        let jumps = vec![vec![0.0], vec![10.0], vec![0.0]];
        let out =
            integrate_with_jumps(&f, &[0.0], &[0.0, 1.0, 2.0], &SolverConfig::rk4(0.5), Some(&jumps)).unwrap();
        assert_eq!(out[1], vec![11.0]);
        assert_eq!(out[2], vec![12.0]);
    }
}
