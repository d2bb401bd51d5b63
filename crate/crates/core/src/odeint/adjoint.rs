//! Adjoint sensitivities through the grid integrator.
//!
//! Each grid interval is integrated backwards as the augmented system
//! `(x, a, g, a_t)` with `ẋ = f`, `ȧ = -aᵀ ∂f/∂x`, `ġ = -aᵀ ∂f/∂p` and
//! `ȧ_t = -aᵀ ∂f/∂t`. The state part restarts from the stored forward
//! solution at every grid point; the loss gradient at each output time is
//! added to `a` when the backward sweep passes it.

use super::{check_grid, solve_interval, AdjointFunc, OdeError, SolverConfig};

/// Reverse-time quantities carried alongside the reconstructed state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    /// `∂L/∂x(t)`, one entry per state component.
    pub adjoint: Vec<f64>,
    /// Accumulated `∂L/∂p`.
    pub param_grad: Vec<f64>,
    /// Time-sensitivity accumulator. Right-hand sides are autonomous within
    /// a hold interval, so only the boundary terms contribute.
    pub time_grad: f64,
}

impl AdjointState {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            adjoint: vec![0.0; n],
            param_grad: vec![0.0; p],
            time_grad: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.adjoint.len() + self.param_grad.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjointResult {
    pub param_grad: Vec<f64>,
    pub x0_grad: Vec<f64>,
    /// `∂L/∂t_0` with the initial state held fixed.
    pub t0_grad: f64,
    pub state: AdjointState,
}

/// Gradients of a loss on the grid outputs.
///
/// `states` are the forward outputs (post-jump when `jumps` is given, as
/// returned by [`super::integrate_with_jumps`]); `loss_grads[i]` is
/// `∂L/∂x(t_i)`.
pub fn integrate_with_grad<F: AdjointFunc + ?Sized>(
    f: &F,
    t_grid: &[f64],
    cfg: &SolverConfig,
    states: &[Vec<f64>],
    jumps: Option<&[Vec<f64>]>,
    loss_grads: &[Vec<f64>],
) -> Result<AdjointResult, OdeError> {
    check_grid(t_grid)?;
    let n = f.dim();
    let p = f.num_params();
    if states.len() != t_grid.len() || loss_grads.len() != t_grid.len() {
        return Err(OdeError::Grid(format!(
            "{} grid times, {} states, {} loss gradients",
            t_grid.len(),
            states.len(),
            loss_grads.len()
        )));
    }
    if states.iter().chain(loss_grads).any(|v| v.len() != n) {
        return Err(OdeError::Grid("state or loss gradient has wrong dimension".into()));
    }

    let last = t_grid.len() - 1;
    let mut state = AdjointState::zeros(n, p);
    state.adjoint.copy_from_slice(&loss_grads[last]);

    let mut y = vec![0.0; 2 * n + p + 1];
    let mut f_buf = vec![0.0; n];
    let mut ax_buf = vec![0.0; n];
    let mut ap_buf = vec![0.0; p];
    let mut h_hint = cfg.step;

    for seg in (0..last).rev() {
        let x_end = &states[seg + 1];
        y[..n].copy_from_slice(x_end);
        if let Some(j) = jumps.and_then(|j| j.get(seg + 1)) {
            for (v, d) in y[..n].iter_mut().zip(j) {
                *v -= d;
            }
        }
        y[n..2 * n].copy_from_slice(&state.adjoint);
        y[2 * n..2 * n + p].copy_from_slice(&state.param_grad);
        y[2 * n + p] = state.time_grad;

        let mut rhs = |t: f64, yy: &[f64], dy: &mut [f64]| -> Result<(), OdeError> {
            let (x, rest) = yy.split_at(n);
            let a = &rest[..n];
            f.vjp(seg, t, x, a, &mut f_buf, &mut ax_buf, &mut ap_buf)?;
            dy[..n].copy_from_slice(&f_buf);
            for i in 0..n {
                dy[n + i] = -ax_buf[i];
            }
            for k in 0..p {
                dy[2 * n + k] = -ap_buf[k];
            }
            dy[2 * n + p] = 0.0;
            if dy.iter().any(|v| !v.is_finite()) {
                return Err(OdeError::NonFinite { t });
            }
            Ok(())
        };
        solve_interval(&mut rhs, t_grid[seg + 1], t_grid[seg], &mut y, cfg, 2 * n, &mut h_hint)?;

        state.adjoint.copy_from_slice(&y[n..2 * n]);
        state.param_grad.copy_from_slice(&y[2 * n..2 * n + p]);
        state.time_grad = y[2 * n + p];
        for (a, g) in state.adjoint.iter_mut().zip(&loss_grads[seg]) {
            *a += g;
        }
    }

    // dL/dt0 = -a(t0)·f(t0, x0)
    let mut dx0 = vec![0.0; n];
    f.eval(0, t_grid[0], &states[0], &mut dx0)?;
    let t0_grad = state.time_grad - state.adjoint.iter().zip(&dx0).map(|(a, d)| a * d).sum::<f64>();

    Ok(AdjointResult {
        param_grad: state.param_grad.clone(),
        x0_grad: state.adjoint.clone(),
        t0_grad,
        state,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{integrate, OdeFunc};
    use super::*;

    /// ẋ = p·x
    struct Linear(f64);

    impl OdeFunc for Linear {
        fn dim(&self) -> usize {
            1
        }
        fn eval(&self, _s: usize, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), OdeError> {
            dx[0] = self.0 * x[0];
            Ok(())
        }
    }

    impl AdjointFunc for Linear {
        fn num_params(&self) -> usize {
            1
        }
        fn vjp(
            &self,
            _s: usize,
            _t: f64,
            x: &[f64],
            a: &[f64],
            f: &mut [f64],
            ax: &mut [f64],
            ap: &mut [f64],
        ) -> Result<(), OdeError> {
            f[0] = self.0 * x[0];
            ax[0] = a[0] * self.0;
            ap[0] = a[0] * x[0];
            Ok(())
        }
    }

    #[test]
    fn linear_system_closed_form() {
        // x(1) = e^a, L = x(1)^2, dL/da = 2 e^{2a}
        let f = Linear(-1.0);
        let grid = [0.0, 1.0];
        for cfg in [SolverConfig::rk4(0.01), SolverConfig::dopri5(1e-10, 1e-10)] {
            let xs = integrate(&f, &[1.0], &grid, &cfg).unwrap();
            let lg = vec![vec![0.0], vec![2.0 * xs[1][0]]];
            let r = integrate_with_grad(&f, &grid, &cfg, &xs, None, &lg).unwrap();
            let expected = 2.0 * (-2.0f64).exp();
            assert!((r.param_grad[0] - expected).abs() < 1e-7, "{}", r.param_grad[0]);
            assert!((expected - 0.2707).abs() < 1e-4);
            // dL/dx0 = 2 x(1) e^a = 2 e^{2a}
            assert!((r.x0_grad[0] - expected).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_seed_gives_zero_gradients() {
        let f = Linear(0.3);
        let grid = [0.0, 0.5, 1.0];
        let cfg = SolverConfig::rk4(0.1);
        let xs = integrate(&f, &[2.0], &grid, &cfg).unwrap();
        let r = integrate_with_grad(&f, &grid, &cfg, &xs, None, &vec![vec![0.0]; 3]).unwrap();
        assert_eq!(r.param_grad, vec![0.0]);
        assert_eq!(r.x0_grad, vec![0.0]);
    }

    #[test]
    fn adjoint_state_dimension() {
        let f = Linear(0.3);
        let grid = [0.0, 1.0];
        let cfg = SolverConfig::rk4(0.1);
        let xs = integrate(&f, &[2.0], &grid, &cfg).unwrap();
        let r = integrate_with_grad(&f, &grid, &cfg, &xs, None, &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(r.state.dim(), f.dim() + f.num_params() + 1);
    }

    #[test]
    fn loss_gradient_count_mismatch() {
        let f = Linear(0.3);
        let grid = [0.0, 1.0];
        let cfg = SolverConfig::rk4(0.1);
        let xs = integrate(&f, &[2.0], &grid, &cfg).unwrap();
        assert!(integrate_with_grad(&f, &grid, &cfg, &xs, None, &[vec![0.0]]).is_err());
    }
}
