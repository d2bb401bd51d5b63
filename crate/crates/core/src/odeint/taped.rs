//! Direct differentiation through fixed-step RK4: every stage is recorded
//! on a tape. Memory grows with the number of steps; used as the reference
//! path for the adjoint gradients and as an optional training path.

use super::{check_grid, Method, OdeError, SolverConfig};
use crate::diffcore::{Tape, Tensor, Var};

/// Right-hand side that can be evaluated on a tape.
pub trait TapedFunc {
    fn eval_tape(&self, tape: &mut Tape, segment: usize, t: f64, x: Var, params: &[Var]) -> Result<Var, OdeError>;
}

/// Records an RK4 solve of `f` from `x0` and returns the output nodes
/// (`outputs[0] == x0`). `jumps[i]`, when given, is added at grid point `i`.
pub fn integrate_taped<F: TapedFunc + ?Sized>(
    f: &F,
    tape: &mut Tape,
    x0: Var,
    params: &[Var],
    t_grid: &[f64],
    cfg: &SolverConfig,
    jumps: Option<&[Tensor]>,
) -> Result<Vec<Var>, OdeError> {
    check_grid(t_grid)?;
    if cfg.method != Method::Rk4 {
        return Err(OdeError::Config("taped integration supports rk4 only".into()));
    }
    let mut outputs = vec![x0];
    let mut y = x0;
    for seg in 0..t_grid.len() - 1 {
        let (t0, t1) = (t_grid[seg], t_grid[seg + 1]);
        let steps = cfg.rk4_steps(t1 - t0);
        let h = (t1 - t0) / steps as f64;
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            let k1 = f.eval_tape(tape, seg, t, y, params)?;
            let s = tape.scale(k1, 0.5 * h)?;
            let y2 = tape.add(y, s)?;
            let k2 = f.eval_tape(tape, seg, t + 0.5 * h, y2, params)?;
            let s = tape.scale(k2, 0.5 * h)?;
            let y3 = tape.add(y, s)?;
            let k3 = f.eval_tape(tape, seg, t + 0.5 * h, y3, params)?;
            let s = tape.scale(k3, h)?;
            let y4 = tape.add(y, s)?;
            let k4 = f.eval_tape(tape, seg, t + h, y4, params)?;
            let k23 = tape.add(k2, k3)?;
            let k23 = tape.scale(k23, 2.0)?;
            let acc = tape.add(k1, k23)?;
            let acc = tape.add(acc, k4)?;
            let incr = tape.scale(acc, h / 6.0)?;
            y = tape.add(y, incr)?;
        }
        if let Some(j) = jumps.and_then(|j| j.get(seg + 1)) {
            let c = tape.constant(j.clone());
            y = tape.add(y, c)?;
        }
        outputs.push(y);
    }
    Ok(outputs)
}
