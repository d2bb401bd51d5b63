use super::dynamics::{check_dims, flat_loss, ode_err, tape_sq_err};
use super::windows::{sample_windows, spread_windows, split_trajectories, WindowBatch};
use super::{
    check_dataset, check_finite, chunked, stream, take_rows, EpochRecord, GradientPath, TrainConfig, TrainError,
    TrainReport,
};
use crate::datastore::Dataset;
use crate::diffcore::{adam_step, GradMap, OptimState, Tape, Tensor, Var};
use crate::models::{extract_affine, CtrlModel, DynModel, Phase};
use crate::odeint::{
    integrate, integrate_taped, integrate_with_grad, AdjointFunc, OdeError, OdeFunc, SolverConfig, TapedFunc,
};
use crate::plants::{ndi_from_affine, tracking_virtual_input};
use crate::rng::{derive_seed, normal_vec, seeded, Rng};

/// A batched tracking controller `u = π(ν, x)`.
pub trait BatchPolicy: Sync {
    fn act_batch(&self, nu: &Tensor, x: &Tensor) -> Result<Tensor, TrainError>;
}

impl BatchPolicy for CtrlModel {
    fn act_batch(&self, nu: &Tensor, x: &Tensor) -> Result<Tensor, TrainError> {
        Ok(self.forward(nu, x)?)
    }
}

/// Inversion of learned affine dynamics: `u = Ĝ⁺(x)(ν − â(x))`.
pub struct ModelNdi<'a>(pub &'a DynModel);

impl BatchPolicy for ModelNdi<'_> {
    fn act_batch(&self, nu: &Tensor, x: &Tensor) -> Result<Tensor, TrainError> {
        let (n, m) = (self.0.n(), self.0.m());
        let mut out = Vec::with_capacity(x.rows() * m);
        for r in 0..x.rows() {
            let (a, g) = extract_affine(self.0, x.row_slice(r))?;
            out.extend(ndi_from_affine(&a, &g, n, m, nu.row_slice(r), x.row_slice(r))?);
        }
        Ok(Tensor::from_rows(x.rows(), m, out))
    }
}

/// Learned dynamics under one held control; adjoint parameters are the
/// held controls themselves.
struct HeldOde<'a> {
    dm: &'a DynModel,
    u: Tensor,
}

impl OdeFunc for HeldOde<'_> {
    fn dim(&self) -> usize {
        self.u.rows() * self.dm.n()
    }

    fn eval(&self, _segment: usize, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), OdeError> {
        let xt = Tensor::from_rows(self.u.rows(), self.dm.n(), x.to_vec());
        dx.copy_from_slice(self.dm.forward(&xt, &self.u).map_err(ode_err)?.data());
        Ok(())
    }
}

impl AdjointFunc for HeldOde<'_> {
    fn num_params(&self) -> usize {
        self.u.len()
    }

    fn vjp(
        &self,
        _segment: usize,
        _t: f64,
        x: &[f64],
        a: &[f64],
        f_out: &mut [f64],
        ax_out: &mut [f64],
        ap_out: &mut [f64],
    ) -> Result<(), OdeError> {
        let (b, n) = (self.u.rows(), self.dm.n());
        let mut tape = Tape::new();
        let p = self.dm.register(&mut tape, false);
        let xv = tape.leaf(Tensor::from_rows(b, n, x.to_vec()));
        let uv = tape.leaf(self.u.clone());
        let out = self.dm.forward_tape(&mut tape, xv, uv, &p).map_err(ode_err)?;
        f_out.copy_from_slice(tape.value(out).data());
        let g = tape.backward(out, &Tensor::from_rows(b, n, a.to_vec()))?;
        ax_out.copy_from_slice(g.wrt(xv).data());
        ap_out.copy_from_slice(g.wrt(uv).data());
        Ok(())
    }
}

struct HeldTaped<'a> {
    dm: &'a DynModel,
    u: Var,
}

impl TapedFunc for HeldTaped<'_> {
    fn eval_tape(&self, tape: &mut Tape, _segment: usize, _t: f64, x: Var, params: &[Var]) -> Result<Var, OdeError> {
        self.dm.forward_tape(tape, x, self.u, params).map_err(ode_err)
    }
}

/// Fixed pieces of one closed-loop window problem.
struct Loop<'a> {
    dm: &'a DynModel,
    solver: SolverConfig,
    dt: f64,
    gain: f64,
    w: Vec<f64>,
    scale: f64,
}

impl Loop<'_> {
    fn nu_tape(&self, tape: &mut Tape, x: Var, r_now: &Tensor, r_next: &Tensor) -> Result<Var, TrainError> {
        let rn = tape.constant(r_now.clone());
        let rx = tape.constant(r_next.clone());
        let e_now = tape.sub(rn, x)?;
        let e_next = tape.sub(rx, x)?;
        let fb = tape.scale(e_now, self.gain)?;
        let ff = tape.scale(e_next, 1.0 / self.dt)?;
        Ok(tape.add(ff, fb)?)
    }

    fn nu_plain(&self, x: &[f64], r_now: &Tensor, r_next: &Tensor) -> Tensor {
        let n = self.dm.n();
        let b = r_now.rows();
        let mut out = Vec::with_capacity(b * n);
        for r in 0..b {
            out.extend(tracking_virtual_input(
                self.gain,
                self.dt,
                r_now.row_slice(r),
                r_next.row_slice(r),
                &x[r * n..(r + 1) * n],
            ));
        }
        Tensor::from_rows(b, n, out)
    }

    fn seg_grid(&self, s: usize) -> [f64; 2] {
        [s as f64 * self.dt, (s + 1) as f64 * self.dt]
    }

    /// Plain closed-loop rollout. Returns the post-jump sample states, the
    /// pre-jump segment end states and the held controls.
    fn rollout(
        &self,
        policy: &dyn BatchPolicy,
        refs: &[Tensor],
        jumps: Option<&[Tensor]>,
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Tensor>), TrainError> {
        let (b, n) = (refs[0].rows(), self.dm.n());
        let tau = refs.len() - 1;
        let mut x = refs[0].data().to_vec();
        let mut starts = vec![x.clone()];
        let mut ends = Vec::with_capacity(tau);
        let mut us = Vec::with_capacity(tau);
        for s in 0..tau {
            let nu = self.nu_plain(&x, &refs[s], &refs[s + 1]);
            let u = policy.act_batch(&nu, &Tensor::from_rows(b, n, x.clone()))?;
            let f = HeldOde { dm: self.dm, u };
            let out = integrate(&f, &x, &self.seg_grid(s), &self.solver)?;
            let mut next = out[1].clone();
            ends.push(out[1].clone());
            if let Some(j) = jumps.and_then(|j| j.get(s + 1)) {
                for (v, d) in next.iter_mut().zip(j.data()) {
                    *v += d;
                }
            }
            us.push(f.u);
            x = next.clone();
            starts.push(next);
        }
        Ok((starts, ends, us))
    }

    fn direct_grad(&self, cm: &CtrlModel, refs: &[Tensor], jumps: Option<&[Tensor]>) -> Result<(f64, GradMap), TrainError> {
        let tau = refs.len() - 1;
        let mut tape = Tape::new();
        let p = cm.register(&mut tape, true);
        let dp = self.dm.register(&mut tape, false);
        let mut x = tape.constant(refs[0].clone());
        let mut acc: Option<Var> = None;
        for s in 0..tau {
            let nu = self.nu_tape(&mut tape, x, &refs[s], &refs[s + 1])?;
            let u = cm.forward_tape(&mut tape, nu, x, &p)?;
            let f = HeldTaped { dm: self.dm, u };
            let outs = integrate_taped(&f, &mut tape, x, &dp, &self.seg_grid(s), &self.solver, None)?;
            x = outs[1];
            if let Some(j) = jumps.and_then(|j| j.get(s + 1)) {
                let c = tape.constant(j.clone());
                x = tape.add(x, c)?;
            }
            let term = tape_sq_err(&mut tape, x, refs[s + 1].clone(), &self.w)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
        let loss = tape.scale(acc.expect("tau >= 1"), self.scale)?;
        let g = tape.backward(loss, &Tensor::scalar(1.0))?;
        Ok((tape.value(loss).item(), GradMap { grads: p.iter().map(|v| g.wrt(*v)).collect() }))
    }

    /// Segment-wise adjoint: each interval is solved backwards with the
    /// held control as parameter, then `∂L/∂u_i` is pulled through `π`.
    fn adjoint_grad(&self, cm: &CtrlModel, refs: &[Tensor], jumps: Option<&[Tensor]>) -> Result<(f64, GradMap), TrainError> {
        let tau = refs.len() - 1;
        let (b, n) = (refs[0].rows(), self.dm.n());
        let (starts, ends, us) = self.rollout(cm, refs, jumps)?;
        let (loss, lg) = flat_loss(&starts, refs, &self.w, self.scale);
        let mut grads = GradMap::zeros_like(&cm.params());
        let mut a = lg[tau].clone();
        let zero = vec![0.0; b * n];
        for s in (0..tau).rev() {
            let f = HeldOde { dm: self.dm, u: us[s].clone() };
            let states = [starts[s].clone(), ends[s].clone()];
            let res = integrate_with_grad(&f, &self.seg_grid(s), &self.solver, &states, None, &[zero.clone(), a])?;
            let mut tape = Tape::new();
            let p = cm.register(&mut tape, true);
            let xv = tape.leaf(Tensor::from_rows(b, n, starts[s].clone()));
            let nu = self.nu_tape(&mut tape, xv, &refs[s], &refs[s + 1])?;
            let u = cm.forward_tape(&mut tape, nu, xv, &p)?;
            let g = tape.backward(u, &Tensor::from_rows(b, cm.m(), res.param_grad.clone()))?;
            for (acc, v) in grads.grads.iter_mut().zip(&p) {
                acc.add_assign(&g.wrt(*v));
            }
            a = res.x0_grad;
            for ((ai, gx), gl) in a.iter_mut().zip(g.wrt(xv).data()).zip(&lg[s]) {
                *ai += gx + gl;
            }
        }
        Ok((loss, grads))
    }
}

fn refs_of(batch: &WindowBatch, r: std::ops::Range<usize>) -> Vec<Tensor> {
    batch.states.iter().map(|s| take_rows(s, r.clone())).collect()
}

/// Closed-loop window loss of `policy` on the learned dynamics, without
/// noise, over up to `cfg.eval_windows` windows of `trajs`. The reference
/// is the expert's own state sequence.
pub fn tracking_loss(
    dm: &DynModel,
    policy: &dyn BatchPolicy,
    data: &Dataset,
    trajs: &[usize],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    check_dataset(data, cfg.tau)?;
    check_dims(dm.n(), dm.m(), data)?;
    let wins = spread_windows(trajs, data.steps(), cfg.tau, cfg.eval_windows);
    let batch = WindowBatch::gather(data, &wins, cfg.tau);
    let lp = Loop {
        dm,
        solver: cfg.solver(data.manifest.dt),
        dt: data.manifest.dt,
        gain: cfg.train_gain,
        w: dm.norm.inv_x_std(),
        scale: 1.0 / (wins.len() * cfg.tau) as f64,
    };
    let mut total = 0.0;
    for s in (0..wins.len()).step_by(cfg.chunk) {
        let refs = refs_of(&batch, s..(s + cfg.chunk).min(wins.len()));
        let (starts, _, _) = lp.rollout(policy, &refs, None)?;
        total += flat_loss(&starts, &refs, &lp.w, lp.scale).0;
    }
    Ok(total)
}

/// Boundary noise `σ_x · s_x ⊙ η` for samples `1..τ−1`; index 0 and `τ`
/// are left unperturbed.
fn draw_jumps(rng: &mut Rng, sigma: f64, x_std: &[f64], rows: usize, tau: usize) -> Vec<Tensor> {
    let n = x_std.len();
    (0..=tau)
        .map(|k| {
            if k == 0 || k == tau {
                return Tensor::zeros(&[rows, n]);
            }
            let mut v = normal_vec(rng, rows * n);
            for (i, e) in v.iter_mut().enumerate() {
                *e *= sigma * x_std[i % n];
            }
            Tensor::from_rows(rows, n, v)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn fit_tracking(
    dm: &DynModel,
    cm: &mut CtrlModel,
    data: &Dataset,
    cfg: &TrainConfig,
    sigma: f64,
    phase: Phase,
    epochs: usize,
    threshold: f64,
) -> Result<TrainReport, TrainError> {
    let mut report = TrainReport::default();
    if epochs == 0 {
        return Ok(report);
    }
    let dt = data.manifest.dt;
    let split = split_trajectories(data.trajectories.len(), cfg.holdout_fraction);
    let lp = Loop {
        dm,
        solver: cfg.solver(dt),
        dt,
        gain: cfg.train_gain,
        w: dm.norm.inv_x_std(),
        scale: 1.0 / (cfg.batch_size * cfg.tau) as f64,
    };
    let mut rng = seeded(derive_seed(cfg.seed, stream::TRACKING));
    let mut noise_rng = seeded(derive_seed(cfg.seed, stream::NOISE));
    cm.train_gain = cfg.train_gain;
    let mut opt = OptimState::new(&cm.params(), cfg.adam(cfg.lr_ctrl))?;
    for epoch in 0..epochs {
        opt.set_epoch(epoch);
        let lr = opt.effective_lr();
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let wins = sample_windows(&mut rng, &split.train, data.steps(), cfg.tau, cfg.batch_size);
            let batch = WindowBatch::gather(data, &wins, cfg.tau);
            let jumps = (sigma > 0.0).then(|| draw_jumps(&mut noise_rng, sigma, &dm.norm.x_std, wins.len(), cfg.tau));
            let model = &*cm;
            let (loss, grads) = chunked(batch.rows(), cfg.chunk, |r| {
                let refs = refs_of(&batch, r.clone());
                let js: Option<Vec<Tensor>> = jumps.as_ref().map(|j| j.iter().map(|t| take_rows(t, r.clone())).collect());
                match cfg.gradient {
                    GradientPath::Direct => lp.direct_grad(model, &refs, js.as_deref()),
                    GradientPath::Adjoint => lp.adjoint_grad(model, &refs, js.as_deref()),
                }
            })?;
            check_finite(loss, phase.name(), epoch)?;
            adam_step(&mut cm.params_mut(), &grads, &mut opt)?;
            total += loss;
        }
        let loss = total / cfg.batches_per_epoch as f64;
        report.history.push(EpochRecord {
            epoch,
            phase,
            loss,
            lr,
            reconstruction: None,
            kl: None,
        });
        if loss < threshold {
            report.converged = true;
            break;
        }
    }
    report.heldout_loss = Some(tracking_loss(dm, cm, data, split.eval(), cfg)?);
    cm.phase = phase;
    cm.final_loss = report.final_loss();
    Ok(report.finish())
}

fn require_dynamics(dm: &DynModel, data: &Dataset) -> Result<(), TrainError> {
    if !dm.is_trained() {
        return Err(TrainError::PhaseOrder("controller training needs a trained dynamics model".into()));
    }
    check_dims(dm.n(), dm.m(), data)
}

/// Phase 2: with `f̂_θ` frozen, fits `π̂_φ` so that the closed loop
/// `ẋ̂ = f̂_θ(x̂, π̂_φ(ν, x̂))`, `ν` computed from the expert's next sample,
/// reproduces the expert windows. Stops at `L_φ < ε`.
pub fn train_controller(dm: &DynModel, cm: &mut CtrlModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_dataset(data, cfg.tau)?;
    require_dynamics(dm, data)?;
    check_dims(cm.n(), cm.m(), data)?;
    fit_tracking(dm, cm, data, cfg, 0.0, Phase::Controller, cfg.max_epochs, cfg.epsilon)
}

/// Phase 3: as phase 2, but each inner sample state is perturbed by
/// Gaussian noise before the next segment starts. Stops at `L'_φ < ε_r`.
pub fn refine_robust(dm: &DynModel, cm: &mut CtrlModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_dataset(data, cfg.tau)?;
    require_dynamics(dm, data)?;
    if !cm.is_trained() {
        return Err(TrainError::PhaseOrder("refinement needs a controller trained in phase 2".into()));
    }
    check_dims(cm.n(), cm.m(), data)?;
    fit_tracking(dm, cm, data, cfg, cfg.sigma_x, Phase::Robust, cfg.refine_epochs, cfg.epsilon_r)
}
