use super::windows::{sample_windows, spread_windows, split_trajectories, WindowBatch};
use super::{
    check_dataset, check_finite, chunked, stream, take_rows, EpochRecord, GradientPath, TrainConfig, TrainError,
    TrainReport,
};
use crate::datastore::Dataset;
use crate::diffcore::{adam_step, GradMap, OptimState, Tape, Tensor, Var};
use crate::models::{DynModel, ModelError, Phase};
use crate::odeint::{integrate, integrate_taped, integrate_with_grad, AdjointFunc, OdeError, OdeFunc, SolverConfig, TapedFunc};
use crate::rng::{derive_seed, seeded};

pub(crate) fn ode_err(e: ModelError) -> OdeError {
    match e {
        ModelError::Diff(d) => OdeError::Model(d),
        other => OdeError::Config(other.to_string()),
    }
}

/// Learned dynamics driven by per-segment held controls, for the tape.
struct ZohTaped<'a> {
    dm: &'a DynModel,
    us: Vec<Var>,
}

impl TapedFunc for ZohTaped<'_> {
    fn eval_tape(&self, tape: &mut Tape, segment: usize, _t: f64, x: Var, params: &[Var]) -> Result<Var, OdeError> {
        self.dm.forward_tape(tape, x, self.us[segment], params).map_err(ode_err)
    }
}

/// Batched learned dynamics on a flat `[B·n]` state with per-segment
/// controls; the adjoint parameters are the network weights.
pub(crate) struct ZohOde<'a> {
    pub dm: &'a DynModel,
    pub us: Vec<Tensor>,
    pub rows: usize,
}

impl OdeFunc for ZohOde<'_> {
    fn dim(&self) -> usize {
        self.rows * self.dm.n()
    }

    fn eval(&self, segment: usize, _t: f64, x: &[f64], dx: &mut [f64]) -> Result<(), OdeError> {
        let xt = Tensor::from_rows(self.rows, self.dm.n(), x.to_vec());
        let out = self.dm.forward(&xt, &self.us[segment]).map_err(ode_err)?;
        dx.copy_from_slice(out.data());
        Ok(())
    }
}

impl AdjointFunc for ZohOde<'_> {
    fn num_params(&self) -> usize {
        self.dm.num_params()
    }

    fn vjp(
        &self,
        segment: usize,
        _t: f64,
        x: &[f64],
        a: &[f64],
        f_out: &mut [f64],
        ax_out: &mut [f64],
        ap_out: &mut [f64],
    ) -> Result<(), OdeError> {
        let n = self.dm.n();
        let mut tape = Tape::new();
        let p = self.dm.register(&mut tape, true);
        let xv = tape.leaf(Tensor::from_rows(self.rows, n, x.to_vec()));
        let uv = tape.constant(self.us[segment].clone());
        let out = self.dm.forward_tape(&mut tape, xv, uv, &p).map_err(ode_err)?;
        f_out.copy_from_slice(tape.value(out).data());
        let g = tape.backward(out, &Tensor::from_rows(self.rows, n, a.to_vec()))?;
        ax_out.copy_from_slice(g.wrt(xv).data());
        let mut off = 0;
        for v in &p {
            let gv = g.wrt(*v);
            ap_out[off..off + gv.len()].copy_from_slice(gv.data());
            off += gv.len();
        }
        Ok(())
    }
}

/// `Σ ‖(x̂ − x_e) ⊙ w‖²` on the tape.
pub(crate) fn tape_sq_err(tape: &mut Tape, xhat: Var, target: Tensor, w: &[f64]) -> Result<Var, TrainError> {
    let t = tape.constant(target);
    let d = tape.sub(xhat, t)?;
    let d = tape.scale_cols(d, w)?;
    let s = tape.square(d)?;
    Ok(tape.sum(s)?)
}

/// Loss `scale · Σ_k ‖(x̂_k − x_k) ⊙ w‖²` over outputs `k ≥ 1` and its
/// gradient with respect to each output.
pub(crate) fn flat_loss(outputs: &[Vec<f64>], targets: &[Tensor], w: &[f64], scale: f64) -> (f64, Vec<Vec<f64>>) {
    let n = w.len();
    let mut loss = 0.0;
    let mut grads = vec![vec![0.0; outputs[0].len()]; outputs.len()];
    for k in 1..outputs.len() {
        for (idx, (xh, xe)) in outputs[k].iter().zip(targets[k].data()).enumerate() {
            let wj = w[idx % n];
            let d = (xh - xe) * wj;
            loss += d * d;
            grads[k][idx] = 2.0 * scale * d * wj;
        }
    }
    (loss * scale, grads)
}

pub(crate) fn unflatten(flat: &[f64], like: &[&Tensor]) -> GradMap {
    let mut off = 0;
    let grads = like
        .iter()
        .map(|t| {
            let g = Tensor::new(t.shape().to_vec(), flat[off..off + t.len()].to_vec()).expect("shape matches");
            off += t.len();
            g
        })
        .collect();
    GradMap { grads }
}

pub(crate) fn time_grid(tau: usize, dt: f64) -> Vec<f64> {
    (0..=tau).map(|k| k as f64 * dt).collect()
}

fn chunk_grad(
    dm: &DynModel,
    batch: &WindowBatch,
    r: std::ops::Range<usize>,
    solver: &SolverConfig,
    grid: &[f64],
    path: GradientPath,
    scale: f64,
) -> Result<(f64, GradMap), TrainError> {
    let w = dm.norm.inv_x_std();
    let targets: Vec<Tensor> = batch.states.iter().map(|s| take_rows(s, r.clone())).collect();
    match path {
        GradientPath::Direct => {
            let mut tape = Tape::new();
            let p = dm.register(&mut tape, true);
            let x0 = tape.constant(targets[0].clone());
            let us = batch.actions.iter().map(|u| tape.constant(take_rows(u, r.clone()))).collect();
            let f = ZohTaped { dm, us };
            let outs = integrate_taped(&f, &mut tape, x0, &p, grid, solver, None)?;
            let mut acc = tape_sq_err(&mut tape, outs[1], targets[1].clone(), &w)?;
            for k in 2..outs.len() {
                let term = tape_sq_err(&mut tape, outs[k], targets[k].clone(), &w)?;
                acc = tape.add(acc, term)?;
            }
            let loss = tape.scale(acc, scale)?;
            let g = tape.backward(loss, &Tensor::scalar(1.0))?;
            Ok((tape.value(loss).item(), GradMap { grads: p.iter().map(|v| g.wrt(*v)).collect() }))
        }
        GradientPath::Adjoint => {
            let f = ZohOde {
                dm,
                us: batch.actions.iter().map(|u| take_rows(u, r.clone())).collect(),
                rows: r.len(),
            };
            let outs = integrate(&f, targets[0].data(), grid, solver)?;
            let (loss, lg) = flat_loss(&outs, &targets, &w, scale);
            let res = integrate_with_grad(&f, grid, solver, &outs, None, &lg)?;
            Ok((loss, unflatten(&res.param_grad, &dm.params())))
        }
    }
}

/// Mean window loss of open-loop predictions under the recorded controls,
/// over up to `cfg.eval_windows` windows of `trajs`.
pub fn dynamics_loss(dm: &DynModel, data: &Dataset, trajs: &[usize], cfg: &TrainConfig) -> Result<f64, TrainError> {
    let tau = cfg.tau;
    check_dataset(data, tau)?;
    let wins = spread_windows(trajs, data.steps(), tau, cfg.eval_windows);
    let batch = WindowBatch::gather(data, &wins, tau);
    let solver = cfg.solver(data.manifest.dt);
    let grid = time_grid(tau, data.manifest.dt);
    let w = dm.norm.inv_x_std();
    let scale = 1.0 / (wins.len() * tau) as f64;
    let mut total = 0.0;
    for s in (0..wins.len()).step_by(cfg.chunk) {
        let r = s..(s + cfg.chunk).min(wins.len());
        let targets: Vec<Tensor> = batch.states.iter().map(|t| take_rows(t, r.clone())).collect();
        let f = ZohOde {
            dm,
            us: batch.actions.iter().map(|u| take_rows(u, r.clone())).collect(),
            rows: r.len(),
        };
        let outs = integrate(&f, targets[0].data(), &grid, &solver)?;
        total += flat_loss(&outs, &targets, &w, scale).0;
    }
    Ok(total)
}

pub(crate) fn check_dims(dm_n: usize, dm_m: usize, data: &Dataset) -> Result<(), TrainError> {
    if dm_n != data.n() || dm_m != data.m() {
        return Err(TrainError::Config(format!(
            "model is {dm_n}x{dm_m}, dataset is {}x{}",
            data.n(),
            data.m()
        )));
    }
    Ok(())
}

/// Fits `f̂_θ` so that windows integrated from the expert's first state
/// under the expert's held controls reproduce the expert states. Stops when
/// the epoch loss falls below `ε` or after `max_epochs`.
pub fn train_dynamics(dm: &mut DynModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_dataset(data, cfg.tau)?;
    check_dims(dm.n(), dm.m(), data)?;
    let mut report = TrainReport::default();
    if cfg.max_epochs == 0 {
        return Ok(report);
    }
    let dt = data.manifest.dt;
    let split = split_trajectories(data.trajectories.len(), cfg.holdout_fraction);
    let solver = cfg.solver(dt);
    let grid = time_grid(cfg.tau, dt);
    let mut rng = seeded(derive_seed(cfg.seed, stream::DYNAMICS));
    let mut opt = OptimState::new(&dm.params(), cfg.adam(cfg.lr_dyn))?;
    let scale = 1.0 / (cfg.batch_size * cfg.tau) as f64;
    for epoch in 0..cfg.max_epochs {
        opt.set_epoch(epoch);
        let lr = opt.effective_lr();
        let mut total = 0.0;
        for _ in 0..cfg.batches_per_epoch {
            let wins = sample_windows(&mut rng, &split.train, data.steps(), cfg.tau, cfg.batch_size);
            let batch = WindowBatch::gather(data, &wins, cfg.tau);
            let model = &*dm;
            let (loss, grads) = chunked(batch.rows(), cfg.chunk, |r| {
                chunk_grad(model, &batch, r, &solver, &grid, cfg.gradient, scale)
            })?;
            check_finite(loss, "dynamics", epoch)?;
            adam_step(&mut dm.params_mut(), &grads, &mut opt)?;
            total += loss;
        }
        let loss = total / cfg.batches_per_epoch as f64;
        report.history.push(EpochRecord {
            epoch,
            phase: Phase::Dynamics,
            loss,
            lr,
            reconstruction: None,
            kl: None,
        });
        if loss < cfg.epsilon {
            report.converged = true;
            break;
        }
    }
    let heldout = dynamics_loss(dm, data, split.eval(), cfg)?;
    report.heldout_loss = Some(heldout);
    dm.phase = Phase::Dynamics;
    dm.final_loss = report.final_loss();
    dm.heldout_loss = Some(heldout);
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DynStructure, Normalizer};
    use crate::plants::{gen_demos, ExpertConfig, PlantKind, PlantSpec};

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        d / b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn direct_and_adjoint_gradients_agree() {
        let p = PlantSpec::p2();
        let data = gen_demos(&p, &ExpertConfig::for_plant(PlantKind::P2), 3, 40, 1).unwrap();
        let dm = DynModel::new(DynStructure::Affine, Normalizer::from_dataset(&data), &[16, 16], 3).unwrap();
        let tau = 8;
        let wins = spread_windows(&[0, 1, 2], data.steps(), tau, 12);
        let batch = WindowBatch::gather(&data, &wins, tau);
        let mut cfg = TrainConfig::desk();
        cfg.tau = tau;
        let solver = cfg.solver(p.dt);
        let grid = time_grid(tau, p.dt);
        let scale = 1.0 / (12 * tau) as f64;
        let (l1, g1) = chunk_grad(&dm, &batch, 0..12, &solver, &grid, GradientPath::Direct, scale).unwrap();
        let (l2, g2) = chunk_grad(&dm, &batch, 0..12, &solver, &grid, GradientPath::Adjoint, scale).unwrap();
        assert!((l1 - l2).abs() <= 1e-12 * l1.abs().max(1.0), "{l1} {l2}");
        let e = rel(&g2.flatten(), &g1.flatten());
        assert!(e < 1e-3, "relative gradient error {e}");
    }

    #[test]
    fn chunking_does_not_change_the_loss() {
        let p = PlantSpec::p1();
        let data = gen_demos(&p, &ExpertConfig::default(), 4, 40, 2).unwrap();
        let dm = DynModel::new(DynStructure::Affine, Normalizer::from_dataset(&data), &[8], 1).unwrap();
        let mut cfg = TrainConfig::desk();
        cfg.tau = 4;
        let a = dynamics_loss(&dm, &data, &[0, 1, 2, 3], &cfg).unwrap();
        cfg.chunk = 7;
        let b = dynamics_loss(&dm, &data, &[0, 1, 2, 3], &cfg).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
    }
}
