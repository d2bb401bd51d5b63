use super::dynamics::check_dims;
use super::windows::split_trajectories;
use super::{check_finite, stream, EpochRecord, TrainConfig, TrainError, TrainReport};
use crate::datastore::Dataset;
use crate::diffcore::{adam_step, GradMap, OptimState, Tape, Tensor};
use crate::models::{BcPolicy, CvaeModel, Phase};
use crate::rng::{derive_seed, normal_vec, permutation, seeded};

/// Consecutive state pairs `(x_{i−1}, x_i)` of `trajs`, as `(prev, curr)`.
fn pairs(data: &Dataset, trajs: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut prev = Vec::new();
    let mut curr = Vec::new();
    for &t in trajs {
        for i in 1..data.steps() {
            prev.extend_from_slice(data.state(t, i - 1));
            curr.extend_from_slice(data.state(t, i));
        }
    }
    (prev, curr)
}

fn gather(src: &[f64], cols: usize, idx: &[usize]) -> Tensor {
    let rows = idx.iter().flat_map(|&i| src[i * cols..(i + 1) * cols].iter().copied()).collect();
    Tensor::from_rows(idx.len(), cols, rows)
}

fn evenly(count: usize, cap: usize) -> Vec<usize> {
    let take = count.min(cap);
    (0..take).map(|k| k * count / take).collect()
}

/// Minimizes the conditional-VAE loss over shuffled consecutive state pairs.
///
/// Each epoch is one pass. The recorded per-epoch components are measured on
/// a fixed subset with fixed latent noise, so successive values differ only
/// through the parameters. Training stops once both components change by
/// less than `converge_tol` times the total loss for `converge_epochs`
/// epochs in a row. Measuring against the total keeps a collapsed KL term,
/// whose own relative change is noise, from blocking convergence.
pub fn train_cvae(cv: &mut CvaeModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    data.validate()?;
    if data.trajectories.is_empty() || data.steps() < 2 {
        return Err(TrainError::Config("cvae training needs consecutive state pairs".into()));
    }
    if cv.n() != data.n() {
        return Err(TrainError::Config(format!("cvae is {}-dimensional, dataset {}", cv.n(), data.n())));
    }
    let mut report = TrainReport::default();
    if cfg.cvae_epochs == 0 {
        return Ok(report);
    }
    let n = data.n();
    let d = cv.latent_dim;
    let split = split_trajectories(data.trajectories.len(), cfg.holdout_fraction);
    let (prev, curr) = pairs(data, &split.train);
    let count = prev.len() / n;
    let mon = evenly(count, cfg.eval_windows * 4);
    let (mon_prev, mon_curr) = (gather(&prev, n, &mon), gather(&curr, n, &mon));
    let mon_eps = Tensor::from_rows(
        mon.len(),
        d,
        normal_vec(&mut seeded(derive_seed(cfg.seed, stream::CVAE + 100)), mon.len() * d),
    );
    let mut rng = seeded(derive_seed(cfg.seed, stream::CVAE));
    let mut opt = OptimState::new(&cv.params(), cfg.adam(cfg.lr_cvae))?;
    let mut calm = 0usize;
    for epoch in 0..cfg.cvae_epochs {
        opt.set_epoch(epoch);
        let lr = opt.effective_lr();
        let order = permutation(&mut rng, count);
        for idx in order.chunks(cfg.batch_size) {
            let (xp, xc) = (gather(&prev, n, idx), gather(&curr, n, idx));
            let eps = Tensor::from_rows(idx.len(), d, normal_vec(&mut rng, idx.len() * d));
            let mut tape = Tape::new();
            let p = cv.register(&mut tape, true);
            let t = cv.loss_tape(&mut tape, &xc, &xp, &eps, &p)?;
            check_finite(tape.value(t.total).item(), "cvae", epoch)?;
            let g = tape.backward(t.total, &Tensor::scalar(1.0))?;
            let grads = GradMap {
                grads: p.iter().map(|v| g.wrt(*v)).collect(),
            };
            adam_step(&mut cv.params_mut(), &grads, &mut opt)?;
        }
        let mut tape = Tape::new();
        let p = cv.register(&mut tape, false);
        let t = cv.loss_tape(&mut tape, &mon_curr, &mon_prev, &mon_eps, &p)?;
        let (rec, kl) = (tape.value(t.reconstruction).item(), tape.value(t.kl).item());
        check_finite(rec + kl, "cvae", epoch)?;
        if let Some(last) = report.history.last() {
            let scale = last.loss.abs().max(1e-12);
            let moved = |a: f64, b: Option<f64>| (a - b.unwrap_or(f64::NAN)).abs() / scale;
            let steady = moved(rec, last.reconstruction) < cfg.converge_tol && moved(kl, last.kl) < cfg.converge_tol;
            calm = if steady { calm + 1 } else { 0 };
        }
        report.history.push(EpochRecord {
            epoch,
            phase: Phase::Cvae,
            loss: rec + kl,
            lr,
            reconstruction: Some(rec),
            kl: Some(kl),
        });
        if calm >= cfg.converge_epochs {
            report.converged = true;
            break;
        }
    }
    let (hp, hc) = pairs(data, split.eval());
    let hidx = evenly(hp.len() / n, cfg.eval_windows * 4);
    let heps = Tensor::from_rows(
        hidx.len(),
        d,
        normal_vec(&mut seeded(derive_seed(cfg.seed, stream::CVAE + 200)), hidx.len() * d),
    );
    let mut tape = Tape::new();
    let p = cv.register(&mut tape, false);
    let t = cv.loss_tape(&mut tape, &gather(&hc, n, &hidx), &gather(&hp, n, &hidx), &heps, &p)?;
    report.heldout_loss = Some(tape.value(t.total).item());
    cv.phase = Phase::Cvae;
    cv.final_loss = report.final_loss();
    Ok(report.finish())
}

/// Mean squared error on standardized actions.
fn bc_loss(bc: &BcPolicy, tape: &mut Tape, x: &Tensor, u: &Tensor, p: &[crate::diffcore::Var]) -> Result<crate::diffcore::Var, TrainError> {
    let xv = tape.constant(x.clone());
    let pred = bc.forward_tape(tape, xv, p)?;
    let target = {
        let mut t = u.clone();
        let m = u.cols();
        for row in t.data_mut().chunks_mut(m) {
            for ((v, mu), s) in row.iter_mut().zip(&bc.norm.u_mean).zip(&bc.norm.u_std) {
                *v = (*v - mu) / s;
            }
        }
        tape.constant(t)
    };
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / x.rows() as f64)?)
}

/// Behaviour cloning: regresses expert actions on states, one pass over all
/// training pairs per epoch.
pub fn train_bc(bc: &mut BcPolicy, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    data.validate()?;
    if data.trajectories.is_empty() {
        return Err(TrainError::Config("dataset is empty".into()));
    }
    check_dims(bc.norm.n(), bc.norm.m(), data)?;
    let mut report = TrainReport::default();
    if cfg.bc_epochs == 0 {
        return Ok(report);
    }
    let (n, m) = (data.n(), data.m());
    let split = split_trajectories(data.trajectories.len(), cfg.holdout_fraction);
    let collect = |trajs: &[usize]| {
        let mut xs = Vec::new();
        let mut us = Vec::new();
        for &t in trajs {
            xs.extend_from_slice(&data.trajectories[t].states);
            us.extend_from_slice(&data.trajectories[t].actions);
        }
        (xs, us)
    };
    let (xs, us) = collect(&split.train);
    let count = xs.len() / n;
    let mut rng = seeded(derive_seed(cfg.seed, stream::BC));
    let mut opt = OptimState::new(&bc.params(), cfg.adam(cfg.lr_ctrl))?;
    for epoch in 0..cfg.bc_epochs {
        opt.set_epoch(epoch);
        let lr = opt.effective_lr();
        let order = permutation(&mut rng, count);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let p = bc.register(&mut tape, true);
            let loss = bc_loss(bc, &mut tape, &gather(&xs, n, idx), &gather(&us, m, idx), &p)?;
            let g = tape.backward(loss, &Tensor::scalar(1.0))?;
            let grads = GradMap {
                grads: p.iter().map(|v| g.wrt(*v)).collect(),
            };
            total += tape.value(loss).item();
            batches += 1;
            adam_step(&mut bc.params_mut(), &grads, &mut opt)?;
        }
        let loss = total / batches as f64;
        check_finite(loss, "bc", epoch)?;
        report.history.push(EpochRecord {
            epoch,
            phase: Phase::Bc,
            loss,
            lr,
            reconstruction: None,
            kl: None,
        });
    }
    let (hx, hu) = collect(split.eval());
    let mut tape = Tape::new();
    let p = bc.register(&mut tape, false);
    let rows = hx.len() / n;
    let loss = bc_loss(bc, &mut tape, &Tensor::from_rows(rows, n, hx), &Tensor::from_rows(rows, m, hu), &p)?;
    report.heldout_loss = Some(tape.value(loss).item());
    bc.phase = Phase::Bc;
    bc.final_loss = report.final_loss();
    Ok(report.finish())
}
