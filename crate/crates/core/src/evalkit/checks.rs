use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{anchors, report, run_batch, setups, EvalError, EvalReport, Policy, RolloutCfg, Summary};
use crate::datastore::Dataset;
use crate::models::{extract_affine, BcPolicy, CvaeModel, DynModel, Normalizer};
use crate::plants::{ndi_from_affine, ndi_oracle, tracking_virtual_input, DisturbanceCfg, PlantSpec};
use crate::rng::seeded;
use crate::train::{train_bc, TrainConfig};

/// Relative control error of a tracking controller against NDI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NdiMatchReport {
    pub pairs: usize,
    /// Against inversion of the true plant.
    pub vs_true: Summary,
    /// Against inversion of the learned affine dynamics, when given.
    pub vs_model: Option<Summary>,
}

fn act_nu(policy: Policy, spec: &PlantSpec, x: &[f64], nu: &[f64]) -> Result<Vec<f64>, EvalError> {
    match policy {
        Policy::Learned(cm) => Ok(cm.act(nu, x)?),
        Policy::ModelNdi(dm) => {
            let (a, g) = extract_affine(dm, x)?;
            Ok(ndi_from_affine(&a, &g, spec.n, spec.m, nu, x)?)
        }
        Policy::Oracle => Ok(ndi_oracle(spec, x, nu)?),
        other => Err(EvalError::Config(format!("{} does not take a virtual input", other.name()))),
    }
}

fn rel_err(u: &[f64], v: &[f64], scale: f64) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / scale
}

/// Compares `policy(ν, x)` with `G⁺(x)(ν − a(x))` on `pairs` demonstration
/// samples drawn with `seed`.
///
/// Each pair takes a demonstrated state `x = x_e(t_i)` and the tracking
/// command toward `x_e(t_{i+1})`, so only states observed in the data are
/// used. Errors are `‖u − u_ndi‖ / ‖s_u‖` with `s_u` the per-input standard
/// deviation of the demonstrated actions.
pub fn ndi_match_check(
    policy: Policy,
    dm: Option<&DynModel>,
    spec: &PlantSpec,
    data: &Dataset,
    pairs: usize,
    seed: u64,
) -> Result<NdiMatchReport, EvalError> {
    data.validate()?;
    if pairs == 0 || data.trajectories.is_empty() {
        return Err(EvalError::Config("need at least one pair and one trajectory".into()));
    }
    let gain = match policy {
        Policy::Learned(cm) => cm.train_gain,
        _ => 0.1,
    };
    let scale = data.manifest.norm.action_std.iter().map(|s| s * s).sum::<f64>().sqrt();
    let mut rng = seeded(seed);
    let mut vs_true = Vec::with_capacity(pairs);
    let mut vs_model = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let t = rng.random_range(0..data.trajectories.len());
        let i = rng.random_range(0..data.steps() - 1);
        let x = data.state(t, i);
        let nu = tracking_virtual_input(gain, spec.dt, x, data.state(t, i + 1), x);
        let u = act_nu(policy, spec, x, &nu)?;
        vs_true.push(rel_err(&u, &ndi_oracle(spec, x, &nu)?, scale));
        if let Some(dm) = dm {
            let ref_u = act_nu(Policy::ModelNdi(dm), spec, x, &nu)?;
            vs_model.push(rel_err(&u, &ref_u, scale));
        }
    }
    Ok(NdiMatchReport {
        pairs,
        vs_true: Summary::of(&vs_true),
        vs_model: dm.map(|_| Summary::of(&vs_model)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub disturbance: String,
    pub gain: f64,
    pub controller: String,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub plant: String,
    pub cells: Vec<SweepCell>,
}

impl Sweep {
    pub fn cell(&self, disturbance: &str, gain: f64, controller: &str) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.disturbance == disturbance && c.gain == gain && c.controller == controller)
    }
}

/// Every `(disturbance, gain, controller)` combination. Episodes, anchors
/// and terrain are shared by all controllers of a disturbance; a cell that
/// fails records its error instead of a report.
pub fn robustness_sweep(
    spec: &PlantSpec,
    data: &Dataset,
    controllers: &[(String, Policy)],
    cv: Option<&CvaeModel>,
    disturbances: &[(String, DisturbanceCfg)],
    gains: &[f64],
    base: &RolloutCfg,
) -> Result<Sweep, EvalError> {
    let mut cells = Vec::new();
    for (dname, dist) in disturbances {
        let dcfg = RolloutCfg {
            disturbance: dist.clone(),
            ..base.clone()
        };
        let prepared = setups(spec, data, cv, &dcfg).and_then(|s| Ok((anchors(spec, data, &s)?, s)));
        for &gain in gains {
            let cfg = RolloutCfg { gain, ..dcfg.clone() };
            for (cname, policy) in controllers {
                let result = prepared.as_ref().map_err(|e| e.to_string()).and_then(|(anc, set)| {
                    cfg.validate().map_err(|e| e.to_string())?;
                    let rolls = run_batch(spec, data, set, *policy, gain).map_err(|e| e.to_string())?;
                    Ok(report(cname, spec, &cfg, set, &rolls, *anc))
                });
                let (report, error) = match result {
                    Ok(r) => (Some(r), None),
                    Err(e) => (None, Some(e)),
                };
                cells.push(SweepCell {
                    disturbance: dname.clone(),
                    gain,
                    controller: cname.clone(),
                    report,
                    error,
                });
            }
        }
    }
    Ok(Sweep {
        plant: spec.name().to_string(),
        cells,
    })
}

/// Trains a direct state-to-action policy on the demonstrations and scores
/// it with the same harness.
pub fn bc_baseline(
    spec: &PlantSpec,
    data: &Dataset,
    tcfg: &TrainConfig,
    rcfg: &RolloutCfg,
) -> Result<(BcPolicy, EvalReport), EvalError> {
    let mut bc = BcPolicy::new(Normalizer::from_dataset(data), &tcfg.ctrl_hidden, tcfg.seed)?;
    train_bc(&mut bc, data, tcfg).map_err(|e| EvalError::Train(e.to_string()))?;
    let rep = super::evaluate(spec, data, Policy::Bc(&bc), None, rcfg)?;
    Ok((bc, rep))
}
