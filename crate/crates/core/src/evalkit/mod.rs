//! Inference-time closed loop on the analytic plants, metrics, the
//! comparison of learned controllers against NDI, robustness sweeps and the
//! behaviour-cloning baseline.
//!
//! Every episode tracks a reference sequence `x_r` sampled at the plant
//! period. Per step the reward is `1 − min(1, ‖x − x_r‖²)`, summed over the
//! episode; an episode that leaves the state domain stops and earns nothing
//! for the remaining steps. Scores are normalized per evaluation batch so
//! that the mean reward of the expert on the undisturbed plant maps to one
//! and that of the random policy to zero; disturbed runs share that scale.

mod checks;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datastore::{DataError, Dataset};
use crate::models::{cvae_generate_with, extract_affine, BcPolicy, CtrlModel, CvaeModel, DynModel, ModelError};
use crate::plants::{
    expert_law, ndi_from_affine, ndi_oracle, tracking_virtual_input, DisturbanceCfg, Plant, PlantError, PlantKind,
    PlantSpec,
};
use crate::rng::{derive_seed, normal_vec, seeded};

pub use checks::{bc_baseline, ndi_match_check, robustness_sweep, NdiMatchReport, Sweep, SweepCell};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Demonstration state sequences, episode `e` using trajectory `e mod N`.
    Replay,
    /// Sequences drawn from the CVAE prior, chained on the previous sample
    /// and started at a demonstration's initial state.
    Cvae,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutCfg {
    pub reference: ReferenceSource,
    /// Feedback gain `K_n` of the tracking law.
    pub gain: f64,
    /// Samples per episode, including the initial one.
    pub steps: usize,
    pub disturbance: DisturbanceCfg,
    pub seed: u64,
    pub episodes: usize,
}

impl Default for RolloutCfg {
    fn default() -> Self {
        Self {
            reference: ReferenceSource::Replay,
            gain: 0.1,
            steps: 200,
            disturbance: DisturbanceCfg::none(),
            seed: 0,
            episodes: 50,
        }
    }
}

impl RolloutCfg {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.steps < 2 {
            return Err(EvalError::Config("steps must be at least 2".into()));
        }
        if self.episodes == 0 {
            return Err(EvalError::Config("episodes must be at least 1".into()));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) {
            return Err(EvalError::Config(format!("gain must be finite and >= 0, got {}", self.gain)));
        }
        Ok(())
    }
}

/// A controller driven through the evaluation harness.
#[derive(Clone, Copy)]
pub enum Policy<'a> {
    /// `u = π̂_φ(ν, x)`.
    Learned(&'a CtrlModel),
    /// Inversion of the learned affine dynamics.
    ModelNdi(&'a DynModel),
    /// Inversion of the true nominal plant.
    Oracle,
    /// The demonstrator's law, fed finite-difference reference rates.
    Expert,
    /// `u ~ N(0, I)` in physical units.
    Random,
    /// `u = π_bc(x)`; ignores the reference.
    Bc(&'a BcPolicy),
}

impl Policy<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Learned(_) => "learned",
            Policy::ModelNdi(_) => "model_ndi",
            Policy::Oracle => "oracle",
            Policy::Expert => "expert",
            Policy::Random => "random",
            Policy::Bc(_) => "bc",
        }
    }
}

/// States, references and controls of one episode, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub n: usize,
    pub m: usize,
    pub dt: f64,
    /// Visited states `x_0..x_k`.
    pub states: Vec<f64>,
    /// The full reference `x_r(t_0..t_{T−1})`.
    pub refs: Vec<f64>,
    /// Controls `u_0..u_{k−1}`.
    pub actions: Vec<f64>,
    /// Reward of each completed transition.
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

impl Rollout {
    pub fn completed(&self) -> usize {
        self.rewards.len()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Root mean squared tracking error over the visited states after `x_0`.
    pub fn rms(&self) -> f64 {
        let n = self.n;
        let k = self.completed();
        if k == 0 {
            return f64::NAN;
        }
        let sq: f64 = (1..=k)
            .map(|i| sq_dist(&self.states[i * n..(i + 1) * n], &self.refs[i * n..(i + 1) * n]))
            .sum();
        (sq / k as f64).sqrt()
    }

    /// Per-sample trace as CSV: `t, x…, x_r…, u…, reward`. The final row
    /// has empty control and reward fields.
    pub fn trace_csv(&self) -> Result<String, EvalError> {
        let (n, m) = (self.n, self.m);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|j| format!("x{j}")));
        header.extend((0..n).map(|j| format!("r{j}")));
        header.extend((0..m).map(|j| format!("u{j}")));
        header.push("reward".into());
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..=self.completed() {
            let mut row = vec![(i as f64 * self.dt).to_string()];
            row.extend(self.states[i * n..(i + 1) * n].iter().map(f64::to_string));
            row.extend(self.refs[i * n..(i + 1) * n].iter().map(f64::to_string));
            if i < self.completed() {
                row.extend(self.actions[i * m..(i + 1) * m].iter().map(f64::to_string));
                row.push(self.rewards[i].to_string());
            } else {
                row.extend(std::iter::repeat_n(String::new(), m + 1));
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Config(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> EvalError {
    EvalError::Config(format!("csv: {e}"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-step reward `1 − min(1, ‖x − x_r‖²)`.
pub fn step_reward(x: &[f64], r: &[f64]) -> f64 {
    let d = sq_dist(x, r);
    if d.is_finite() {
        1.0 - d.min(1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl Summary {
    /// Population statistics of `v`; all zeros for an empty slice.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        let k = v.len() as f64;
        let mean = v.iter().sum::<f64>() / k;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k;
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let mid = s.len() / 2;
        let median = if s.len() % 2 == 1 { s[mid] } else { 0.5 * (s[mid - 1] + s[mid]) };
        Self {
            mean,
            std: var.sqrt(),
            min: s[0],
            max: s[s.len() - 1],
            median,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode: usize,
    /// Demonstration index the reference was taken from (or started at).
    pub source: usize,
    pub reward: f64,
    pub rms: f64,
    pub score: f64,
    pub completed: usize,
    pub terminated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub plant: String,
    pub cfg: RolloutCfg,
    pub expert_reward: f64,
    pub random_reward: f64,
    pub episodes: Vec<EpisodeResult>,
    pub score: Summary,
    pub reward: Summary,
    pub rms: Summary,
    pub terminated: usize,
}

/// Mean expert and random rewards on one batch of episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub expert: f64,
    pub random: f64,
}

impl Anchors {
    /// Smallest expert-over-random margin, in reward units, that still
    /// defines a score.
    pub const MIN_SPREAD: f64 = 1e-3;

    pub fn normalize(&self, reward: f64) -> f64 {
        (reward - self.random) / (self.expert - self.random)
    }
}

/// Strengths of the named test disturbances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceSet {
    /// Constant force on every input.
    pub slope: f64,
    pub uneven_span: f64,
    pub uneven_amplitude: f64,
    pub mass_shift: f64,
    pub length_shift: f64,
    pub damping_shift: f64,
    /// Terrain seed for `uneven`.
    pub seed: u64,
}

impl DisturbanceSet {
    pub fn for_plant(kind: PlantKind) -> Self {
        let base = Self {
            slope: 2.0,
            uneven_span: 0.2,
            uneven_amplitude: 4.0,
            mass_shift: 0.3,
            length_shift: 0.0,
            damping_shift: 1.0,
            seed: 5,
        };
        match kind {
            PlantKind::P1 => base,
            PlantKind::P2 => base,
            PlantKind::P3 => Self {
                uneven_span: 0.5,
                ..base
            },
        }
    }

    pub fn get(&self, name: &str, m: usize) -> Result<DisturbanceCfg, EvalError> {
        Ok(match name {
            "none" => DisturbanceCfg::none(),
            "slope" => DisturbanceCfg::slope(vec![self.slope; m]),
            "uneven" => DisturbanceCfg::uneven(self.uneven_span, self.uneven_amplitude, self.seed),
            "param_shift" | "param-shift" => {
                DisturbanceCfg::param_shift(self.mass_shift, self.length_shift, self.damping_shift)
            }
            other => {
                return Err(EvalError::Config(format!(
                    "unknown disturbance {other:?} (none, slope, uneven, param_shift)"
                )))
            }
        })
    }
}

/// Episode setup shared by every policy: reference, initial state, source.
#[derive(Clone, Debug)]
pub struct EpisodeSetup {
    pub source: usize,
    pub refs: Vec<f64>,
    pub x0: Vec<f64>,
    pub steps: usize,
    pub dist: DisturbanceCfg,
    pub seed: u64,
}

const STREAM_SETUP: u64 = 11;
const STREAM_POLICY: u64 = 12;
const STREAM_CVAE: u64 = 13;

/// Builds the reference and the perturbed initial state of episode `e`.
pub fn episode_setup(
    spec: &PlantSpec,
    data: &Dataset,
    cv: Option<&CvaeModel>,
    cfg: &RolloutCfg,
    e: usize,
) -> Result<EpisodeSetup, EvalError> {
    if data.trajectories.is_empty() {
        return Err(EvalError::Config("dataset is empty".into()));
    }
    if data.n() != spec.n || data.m() != spec.m {
        return Err(EvalError::Config(format!(
            "dataset is {}x{}, plant {} is {}x{}",
            data.n(),
            data.m(),
            spec.name(),
            spec.n,
            spec.m
        )));
    }
    let n = spec.n;
    let seed = derive_seed(cfg.seed, e as u64);
    let source = e % data.trajectories.len();
    let (refs, steps) = match cfg.reference {
        ReferenceSource::Replay => {
            let steps = cfg.steps.min(data.steps());
            (data.trajectories[source].states[..steps * n].to_vec(), steps)
        }
        ReferenceSource::Cvae => {
            let cv = cv.ok_or_else(|| EvalError::Config("cvae references need a trained cvae".into()))?;
            if cv.n() != n {
                return Err(EvalError::Config("cvae dimension does not match the plant".into()));
            }
            let mut rng = seeded(derive_seed(seed, STREAM_CVAE));
            let mut refs = data.state(source, 0).to_vec();
            for i in 1..cfg.steps {
                let next = cvae_generate_with(cv, &refs[(i - 1) * n..i * n], &mut rng)?;
                refs.extend(next);
            }
            (refs, cfg.steps)
        }
    };
    let mut rng = seeded(derive_seed(seed, STREAM_SETUP));
    let offset = data.manifest.expert.init_offset;
    let x0 = refs[..n].iter().map(|r| r + offset * rng.random_range(-1.0..1.0)).collect();
    Ok(EpisodeSetup {
        source,
        refs,
        x0,
        steps,
        dist: cfg.disturbance.with_seed(derive_seed(cfg.disturbance.seed, e as u64)),
        seed,
    })
}

/// Reference position, velocity and acceleration at sample `i` from
/// central differences of the sampled reference.
fn reference_rates(spec: &PlantSpec, refs: &[f64], steps: usize, i: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = spec.n;
    let dt = spec.dt;
    let at = |k: usize, j: usize| refs[k * n + j];
    let diff = |j: usize, k: usize| {
        let (lo, hi) = (k.saturating_sub(1), (k + 1).min(steps - 1));
        (at(hi, j) - at(lo, j)) / ((hi - lo) as f64 * dt)
    };
    match spec.kind {
        PlantKind::P1 => (vec![at(i, 0)], vec![diff(0, i)], vec![0.0]),
        PlantKind::P2 | PlantKind::P3 => {
            let d = n / 2;
            let pos = (0..d).map(|j| at(i, j)).collect();
            let vel = (0..d).map(|j| at(i, d + j)).collect();
            let acc = (0..d).map(|j| diff(d + j, i)).collect();
            (pos, vel, acc)
        }
    }
}

/// Runs one episode of `policy` on the disturbed plant.
pub fn run_episode(
    spec: &PlantSpec,
    setup: &EpisodeSetup,
    policy: Policy,
    gain: f64,
    expert_gain: f64,
) -> Result<Rollout, EvalError> {
    let (n, m) = (spec.n, spec.m);
    let plant = Plant::new(spec.clone(), setup.dist.clone())?;
    let mut rng = seeded(derive_seed(setup.seed, STREAM_POLICY));
    let mut x = setup.x0.clone();
    let mut out = Rollout {
        n,
        m,
        dt: spec.dt,
        states: x.clone(),
        refs: setup.refs.clone(),
        actions: Vec::new(),
        rewards: Vec::new(),
        terminated: !spec.in_domain(&x),
    };
    if out.terminated {
        return Ok(out);
    }
    for i in 0..setup.steps - 1 {
        let r_now = &setup.refs[i * n..(i + 1) * n];
        let r_next = &setup.refs[(i + 1) * n..(i + 2) * n];
        let nu = || tracking_virtual_input(gain, spec.dt, r_now, r_next, &x);
        let u = match policy {
            Policy::Learned(cm) => cm.act(&nu(), &x)?,
            Policy::ModelNdi(dm) => {
                let (a, g) = extract_affine(dm, &x)?;
                ndi_from_affine(&a, &g, n, m, &nu(), &x)?
            }
            Policy::Oracle => ndi_oracle(spec, &x, &nu())?,
            Policy::Expert => {
                let (pos, vel, acc) = reference_rates(spec, &setup.refs, setup.steps, i);
                expert_law(spec, expert_gain, &pos, &vel, &acc, &x)?
            }
            Policy::Random => normal_vec(&mut rng, m),
            Policy::Bc(bc) => bc.act(&x)?,
        };
        if u.len() != m {
            return Err(EvalError::Config(format!("policy returned {} controls, expected {m}", u.len())));
        }
        match plant.step(&x, &u) {
            Ok(next) => {
                out.rewards.push(step_reward(&next, r_next));
                out.actions.extend_from_slice(&u);
                out.states.extend_from_slice(&next);
                x = next;
            }
            Err(PlantError::OutOfDomain { .. }) => {
                out.terminated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// All episode setups of `cfg`, in order.
pub fn setups(spec: &PlantSpec, data: &Dataset, cv: Option<&CvaeModel>, cfg: &RolloutCfg) -> Result<Vec<EpisodeSetup>, EvalError> {
    cfg.validate()?;
    (0..cfg.episodes).map(|e| episode_setup(spec, data, cv, cfg, e)).collect()
}

/// Runs `policy` on every setup in parallel; results keep episode order.
pub fn run_batch(
    spec: &PlantSpec,
    data: &Dataset,
    setups: &[EpisodeSetup],
    policy: Policy,
    gain: f64,
) -> Result<Vec<Rollout>, EvalError> {
    let expert_gain = data.manifest.expert.gain;
    setups
        .par_iter()
        .map(|s| run_episode(spec, s, policy, gain, expert_gain))
        .collect()
}

fn mean_reward(rolls: &[Rollout]) -> f64 {
    rolls.iter().map(Rollout::total_reward).sum::<f64>() / rolls.len() as f64
}

/// Expert and random mean rewards on `setups`.
/// Expert and random mean rewards on `setups` with the disturbance removed,
/// so every disturbance of a sweep is scored on the nominal scale.
pub fn anchors(spec: &PlantSpec, data: &Dataset, setups: &[EpisodeSetup]) -> Result<Anchors, EvalError> {
    let nominal: Vec<EpisodeSetup> = setups
        .iter()
        .map(|s| EpisodeSetup {
            dist: DisturbanceCfg::none(),
            ..s.clone()
        })
        .collect();
    let a = Anchors {
        expert: mean_reward(&run_batch(spec, data, &nominal, Policy::Expert, 0.0)?),
        random: mean_reward(&run_batch(spec, data, &nominal, Policy::Random, 0.0)?),
    };
    if a.expert - a.random < Anchors::MIN_SPREAD {
        return Err(EvalError::Config(format!(
            "expert reward {} does not exceed random reward {}; scores undefined",
            a.expert, a.random
        )));
    }
    Ok(a)
}

/// Report for rollouts already run against `anchors`.
pub fn report(
    name: &str,
    spec: &PlantSpec,
    cfg: &RolloutCfg,
    setups: &[EpisodeSetup],
    rolls: &[Rollout],
    anchors: Anchors,
) -> EvalReport {
    let episodes: Vec<EpisodeResult> = rolls
        .iter()
        .zip(setups)
        .enumerate()
        .map(|(e, (r, s))| EpisodeResult {
            episode: e,
            source: s.source,
            reward: r.total_reward(),
            rms: r.rms(),
            score: anchors.normalize(r.total_reward()),
            completed: r.completed(),
            terminated: r.terminated,
        })
        .collect();
    let col = |f: fn(&EpisodeResult) -> f64| episodes.iter().map(f).filter(|v| v.is_finite()).collect::<Vec<_>>();
    EvalReport {
        controller: name.to_string(),
        plant: spec.name().to_string(),
        cfg: cfg.clone(),
        expert_reward: anchors.expert,
        random_reward: anchors.random,
        score: Summary::of(&col(|e| e.score)),
        reward: Summary::of(&col(|e| e.reward)),
        rms: Summary::of(&col(|e| e.rms)),
        terminated: episodes.iter().filter(|e| e.terminated).count(),
        episodes,
    }
}

/// The closed loop of `policy` against references from `cfg`, with scores
/// normalized by expert and random runs on the same episodes.
pub fn evaluate(
    spec: &PlantSpec,
    data: &Dataset,
    policy: Policy,
    cv: Option<&CvaeModel>,
    cfg: &RolloutCfg,
) -> Result<EvalReport, EvalError> {
    let set = setups(spec, data, cv, cfg)?;
    let anc = anchors(spec, data, &set)?;
    let rolls = run_batch(spec, data, &set, policy, cfg.gain)?;
    Ok(report(policy.name(), spec, cfg, &set, &rolls, anc))
}

/// First episode of `cfg` under `policy`, for traces.
pub fn rollout(
    spec: &PlantSpec,
    data: &Dataset,
    policy: Policy,
    cv: Option<&CvaeModel>,
    cfg: &RolloutCfg,
) -> Result<Rollout, EvalError> {
    cfg.validate()?;
    let s = episode_setup(spec, data, cv, cfg, 0)?;
    run_episode(spec, &s, policy, cfg.gain, data.manifest.expert.gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plants::{gen_demos, ExpertConfig};

    fn demos(kind: PlantKind) -> (PlantSpec, Dataset) {
        let p = PlantSpec::of(kind);
        let d = gen_demos(&p, &ExpertConfig::for_plant(kind), 6, 120, 3).unwrap();
        (p, d)
    }

    fn cfg(episodes: usize) -> RolloutCfg {
        RolloutCfg {
            steps: 120,
            episodes,
            seed: 5,
            ..RolloutCfg::default()
        }
    }

    #[test]
    fn reward_is_clamped() {
        assert_eq!(step_reward(&[0.0], &[0.0]), 1.0);
        assert_eq!(step_reward(&[0.0], &[0.5]), 0.75);
        assert_eq!(step_reward(&[0.0], &[3.0]), 0.0);
        assert_eq!(step_reward(&[f64::NAN], &[0.0]), 0.0);
    }

    #[test]
    fn summary_of_known_values() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.median, 2.5);
        assert_eq!((s.min, s.max), (1.0, 4.0));
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[]), Summary::default());
    }

    #[test]
    fn anchors_map_to_one_and_zero() {
        for kind in [PlantKind::P1, PlantKind::P2] {
            let (p, d) = demos(kind);
            let c = cfg(8);
            let e = evaluate(&p, &d, Policy::Expert, None, &c).unwrap();
            let r = evaluate(&p, &d, Policy::Random, None, &c).unwrap();
            assert!((e.score.mean - 1.0).abs() < 1e-12, "{}", e.score.mean);
            assert!(r.score.mean.abs() < 1e-12, "{}", r.score.mean);
            assert!(e.expert_reward > r.random_reward);
        }
    }

    #[test]
    fn expert_replay_reproduces_demo() {
        for kind in [PlantKind::P1, PlantKind::P2] {
            let (p, d) = demos(kind);
            let s = EpisodeSetup {
                source: 0,
                refs: d.trajectories[0].states.clone(),
                x0: d.trajectories[0].s.clone(),
                steps: d.steps(),
                dist: DisturbanceCfg::none(),
                seed: 0,
            };
            for pol in [Policy::Expert, Policy::Oracle] {
                let r = run_episode(&p, &s, pol, 1.0, d.manifest.expert.gain).unwrap();
                assert!(!r.terminated);
                assert!(r.rms() < 0.02, "{kind:?} {} rms {}", pol.name(), r.rms());
            }
        }
    }

    #[test]
    fn early_termination_scores_lower() {
        let (p, d) = demos(PlantKind::P1);
        let s = episode_setup(&p, &d, None, &cfg(1), 0).unwrap();
        let full = run_episode(&p, &s, Policy::Oracle, 1.0, 5.0).unwrap();
        let hostile = DisturbanceCfg::slope(vec![500.0]);
        let cut = run_episode(&p, &EpisodeSetup { dist: hostile, ..s }, Policy::Oracle, 1.0, 5.0).unwrap();
        assert!(cut.terminated && !full.terminated);
        assert!(cut.completed() < full.completed());
        assert!(cut.total_reward() < full.total_reward());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (p, d) = demos(PlantKind::P2);
        let c = RolloutCfg {
            disturbance: DisturbanceCfg::uneven(0.3, 1.0, 4),
            ..cfg(4)
        };
        let a = evaluate(&p, &d, Policy::Random, None, &c).unwrap();
        let b = evaluate(&p, &d, Policy::Random, None, &c).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn trace_has_one_row_per_sample() {
        let (p, d) = demos(PlantKind::P2);
        let r = rollout(&p, &d, Policy::Oracle, None, &cfg(1)).unwrap();
        let csv = r.trace_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x0,x1,r0,r1,u0,reward");
        assert_eq!(lines.len(), r.completed() + 2);
        assert!(lines.last().unwrap().ends_with(",,"));
    }

    #[test]
    fn invalid_rollout_config() {
        let (p, d) = demos(PlantKind::P1);
        for bad in [
            RolloutCfg { steps: 1, ..cfg(1) },
            RolloutCfg { episodes: 0, ..cfg(1) },
            RolloutCfg { gain: -1.0, ..cfg(1) },
        ] {
            assert!(matches!(evaluate(&p, &d, Policy::Oracle, None, &bad), Err(EvalError::Config(_))));
        }
        let cvae = RolloutCfg {
            reference: ReferenceSource::Cvae,
            ..cfg(1)
        };
        assert!(evaluate(&p, &d, Policy::Oracle, None, &cvae).is_err());
        assert!(evaluate(&PlantSpec::p2(), &d, Policy::Oracle, None, &cfg(1)).is_err());
    }
}
