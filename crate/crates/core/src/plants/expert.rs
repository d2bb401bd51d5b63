use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ndi_oracle, Plant, PlantError, PlantKind, PlantSpec};
use crate::datastore::{Dataset, Manifest, NormStats, Trajectory, DATASET_VERSION};
use crate::rng::{derive_seed, seeded, Rng};

/// Expert and reference-family settings for demonstration generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Feedback gain `K` of the expert NDI law.
    pub gain: f64,
    /// Sinusoids per reference coordinate.
    pub components: usize,
    /// Upper bound on the summed sinusoid amplitudes.
    pub amplitude: f64,
    pub freq_min: f64,
    pub freq_max: f64,
    /// Half-width of the uniform initial offset from the reference.
    pub init_offset: f64,
    /// Trajectories whose tracking RMS exceeds this are redrawn.
    pub rms_bound: f64,
    pub max_attempts: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self::for_plant(PlantKind::P1)
    }
}

impl ExpertConfig {
    pub fn for_plant(kind: PlantKind) -> Self {
        let base = Self {
            gain: 5.0,
            components: 3,
            amplitude: 1.0,
            freq_min: 1.0,
            freq_max: 3.0,
            init_offset: 0.1,
            rms_bound: 0.05,
            max_attempts: 50,
        };
        match kind {
            PlantKind::P1 => base,
            PlantKind::P2 => Self {
                amplitude: 0.8,
                rms_bound: 0.1,
                ..base
            },
            PlantKind::P3 => Self {
                amplitude: 2.0,
                freq_min: 0.2,
                freq_max: 0.8,
                init_offset: 0.2,
                rms_bound: 0.15,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.gain > 0.0)
            || self.components == 0
            || !(self.amplitude >= 0.0)
            || !(self.freq_max >= self.freq_min)
            || !(self.freq_min >= 0.0)
            || !(self.init_offset >= 0.0)
            || !(self.rms_bound > 0.0)
            || self.max_attempts == 0
        {
            return Err(PlantError::Config("invalid expert configuration".into()));
        }
        Ok(())
    }
}

/// Sum of sinusoids per position coordinate,
/// `r_j(t) = Σ_k a_jk sin(w_jk t + φ_jk)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineReference {
    pub dof: usize,
    pub amps: Vec<f64>,
    pub freqs: Vec<f64>,
    pub phases: Vec<f64>,
}

impl SineReference {
    /// Position coordinates driven by a reference on `p`.
    pub fn dof_of(p: &PlantSpec) -> usize {
        match p.kind {
            PlantKind::P1 | PlantKind::P2 => 1,
            PlantKind::P3 => 2,
        }
    }

    pub fn single(amp: f64, freq: f64, phase: f64) -> Self {
        Self {
            dof: 1,
            amps: vec![amp],
            freqs: vec![freq],
            phases: vec![phase],
        }
    }

    pub fn random(p: &PlantSpec, cfg: &ExpertConfig, rng: &mut Rng) -> Self {
        let dof = Self::dof_of(p);
        let k = cfg.components;
        let (mut amps, mut freqs, mut phases) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..dof {
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
            let total: f64 = w.iter().sum();
            let scale = cfg.amplitude * rng.random_range(0.5..1.0) / total;
            for wk in w {
                amps.push(wk * scale);
                freqs.push(if cfg.freq_max > cfg.freq_min {
                    rng.random_range(cfg.freq_min..cfg.freq_max)
                } else {
                    cfg.freq_min
                });
                phases.push(rng.random_range(0.0..std::f64::consts::TAU));
            }
        }
        Self { dof, amps, freqs, phases }
    }

    fn components(&self) -> usize {
        self.amps.len() / self.dof
    }

    /// Position, velocity and acceleration of every coordinate at `t`.
    pub fn eval(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let k = self.components();
        let mut pos = vec![0.0; self.dof];
        let mut vel = vec![0.0; self.dof];
        let mut acc = vec![0.0; self.dof];
        for j in 0..self.dof {
            for c in j * k..(j + 1) * k {
                let (a, w) = (self.amps[c], self.freqs[c]);
                let arg = w * t + self.phases[c];
                pos[j] += a * arg.sin();
                vel[j] += a * w * arg.cos();
                acc[j] -= a * w * w * arg.sin();
            }
        }
        (pos, vel, acc)
    }

    /// Full reference state on `p`: positions, then velocities for the
    /// second-order plants.
    pub fn state(&self, p: &PlantSpec, t: f64) -> Vec<f64> {
        let (pos, vel, _) = self.eval(t);
        match p.kind {
            PlantKind::P1 => pos,
            PlantKind::P2 | PlantKind::P3 => pos.into_iter().chain(vel).collect(),
        }
    }
}

/// Expert virtual input given reference position, velocity and acceleration.
///
/// First-order plants use `ν = ṙ + K(r − x)`. Second-order plants use
/// `ν_p = ṙ + K(r − p)` on the kinematic rows and
/// `ν_v = r̈ + 2K(ṙ − v) + K²(r − p)` on the actuated rows.
pub fn expert_virtual_input(p: &PlantSpec, gain: f64, pos: &[f64], vel: &[f64], acc: &[f64], x: &[f64]) -> Vec<f64> {
    match p.kind {
        PlantKind::P1 => vec![vel[0] + gain * (pos[0] - x[0])],
        PlantKind::P2 | PlantKind::P3 => {
            let d = pos.len();
            let mut nu = vec![0.0; 2 * d];
            for j in 0..d {
                let (ep, ev) = (pos[j] - x[j], vel[j] - x[d + j]);
                nu[j] = vel[j] + gain * ep;
                nu[d + j] = acc[j] + 2.0 * gain * ev + gain * gain * ep;
            }
            nu
        }
    }
}

/// Expert NDI law: [`expert_virtual_input`] inverted on the analytic plant.
pub fn expert_law(p: &PlantSpec, gain: f64, pos: &[f64], vel: &[f64], acc: &[f64], x: &[f64]) -> Result<Vec<f64>, PlantError> {
    ndi_oracle(p, x, &expert_virtual_input(p, gain, pos, vel, acc, x))
}

/// States, actions and tracking RMS of one expert run.
pub struct ExpertRun {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rms: f64,
}

/// Runs the expert on the nominal plant for `steps` samples from `x0`.
pub fn run_expert(
    plant: &Plant,
    gain: f64,
    reference: &SineReference,
    x0: &[f64],
    steps: usize,
) -> Result<ExpertRun, PlantError> {
    let p = plant.spec();
    let mut states = Vec::with_capacity(steps * p.n);
    let mut actions = Vec::with_capacity(steps * p.m);
    let mut x = x0.to_vec();
    let mut sq = 0.0;
    for i in 0..steps {
        let t = i as f64 * p.dt;
        let (pos, vel, acc) = reference.eval(t);
        let u = expert_law(p, gain, &pos, &vel, &acc, &x)?;
        let r = reference.state(p, t);
        sq += x.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        states.extend_from_slice(&x);
        actions.extend_from_slice(&u);
        if i + 1 < steps {
            x = plant.step(&x, &u)?;
        }
    }
    Ok(ExpertRun {
        states,
        actions,
        rms: (sq / steps as f64).sqrt(),
    })
}

/// Demonstrations of the expert tracking seeded sum-of-sines references.
/// Each trajectory starts at the reference plus a uniform offset; a run that
/// leaves the domain or misses the RMS bound is redrawn with a fresh stream.
pub fn gen_demos(p: &PlantSpec, cfg: &ExpertConfig, count: usize, steps: usize, seed: u64) -> Result<Dataset, PlantError> {
    if count == 0 || steps < 2 {
        return Err(PlantError::Config("need N >= 1 and T >= 2".into()));
    }
    cfg.validate()?;
    let plant = Plant::nominal(p.clone());
    let runs: Vec<(Trajectory, f64, usize)> = (0..count)
        .into_par_iter()
        .map(|k| {
            let traj_seed = derive_seed(seed, k as u64);
            for attempt in 0..cfg.max_attempts {
                let mut rng = seeded(derive_seed(traj_seed, attempt as u64));
                let reference = SineReference::random(p, cfg, &mut rng);
                let mut x0 = reference.state(p, 0.0);
                for v in x0.iter_mut() {
                    *v += cfg.init_offset * rng.random_range(-1.0..1.0);
                }
                match run_expert(&plant, cfg.gain, &reference, &x0, steps) {
                    Ok(run) if run.rms <= cfg.rms_bound => {
                        let sq = run.rms * run.rms * steps as f64;
                        let traj = Trajectory {
                            id: k,
                            s: x0,
                            states: run.states,
                            actions: run.actions,
                        };
                        return Ok((traj, sq, attempt));
                    }
                    _ => continue,
                }
            }
            Err(PlantError::ExpertDiverged(k))
        })
        .collect::<Result<_, _>>()?;

    let regenerated = runs.iter().map(|r| r.2).sum();
    let total_sq: f64 = runs.iter().map(|r| r.1).sum();
    let trajectories: Vec<Trajectory> = runs.into_iter().map(|r| r.0).collect();
    let norm = NormStats::from_trajectories(&trajectories, p.n, p.m);
    Ok(Dataset {
        manifest: Manifest {
            format_version: DATASET_VERSION,
            plant: p.name().to_string(),
            dt: p.dt,
            n: p.n,
            m: p.m,
            count,
            steps,
            seed,
            expert: cfg.clone(),
            norm,
            expert_rms: (total_sq / (count * steps) as f64).sqrt(),
            rms_bound: cfg.rms_bound,
            regenerated,
            config: serde_json::Value::Null,
        },
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p1_expert_tracks_half_sine() {
        let p = PlantSpec::p1();
        let r = SineReference::single(0.5, 1.0, 0.0);
        let run = run_expert(&Plant::nominal(p), 5.0, &r, &[0.0], 1000).unwrap();
        assert!(run.rms < 0.05, "rms {}", run.rms);
    }

    #[test]
    fn reference_derivatives_match_differences() {
        let p = PlantSpec::p3();
        let mut rng = seeded(4);
        let r = SineReference::random(&p, &ExpertConfig::for_plant(PlantKind::P3), &mut rng);
        let h = 1e-5;
        let (p0, v0, a0) = r.eval(1.3);
        let (pp, vp, _) = r.eval(1.3 + h);
        let (pm, vm, _) = r.eval(1.3 - h);
        for j in 0..2 {
            assert!(((pp[j] - pm[j]) / (2.0 * h) - v0[j]).abs() < 1e-7);
            assert!(((vp[j] - vm[j]) / (2.0 * h) - a0[j]).abs() < 1e-7);
        }
        assert_eq!(r.state(&p, 1.3), vec![p0[0], p0[1], v0[0], v0[1]]);
    }

    #[test]
    fn demos_are_deterministic_and_within_bounds() {
        for kind in [PlantKind::P1, PlantKind::P2, PlantKind::P3] {
            let p = PlantSpec::of(kind);
            let cfg = ExpertConfig::for_plant(kind);
            let a = gen_demos(&p, &cfg, 4, 120, 11).unwrap();
            let b = gen_demos(&p, &cfg, 4, 120, 11).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            a.validate().unwrap();
            assert!(a.manifest.expert_rms <= cfg.rms_bound);
            for t in &a.trajectories {
                assert_eq!(&t.states[..p.n], t.s.as_slice());
                for x in t.states.chunks(p.n) {
                    assert!(p.in_domain(x));
                }
            }
            let c = gen_demos(&p, &cfg, 4, 120, 12).unwrap();
            assert_ne!(a.trajectories[0].states, c.trajectories[0].states);
        }
    }

    #[test]
    fn demo_arguments_validated() {
        let p = PlantSpec::p1();
        let cfg = ExpertConfig::default();
        assert!(gen_demos(&p, &cfg, 0, 10, 1).is_err());
        assert!(gen_demos(&p, &cfg, 1, 1, 1).is_err());
        let bad = ExpertConfig { gain: 0.0, ..cfg };
        assert!(gen_demos(&p, &bad, 1, 10, 1).is_err());
    }

    #[test]
    fn impossible_bound_reports_divergence() {
        let p = PlantSpec::p1();
        let cfg = ExpertConfig {
            rms_bound: 1e-9,
            max_attempts: 3,
            ..ExpertConfig::default()
        };
        assert!(matches!(gen_demos(&p, &cfg, 1, 50, 1), Err(PlantError::ExpertDiverged(0))));
    }
}
