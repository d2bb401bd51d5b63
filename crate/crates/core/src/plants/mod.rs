//! Analytic input-affine plants `ẋ = a(x) + G(x)u`, their disturbances,
//! closed-form control laws and the demonstration expert.

mod control;
mod expert;

use serde::{Deserialize, Serialize};

use crate::odeint::{integrate, SolverConfig};
use crate::rng::derive_seed;

pub use control::{
    linear_feedback, ndi_from_affine, ndi_oracle, pinv, smc_oracle, tracking_virtual_input, SwitchingState, BOUNDARY_LAYER,
};
pub use expert::{expert_law, expert_virtual_input, gen_demos, run_expert, ExpertConfig, ExpertRun, SineReference};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("state {x:?} outside the plant domain")]
    OutOfDomain { x: Vec<f64> },
    #[error("input matrix is rank deficient at {x:?}")]
    RankDeficient { x: Vec<f64> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("expert diverged on every attempt for trajectory {0}")]
    ExpertDiverged(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    /// Scalar `ẋ = −x³ + (2 + cos x)u`.
    P1,
    /// Damped pendulum, state (angle, rate), torque input.
    P2,
    /// Planar point mass, state (p_x, p_y, v_x, v_y), force input.
    P3,
}

impl PlantKind {
    pub fn name(self) -> &'static str {
        match self {
            PlantKind::P1 => "p1",
            PlantKind::P2 => "p2",
            PlantKind::P3 => "p3",
        }
    }
}

impl std::str::FromStr for PlantKind {
    type Err = PlantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p1" => Ok(PlantKind::P1),
            "p2" => Ok(PlantKind::P2),
            "p3" => Ok(PlantKind::P3),
            other => Err(PlantError::Config(format!("unknown plant {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub n: usize,
    pub m: usize,
    /// Sample period (s).
    pub dt: f64,
    /// Symmetric bound `|x_i| <= state_bound[i]`.
    pub state_bound: Vec<f64>,
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    /// RK4 steps per sample period when simulating.
    pub substeps: usize,
}

impl PlantSpec {
    pub fn p1() -> Self {
        Self {
            kind: PlantKind::P1,
            n: 1,
            m: 1,
            dt: 0.05,
            state_bound: vec![4.0],
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
            gravity: 9.81,
            substeps: 4,
        }
    }

    pub fn p2() -> Self {
        Self {
            kind: PlantKind::P2,
            n: 2,
            m: 1,
            dt: 0.05,
            state_bound: vec![std::f64::consts::PI, 15.0],
            mass: 1.0,
            length: 1.0,
            damping: 0.1,
            gravity: 9.81,
            substeps: 4,
        }
    }

    pub fn p3() -> Self {
        Self {
            kind: PlantKind::P3,
            n: 4,
            m: 2,
            dt: 0.02,
            state_bound: vec![10.0, 10.0, 10.0, 10.0],
            mass: 2.0,
            length: 1.0,
            damping: 0.2,
            gravity: 9.81,
            substeps: 2,
        }
    }

    pub fn of(kind: PlantKind) -> Self {
        match kind {
            PlantKind::P1 => Self::p1(),
            PlantKind::P2 => Self::p2(),
            PlantKind::P3 => Self::p3(),
        }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.len() == self.n && x.iter().zip(&self.state_bound).all(|(v, b)| v.is_finite() && v.abs() <= *b)
    }

    /// Coordinate that indexes the uneven-terrain bins.
    pub fn position_index(&self) -> usize {
        0
    }

    /// Drift `a(x)`.
    pub fn drift(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            PlantKind::P1 => out[0] = -x[0] * x[0] * x[0],
            PlantKind::P2 => {
                out[0] = x[1];
                out[1] = -(self.gravity / self.length) * x[0].sin() - self.damping * x[1];
            }
            PlantKind::P3 => {
                out[0] = x[2];
                out[1] = x[3];
                out[2] = -self.damping * x[2];
                out[3] = -self.damping * x[3];
            }
        }
    }

    /// Input matrix `G(x)`, row-major `n × m`.
    pub fn input_matrix(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        match self.kind {
            PlantKind::P1 => out[0] = 2.0 + x[0].cos(),
            PlantKind::P2 => out[1] = 1.0 / (self.mass * self.length * self.length),
            PlantKind::P3 => {
                // rows (v_x, v_y) = I / mass
                out[2 * 2] = 1.0 / self.mass;
                out[3 * 2 + 1] = 1.0 / self.mass;
            }
        }
    }

    pub fn drift_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; self.n];
        self.drift(x, &mut a);
        a
    }

    pub fn input_matrix_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n * self.m];
        self.input_matrix(x, &mut g);
        g
    }

    fn check_shapes(&self, x: &[f64], u: &[f64]) -> Result<(), PlantError> {
        if x.len() != self.n || u.len() != self.m {
            return Err(PlantError::Shape(format!(
                "expected x in R^{} and u in R^{}, got {} and {}",
                self.n,
                self.m,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceKind {
    None,
    /// Constant generalized force entering through the input channel.
    Slope,
    /// Piecewise-constant force, redrawn for every bin of width `span` along
    /// the position coordinate, uniform in `[-amplitude, amplitude]`.
    Uneven,
    /// Relative change of mass, length and damping.
    ParamShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DisturbanceCfg {
    pub kind: DisturbanceKind,
    /// Slope force, one entry per input.
    pub bias: Vec<f64>,
    pub span: f64,
    pub amplitude: f64,
    pub mass_shift: f64,
    pub length_shift: f64,
    pub damping_shift: f64,
    pub seed: u64,
}

impl Default for DisturbanceCfg {
    fn default() -> Self {
        Self {
            kind: DisturbanceKind::None,
            bias: Vec::new(),
            span: 1.0,
            amplitude: 0.0,
            mass_shift: 0.0,
            length_shift: 0.0,
            damping_shift: 0.0,
            seed: 0,
        }
    }
}

impl DisturbanceCfg {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn slope(bias: Vec<f64>) -> Self {
        Self {
            kind: DisturbanceKind::Slope,
            bias,
            ..Self::default()
        }
    }

    pub fn uneven(span: f64, amplitude: f64, seed: u64) -> Self {
        Self {
            kind: DisturbanceKind::Uneven,
            span,
            amplitude,
            seed,
            ..Self::default()
        }
    }

    pub fn param_shift(mass: f64, length: f64, damping: f64) -> Self {
        Self {
            kind: DisturbanceKind::ParamShift,
            mass_shift: mass,
            length_shift: length,
            damping_shift: damping,
            ..Self::default()
        }
    }

    /// Same disturbance with a different terrain seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self, p: &PlantSpec) -> Result<(), PlantError> {
        match self.kind {
            DisturbanceKind::Slope if self.bias.len() != p.m => Err(PlantError::Config(format!(
                "slope bias needs {} entries, got {}",
                p.m,
                self.bias.len()
            ))),
            DisturbanceKind::Uneven if !(self.span > 0.0) || !(self.amplitude >= 0.0) => {
                Err(PlantError::Config("uneven terrain needs span > 0 and amplitude >= 0".into()))
            }
            DisturbanceKind::ParamShift
                if [self.mass_shift, self.length_shift, self.damping_shift]
                    .iter()
                    .any(|s| !(*s > -1.0)) =>
            {
                Err(PlantError::Config("parameter shifts must exceed -100%".into()))
            }
            _ => Ok(()),
        }
    }

    /// Plant constants after a parameter shift.
    pub fn apply(&self, p: &PlantSpec) -> PlantSpec {
        let mut q = p.clone();
        if self.kind == DisturbanceKind::ParamShift {
            q.mass *= 1.0 + self.mass_shift;
            q.length *= 1.0 + self.length_shift;
            q.damping *= 1.0 + self.damping_shift;
        }
        q
    }

    /// Generalized force `w(x)` added to the input, or `None` when the
    /// disturbance acts through the constants only.
    pub fn force(&self, p: &PlantSpec, x: &[f64], out: &mut [f64]) -> bool {
        match self.kind {
            DisturbanceKind::None | DisturbanceKind::ParamShift => false,
            DisturbanceKind::Slope => {
                out.copy_from_slice(&self.bias);
                true
            }
            DisturbanceKind::Uneven => {
                let bin = (x[p.position_index()] / self.span).floor() as i64;
                let bin_seed = derive_seed(self.seed, bin as u64);
                for (j, o) in out.iter_mut().enumerate() {
                    let bits = derive_seed(bin_seed, j as u64) >> 11;
                    let unit = bits as f64 / (1u64 << 53) as f64;
                    *o = self.amplitude * (2.0 * unit - 1.0);
                }
                true
            }
        }
    }
}

/// A plant together with a fixed disturbance, ready for simulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Plant {
    pub nominal: PlantSpec,
    pub dist: DisturbanceCfg,
    effective: PlantSpec,
}

impl Plant {
    pub fn new(spec: PlantSpec, dist: DisturbanceCfg) -> Result<Self, PlantError> {
        dist.validate(&spec)?;
        let effective = dist.apply(&spec);
        Ok(Self {
            nominal: spec,
            dist,
            effective,
        })
    }

    pub fn nominal(spec: PlantSpec) -> Self {
        Self::new(spec, DisturbanceCfg::none()).expect("no disturbance is always valid")
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.nominal
    }

    /// `ẋ` without the domain check.
    pub fn deriv_unchecked(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let p = &self.effective;
        let (n, m) = (p.n, p.m);
        p.drift(x, out);
        let mut g = [0.0; 8];
        let g = &mut g[..n * m];
        p.input_matrix(x, g);
        let mut w = [0.0; 2];
        let w = &mut w[..m];
        let disturbed = self.dist.force(p, x, w);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                let uj = if disturbed { u[j] + w[j] } else { u[j] };
                acc += g[i * m + j] * uj;
            }
            out[i] += acc;
        }
    }

    pub fn deriv(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, PlantError> {
        self.nominal.check_shapes(x, u)?;
        if !self.nominal.in_domain(x) {
            return Err(PlantError::OutOfDomain { x: x.to_vec() });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(PlantError::Shape("control is not finite".into()));
        }
        let mut out = vec![0.0; self.nominal.n];
        self.deriv_unchecked(x, u, &mut out);
        Ok(out)
    }

    /// One sample period with `u` held; errors when the end state leaves
    /// the domain.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, PlantError> {
        self.nominal.check_shapes(x, u)?;
        let p = &self.nominal;
        let rhs = (p.n, |_t: f64, xx: &[f64], dx: &mut [f64]| self.deriv_unchecked(xx, u, dx));
        let cfg = SolverConfig::rk4(p.dt / p.substeps as f64);
        let out = integrate(&rhs, x, &[0.0, p.dt], &cfg).map_err(|_| PlantError::OutOfDomain { x: x.to_vec() })?;
        let next = out.into_iter().nth(1).expect("two grid points");
        if !p.in_domain(&next) {
            return Err(PlantError::OutOfDomain { x: next });
        }
        Ok(next)
    }
}

/// `ẋ = a(x) + G(x)u` plus the disturbance term.
pub fn plant_deriv(p: &PlantSpec, d: &DisturbanceCfg, x: &[f64], u: &[f64]) -> Result<Vec<f64>, PlantError> {
    Plant::new(p.clone(), d.clone())?.deriv(x, u)
}
