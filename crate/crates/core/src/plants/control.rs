use nalgebra::DMatrix;

use super::{PlantError, PlantSpec};

/// Width of the `tanh` boundary layer replacing `sgn` in simulations.
pub const BOUNDARY_LAYER: f64 = 0.01;

/// Moore–Penrose pseudo-inverse of a row-major `n × m` matrix with full
/// column rank; returns row-major `m × n`.
pub fn pinv(g: &[f64], n: usize, m: usize) -> Option<Vec<f64>> {
    let mat = DMatrix::from_row_slice(n, m, g);
    let svd = mat.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-10 * smax.max(1e-300)) || svd.singular_values.len() < m {
        return None;
    }
    let inv = svd.pseudo_inverse(0.0).ok()?;
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        for c in 0..n {
            out.push(inv[(r, c)]);
        }
    }
    Some(out)
}

fn apply(mat: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| mat[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `ν = K_n (x_des − x)` with diagonal gains.
pub fn linear_feedback(k_n: &[f64], x_des: &[f64], x: &[f64]) -> Result<Vec<f64>, PlantError> {
    if k_n.len() != x.len() || x_des.len() != x.len() {
        return Err(PlantError::Shape("gain, target and state lengths differ".into()));
    }
    Ok(k_n.iter().zip(x_des).zip(x).map(|((k, d), v)| k * (d - v)).collect())
}

/// Sampled tracking command: the rate that reaches the next reference
/// sample in one period plus proportional feedback on the current error,
/// `ν = (x_r(t_{i+1}) − x)/Δt + K_n (x_r(t_i) − x)`.
pub fn tracking_virtual_input(k_n: f64, dt: f64, r_now: &[f64], r_next: &[f64], x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(r_now)
        .zip(r_next)
        .map(|((v, rn), rx)| (rx - v) / dt + k_n * (rn - v))
        .collect()
}

/// `u = G⁺(x)(ν − a(x))`, given `a` and `G` explicitly.
pub fn ndi_from_affine(a: &[f64], g: &[f64], n: usize, m: usize, nu: &[f64], x: &[f64]) -> Result<Vec<f64>, PlantError> {
    let gp = pinv(g, n, m).ok_or_else(|| PlantError::RankDeficient { x: x.to_vec() })?;
    let rhs: Vec<f64> = nu.iter().zip(a).map(|(v, a)| v - a).collect();
    Ok(apply(&gp, m, n, &rhs))
}

/// Nonlinear dynamics inversion on the analytic plant.
pub fn ndi_oracle(p: &PlantSpec, x: &[f64], nu: &[f64]) -> Result<Vec<f64>, PlantError> {
    if x.len() != p.n || nu.len() != p.n {
        return Err(PlantError::Shape("ndi expects state and virtual input in R^n".into()));
    }
    ndi_from_affine(&p.drift_vec(x), &p.input_matrix_vec(x), p.n, p.m, nu, x)
}

/// Switching function `σ = x_des − x` with diagonal gain `K_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct SwitchingState {
    pub sigma: Vec<f64>,
    pub k_s: Vec<f64>,
}

impl SwitchingState {
    pub fn new(x_des: &[f64], x: &[f64], k_s: Vec<f64>) -> Result<Self, PlantError> {
        if x_des.len() != x.len() || k_s.len() != x.len() {
            return Err(PlantError::Shape("switching state lengths differ".into()));
        }
        if k_s.iter().any(|k| !(*k > 0.0)) {
            return Err(PlantError::Config("K_s entries must be positive".into()));
        }
        Ok(Self {
            sigma: x_des.iter().zip(x).map(|(d, v)| d - v).collect(),
            k_s,
        })
    }

    /// `K_s·sgn(σ)`, or `K_s·tanh(σ/ε_b)` with a boundary layer.
    pub fn switch_term(&self, boundary: Option<f64>) -> Vec<f64> {
        self.sigma
            .iter()
            .zip(&self.k_s)
            .map(|(s, k)| match boundary {
                Some(eps) => k * (s / eps).tanh(),
                None => k * sgn(*s),
            })
            .collect()
    }
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `u = G⁺(x)(ν − a(x) + K_s·sgn(σ))`.
pub fn smc_oracle(
    p: &PlantSpec,
    x: &[f64],
    nu: &[f64],
    sw: &SwitchingState,
    boundary: Option<f64>,
) -> Result<Vec<f64>, PlantError> {
    if sw.sigma.len() != p.n {
        return Err(PlantError::Shape("switching state must be in R^n".into()));
    }
    let shifted: Vec<f64> = nu.iter().zip(sw.switch_term(boundary)).map(|(v, s)| v + s).collect();
    ndi_oracle(p, x, &shifted)
}
