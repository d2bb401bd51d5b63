//! Browser demo: analytic closed loops under a constant disturbance, a
//! feedback-gain sweep and the RK4 convergence check. Every export returns
//! JSON text for the page to draw.

use rmbil::odeint::{integrate, SolverConfig};
use rmbil::plants::{
    expert_virtual_input, ndi_oracle, smc_oracle, DisturbanceCfg, Plant, PlantKind, PlantSpec, SineReference,
    SwitchingState,
};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Control law applied to the true plant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Law {
    Ndi,
    /// NDI plus a boundary-layer switching term.
    Smc { k_s: f64, boundary: f64 },
}

impl Law {
    pub fn parse(name: &str) -> Result<Self, String> {
        match name {
            "ndi" => Ok(Law::Ndi),
            "smc" => Ok(Law::Smc { k_s: 2.0, boundary: 0.05 }),
            other => Err(format!("unknown law {other:?} (ndi, smc)")),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Trace {
    pub t: Vec<f64>,
    /// Position coordinate of the state.
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub u: Vec<f64>,
    pub rms: f64,
    pub terminated: bool,
}

fn plant_kind(name: &str) -> Result<PlantKind, String> {
    match name {
        "p1" | "p2" => name.parse().map_err(|e: rmbil::plants::PlantError| e.to_string()),
        other => Err(format!("demo plant must be p1 or p2, got {other:?}")),
    }
}

/// Tracks `r(t) = 0.5 sin t` from a 0.2 offset for `steps` samples with
/// a constant force `slope` on the input.
pub fn simulate(kind: PlantKind, law: Law, gain: f64, slope: f64, steps: usize) -> Result<Trace, String> {
    if !(gain >= 0.0) || !slope.is_finite() || steps < 2 {
        return Err("gain must be non-negative, slope finite and steps at least 2".into());
    }
    let p = PlantSpec::of(kind);
    let plant = Plant::new(p.clone(), DisturbanceCfg::slope(vec![slope; p.m])).map_err(|e| e.to_string())?;
    let reference = SineReference::single(0.5, 1.0, 0.0);
    let mut x = reference.state(&p, 0.0);
    x[0] += 0.2;
    let mut tr = Trace {
        t: Vec::with_capacity(steps),
        x: Vec::with_capacity(steps),
        r: Vec::with_capacity(steps),
        u: Vec::with_capacity(steps),
        rms: 0.0,
        terminated: false,
    };
    let mut sq = 0.0;
    for i in 0..steps {
        let t = i as f64 * p.dt;
        let (pos, vel, acc) = reference.eval(t);
        tr.t.push(t);
        tr.x.push(x[0]);
        tr.r.push(pos[0]);
        sq += (x[0] - pos[0]).powi(2);
        if i + 1 == steps {
            break;
        }
        let nu = expert_virtual_input(&p, gain, &pos, &vel, &acc, &x);
        let u = match law {
            Law::Ndi => ndi_oracle(&p, &x, &nu),
            Law::Smc { k_s, boundary } => SwitchingState::new(&reference.state(&p, t), &x, vec![k_s; p.n])
                .and_then(|sw| smc_oracle(&p, &x, &nu, &sw, Some(boundary))),
        }
        .map_err(|e| e.to_string())?;
        tr.u.push(u[0]);
        match plant.step(&x, &u) {
            Ok(next) => x = next,
            Err(_) => {
                tr.terminated = true;
                break;
            }
        }
    }
    tr.rms = (sq / tr.t.len() as f64).sqrt();
    Ok(tr)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub gain: f64,
    pub ndi_rms: f64,
    pub smc_rms: f64,
}

pub fn sweep(kind: PlantKind, slope: f64, gains: &[f64], steps: usize) -> Result<Vec<SweepRow>, String> {
    let smc = Law::parse("smc")?;
    gains
        .iter()
        .map(|&gain| {
            Ok(SweepRow {
                gain,
                ndi_rms: simulate(kind, Law::Ndi, gain, slope, steps)?.rms,
                smc_rms: simulate(kind, smc, gain, slope, steps)?.rms,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub error: f64,
    /// Error at the previous, doubled step over this one.
    pub ratio: Option<f64>,
}

/// RK4 on `ẋ = −x` from `x(0) = 1` to `t = 1`, halving `h` each row.
pub fn rk4_convergence(h0: f64, rows: usize) -> Result<Vec<ConvergenceRow>, String> {
    if !(h0 > 0.0 && h0 <= 1.0) || rows == 0 || rows > 12 {
        return Err("need 0 < h0 ≤ 1 and 1 to 12 rows".into());
    }
    let rhs = (1, |_t: f64, x: &[f64], dx: &mut [f64]| dx[0] = -x[0]);
    let mut out: Vec<ConvergenceRow> = Vec::with_capacity(rows);
    let mut h = h0;
    for _ in 0..rows {
        let xs = integrate(&rhs, &[1.0], &[0.0, 1.0], &SolverConfig::rk4(h)).map_err(|e| e.to_string())?;
        let error = (xs[1][0] - (-1.0f64).exp()).abs();
        let ratio = out.last().map(|prev| prev.error / error);
        out.push(ConvergenceRow { h, error, ratio });
        h /= 2.0;
    }
    Ok(out)
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn closed_loop(plant: &str, law: &str, gain: f64, slope: f64, steps: usize) -> Result<String, JsError> {
    to_js(plant_kind(plant).and_then(|k| simulate(k, Law::parse(law)?, gain, slope, steps)))
}

#[wasm_bindgen]
pub fn gain_sweep(plant: &str, slope: f64, gains: Vec<f64>, steps: usize) -> Result<String, JsError> {
    to_js(plant_kind(plant).and_then(|k| sweep(k, slope, &gains, steps)))
}

#[wasm_bindgen]
pub fn rk4_table(h0: f64, rows: usize) -> Result<String, JsError> {
    to_js(rk4_convergence(h0, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_ndi_tracks_the_sine() {
        let tr = simulate(PlantKind::P1, Law::Ndi, 5.0, 0.0, 200).unwrap();
        assert!(!tr.terminated);
        assert_eq!(tr.t.len(), 200);
        assert_eq!(tr.u.len(), 199);
        let tail = (tr.x[199] - tr.r[199]).abs();
        assert!(tail < 1e-3, "{tail}");
    }

    #[test]
    fn switching_term_reduces_slope_error() {
        for kind in [PlantKind::P1, PlantKind::P2] {
            let ndi = simulate(kind, Law::Ndi, 1.0, 0.5, 300).unwrap();
            let smc = simulate(kind, Law::parse("smc").unwrap(), 1.0, 0.5, 300).unwrap();
            let tail = |t: &Trace| (t.x[299] - t.r[299]).abs();
            assert!(tail(&smc) < tail(&ndi), "{kind:?}: {} vs {}", tail(&smc), tail(&ndi));
        }
    }

    #[test]
    fn higher_gain_lowers_slope_error() {
        let rows = sweep(PlantKind::P1, 1.0, &[0.5, 2.0, 8.0], 200).unwrap();
        assert!(rows.windows(2).all(|w| w[1].ndi_rms < w[0].ndi_rms), "{rows:?}");
    }

    #[test]
    fn rk4_is_fourth_order() {
        let rows = rk4_convergence(0.2, 4).unwrap();
        assert!(rows[0].error < 1e-4);
        for r in &rows[1..] {
            let q = r.ratio.unwrap();
            assert!((12.0..=20.0).contains(&q), "{q}");
        }
    }

    #[test]
    fn bad_inputs_are_errors() {
        assert!(Law::parse("pid").is_err());
        assert!(plant_kind("p3").is_err());
        assert!(simulate(PlantKind::P1, Law::Ndi, -1.0, 0.0, 10).is_err());
        assert!(rk4_convergence(0.0, 3).is_err());
    }
}
