use super::OdeError;

pub(crate) struct Rk4Work {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        }
    }
}

/// One classical RK4 step of size `h` (negative for backward integration).
pub(crate) fn rk4_step<R>(rhs: &mut R, t: f64, h: f64, y: &mut [f64], w: &mut Rk4Work) -> Result<(), OdeError>
where
    R: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let n = y.len();
    let [k1, k2, k3, k4] = &mut w.k;
    let tmp = &mut w.tmp;
    rhs(t, y, k1)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k1[i];
    }
    rhs(t + 0.5 * h, tmp, k2)?;
    for i in 0..n {
        tmp[i] = y[i] + 0.5 * h * k2[i];
    }
    rhs(t + 0.5 * h, tmp, k3)?;
    for i in 0..n {
        tmp[i] = y[i] + h * k3[i];
    }
    rhs(t + h, tmp, k4)?;
    for i in 0..n {
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    Ok(())
}

pub(crate) struct DopriWork {
    k: Vec<Vec<f64>>,
    tmp: Vec<f64>,
    pub(crate) y_new: Vec<f64>,
}

impl DopriWork {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            k: vec![vec![0.0; n]; 7],
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
        }
    }
}

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order weights minus embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// One Dormand–Prince 5(4) trial step. The candidate is left in
/// `w.y_new`; the return value is the max over the first `err_dims`
/// components of `|err_i| / (atol + rtol * max(|y_i|, |y_new_i|))`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dopri5_step<R>(
    rhs: &mut R,
    t: f64,
    h: f64,
    y: &[f64],
    w: &mut DopriWork,
    atol: f64,
    rtol: f64,
    err_dims: usize,
) -> Result<f64, OdeError>
where
    R: FnMut(f64, &[f64], &mut [f64]) -> Result<(), OdeError>,
{
    let n = y.len();
    rhs(t, y, &mut w.k[0])?;
    for s in 1..7 {
        for i in 0..n {
            let mut acc = y[i];
            for (j, a) in A[s].iter().enumerate().take(s) {
                acc += h * a * w.k[j][i];
            }
            w.tmp[i] = acc;
        }
        let (head, tail) = w.k.split_at_mut(s);
        let _ = head;
        rhs(t + C[s] * h, &w.tmp, &mut tail[0])?;
    }
    // Stage 7 was evaluated at the fifth-order solution, which is w.tmp.
    w.y_new.copy_from_slice(&w.tmp);
    let mut err: f64 = 0.0;
    for i in 0..err_dims.min(n) {
        let mut e = 0.0;
        for (s, es) in E.iter().enumerate() {
            e += es * w.k[s][i];
        }
        let scale = atol + rtol * y[i].abs().max(w.y_new[i].abs());
        err = err.max((h * e).abs() / scale);
    }
    if !err.is_finite() {
        return Err(OdeError::NonFinite { t });
    }
    Ok(err)
}
