use super::OdeError;

/// Zero-order-hold extension of a uniformly sampled control sequence.
///
/// `lookup(t)` returns sample `i` for `t` in `[t_i, t_{i+1})`; the last sample
/// is held for one further period.
#[derive(Clone, Debug, PartialEq)]
pub struct ZohInput {
    t0: f64,
    dt: f64,
    dim: usize,
    samples: Vec<f64>,
}

impl ZohInput {
    /// `samples` is row-major, one row of `dim` values per sample time.
    pub fn new(t0: f64, dt: f64, dim: usize, samples: Vec<f64>) -> Result<Self, OdeError> {
        if !(dt > 0.0) || dim == 0 || samples.is_empty() || samples.len() % dim != 0 {
            return Err(OdeError::Grid("zoh input needs dt > 0 and whole samples".into()));
        }
        Ok(Self { t0, dt, dim, samples })
    }

    /// Builds from explicit sample times, which must be uniformly spaced.
    pub fn from_times(times: &[f64], dim: usize, samples: Vec<f64>) -> Result<Self, OdeError> {
        if times.len() < 2 {
            return Err(OdeError::Grid("need at least two sample times".into()));
        }
        let dt = times[1] - times[0];
        for w in times.windows(2) {
            if !(w[1] > w[0]) || ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(OdeError::Grid("sample times must be uniform and increasing".into()));
            }
        }
        if samples.len() != times.len() * dim {
            return Err(OdeError::Grid("sample count does not match times".into()));
        }
        Self::new(times[0], dt, dim, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the hold interval containing `t`.
    pub fn index_at(&self, t: f64) -> Result<usize, OdeError> {
        let hi = self.time(self.len());
        if !(t >= self.t0) || !(t < hi - 1e-9 * self.dt) {
            return Err(OdeError::OutOfRange { t, lo: self.t0, hi });
        }
        let mut i = ((t - self.t0) / self.dt).floor() as usize;
        // Snap against rounding in the division so intervals stay left-closed.
        if i + 1 < self.len() && t >= self.time(i + 1) {
            i += 1;
        }
        if i > 0 && t < self.time(i) {
            i -= 1;
        }
        Ok(i.min(self.len() - 1))
    }

    pub fn lookup(&self, t: f64) -> Result<&[f64], OdeError> {
        Ok(self.sample(self.index_at(t)?))
    }
}
