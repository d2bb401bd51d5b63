use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::DiffError;

/// Gradients indexed by parameter id (position in a model's tensor list).
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    pub grads: Vec<Tensor>,
}

impl GradMap {
    pub fn zeros_like(params: &[&Tensor]) -> Self {
        Self {
            grads: params.iter().map(|t| Tensor::zeros_like(t)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradMap) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.grads.iter_mut().for_each(|g| g.scale_in_place(s));
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.5,
            decay_every: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
    epoch: usize,
}

impl OptimState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Result<Self, DiffError> {
        if !(config.lr > 0.0) {
            return Err(DiffError::InvalidConfig("learning rate must be positive"));
        }
        Ok(Self {
            config,
            first: params.iter().map(|t| Tensor::zeros_like(t)).collect(),
            second: params.iter().map(|t| Tensor::zeros_like(t)).collect(),
            step: 0,
            epoch: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    /// Base rate times `decay_factor^(epoch / decay_every)`.
    pub fn effective_lr(&self) -> f64 {
        let halvings = (self.epoch / self.config.decay_every.max(1)) as i32;
        self.config.lr * self.config.decay_factor.powi(halvings)
    }
}

/// One bias-corrected adaptive-moment update.
pub fn adam_step(params: &mut [&mut Tensor], grads: &GradMap, state: &mut OptimState) -> Result<(), DiffError> {
    if grads.grads.len() != params.len() {
        return Err(DiffError::MissingGradient(grads.grads.len().min(params.len())));
    }
    for (i, (p, g)) in params.iter().zip(&grads.grads).enumerate() {
        if !p.same_shape(g) {
            return Err(DiffError::MissingGradient(i));
        }
        if !g.is_finite() {
            return Err(DiffError::NonFiniteGradient(i));
        }
    }
    state.step += 1;
    let cfg = &state.config;
    let lr = state.effective_lr();
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads.grads[i].data();
        let m = state.first[i].data_mut();
        for (mk, gk) in m.iter_mut().zip(g) {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
        }
        let v = state.second[i].data_mut();
        for (vk, gk) in v.iter_mut().zip(g) {
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
        }
        let (m, v) = (state.first[i].data(), state.second[i].data());
        for ((pk, mk), vk) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mk / bc1;
            let vhat = vk / bc2;
            *pk -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut w = Tensor::from_rows(2, 2, vec![1.0, -2.0, 3.0, 0.5]);
        let before = w.clone();
        let mut st = OptimState::new(&[&w], AdamConfig::with_lr(0.01)).unwrap();
        let g = GradMap::zeros_like(&[&w]);
        adam_step(&mut [&mut w], &g, &mut st).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn lr_halves_at_epoch_100() {
        let w = Tensor::scalar(0.0);
        let mut st = OptimState::new(&[&w], AdamConfig::with_lr(0.01)).unwrap();
        st.set_epoch(99);
        assert_eq!(st.effective_lr(), 0.01);
        st.set_epoch(100);
        assert_eq!(st.effective_lr(), 0.005);
        st.set_epoch(250);
        assert_eq!(st.effective_lr(), 0.0025);
    }

    #[test]
    fn rejects_non_positive_lr_and_bad_gradients() {
        let mut w = Tensor::scalar(1.0);
        assert!(OptimState::new(&[&w], AdamConfig::with_lr(0.0)).is_err());
        let mut st = OptimState::new(&[&w], AdamConfig::default()).unwrap();
        let g = GradMap {
            grads: vec![Tensor::scalar(f64::NAN)],
        };
        assert!(matches!(
            adam_step(&mut [&mut w], &g, &mut st),
            Err(DiffError::NonFiniteGradient(0))
        ));
    }

    #[test]
    fn constant_gradient_matches_scalar_reference() {
        // Independent scalar transcription of the update rule.
        fn reference(steps: usize, lr: f64) -> Vec<f64> {
            let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
            let (mut p, mut m, mut v) = (0.0_f64, 0.0_f64, 0.0_f64);
            let mut out = Vec::new();
            for t in 1..=steps {
                let g = 1.0;
                m = b1 * m + (1.0 - b1) * g;
                v = b2 * v + (1.0 - b2) * g * g;
                let mh = m / (1.0 - b1.powi(t as i32));
                let vh = v / (1.0 - b2.powi(t as i32));
                p -= lr * mh / (vh.sqrt() + eps);
                out.push(p);
            }
            out
        }
        let expected = reference(50, 0.01);
        let mut w = Tensor::scalar(0.0);
        let mut st = OptimState::new(&[&w], AdamConfig::with_lr(0.01)).unwrap();
        let g = GradMap {
            grads: vec![Tensor::scalar(1.0)],
        };
        let mut prev = 0.0;
        for e in expected {
            adam_step(&mut [&mut w], &g, &mut st).unwrap();
            assert!((w.item() - e).abs() < 1e-15);
            assert!(w.item() < prev);
            prev = w.item();
        }
    }
}
