use super::{
    check_cols, inv, meta_from, mlp_from_checkpoint, named_tensors, standardize, standardize_tape, ModelError,
    ModelMeta, Normalizer, Phase,
};
use crate::datastore::{Checkpoint, ModelKind};
use crate::diffcore::{MlpParams, Tape, Tensor, Var};
use crate::rng::seeded;

/// Tracking controller `u = π̂_φ(ν, x)`.
///
/// The network sees `concat(ν / s_d, x_n)` and predicts a standardized
/// action; `u = μ_u + σ_u ⊙ net`.
#[derive(Clone, Debug, PartialEq)]
pub struct CtrlModel {
    pub net: MlpParams,
    pub norm: Normalizer,
    pub phase: Phase,
    /// Feedback gain used while training.
    pub train_gain: f64,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

impl CtrlModel {
    pub fn new(norm: Normalizer, hidden: &[usize], train_gain: f64, seed: u64) -> Result<Self, ModelError> {
        norm.validate()?;
        let (n, m) = (norm.n(), norm.m());
        let mut rng = seeded(seed);
        Ok(Self {
            net: MlpParams::new(2 * n, hidden, m, 0.1, &mut rng),
            norm,
            phase: Phase::Untrained,
            train_gain,
            final_loss: None,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.norm.n()
    }

    pub fn m(&self) -> usize {
        self.norm.m()
    }

    /// Phase 2 or 3 completed.
    pub fn is_trained(&self) -> bool {
        matches!(self.phase, Phase::Controller | Phase::Robust)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.net.tensors()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.tensors_mut()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.net.register(tape, trainable)
    }

    /// Batched controls for `nu, x: [B, n]`.
    pub fn forward(&self, nu: &Tensor, x: &Tensor) -> Result<Tensor, ModelError> {
        self.norm.validate()?;
        check_cols(nu, self.n(), "virtual input")?;
        check_cols(x, self.n(), "state")?;
        if nu.rows() != x.rows() {
            return Err(ModelError::Shape("virtual input and state batch sizes differ".into()));
        }
        let zeros = vec![0.0; self.n()];
        let nun = standardize(nu, &zeros, &self.norm.dx_scale);
        let xn = standardize(x, &self.norm.x_mean, &self.norm.x_std);
        let (b, n) = (x.rows(), self.n());
        let mut cat = Vec::with_capacity(b * 2 * n);
        for r in 0..b {
            cat.extend_from_slice(nun.row_slice(r));
            cat.extend_from_slice(xn.row_slice(r));
        }
        let mut out = self.net.forward(&Tensor::from_rows(b, 2 * n, cat))?;
        let m = self.m();
        for row in out.data_mut().chunks_mut(m) {
            for ((v, s), mu) in row.iter_mut().zip(&self.norm.u_std).zip(&self.norm.u_mean) {
                *v = *v * s + mu;
            }
        }
        if !out.is_finite() {
            return Err(ModelError::NonFinite("controller output"));
        }
        Ok(out)
    }

    pub fn forward_tape(&self, tape: &mut Tape, nu: Var, x: Var, params: &[Var]) -> Result<Var, ModelError> {
        self.norm.validate()?;
        let nun = tape.scale_cols(nu, &inv(&self.norm.dx_scale))?;
        let xn = standardize_tape(tape, x, &self.norm.x_mean, &self.norm.x_std)?;
        let cat = tape.concat_cols(&[nun, xn])?;
        let out = self.net.forward_tape(tape, cat, params)?;
        let out = tape.scale_cols(out, &self.norm.u_std)?;
        Ok(tape.shift_cols(out, &self.norm.u_mean)?)
    }

    pub fn act(&self, nu: &[f64], x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(&Tensor::row(nu), &Tensor::row(x))?.into_data())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            norm: self.norm.clone(),
            latent_dim: None,
            train_gain: Some(self.train_gain),
            heldout_loss: None,
        };
        Checkpoint::new(
            ModelKind::Ctrl,
            "mlp",
            named_tensors("net", &self.net),
            self.phase.name(),
            self.final_loss,
            self.seed,
            serde_json::to_value(meta).expect("meta serializes"),
            config,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(ModelKind::Ctrl)?;
        let meta = meta_from(ckpt)?;
        let net = mlp_from_checkpoint(ckpt, "net")?;
        if net.input_dim() != 2 * meta.norm.n() || net.output_dim() != meta.norm.m() {
            return Err(ModelError::Checkpoint("controller widths do not match normalization".into()));
        }
        Ok(Self {
            net,
            norm: meta.norm,
            phase: Phase::parse(&ckpt.header.phase)?,
            train_gain: meta.train_gain.unwrap_or(0.1),
            final_loss: ckpt.header.final_loss,
            seed: ckpt.header.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctrl() -> CtrlModel {
        let mut norm = Normalizer::identity(2, 1, 0.05);
        norm.dx_scale = vec![0.5, 4.0];
        norm.u_mean = vec![0.2];
        norm.u_std = vec![3.0];
        CtrlModel::new(norm, &[8, 8], 0.1, 9).unwrap()
    }

    #[test]
    fn forward_is_pure_and_matches_tape() {
        let c = ctrl();
        let nu = Tensor::from_rows(2, 2, vec![0.1, -0.3, 2.0, 1.0]);
        let x = Tensor::from_rows(2, 2, vec![0.5, 0.0, -1.0, 0.25]);
        let a = c.forward(&nu, &x).unwrap();
        assert_eq!(a, c.forward(&nu, &x).unwrap());
        let mut tape = Tape::new();
        let p = c.register(&mut tape, true);
        let (nv, xv) = (tape.constant(nu), tape.constant(x));
        let out = c.forward_tape(&mut tape, nv, xv, &p).unwrap();
        let taped = tape.value(out);
        for (p, q) in taped.data().iter().zip(a.data()) {
            assert!((p - q).abs() <= 1e-15 * (1.0 + q.abs()));
        }
    }

    #[test]
    fn missing_normalization_rejected() {
        let mut c = ctrl();
        c.norm.u_std = vec![];
        assert!(matches!(c.act(&[0.0, 0.0], &[0.0, 0.0]), Err(ModelError::MissingNormalization)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut c = ctrl();
        c.phase = Phase::Robust;
        let ck = c.to_checkpoint(serde_json::Value::Null);
        let back = CtrlModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
