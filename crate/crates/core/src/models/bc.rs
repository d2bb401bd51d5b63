use super::{
    check_cols, meta_from, mlp_from_checkpoint, named_tensors, standardize, standardize_tape, ModelError, ModelMeta,
    Normalizer, Phase,
};
use crate::datastore::{Checkpoint, ModelKind};
use crate::diffcore::{MlpParams, Tape, Tensor, Var};
use crate::rng::seeded;

/// Behaviour-cloning baseline: a state-feedback policy fit to expert actions.
#[derive(Clone, Debug, PartialEq)]
pub struct BcPolicy {
    pub net: MlpParams,
    pub norm: Normalizer,
    pub phase: Phase,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

impl BcPolicy {
    pub fn new(norm: Normalizer, hidden: &[usize], seed: u64) -> Result<Self, ModelError> {
        norm.validate()?;
        let mut rng = seeded(seed);
        Ok(Self {
            net: MlpParams::new(norm.n(), hidden, norm.m(), 0.1, &mut rng),
            norm,
            phase: Phase::Untrained,
            final_loss: None,
            seed,
        })
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

    /// Standardized action prediction, `[B, m]`.
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var, ModelError> {
        let xn = standardize_tape(tape, x, &self.norm.x_mean, &self.norm.x_std)?;
        Ok(self.net.forward_tape(tape, xn, params)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.norm.validate()?;
        check_cols(x, self.norm.n(), "state")?;
        let xn = standardize(x, &self.norm.x_mean, &self.norm.x_std);
        let mut out = self.net.forward(&xn)?;
        let m = self.norm.m();
        for row in out.data_mut().chunks_mut(m) {
            for ((v, s), mu) in row.iter_mut().zip(&self.norm.u_std).zip(&self.norm.u_mean) {
                *v = *v * s + mu;
            }
        }
        Ok(out)
    }

    pub fn act(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(&Tensor::row(x))?.into_data())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let meta = ModelMeta {
            norm: self.norm.clone(),
            latent_dim: None,
            train_gain: None,
            heldout_loss: None,
        };
        Checkpoint::new(
            ModelKind::Bc,
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
        ckpt.expect_kind(ModelKind::Bc)?;
        let meta = meta_from(ckpt)?;
        let net = mlp_from_checkpoint(ckpt, "net")?;
        if net.input_dim() != meta.norm.n() || net.output_dim() != meta.norm.m() {
            return Err(ModelError::Checkpoint("policy widths do not match normalization".into()));
        }
        Ok(Self {
            net,
            norm: meta.norm,
            phase: Phase::parse(&ckpt.header.phase)?,
            final_loss: ckpt.header.final_loss,
            seed: ckpt.header.seed,
        })
    }
}
