use super::{
    check_cols, meta_from, mlp_from_checkpoint, named_tensors, standardize, standardize_tape, ModelError, ModelMeta,
    Normalizer, Phase,
};
use crate::datastore::{Checkpoint, ModelKind};
use crate::diffcore::{MlpParams, Tape, Tensor, Var};
use crate::rng::{normal_vec, seeded, Rng};

/// Conditional VAE over consecutive states. The condition is the previous
/// state; the decoder predicts the standardized increment
/// `(x_i − x_{i−1}) / s_Δ` with a unit-variance Gaussian likelihood.
#[derive(Clone, Debug, PartialEq)]
pub struct CvaeModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub latent_dim: usize,
    pub norm: Normalizer,
    pub phase: Phase,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

/// Batch-averaged loss terms: `total = reconstruction + kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Tape handles of one loss evaluation.
pub struct CvaeTape {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub mu: Var,
    pub logvar: Var,
}

impl CvaeModel {
    pub fn new(norm: Normalizer, hidden: &[usize], latent_dim: usize, seed: u64) -> Result<Self, ModelError> {
        norm.validate()?;
        if latent_dim == 0 {
            return Err(ModelError::Shape("latent dimension must be positive".into()));
        }
        let n = norm.n();
        let mut rng = seeded(seed);
        Ok(Self {
            encoder: MlpParams::new(2 * n, hidden, 2 * latent_dim, 0.1, &mut rng),
            decoder: MlpParams::new(latent_dim + n, hidden, n, 0.1, &mut rng),
            latent_dim,
            norm,
            phase: Phase::Untrained,
            final_loss: None,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.norm.n()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.encoder.tensors();
        v.extend(self.decoder.tensors());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut v = self.encoder.register(tape, trainable);
        v.extend(self.decoder.register(tape, trainable));
        v
    }

    /// Standardized increment target for `[B, n]` pairs.
    pub fn target(&self, x_curr: &Tensor, x_prev: &Tensor) -> Tensor {
        let n = self.n();
        let ds = self.norm.delta_scale();
        let mut out = x_curr.clone();
        for (row, prev) in out.data_mut().chunks_mut(n).zip(x_prev.data().chunks(n)) {
            for j in 0..n {
                row[j] = (row[j] - prev[j]) / ds[j];
            }
        }
        out
    }

    /// Records the loss with reparameterization noise `eps: [B, d_z]`.
    pub fn loss_tape(
        &self,
        tape: &mut Tape,
        x_curr: &Tensor,
        x_prev: &Tensor,
        eps: &Tensor,
        params: &[Var],
    ) -> Result<CvaeTape, ModelError> {
        let n = self.n();
        check_cols(x_curr, n, "current state")?;
        check_cols(x_prev, n, "previous state")?;
        check_cols(eps, self.latent_dim, "latent noise")?;
        let b = x_curr.rows();
        if x_prev.rows() != b || eps.rows() != b || b == 0 {
            return Err(ModelError::Shape("cvae batch sizes differ".into()));
        }
        let d = self.latent_dim;
        let ne = 2 * self.encoder.layers.len();
        let target = tape.constant(self.target(x_curr, x_prev));
        let xc = tape.constant(x_curr.clone());
        let xp = tape.constant(x_prev.clone());
        let xcn = standardize_tape(tape, xc, &self.norm.x_mean, &self.norm.x_std)?;
        let cn = standardize_tape(tape, xp, &self.norm.x_mean, &self.norm.x_std)?;
        let enc_in = tape.concat_cols(&[xcn, cn])?;
        let h = self.encoder.forward_tape(tape, enc_in, &params[..ne])?;
        let mu = tape.slice_cols(h, 0, d)?;
        let logvar = tape.slice_cols(h, d, d)?;
        if !tape.value(logvar).is_finite() {
            return Err(ModelError::NonFinite("log-variance"));
        }
        let half = tape.scale(logvar, 0.5)?;
        let std = tape.exp(half)?;
        let eps_v = tape.constant(eps.clone());
        let noise = tape.mul(std, eps_v)?;
        let z = tape.add(mu, noise)?;
        let dec_in = tape.concat_cols(&[z, cn])?;
        let pred = self.decoder.forward_tape(tape, dec_in, &params[ne..])?;
        let diff = tape.sub(pred, target)?;
        let sq = tape.square(diff)?;
        let rs = tape.sum(sq)?;
        let reconstruction = tape.scale(rs, 0.5 / b as f64)?;
        // ½ Σ (μ² + σ² − 1 − log σ²)
        let mu2 = tape.square(mu)?;
        let var = tape.exp(logvar)?;
        let s1 = tape.add(mu2, var)?;
        let s2 = tape.sub(s1, logvar)?;
        let s3 = tape.shift_cols(s2, &vec![-1.0; d])?;
        let ks = tape.sum(s3)?;
        let kl = tape.scale(ks, 0.5 / b as f64)?;
        let total = tape.add(reconstruction, kl)?;
        Ok(CvaeTape {
            total,
            reconstruction,
            kl,
            mu,
            logvar,
        })
    }

    /// Decoder mean for given latents: next states in physical units.
    pub fn decode(&self, z: &Tensor, x_prev: &Tensor) -> Result<Tensor, ModelError> {
        let n = self.n();
        check_cols(z, self.latent_dim, "latent")?;
        check_cols(x_prev, n, "previous state")?;
        let cn = standardize(x_prev, &self.norm.x_mean, &self.norm.x_std);
        let b = z.rows();
        let mut cat = Vec::with_capacity(b * (self.latent_dim + n));
        for r in 0..b {
            cat.extend_from_slice(z.row_slice(r));
            cat.extend_from_slice(cn.row_slice(r));
        }
        let mut out = self.decoder.forward(&Tensor::from_rows(b, self.latent_dim + n, cat))?;
        let ds = self.norm.delta_scale();
        for (row, prev) in out.data_mut().chunks_mut(n).zip(x_prev.data().chunks(n)) {
            for j in 0..n {
                row[j] = prev[j] + ds[j] * row[j];
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut named = named_tensors("encoder", &self.encoder);
        named.extend(named_tensors("decoder", &self.decoder));
        let meta = ModelMeta {
            norm: self.norm.clone(),
            latent_dim: Some(self.latent_dim),
            train_gain: None,
            heldout_loss: None,
        };
        Checkpoint::new(
            ModelKind::Cvae,
            "cvae",
            named,
            self.phase.name(),
            self.final_loss,
            self.seed,
            serde_json::to_value(meta).expect("meta serializes"),
            config,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(ModelKind::Cvae)?;
        let meta = meta_from(ckpt)?;
        let latent_dim = meta
            .latent_dim
            .ok_or_else(|| ModelError::Checkpoint("missing latent dimension".into()))?;
        let encoder = mlp_from_checkpoint(ckpt, "encoder")?;
        let decoder = mlp_from_checkpoint(ckpt, "decoder")?;
        let n = meta.norm.n();
        if encoder.input_dim() != 2 * n
            || encoder.output_dim() != 2 * latent_dim
            || decoder.input_dim() != latent_dim + n
            || decoder.output_dim() != n
        {
            return Err(ModelError::Checkpoint("cvae widths do not match".into()));
        }
        Ok(Self {
            encoder,
            decoder,
            latent_dim,
            norm: meta.norm,
            phase: Phase::parse(&ckpt.header.phase)?,
            final_loss: ckpt.header.final_loss,
            seed: ckpt.header.seed,
        })
    }
}

/// Loss on a batch of `(x_i, x_{i−1})` pairs with one reparameterized
/// sample drawn from `rng`.
pub fn cvae_loss(cv: &CvaeModel, x_curr: &Tensor, x_prev: &Tensor, rng: &mut Rng) -> Result<CvaeLoss, ModelError> {
    let eps = Tensor::from_rows(x_curr.rows(), cv.latent_dim, normal_vec(rng, x_curr.rows() * cv.latent_dim));
    let mut tape = Tape::new();
    let p = cv.register(&mut tape, false);
    let t = cv.loss_tape(&mut tape, x_curr, x_prev, &eps, &p)?;
    Ok(CvaeLoss {
        total: tape.value(t.total).item(),
        reconstruction: tape.value(t.reconstruction).item(),
        kl: tape.value(t.kl).item(),
    })
}

/// Next reference state from the prior: `z ~ N(0, I)`, `c = x_prev`.
pub fn cvae_generate(cv: &CvaeModel, x_prev: &[f64], seed: u64) -> Result<Vec<f64>, ModelError> {
    let mut rng = seeded(seed);
    cvae_generate_with(cv, x_prev, &mut rng)
}

pub fn cvae_generate_with(cv: &CvaeModel, x_prev: &[f64], rng: &mut Rng) -> Result<Vec<f64>, ModelError> {
    let z = Tensor::row(&normal_vec(rng, cv.latent_dim));
    Ok(cv.decode(&z, &Tensor::row(x_prev))?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cvae() -> CvaeModel {
        let mut norm = Normalizer::identity(2, 1, 0.05);
        norm.x_std = vec![0.5, 2.0];
        CvaeModel::new(norm, &[8, 8], 3, 4).unwrap()
    }

    fn zero_encoder(cv: &mut CvaeModel, mu0: f64) {
        for t in cv.encoder.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let last = cv.encoder.layers.last_mut().unwrap();
        last.bias.data_mut()[0] = mu0;
    }

    #[test]
    fn prior_matching_encoder_has_zero_kl() {
        let mut cv = cvae();
        zero_encoder(&mut cv, 0.0);
        let x = Tensor::from_rows(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let l = cvae_loss(&cv, &x, &x, &mut seeded(1)).unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn unit_mean_shift_gives_half_kl() {
        let mut cv = cvae();
        zero_encoder(&mut cv, 1.0);
        let x = Tensor::from_rows(1, 2, vec![0.1, 0.2]);
        let l = cvae_loss(&cv, &x, &x, &mut seeded(1)).unwrap();
        assert!((l.kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perfect_decoder_has_zero_reconstruction() {
        let mut cv = cvae();
        for t in cv.decoder.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        // zero decoder predicts no increment
        let x = Tensor::from_rows(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        let l = cvae_loss(&cv, &x, &x, &mut seeded(2)).unwrap();
        assert_eq!(l.reconstruction, 0.0);
        assert_eq!(l.total, l.kl);
        assert!(l.kl >= 0.0);
    }

    #[test]
    fn kl_gradient_matches_closed_form() {
        let cv = cvae();
        let x = Tensor::from_rows(3, 2, vec![0.1, 0.2, 0.3, -0.4, 1.0, 0.0]);
        let xp = Tensor::from_rows(3, 2, vec![0.0, 0.1, 0.2, -0.5, 0.9, 0.1]);
        let eps = Tensor::from_rows(3, 3, vec![0.3, -1.0, 0.5, 0.0, 0.2, 1.5, -0.7, 0.4, 0.1]);
        let mut tape = Tape::new();
        let p = cv.register(&mut tape, true);
        let t = cv.loss_tape(&mut tape, &x, &xp, &eps, &p).unwrap();
        let g = tape.backward(t.kl, &Tensor::scalar(1.0)).unwrap();
        let (mu, lv) = (tape.value(t.mu).clone(), tape.value(t.logvar).clone());
        let gm = g.wrt(t.mu);
        let gl = g.wrt(t.logvar);
        for k in 0..mu.len() {
            // ∂/∂μ = μ / B, ∂/∂logσ² = (σ² − 1) / 2B
            assert!((gm.data()[k] - mu.data()[k] / 3.0).abs() < 1e-6);
            assert!((gl.data()[k] - (lv.data()[k].exp() - 1.0) / 6.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let cv = cvae();
        let a = cvae_generate(&cv, &[0.1, 0.2], 5).unwrap();
        assert_eq!(a, cvae_generate(&cv, &[0.1, 0.2], 5).unwrap());
        assert_ne!(a, cvae_generate(&cv, &[0.1, 0.2], 6).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let cv = cvae();
        let ck = cv.to_checkpoint(serde_json::Value::Null);
        let back = CvaeModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, cv);
    }
}
