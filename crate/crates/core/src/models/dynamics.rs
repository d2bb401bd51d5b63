use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{
    check_cols, meta_from, mlp_from_checkpoint, named_tensors, standardize, standardize_tape, ModelError, ModelMeta,
    Normalizer, Phase,
};
use crate::datastore::{Checkpoint, ModelKind};
use crate::diffcore::{MlpParams, Tape, Tensor, Var};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DynStructure {
    /// `ẋ = â(x) + Ĝ(x)u`, linear in `u` by construction.
    Affine,
    /// One MLP on `concat(x, u)`; kept as an ablation.
    Generic,
}

impl DynStructure {
    pub fn name(self) -> &'static str {
        match self {
            DynStructure::Affine => "affine",
            DynStructure::Generic => "generic",
        }
    }
}

/// Learned dynamics `ẋ̂ = f̂_θ(x, u)`.
///
/// In affine mode the physical derivative is
/// `s_d ⊙ (â(x_n) + Ĝ(x_n) u_n)` with standardized `x_n`, `u_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynModel {
    pub structure: DynStructure,
    pub norm: Normalizer,
    /// Drift net in affine mode, the whole map in generic mode.
    pub drift: MlpParams,
    pub gmat: Option<MlpParams>,
    pub phase: Phase,
    pub final_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
    pub seed: u64,
}

impl DynModel {
    pub fn new(structure: DynStructure, norm: Normalizer, hidden: &[usize], seed: u64) -> Result<Self, ModelError> {
        norm.validate()?;
        let (n, m) = (norm.n(), norm.m());
        let mut rng = Rng::seed_from_u64(seed);
        let (drift, gmat) = match structure {
            DynStructure::Affine => (
                MlpParams::new(n, hidden, n, 0.1, &mut rng),
                Some(MlpParams::new(n, hidden, n * m, 0.1, &mut rng)),
            ),
            DynStructure::Generic => (MlpParams::new(n + m, hidden, n, 0.1, &mut rng), None),
        };
        Ok(Self {
            structure,
            norm,
            drift,
            gmat,
            phase: Phase::Untrained,
            final_loss: None,
            heldout_loss: None,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.norm.n()
    }

    pub fn m(&self) -> usize {
        self.norm.m()
    }

    pub fn is_trained(&self) -> bool {
        self.phase == Phase::Dynamics
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = self.drift.tensors();
        if let Some(g) = &self.gmat {
            v.extend(g.tensors());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.drift.tensors_mut();
        if let Some(g) = &mut self.gmat {
            v.extend(g.tensors_mut());
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut v = self.drift.register(tape, trainable);
        if let Some(g) = &self.gmat {
            v.extend(g.register(tape, trainable));
        }
        v
    }

    /// Batched derivative for `x: [B, n]`, `u: [B, m]`.
    pub fn forward(&self, x: &Tensor, u: &Tensor) -> Result<Tensor, ModelError> {
        check_cols(x, self.n(), "state")?;
        check_cols(u, self.m(), "control")?;
        if x.rows() != u.rows() {
            return Err(ModelError::Shape("state and control batch sizes differ".into()));
        }
        let xn = standardize(x, &self.norm.x_mean, &self.norm.x_std);
        let un = standardize(u, &self.norm.u_mean, &self.norm.u_std);
        let (b, n, m) = (x.rows(), self.n(), self.m());
        let mut out = match (&self.structure, &self.gmat) {
            (DynStructure::Affine, Some(gnet)) => {
                let mut a = self.drift.forward(&xn)?;
                let g = gnet.forward(&xn)?;
                for r in 0..b {
                    let (gr, ur) = (g.row_slice(r), un.row_slice(r));
                    let o = &mut a.data_mut()[r * n..(r + 1) * n];
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += gr[i * m + j] * ur[j];
                        }
                        o[i] += acc;
                    }
                }
                a
            }
            _ => {
                let mut cat = Vec::with_capacity(b * (n + m));
                for r in 0..b {
                    cat.extend_from_slice(xn.row_slice(r));
                    cat.extend_from_slice(un.row_slice(r));
                }
                self.drift.forward(&Tensor::from_rows(b, n + m, cat))?
            }
        };
        for row in out.data_mut().chunks_mut(n) {
            for (v, s) in row.iter_mut().zip(&self.norm.dx_scale) {
                *v *= s;
            }
        }
        if !out.is_finite() {
            return Err(ModelError::NonFinite("dynamics output"));
        }
        Ok(out)
    }

    /// Recorded forward; `params` from [`DynModel::register`].
    pub fn forward_tape(&self, tape: &mut Tape, x: Var, u: Var, params: &[Var]) -> Result<Var, ModelError> {
        let xn = standardize_tape(tape, x, &self.norm.x_mean, &self.norm.x_std)?;
        let un = standardize_tape(tape, u, &self.norm.u_mean, &self.norm.u_std)?;
        let nd = 2 * self.drift.layers.len();
        let out = match (&self.structure, &self.gmat) {
            (DynStructure::Affine, Some(gnet)) => {
                let a = self.drift.forward_tape(tape, xn, &params[..nd])?;
                let g = gnet.forward_tape(tape, xn, &params[nd..])?;
                tape.affine_apply(a, g, un)?
            }
            _ => {
                let cat = tape.concat_cols(&[xn, un])?;
                self.drift.forward_tape(tape, cat, &params[..nd])?
            }
        };
        Ok(tape.scale_cols(out, &self.norm.dx_scale)?)
    }

    /// Single-state convenience wrapper.
    pub fn deriv(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(&Tensor::row(x), &Tensor::row(u))?.into_data())
    }

    pub fn to_checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut named = named_tensors("drift", &self.drift);
        if let Some(g) = &self.gmat {
            named.extend(named_tensors("gmat", g));
        }
        let meta = ModelMeta {
            norm: self.norm.clone(),
            latent_dim: None,
            train_gain: None,
            heldout_loss: self.heldout_loss,
        };
        Checkpoint::new(
            ModelKind::Dyn,
            self.structure.name(),
            named,
            self.phase.name(),
            self.final_loss,
            self.seed,
            serde_json::to_value(meta).expect("meta serializes"),
            config,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        ckpt.expect_kind(ModelKind::Dyn)?;
        let meta = meta_from(ckpt)?;
        let structure = match ckpt.header.structure.as_str() {
            "affine" => DynStructure::Affine,
            "generic" => DynStructure::Generic,
            s => return Err(ModelError::Checkpoint(format!("unknown structure {s:?}"))),
        };
        let (n, m) = (meta.norm.n(), meta.norm.m());
        let drift = mlp_from_checkpoint(ckpt, "drift")?;
        let gmat = match structure {
            DynStructure::Affine => Some(mlp_from_checkpoint(ckpt, "gmat")?),
            DynStructure::Generic => None,
        };
        let expected_in = if structure == DynStructure::Affine { n } else { n + m };
        if drift.input_dim() != expected_in
            || drift.output_dim() != n
            || gmat.as_ref().is_some_and(|g| g.input_dim() != n || g.output_dim() != n * m)
        {
            return Err(ModelError::Checkpoint("network widths do not match normalization".into()));
        }
        Ok(Self {
            structure,
            norm: meta.norm,
            drift,
            gmat,
            phase: Phase::parse(&ckpt.header.phase)?,
            final_loss: ckpt.header.final_loss,
            heldout_loss: meta.heldout_loss,
            seed: ckpt.header.seed,
        })
    }
}

/// `(â(x), Ĝ(x))` in physical units by probing the model:
/// `â = f̂(x, 0)` and column `j` of `Ĝ` is `f̂(x, e_j) − f̂(x, 0)`.
/// `Ĝ` is returned row-major `n × m`.
pub fn extract_affine(dm: &DynModel, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    if dm.structure != DynStructure::Affine {
        return Err(ModelError::NotAffine("extract_affine"));
    }
    let (n, m) = (dm.n(), dm.m());
    let mut xs = Vec::with_capacity((m + 1) * n);
    let mut us = vec![0.0; (m + 1) * m];
    for j in 0..=m {
        xs.extend_from_slice(x);
        if j > 0 {
            us[j * m + (j - 1)] = 1.0;
        }
    }
    let out = dm.forward(&Tensor::from_rows(m + 1, n, xs), &Tensor::from_rows(m + 1, m, us))?;
    let a = out.row_slice(0).to_vec();
    let mut g = vec![0.0; n * m];
    for j in 0..m {
        let col = out.row_slice(j + 1);
        for i in 0..n {
            g[i * m + j] = col[i] - a[i];
        }
    }
    Ok((a, g))
}
