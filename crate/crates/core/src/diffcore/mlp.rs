use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{elu, Tape, Var};
use super::tensor::{matmul, Tensor};
use super::DiffError;

/// One fully connected layer; `weight` is `[in, out]`, `bias` is `[1, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Multilayer perceptron with ELU hidden activations and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

impl MlpParams {
    /// LeCun-normal weights, zero biases. The output layer is scaled by
    /// `output_scale`, which lets callers start near a zero map.
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_scale: f64,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let mut std = (1.0 / fan_in.max(1) as f64).sqrt();
                if i == last {
                    std *= output_scale;
                }
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z * std
                    })
                    .collect();
                Dense {
                    weight: Tensor::from_rows(fan_in, fan_out, data),
                    bias: Tensor::zeros(&[1, fan_out]),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.cols()).unwrap_or(0)
    }

    /// `[in, h1, h2, ..., out]`
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.cols()));
        w
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every weight and bias on the tape, as leaves or as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<(), DiffError> {
        if input.cols() != self.input_dim() {
            return Err(DiffError::ShapeMismatch {
                op: "mlp_forward",
                lhs: input.shape().to_vec(),
                rhs: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Tape-free evaluation on a `[batch, in]` input.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, DiffError> {
        self.check_input(input)?;
        let mut h = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = matmul(&h, &layer.weight)?;
            let c = z.cols();
            for row in z.data_mut().chunks_mut(c) {
                for (v, b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if i != last {
                        *v = elu(*v);
                    }
                }
            }
            h = z;
        }
        if !h.is_finite() {
            return Err(DiffError::NonFinite("mlp_forward"));
        }
        Ok(h)
    }

    /// Recorded evaluation; `params` come from [`MlpParams::register`].
    pub fn forward_tape(&self, tape: &mut Tape, input: Var, params: &[Var]) -> Result<Var, DiffError> {
        self.check_input(tape.value(input))?;
        let mut h = input;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            let z = tape.matmul(h, params[2 * i])?;
            let z = tape.add_bias(z, params[2 * i + 1])?;
            h = if i == last { z } else { tape.elu(z)? };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_return_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MlpParams::new(3, &[4, 4], 2, 1.0, &mut rng);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        p.layers[2].bias = Tensor::row(&[0.25, -1.5]);
        let out = p.forward(&Tensor::from_rows(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.1])).unwrap();
        assert_eq!(out.data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn wrong_input_width_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = MlpParams::new(3, &[4, 4], 2, 1.0, &mut rng);
        assert!(p.forward(&Tensor::from_rows(1, 2, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn widths_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::new(5, &[7, 6], 2, 1.0, &mut rng);
        assert_eq!(p.widths(), vec![5, 7, 6, 2]);
        assert_eq!(p.num_scalars(), 5 * 7 + 7 + 7 * 6 + 6 + 6 * 2 + 2);
    }
}
