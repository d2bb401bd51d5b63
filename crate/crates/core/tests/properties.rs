//! Property tests over randomized inputs: tape gradients against central
//! differences, tape determinism and linearity, ZOH lookups, checkpoint
//! round trips and CVAE loss bounds.

use proptest::prelude::*;

use rmbil::datastore::{Checkpoint, ModelKind};
use rmbil::diffcore::{MlpParams, Tape, Tensor, Var};
use rmbil::models::{cvae_loss, CvaeModel, Normalizer};
use rmbil::odeint::ZohInput;
use rmbil::rng::{normal_vec, seeded, Rng};

const FD_STEP: f64 = 1e-6;
const FD_REL: f64 = 1e-4;

type Build = fn(&mut Tape, &[Var]) -> Var;

fn randn(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_rows(rows, cols, normal_vec(rng, rows * cols))
}

/// `L = Σ w ⊙ f(inputs)` and its gradient with respect to every input.
fn loss_and_grad(inputs: &[Tensor], w: &Tensor, build: Build) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let l = tape.sum(prod).unwrap();
    let g = tape.backward(l, &Tensor::scalar(1.0)).unwrap();
    let grad = vars.iter().flat_map(|v| g.wrt(*v).data().to_vec()).collect();
    (tape.value(l).item(), grad)
}

fn output_shape(inputs: &[Tensor], build: Build) -> (usize, usize) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    (tape.value(out).rows(), tape.value(out).cols())
}

fn fd_rel_error(seed: u64, shapes: &[(usize, usize)], build: Build) -> f64 {
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|&(r, c)| randn(&mut rng, r, c)).collect();
    let (r, c) = output_shape(&inputs, build);
    let w = randn(&mut rng, r, c);
    let (_, analytic) = loss_and_grad(&inputs, &w, build);
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..inputs.len() {
        for k in 0..inputs[i].len() {
            let mut probe = inputs.clone();
            probe[i].data_mut()[k] += FD_STEP;
            let up = loss_and_grad(&probe, &w, build).0;
            probe[i].data_mut()[k] -= 2.0 * FD_STEP;
            let down = loss_and_grad(&probe, &w, build).0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

fn primitives() -> Vec<(&'static str, Vec<(usize, usize)>, Build)> {
    vec![
        ("matmul", vec![(3, 4), (4, 2)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        ("add_bias", vec![(3, 4), (1, 4)], |t, v| t.add_bias(v[0], v[1]).unwrap()),
        ("add", vec![(3, 4), (3, 4)], |t, v| t.add(v[0], v[1]).unwrap()),
        ("sub", vec![(3, 4), (3, 4)], |t, v| t.sub(v[0], v[1]).unwrap()),
        ("mul", vec![(3, 4), (3, 4)], |t, v| t.mul(v[0], v[1]).unwrap()),
        ("scale", vec![(3, 4)], |t, v| t.scale(v[0], -1.7).unwrap()),
        ("scale_cols", vec![(3, 3)], |t, v| t.scale_cols(v[0], &[0.5, -2.0, 3.0]).unwrap()),
        ("shift_cols", vec![(3, 3)], |t, v| {
            let s = t.shift_cols(v[0], &[0.5, -2.0, 3.0]).unwrap();
            t.square(s).unwrap()
        }),
        ("elu", vec![(3, 4)], |t, v| t.elu(v[0]).unwrap()),
        ("exp", vec![(3, 4)], |t, v| t.exp(v[0]).unwrap()),
        ("tanh", vec![(3, 4)], |t, v| t.tanh(v[0]).unwrap()),
        ("square", vec![(3, 4)], |t, v| t.square(v[0]).unwrap()),
        ("sum", vec![(3, 4)], |t, v| {
            let s = t.sum(v[0]).unwrap();
            t.square(s).unwrap()
        }),
        ("slice_cols", vec![(3, 5)], |t, v| t.slice_cols(v[0], 1, 3).unwrap()),
        ("concat_cols", vec![(3, 2), (3, 3)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        ("affine_apply", vec![(3, 2), (3, 6), (3, 3)], |t, v| t.affine_apply(v[0], v[1], v[2]).unwrap()),
    ]
}

/// Two ELU hidden layers; inputs are `x` followed by the six parameters.
fn two_layer_mlp(t: &mut Tape, v: &[Var]) -> Var {
    let net = MlpParams::new(3, &[5, 4], 2, 1.0, &mut seeded(0));
    net.forward_tape(t, v[0], &v[1..]).unwrap()
}

fn mlp_shapes() -> Vec<(usize, usize)> {
    vec![(4, 3), (3, 5), (1, 5), (5, 4), (1, 4), (4, 2), (1, 2)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn primitive_gradients_match_central_differences(seed in any::<u64>()) {
        for (name, shapes, build) in primitives() {
            let e = fd_rel_error(seed, &shapes, build);
            prop_assert!(e < FD_REL, "{name}: relative error {e:e}");
        }
    }

    #[test]
    fn mlp_gradients_match_central_differences(seed in any::<u64>()) {
        let e = fd_rel_error(seed, &mlp_shapes(), two_layer_mlp);
        prop_assert!(e < FD_REL, "relative error {e:e}");
    }

    #[test]
    fn tape_is_deterministic(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let inputs: Vec<Tensor> = mlp_shapes().iter().map(|&(r, c)| randn(&mut rng, r, c)).collect();
        let w = randn(&mut rng, 4, 2);
        let (la, ga) = loss_and_grad(&inputs, &w, two_layer_mlp);
        let (lb, gb) = loss_and_grad(&inputs, &w, two_layer_mlp);
        prop_assert_eq!(la.to_bits(), lb.to_bits());
        prop_assert!(ga.iter().zip(&gb).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn backward_is_linear_in_the_loss(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let (a, b) = (randn(&mut rng, 3, 4), randn(&mut rng, 4, 2));
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let m = tape.matmul(va, vb).unwrap();
        let e = tape.tanh(m).unwrap();
        let l1 = tape.sum(e).unwrap();
        let s = tape.square(m).unwrap();
        let l2 = tape.sum(s).unwrap();
        let l12 = tape.add(l1, l2).unwrap();
        let one = Tensor::scalar(1.0);
        let (g1, g2, g12) = (
            tape.backward(l1, &one).unwrap(),
            tape.backward(l2, &one).unwrap(),
            tape.backward(l12, &one).unwrap(),
        );
        for v in [va, vb] {
            let (x, y, z) = (g1.wrt(v), g2.wrt(v), g12.wrt(v));
            for ((x, y), z) in x.data().iter().zip(y.data()).zip(z.data()) {
                prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn zoh_lookup_is_exact(
        samples in prop::collection::vec(-1e3f64..1e3, 2..40),
        t0 in -5.0f64..5.0,
        dt in 0.001f64..1.0,
        frac in 0.0f64..1.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let z = ZohInput::new(t0, dt, 1, samples.clone()).unwrap();
        let i = pick.index(samples.len());
        let t = (z.time(i) + frac * dt).min(z.time(i + 1) - 1e-9 * dt);
        let t = if t < z.time(i) { z.time(i) } else { t };
        prop_assert_eq!(z.lookup(t).unwrap()[0].to_bits(), samples[i].to_bits());
        prop_assert!(z.lookup(t0 - dt).is_err());
        prop_assert!(z.lookup(z.time(samples.len())).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_truncation(
        values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64),
        cut in any::<prop::sample::Index>(),
    ) {
        let k = values.len();
        let ckpt = Checkpoint::new(
            ModelKind::Ctrl,
            "mlp",
            vec![("w".into(), Tensor::from_rows(1, k, values.clone())), ("b".into(), Tensor::scalar(values[0]))],
            "none",
            Some(values[k - 1]),
            7,
            serde_json::json!({ "k": k }),
            serde_json::Value::Null,
        );
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        let short = cut.index(bytes.len());
        prop_assert!(Checkpoint::from_bytes(&bytes[..short]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        prop_assert!(Checkpoint::from_bytes(&long).is_err());
    }

    #[test]
    fn cvae_loss_bounds(seed in any::<u64>(), scale in 0.1f64..10.0) {
        let cv = CvaeModel::new(Normalizer::identity(2, 1, 0.05), &[8], 3, seed).unwrap();
        let mut rng = seeded(seed ^ 1);
        let prev = randn(&mut rng, 6, 2).map(|v| v * scale);
        let curr = randn(&mut rng, 6, 2).map(|v| v * scale);
        let l = cvae_loss(&cv, &curr, &prev, &mut rng).unwrap();
        prop_assert!(l.kl >= 0.0, "kl {}", l.kl);
        prop_assert!(l.total >= l.reconstruction, "{} < {}", l.total, l.reconstruction);
    }
}
