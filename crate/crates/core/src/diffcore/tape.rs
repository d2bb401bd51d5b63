//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its output value and the ids of
//! its inputs, so node order is a topological order by construction. The
//! reverse pass walks the nodes once, last to first.

use super::tensor::{gemm, Tensor};
use super::DiffError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleCols(Var, Vec<f64>),
    ShiftCols(Var),
    Elu(Var),
    Exp(Var),
    Tanh(Var),
    Square(Var),
    Sum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// `out[b,i] = drift[b,i] + sum_j gmat[b, i*m + j] * u[b,j]`
    AffineApply { drift: Var, gmat: Var, u: Var },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for a single forward evaluation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when the output never touched it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(&[r, c])
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(&[r, c])
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> DiffError {
    DiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A differentiable input (parameter or state).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if k != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k as isize, 1), bv.data(), (n as isize, 1), &mut out, false);
        self.push("matmul", Tensor::from_rows(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[1, c]` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c {
            return Err(mismatch("add_bias", av, bv));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_rows(av.rows(), av.cols(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Multiplies column `j` by the constant `factors[j]`.
    pub fn scale_cols(&mut self, a: Var, factors: &[f64]) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        if factors.len() != c {
            return Err(mismatch("scale_cols", av, &Tensor::row(factors)));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, f) in row.iter_mut().zip(factors) {
                *o *= f;
            }
        }
        self.push("scale_cols", out, Op::ScaleCols(a, factors.to_vec()), &[a])
    }

    /// Adds the constant `offsets[j]` to column `j`.
    pub fn shift_cols(&mut self, a: Var, offsets: &[f64]) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        if offsets.len() != c {
            return Err(mismatch("shift_cols", av, &Tensor::row(offsets)));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, f) in row.iter_mut().zip(offsets) {
                *o += f;
            }
        }
        self.push("shift_cols", out, Op::ShiftCols(a), &[a])
    }

    pub fn elu(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(elu);
        self.push("elu", out, Op::Elu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|v| v * v);
        self.push("square", out, Op::Square(a), &[a])
    }

    /// Sum of all elements, as a `[1, 1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        if start + len > c {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                lhs: av.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for row in av.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_rows(av.rows(), len, data);
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), pv));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let out = Tensor::from_rows(rows, total, data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Batched `drift + G·u` with `G` stored row-major as `n*m` columns.
    pub fn affine_apply(&mut self, drift: Var, gmat: Var, u: Var) -> Result<Var, DiffError> {
        let (dv, gv, uv) = (self.value(drift), self.value(gmat), self.value(u));
        let (b, n, m) = (dv.rows(), dv.cols(), uv.cols());
        if gv.rows() != b || uv.rows() != b || gv.cols() != n * m {
            return Err(mismatch("affine_apply", gv, uv));
        }
        let mut out = dv.clone();
        for r in 0..b {
            let g = gv.row_slice(r);
            let uu = uv.row_slice(r);
            let o = &mut out.data_mut()[r * n..(r + 1) * n];
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += g[i * m + j] * uu[j];
                }
                o[i] += acc;
            }
        }
        self.push("affine_apply", out, Op::AffineApply { drift, gmat, u }, &[drift, gmat, u])
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the output).
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients, DiffError> {
        let out_val = self.value(output);
        if !out_val.same_shape(seed) {
            return Err(DiffError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n as isize, 1), bv.data(), (1, n as isize), &mut da, false);
                    self.accumulate(grads, *a, Tensor::from_rows(m, k, da));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k as isize), g.data(), (n as isize, 1), &mut db, false);
                    self.accumulate(grads, *b, Tensor::from_rows(k, n, db));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*bias) {
                    let c = g.cols();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_rows(g.rows(), g.cols(), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_rows(g.rows(), g.cols(), d));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::ScaleCols(a, f) => {
                let c = g.cols();
                let mut d = g.clone();
                for row in d.data_mut().chunks_mut(c) {
                    for (o, s) in row.iter_mut().zip(f) {
                        *o *= s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::ShiftCols(a) => self.accumulate(grads, *a, g.clone()),
            Op::Elu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, x)| gv * elu_grad(*x))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_rows(g.rows(), g.cols(), d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, *a, Tensor::from_rows(g.rows(), g.cols(), d));
            }
            Op::Tanh(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, y)| gv * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_rows(g.rows(), g.cols(), d));
            }
            Op::Square(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(gv, x)| 2.0 * gv * x).collect();
                self.accumulate(grads, *a, Tensor::from_rows(g.rows(), g.cols(), d));
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                let s = g.item();
                self.accumulate(grads, *a, Tensor::filled(&[av.rows(), av.cols()], s));
            }
            Op::SliceCols(a, start) => {
                if !self.wants(*a) {
                    return;
                }
                let av = self.value(*a);
                let (c, len) = (av.cols(), g.cols());
                let mut d = Tensor::zeros(&[av.rows(), c]);
                for (r, row) in g.data().chunks(len).enumerate() {
                    d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(row);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut data = Vec::with_capacity(g.rows() * pc);
                        for row in g.data().chunks(total) {
                            data.extend_from_slice(&row[offset..offset + pc]);
                        }
                        self.accumulate(grads, *p, Tensor::from_rows(g.rows(), pc, data));
                    }
                    offset += pc;
                }
            }
            Op::AffineApply { drift, gmat, u } => {
                self.accumulate(grads, *drift, g.clone());
                let (gv, uv) = (self.value(*gmat), self.value(*u));
                let (b, n, m) = (g.rows(), g.cols(), uv.cols());
                if self.wants(*gmat) {
                    let mut dg = Tensor::zeros(&[b, n * m]);
                    for r in 0..b {
                        let gr = g.row_slice(r);
                        let ur = uv.row_slice(r);
                        let o = &mut dg.data_mut()[r * n * m..(r + 1) * n * m];
                        for i in 0..n {
                            for j in 0..m {
                                o[i * m + j] = gr[i] * ur[j];
                            }
                        }
                    }
                    self.accumulate(grads, *gmat, dg);
                }
                if self.wants(*u) {
                    let mut du = Tensor::zeros(&[b, m]);
                    for r in 0..b {
                        let gr = g.row_slice(r);
                        let gm = gv.row_slice(r);
                        let o = &mut du.data_mut()[r * m..(r + 1) * m];
                        for i in 0..n {
                            for j in 0..m {
                                o[j] += gr[i] * gm[i * m + j];
                            }
                        }
                    }
                    self.accumulate(grads, *u, du);
                }
            }
        }
    }
}

/// Exponential linear unit with α = 1.
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}
