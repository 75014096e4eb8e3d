use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fused differentiable kernel living outside the tape's built-in op set.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Exp(Var),
    ClampMin(Var, f64),
    Softmax(Var, f64),
    Dropout(Var, Vec<f64>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    Reshape(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

/// Define-by-run record of differentiable operations.
///
/// Gradients accumulate on leaves: calling [`Tape::backward`] twice without
/// [`Tape::zero_grad`] adds the two gradients together.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::shape(op, a.shape(), b.shape())),
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, c: usize) -> usize {
    let rr = if t.rows() == 1 { 0 } else { r };
    let cc = if t.cols() == 1 { 0 } else { c };
    rr * t.cols() + cc
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(grad: &Tensor, rows: usize, cols: usize) -> Tensor {
    if grad.rows() == rows && grad.cols() == cols {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..grad.rows() {
        for c in 0..grad.cols() {
            let i = bidx(&out, r, c);
            out.data_mut()[i] += grad.get(r, c);
        }
    }
    out
}

fn zip_broadcast(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (rows, cols) = broadcast(op, a, b)?;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(f(a.data()[bidx(a, r, c)], b.data()[bidx(b, r, c)]));
        }
    }
    Tensor::new(rows, cols, data)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; its gradient is available after `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Records a value computed by a [`CustomOp`].
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = zip_broadcast(name, self.value(a), self.value(b), f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `max(x, eps)`; gradient passes only where `x >= eps`.
    pub fn clamp_min(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, |x| x.max(eps), Op::ClampMin(a, eps))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(a);
        let cols = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, temperature);
        }
        let out = Tensor::new(x.rows(), cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, temperature), rg))
    }

    /// Inverted dropout. Identity when `train` is false.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        keep_prob: f64,
        train: bool,
        rng: &mut R,
    ) -> Var {
        if !train || keep_prob >= 1.0 {
            return a;
        }
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random::<f64>() < keep_prob {
                    1.0 / keep_prob
                } else {
                    0.0
                }
            })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Dropout(a, mask), rg)
    }

    /// `[n, m] -> [n, 1]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows()).map(|r| x.row_slice(r).iter().sum()).collect();
        let out = Tensor::column(data);
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// `[n, m] -> [1, m]`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut data = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (d, v) in data.iter_mut().zip(x.row_slice(r)) {
                *d += v;
            }
        }
        let out = Tensor::row(data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[n, m] -> [n, 1]`
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a).cols() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    /// `[n, m] -> [1, m]`
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshaped(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Runs reverse accumulation from a scalar `loss`, adding into the
    /// gradients of every leaf that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(
            self.value(loss).rows(),
            self.value(loss).cols(),
            1.0,
        ));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let contributions = self.local_backward(id, &g);
            if matches!(self.nodes[id].op, Op::Leaf) {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let elementwise = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<(Var, Tensor)> {
            let x = val(a);
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            vec![(a, Tensor::new(x.rows(), x.cols(), data).expect("shape"))]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => {
                let (ra, ca) = (val(*a).rows(), val(*a).cols());
                let (rb, cb) = (val(*b).rows(), val(*b).cols());
                vec![(*a, reduce_to(g, ra, ca)), (*b, reduce_to(g, rb, cb))]
            }
            Op::Sub(a, b) => {
                let (ra, ca) = (val(*a).rows(), val(*a).cols());
                let (rb, cb) = (val(*b).rows(), val(*b).cols());
                let neg = g.map(|v| -v);
                vec![(*a, reduce_to(g, ra, ca)), (*b, reduce_to(&neg, rb, cb))]
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip_broadcast("mul", g, y, |gi, yi| gi * yi).expect("shape");
                let gb = zip_broadcast("mul", g, x, |gi, xi| gi * xi).expect("shape");
                vec![
                    (*a, reduce_to(&ga, x.rows(), x.cols())),
                    (*b, reduce_to(&gb, y.rows(), y.cols())),
                ]
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = zip_broadcast("div", g, y, |gi, yi| gi / yi).expect("shape");
                // d(x/y)/dy = -out / y
                let gy_full = zip_broadcast("div", g, out, |gi, oi| gi * oi).expect("shape");
                let gb = zip_broadcast("div", &gy_full, y, |v, yi| -v / yi).expect("shape");
                vec![
                    (*a, reduce_to(&ga, x.rows(), x.cols())),
                    (*b, reduce_to(&gb, y.rows(), y.cols())),
                ]
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, g.matmul(&y.transpose()).expect("shape")));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, x.transpose().matmul(g).expect("shape")));
                }
                out
            }
            Op::Scale(a, k) => vec![(*a, g.map(|v| v * k))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Relu(a) => elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 }),
            Op::Tanh(a) => elementwise(*a, &|_, y, gi| gi * (1.0 - y * y)),
            Op::Sigmoid(a) => elementwise(*a, &|_, y, gi| gi * y * (1.0 - y)),
            Op::Ln(a) => elementwise(*a, &|x, _, gi| gi / x),
            Op::Exp(a) => elementwise(*a, &|_, y, gi| gi * y),
            Op::ClampMin(a, eps) => {
                let eps = *eps;
                elementwise(*a, &move |x, _, gi| if x >= eps { gi } else { 0.0 })
            }
            Op::Softmax(a, t) => {
                let cols = out.cols();
                let mut data = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        data[r * cols + c] = y[c] * (gr[c] - dot) / t;
                    }
                }
                vec![(*a, Tensor::new(out.rows(), cols, data).expect("shape"))]
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(gi, m)| gi * m).collect();
                vec![(*a, Tensor::new(g.rows(), g.cols(), data).expect("shape"))]
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for r in 0..x.rows() {
                    let gv = g.data()[r];
                    t.data_mut()[r * cols..(r + 1) * cols].fill(gv);
                }
                vec![(*a, t)]
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let mut t = Tensor::zeros(x.rows(), x.cols());
                let cols = x.cols();
                for r in 0..x.rows() {
                    t.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(g.data());
                }
                vec![(*a, t)]
            }
            Op::SumAll(a) => {
                let x = val(*a);
                vec![(*a, Tensor::filled(x.rows(), x.cols(), g.item()))]
            }
            Op::Reshape(a) => {
                let x = val(*a);
                vec![(*a, g.reshaped(x.rows(), x.cols()).expect("shape"))]
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let gs = op.backward(&ins, out, g);
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64], temperature: f64) {
    let max = row
        .iter()
        .map(|v| v / temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v / temperature - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let y = t.softmax(x, 1.0).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![-1.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_of_clamped_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0));
        let c = t.clamp_min(x, 1e-12);
        let y = t.ln(c);
        // ln(1e-12) = -12 ln 10
        assert!((t.value(y).item() - (-27.631_021_115_928_547)).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(vec![1.0, 2.0]));
        let sq = t.square(w).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(vec![1.0, 2.0]));
        let sq = t.square(w).unwrap();
        let l = t.sum(sq);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(w).unwrap().data(), &[4.0, 8.0]);
        t.zero_grad();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn cross_entropy_at_uniform_logits_gives_p_minus_target() {
        let mut t = Tape::new();
        let z = t.param(Tensor::row(vec![0.0, 0.0, 0.0]));
        let p = t.softmax(z, 1.0).unwrap();
        let lp = t.ln(p);
        let target = t.constant(Tensor::row(vec![0.0, 1.0, 0.0]));
        let m = t.mul(lp, target).unwrap();
        let s = t.sum(m);
        let l = t.neg(s);
        t.backward(l).unwrap();
        let g = t.grad(z).unwrap().data();
        let third = 1.0 / 3.0;
        for (gi, want) in g.iter().zip([third, third - 1.0, third]) {
            assert!((gi - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let w = t.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(t.backward(w), Err(Error::NonScalarLoss(_))));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0)), Err(Error::EmptyTape)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(4, 2));
        let err = t.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2, 3]") && err.contains("[4, 2]"));
        let err = t.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul"));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(3, 2));
        let b = t.param(Tensor::row(vec![1.0, 1.0]));
        let y = t.add(x, b).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::filled(1, 1000, 1.0));
        assert_eq!(t.dropout(x, 0.8, false, &mut rng), x);
        let y = t.dropout(x, 0.8, true, &mut rng);
        let vals = t.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let mean: f64 = vals.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_entropy_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for width in 1..8 {
            let data: Vec<f64> = (0..5 * width).map(|_| rng.random_range(-20.0..20.0)).collect();
            let mut t = Tape::new();
            let x = t.constant(Tensor::new(5, width, data).unwrap());
            let y = t.softmax(x, 0.7).unwrap();
            for r in 0..5 {
                let row = t.value(y).row_slice(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let h: f64 = -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
                assert!(h >= -1e-12 && h <= (width as f64).ln() + 1e-12);
            }
        }
    }
}
