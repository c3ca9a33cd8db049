use std::borrow::Cow;

use super::matrix::{matmul_nt_into, matmul_tn_into};
use super::Matrix;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the forward output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

/// Logistic function, branch form so neither side overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Lower clamp for probabilities entering a logarithm.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + b` with `b` a 1 x cols row broadcast over the rows of `a`.
    AddRow(Var, Var),
    Mul(Var, Var),
    Activation(Var, Activation),
    SoftmaxRow(Var),
    RowMean(Var),
    Transpose(Var),
    Sum(Var),
    Bce(Var, f64),
}

#[derive(Clone, Debug)]
struct Node<'a> {
    value: Cow<'a, Matrix>,
    /// Allocated on the first backward sweep that reaches the node.
    grad: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run reverse-mode autodiff tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` is a single reverse sweep. Gradients
/// accumulate across `backward` calls until [`Graph::zero_grad`].
///
/// Leaves may borrow their values (`param_ref`, `constant_ref`).
#[derive(Clone, Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: Var) -> bool {
        self.nodes[a.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param_ref(&mut self, value: &'a Matrix) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Gradient-blocking leaf (inputs, masks).
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Cow<'_, Matrix> {
        let n = &self.nodes[v.0];
        match &n.grad {
            Some(g) => Cow::Borrowed(g),
            None => Cow::Owned(Matrix::zeros(n.value.rows(), n.value.cols())),
        }
    }

    /// Moves the gradient out, leaving the node at zero.
    pub fn take_grad(&mut self, v: Var) -> Matrix {
        let n = &mut self.nodes[v.0];
        n.grad
            .take()
            .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; `b` may also be a 1 x cols row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let rg = self.needs(a) || self.needs(b);
        if sa == sb {
            let mut value = self.value(a).clone();
            value.add_assign(self.value(b));
            Ok(self.push(value, Op::Add(a, b), rg))
        } else if sb.0 == 1 && sb.1 == sa.1 {
            let mut value = self.value(a).clone();
            let bias = self.value(b).data().to_vec();
            for r in 0..sa.0 {
                for (x, b) in value.row_mut(r).iter_mut().zip(&bias) {
                    *x += b;
                }
            }
            Ok(self.push(value, Op::AddRow(a, b), rg))
        } else {
            Err(Error::Dimension {
                op: "add",
                left: sa,
                right: sb,
            })
        }
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op: "mul",
                left: sa,
                right: sb,
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::new(sa.0, sa.1, data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.needs(x);
        self.push(value, Op::Activation(x, kind), rg)
    }

    /// Softmax over a 1 x N row, computed with max subtraction.
    pub fn softmax_row(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rows() != 1 {
            return Err(Error::argument(format!(
                "softmax expects a 1xN row, got {:?}",
                v.shape()
            )));
        }
        if v.cols() == 0 {
            return Err(Error::argument("softmax of an empty row"));
        }
        let value = Matrix::row_vector(softmax(v.data()));
        let rg = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRow(x), rg))
    }

    /// N x D -> N x 1 per-row mean.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.cols() == 0 {
            return Err(Error::argument("row mean over zero columns"));
        }
        let d = v.cols() as f64;
        let means = v.iter_rows().map(|r| r.iter().sum::<f64>() / d).collect();
        let value = Matrix::column_vector(means);
        let rg = self.needs(x);
        Ok(self.push(value, Op::RowMean(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.needs(x);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::scalar(self.value(x).sum());
        let rg = self.needs(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Binary cross-entropy of a 1x1 probability node against `label`.
    ///
    /// The probability is clamped to `[1e-12, 1 - 1e-12]` before the
    /// logarithm; the gradient is evaluated at the clamped value.
    pub fn bce(&mut self, p: Var, label: f64) -> Result<Var> {
        let v = self.value(p);
        if v.shape() != (1, 1) {
            return Err(Error::argument(format!(
                "bce expects a 1x1 probability, got {:?}",
                v.shape()
            )));
        }
        let value = Matrix::scalar(bce_value(v.data()[0], label));
        let rg = self.needs(p);
        Ok(self.push(value, Op::Bce(p, label), rg))
    }

    /// Reverse sweep from a scalar root; adds d(root)/d(node) into every
    /// gradient-carrying node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape();
        if shape != (1, 1) {
            return Err(Error::argument(format!(
                "backward needs a 1x1 root, got {shape:?}"
            )));
        }
        // Adjoints for this sweep only, so repeated sweeps add up linearly.
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let node = &mut self.nodes[i];
            let g = match (&mut node.grad, &op) {
                (Some(acc), _) => {
                    acc.add_assign(&g);
                    g
                }
                (slot, Op::Leaf) => {
                    *slot = Some(g);
                    continue;
                }
                (slot, _) => {
                    *slot = Some(g.clone());
                    g
                }
            };
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let mut ga = Matrix::zeros(self.value(a).rows(), self.value(a).cols());
                        matmul_nt_into(&g, self.value(b), &mut ga);
                        accumulate(&mut adj, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = Matrix::zeros(self.value(b).rows(), self.value(b).cols());
                        matmul_tn_into(self.value(a), &g, &mut gb);
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        accumulate(&mut adj, a, g.clone());
                    }
                    if self.needs(b) {
                        accumulate(&mut adj, b, g);
                    }
                }
                Op::AddRow(a, b) => {
                    if self.needs(b) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for row in g.iter_rows() {
                            for (s, x) in gb.data_mut().iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                        accumulate(&mut adj, b, gb);
                    }
                    if self.needs(a) {
                        accumulate(&mut adj, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let ga = hadamard(&g, self.value(b));
                        accumulate(&mut adj, a, ga);
                    }
                    if self.needs(b) {
                        let gb = hadamard(&g, self.value(a));
                        accumulate(&mut adj, b, gb);
                    }
                }
                Op::Activation(x, kind) => {
                    let y = &self.nodes[i].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, &yv)| gv * kind.derivative_from_output(yv))
                        .collect();
                    let gx = Matrix::new(y.rows(), y.cols(), data)?;
                    accumulate(&mut adj, x, gx);
                }
                Op::SoftmaxRow(x) => {
                    let y = self.nodes[i].value.data();
                    let dot: f64 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                    let data = g
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| yv * (gv - dot))
                        .collect();
                    accumulate(&mut adj, x, Matrix::row_vector(data));
                }
                Op::RowMean(x) => {
                    let (rows, cols) = self.value(x).shape();
                    let inv = 1.0 / cols as f64;
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let v = g.data()[r] * inv;
                        gx.row_mut(r).fill(v);
                    }
                    accumulate(&mut adj, x, gx);
                }
                Op::Transpose(x) => accumulate(&mut adj, x, g.transpose()),
                Op::Sum(x) => {
                    let (rows, cols) = self.value(x).shape();
                    accumulate(&mut adj, x, Matrix::filled(rows, cols, g.data()[0]));
                }
                Op::Bce(p, label) => {
                    let pc = self.value(p).data()[0].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    let d = (pc - label) / (pc * (1.0 - pc));
                    accumulate(&mut adj, p, Matrix::scalar(g.data()[0] * d));
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut adj[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows(), a.cols(), data).expect("equal shapes")
}

/// Numerically stable softmax of a non-empty slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-[y ln p + (1-y) ln(1-p)]` with `p` clamped away from 0 and 1.
pub fn bce_value(p: f64, label: f64) -> f64 {
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln())
}
