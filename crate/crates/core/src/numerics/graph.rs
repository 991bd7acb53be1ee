//! Reverse-mode automatic differentiation over a fixed primitive set.
//!
//! A [`Graph`] is a define-by-run tape: every op appends a node whose inputs
//! have strictly smaller indices, so reverse iteration is a valid topological
//! order for backpropagation. Values are computed eagerly; gradients are
//! accumulated by [`Graph::backward`].

use super::tensor::{layer_norm, sigmoid_scalar, softmax_rows, Tensor, EPS_LN};
use super::NumericsError;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a `[1 x n]` row vector to every row.
    AddRow(NodeId, NodeId),
    /// Broadcast-multiply by a `[1 x n]` row vector.
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    Sum(NodeId),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Register a tensor that participates in the forward pass only; its
    /// gradient is still computed but conventionally ignored.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent `backward` target w.r.t. this node.
    pub fn grad(&self, id: NodeId) -> Tensor {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        check_row_broadcast(av, rv, "add_row")?;
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x += rv.data()[i % c];
        }
        let v = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        check_row_broadcast(av, rv, "mul_row")?;
        let c = av.cols();
        let mut data = av.data().to_vec();
        for (i, x) in data.iter_mut().enumerate() {
            *x *= rv.data()[i % c];
        }
        let v = Tensor::new(av.shape().to_vec(), data).expect("shape preserved");
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let v = layer_norm(self.value(a));
        self.push(v, Op::LayerNorm(a))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(super::tensor::silu_scalar);
        self.push(v, Op::Silu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid_scalar);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(super::tensor::softplus_scalar);
        self.push(v, Op::Softplus(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId, NumericsError> {
        let v = self.value(a).slice_rows(lo, hi)?;
        Ok(self.push(v, Op::SliceRows(a, lo, hi)))
    }

    /// Sum of all elements, as a `[1]` scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum of squared elements, as a `[1]` scalar node.
    pub fn sum_sq(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let sq = self.mul(a, a)?;
        Ok(self.sum(sq))
    }

    /// Mean squared difference between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let n = self.value(a).len() as f64;
        let d = self.sub(a, b)?;
        let ss = self.sum_sq(d)?;
        Ok(self.scale(ss, 1.0 / n))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                *g = g.add(&delta).expect("gradient shapes agree");
            }
            slot @ None => {
                *slot = Some(delta);
            }
        }
    }

    /// Backpropagate from a scalar node, filling gradients for every node
    /// that participated in its computation.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward expects a scalar loss node"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.clone() else {
                continue;
            };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let bt = self.value(b).transpose().expect("2-D");
                    let at = self.value(a).transpose().expect("2-D");
                    let da = grad.matmul(&bt).expect("shape");
                    let db = at.matmul(&grad).expect("shape");
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let da = grad.mul(self.value(b)).expect("shape");
                    let db = grad.mul(self.value(a)).expect("shape");
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRow(a, r) => {
                    let c = self.value(r).len();
                    let mut dr = vec![0.0; c];
                    for (j, g) in grad.data().iter().enumerate() {
                        dr[j % c] += g;
                    }
                    self.accumulate(a, grad);
                    self.accumulate(r, Tensor::row(dr));
                }
                Op::MulRow(a, r) => {
                    let c = self.value(r).len();
                    let rv = self.value(r).clone();
                    let av = self.value(a).clone();
                    let mut da = grad.data().to_vec();
                    for (j, x) in da.iter_mut().enumerate() {
                        *x *= rv.data()[j % c];
                    }
                    let mut dr = vec![0.0; c];
                    for (j, g) in grad.data().iter().enumerate() {
                        dr[j % c] += g * av.data()[j];
                    }
                    self.accumulate(a, Tensor::new(av.shape().to_vec(), da).expect("shape"));
                    self.accumulate(r, Tensor::row(dr));
                }
                Op::Scale(a, c) => self.accumulate(a, grad.scale(c)),
                Op::AddScalar(a) => self.accumulate(a, grad),
                Op::Transpose(a) => {
                    self.accumulate(a, grad.transpose().expect("2-D"));
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[i].value.clone();
                    let c = y.cols().max(1);
                    let rows = y.len() / c;
                    let mut dx = vec![0.0; y.len()];
                    for r in 0..rows {
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &grad.data()[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dx[r * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(a, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
                }
                Op::LayerNorm(a) => {
                    let x = self.value(a).clone();
                    let y = self.nodes[i].value.clone();
                    let c = x.cols().max(1);
                    let rows = x.len() / c;
                    let n = c as f64;
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..rows {
                        let xr = &x.data()[r * c..(r + 1) * c];
                        let yr = &y.data()[r * c..(r + 1) * c];
                        let gr = &grad.data()[r * c..(r + 1) * c];
                        let mean = xr.iter().sum::<f64>() / n;
                        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let denom = var.max(EPS_LN).sqrt();
                        let g_mean = gr.iter().sum::<f64>() / n;
                        if var > EPS_LN {
                            let gy_mean =
                                gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<f64>() / n;
                            for j in 0..c {
                                dx[r * c + j] = (gr[j] - g_mean - yr[j] * gy_mean) / denom;
                            }
                        } else {
                            // Variance floored: the denominator is constant.
                            for j in 0..c {
                                dx[r * c + j] = (gr[j] - g_mean) / denom;
                            }
                        }
                    }
                    self.accumulate(a, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
                }
                Op::Silu(a) => {
                    let x = self.value(a).clone();
                    let dx: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&v, &g)| {
                            let s = sigmoid_scalar(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(a, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.clone();
                    let dx: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&s, &g)| g * s * (1.0 - s))
                        .collect();
                    self.accumulate(a, Tensor::new(y.shape().to_vec(), dx).expect("shape"));
                }
                Op::Softplus(a) => {
                    let x = self.value(a).clone();
                    let dx: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(grad.data())
                        .map(|(&v, &g)| g * sigmoid_scalar(v))
                        .collect();
                    self.accumulate(a, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
                }
                Op::ConcatRows(parts) => {
                    let mut lo = 0;
                    for p in parts {
                        let rows = self.value(p).rows();
                        let slice = grad.slice_rows(lo, lo + rows).expect("in range");
                        self.accumulate(p, slice);
                        lo += rows;
                    }
                }
                Op::SliceRows(a, lo, _hi) => {
                    let full_shape = self.value(a).shape().to_vec();
                    let c: usize = full_shape[1..].iter().product::<usize>().max(1);
                    let mut dx = Tensor::zeros(full_shape.clone());
                    let dst = dx.data_mut();
                    for (j, g) in grad.data().iter().enumerate() {
                        dst[lo * c + j] += g;
                    }
                    self.accumulate(a, dx);
                }
                Op::Sum(a) => {
                    let g = grad.data()[0];
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(a, Tensor::filled(shape, g));
                }
            }
        }
    }
}

fn check_row_broadcast(a: &Tensor, row: &Tensor, op: &'static str) -> Result<(), NumericsError> {
    if row.shape().len() != 2 || row.shape()[0] != 1 || row.shape()[1] != a.cols() {
        return Err(NumericsError::Shape {
            op,
            detail: format!(
                "expected [1 x {}] row vector, got {:?}",
                a.cols(),
                row.shape()
            ),
        });
    }
    Ok(())
}
