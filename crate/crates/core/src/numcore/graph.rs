//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Nodes are appended to a [`Graph`] in evaluation order, so the node index
//! is already a topological order and `backward` is a single reverse sweep.
//! Leaves created with [`Graph::param`] accumulate gradients across
//! `backward` calls until [`Graph::zero_grad`] is called; every other node's
//! gradient is transient.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par::Exec;

/// `sqrt(2/pi)` used by the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Mse(NodeId, NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let th = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            is_param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf; its gradient is kept after `backward`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a parameter leaf, zeros if none has arrived yet.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_with(self.value(b), self.exec)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg, false))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg, false))
    }

    /// `x[B x n] + bias[n]` added to every row. This is the only broadcasting op.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.value(x).dims2("add_bias")?;
        let b = self.value(bias);
        if b.len() != cols || b.rank() != 1 {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for rows of width {cols}", b.shape()),
            ));
        }
        let bd = b.data();
        let mut out = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let v = Tensor::from_parts(vec![rows, cols], out);
        v.check_finite("add_bias")?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(v, Op::AddBias(x, bias), rg, false))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> Result<NodeId> {
        let v = self.value(a).scale(k)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Scale(a, k), rg, false))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map("gelu", gelu_scalar)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Gelu(a), rg, false))
    }

    /// Mean of squared differences, as a one-element tensor.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        if va.is_empty() {
            return Err(Error::Empty("mse"));
        }
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = Tensor::scalar(s / va.len() as f64);
        v.check_finite("mse")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mse(a, b), rg, false))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).sum());
        v.check_finite("sum")?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Sum(a), rg, false))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).is_empty() {
            return Err(Error::Empty("mean"));
        }
        let v = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Mean(a), rg, false))
    }

    /// `[B x n] ++ [B x m] -> [B x (n+m)]`
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.value(a).dims2("concat_cols")?;
        let (rb, cb) = self.value(b).dims2("concat_cols")?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{ra} rows vs {rb} rows"),
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let v = Tensor::from_parts(vec![ra, ca + cb], out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::ConcatCols(a, b), rg, false))
    }

    /// Reverse sweep from a scalar output. Parameter gradients accumulate.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {
                    let node = &mut self.nodes[i];
                    if node.is_param {
                        node.grad = Some(match node.grad.take() {
                            Some(acc) => acc.add(&g)?,
                            None => g,
                        });
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bt = self.value(b).transpose()?;
                        let ga = g.matmul_with(&bt, self.exec)?;
                        accumulate(&mut grads, a, ga)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.value(a).transpose()?;
                        let gb = at.matmul_with(&g, self.exec)?;
                        accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone())?;
                    accumulate(&mut grads, b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.scale(-1.0)?)?;
                    accumulate(&mut grads, a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(b))?;
                    let gb = g.mul(self.value(a))?;
                    accumulate(&mut grads, a, ga)?;
                    accumulate(&mut grads, b, gb)?;
                }
                Op::AddBias(x, bias) => {
                    let (rows, cols) = g.dims2("add_bias")?;
                    let mut gb = vec![0.0; cols];
                    for r in 0..rows {
                        for (acc, v) in gb.iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, bias, Tensor::from_parts(vec![cols], gb))?;
                    accumulate(&mut grads, x, g)?;
                }
                Op::Scale(a, k) => accumulate(&mut grads, a, g.scale(k)?)?,
                Op::Gelu(a) => {
                    let x = self.value(a).data();
                    let data = g
                        .data()
                        .iter()
                        .zip(x)
                        .map(|(gv, &xv)| gv * gelu_grad_scalar(xv))
                        .collect();
                    accumulate(&mut grads, a, Tensor::from_parts(g.shape().to_vec(), data))?;
                }
                Op::Mse(a, b) => {
                    let go = g.data()[0];
                    let (va, vb) = (self.value(a), self.value(b));
                    let k = 2.0 * go / va.len() as f64;
                    let diff: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| k * (x - y))
                        .collect();
                    let d = Tensor::from_parts(va.shape().to_vec(), diff);
                    accumulate(&mut grads, b, d.scale(-1.0)?)?;
                    accumulate(&mut grads, a, d)?;
                }
                Op::Sum(a) => {
                    let shape = self.value(a).shape().to_vec();
                    accumulate(&mut grads, a, Tensor::full(&shape, g.data()[0]))?;
                }
                Op::Mean(a) => {
                    let v = self.value(a);
                    let each = g.data()[0] / v.len() as f64;
                    let shape = v.shape().to_vec();
                    accumulate(&mut grads, a, Tensor::full(&shape, each))?;
                }
                Op::ConcatCols(a, b) => {
                    let (rows, ca) = self.value(a).dims2("concat_cols")?;
                    let cb = self.value(b).dims2("concat_cols")?.1;
                    let w = ca + cb;
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        let row = &g.data()[r * w..(r + 1) * w];
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads, a, Tensor::from_parts(vec![rows, ca], ga))?;
                    accumulate(&mut grads, b, Tensor::from_parts(vec![rows, cb], gb))?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    let slot = &mut grads[id.0];
    *slot = Some(match slot.take() {
        Some(acc) => acc.add(&g)?,
        None => g,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = g.mul(w, w).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).data(), &[6.0]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(3.0));
        let y = g.mul(w, w).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).data(), &[12.0]);
        g.zero_grad();
        assert_eq!(g.grad(w).data(), &[0.0]);
    }

    #[test]
    fn sum_of_matmul_gives_column_sums() {
        let mut g = Graph::new();
        let w = g.param(Tensor::matrix(2, 3, vec![0.5, -1., 2., 0., 1., 3.]).unwrap());
        let x = g.constant(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = g.matmul(w, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        // d/dW_ij sum(W X) = sum_k X_jk, the row sums of X, repeated per row of W
        assert_eq!(g.grad(w).data(), &[3., 7., 11., 3., 7., 11.]);
        assert_eq!(g.grad(x).data(), &[0.0; 6]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn gelu_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        for x in [8.0, 10.0, 30.0] {
            assert!((gelu_scalar(x) - x).abs() < 1e-6);
        }
        // 0.5 * (1 + tanh(0.7978845608028654 * 1.044715)), evaluated independently
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-15);
    }

    #[test]
    fn mse_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![1.0, 1.0]).unwrap());
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 1.0);
        let z = g.mse(a, a).unwrap();
        assert_eq!(g.value(z).item().unwrap(), 0.0);
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.mse(a, c).is_err());
    }

    #[test]
    fn bias_needs_matching_width() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[2]));
        assert!(g.add_bias(x, b).is_err());
    }
}
