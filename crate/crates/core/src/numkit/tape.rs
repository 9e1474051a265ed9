use crate::error::{Error, Result};

use super::{Matrix, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Relu(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp(NodeId, T, T),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    Sum(NodeId),
    Mse(NodeId, NodeId),
    GaussianKl {
        q_mean: NodeId,
        q_logvar: NodeId,
        p_mean: NodeId,
        p_logvar: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Append-only record of primitive operations for reverse-mode
/// differentiation.
///
/// Nodes are stored in creation order, which is already a topological order,
/// so [`Tape::backward`] is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward sweep, indexed by [`NodeId`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `id`; zeros if the node did not influence the loss.
    pub fn get(&self, id: NodeId) -> Matrix<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix<T> {
        match self.grads[id.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let v = self.value(x).add_row(self.value(bias))?;
        Ok(self.push(v, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(T::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).concat_cols(self.value(b))?;
        Ok(self.push(v, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Matrix::filled(1, 1, self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean over every element of `(a - b)²`, as a 1×1 node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(format!("mse: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = T::lit(va.len().max(1) as f64);
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        Ok(self.push(Matrix::filled(1, 1, s / n), Op::Mse(a, b)))
    }

    /// Batch-mean of the per-row diagonal Gaussian KL(q ‖ p), as a 1×1 node.
    /// Rows are samples, columns latent coordinates.
    pub fn gaussian_kl(
        &mut self,
        q_mean: NodeId,
        q_logvar: NodeId,
        p_mean: NodeId,
        p_logvar: NodeId,
    ) -> Result<NodeId> {
        let shape = self.value(q_mean).shape();
        for id in [q_logvar, p_mean, p_logvar] {
            if self.value(id).shape() != shape {
                return Err(Error::shape(format!(
                    "gaussian_kl: {:?} vs {:?}",
                    shape,
                    self.value(id).shape()
                )));
            }
        }
        let total = super::gaussian_kl(
            self.value(q_mean).data(),
            self.value(q_logvar).data(),
            self.value(p_mean).data(),
            self.value(p_logvar).data(),
        )?;
        let batch = T::lit(shape.0.max(1) as f64);
        Ok(self.push(
            Matrix::filled(1, 1, total / batch),
            Op::GaussianKl {
                q_mean,
                q_logvar,
                p_mean,
                p_logvar,
            },
        ))
    }

    /// Reverse sweep from the scalar `loss` node. The tape is cleared
    /// afterwards; node ids from this recording are invalid from then on.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} is {:?}",
                loss.0,
                self.value(loss).shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.shape()).collect();
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &nodes[idx];
            let val = |id: NodeId| &nodes[id.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(val(*b));
                    let gb = val(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, *bias, g.sum_rows());
                    accumulate(&mut grads, *x, g.clone());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-T::one()));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.zip_map(val(*b), |g, y| g * y));
                    accumulate(&mut grads, *b, g.zip_map(val(*a), |g, x| g * x));
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |g, y| g * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let ga = g.zip_map(val(*a), |g, x| two * x * g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_map(val(*a), |g, x| if x >= lo && x <= hi { g } else { T::zero() });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let ca = val(*a).cols();
                    let cb = val(*b).cols();
                    accumulate(&mut grads, *a, g.slice_cols(0, ca)?);
                    accumulate(&mut grads, *b, g.slice_cols(ca, cb)?);
                }
                Op::SliceCols(src, start) => {
                    let (rows, cols) = val(*src).shape();
                    let mut gs = Matrix::zeros(rows, cols);
                    for i in 0..rows {
                        for (j, &v) in g.row(i).iter().enumerate() {
                            gs.set(i, start + j, v);
                        }
                    }
                    accumulate(&mut grads, *src, gs);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    accumulate(&mut grads, *a, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::Mse(a, b) => {
                    let n = T::lit(val(*a).len().max(1) as f64);
                    let k = T::lit(2.0) * g.get(0, 0) / n;
                    let diff = val(*a).zip_map(val(*b), |x, y| k * (x - y));
                    accumulate(&mut grads, *b, diff.scale(-T::one()));
                    accumulate(&mut grads, *a, diff);
                }
                Op::GaussianKl {
                    q_mean,
                    q_logvar,
                    p_mean,
                    p_logvar,
                } => {
                    let (qm, ql, pm, pl) = (val(*q_mean), val(*q_logvar), val(*p_mean), val(*p_logvar));
                    let (rows, cols) = qm.shape();
                    let k = g.get(0, 0) / T::lit(rows.max(1) as f64);
                    let half = T::lit(0.5);
                    let mut g_qm = Matrix::zeros(rows, cols);
                    let mut g_ql = Matrix::zeros(rows, cols);
                    let mut g_pm = Matrix::zeros(rows, cols);
                    let mut g_pl = Matrix::zeros(rows, cols);
                    for i in 0..qm.len() {
                        let d = qm.data()[i] - pm.data()[i];
                        let inv_p = (-pl.data()[i]).exp();
                        let ratio = (ql.data()[i] - pl.data()[i]).exp();
                        g_qm.data_mut()[i] = k * d * inv_p;
                        g_pm.data_mut()[i] = -k * d * inv_p;
                        g_ql.data_mut()[i] = k * half * (ratio - T::one());
                        g_pl.data_mut()[i] = k * half * (T::one() - ratio - d * d * inv_p);
                    }
                    accumulate(&mut grads, *q_mean, g_qm);
                    accumulate(&mut grads, *q_logvar, g_ql);
                    accumulate(&mut grads, *p_mean, g_pm);
                    accumulate(&mut grads, *p_logvar, g_pl);
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
