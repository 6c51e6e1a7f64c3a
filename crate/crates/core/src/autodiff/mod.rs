//! A small reverse-mode differentiation engine.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients into every node that
//! requires them. The engine carries exactly the operators the occupancy model
//! needs: 3D convolution, batch normalization, max pooling, trilinear feature
//! sampling, pointwise (1×1) layers and the two classification losses.

mod conv;
pub mod gradcheck;
mod loss;
mod norm;
mod optim;
mod point;

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

pub use norm::{BatchNormMode, RunningStats};
pub use optim::{Adam, AdamState};
pub use point::{Activation, PointBatch};

/// Floating-point element type of the engine (`f32` for training, `f64` for gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = a·b + beta·c` with arbitrary strides, as in BLAS `gemm`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from(x).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: bounds of every strided access checked above.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: bounds of every strided access checked above.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    la: usize,
    rsa: isize,
    csa: isize,
    lb: usize,
    rsb: isize,
    csb: isize,
    lc: usize,
    rsc: isize,
    csc: isize,
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        assert!(rs >= 0 && cs >= 0);
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= la, "gemm: A out of bounds");
    assert!(last(k, n, rsb, csb) <= lb, "gemm: B out of bounds");
    assert!(last(m, n, rsc, csc) <= lc, "gemm: C out of bounds");
}

/// Row-major `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]` where `a` is stored
/// `m×k` (or `k×m` when `ta`) and `b` is stored `k×n` (or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.f64())).collect(),
        }
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<T>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    Trilinear {
        grid: Var,
        corners: Vec<u32>,
        weights: Vec<T>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Pointwise {
        input: Var,
        weight: Var,
        bias: Var,
        relu: bool,
    },
    Reshape {
        input: Var,
    },
    SelectChannel {
        input: Var,
        channel: usize,
    },
    Bce {
        logits: Var,
        targets: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Record of executed operations, in topological (execution) order.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; zeros for nodes it never reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad || !self.consumed {
            return None;
        }
        let data = node
            .grad
            .clone()
            .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
        Some(Tensor {
            shape: node.value.shape.clone(),
            data,
        })
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn accumulate_owned(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        if node.grad.is_none() {
            node.grad = Some(g);
        } else {
            self.accumulate(v, &g);
        }
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| v.max(T::zero())).collect(),
        };
        let rg = self.any_grad(&[input]);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape != y.shape {
            return Err(Error::invalid(format!("add: shapes {:?} and {:?}", x.shape, y.shape)));
        }
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| p + q).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data.iter().map(|x| x.f64()).sum::<f64>();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(T::of(s)), rg, Op::Sum { input })
    }

    /// Same data viewed with a new shape.
    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(Error::invalid(format!("reshape {:?} -> {shape:?}", x.shape)));
        }
        let value = Tensor {
            shape,
            data: x.data.clone(),
        };
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, rg, Op::Reshape { input }))
    }

    /// Concatenates `[N, C_i, P]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        if first.len() != 3 {
            return Err(Error::invalid("concat expects [N, C, P] tensors"));
        }
        let (n, p) = (first[0], first[2]);
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != 3 || s[0] != n || s[2] != p {
                return Err(Error::invalid(format!("concat: shape {s:?} vs [{n}, _, {p}]")));
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * p);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let src = &self.value(v).data;
                data.extend_from_slice(&src[b * c * p..(b + 1) * c * p]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor {
                shape: vec![n, total, p],
                data,
            },
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Picks channel `channel` of an `[N, C, P]` tensor, giving `[N, P]`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 || channel >= s[1] {
            return Err(Error::invalid(format!("select channel {channel} of {s:?}")));
        }
        let (n, c, p) = (s[0], s[1], s[2]);
        let x = &self.value(input).data;
        let mut data = Vec::with_capacity(n * p);
        for b in 0..n {
            let off = (b * c + channel) * p;
            data.extend_from_slice(&x[off..off + p]);
        }
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor { shape: vec![n, p], data }, rg, Op::SelectChannel { input, channel }))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::invalid("backward already ran on this tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Relu { input } => {
                let y = &self.nodes[i].value.data;
                let gx: Vec<T> = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate_owned(*input, gx);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::Sum { input } => {
                let n = self.value(*input).len();
                self.accumulate_owned(*input, vec![g[0]; n]);
            }
            Op::Reshape { input } => self.accumulate(*input, g),
            Op::Concat { inputs } => {
                let [n, total, p] = self.nodes[i].value.shape[..] else { unreachable!() };
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if self.requires_grad(v) {
                        let mut gv = Vec::with_capacity(n * c * p);
                        for b in 0..n {
                            let start = (b * total + offset) * p;
                            gv.extend_from_slice(&g[start..start + c * p]);
                        }
                        self.accumulate_owned(v, gv);
                    }
                    offset += c;
                }
            }
            Op::SelectChannel { input, channel } => {
                let s = self.shape(*input).to_vec();
                let (n, c, p) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); n * c * p];
                for b in 0..n {
                    let off = (b * c + channel) * p;
                    gx[off..off + p].copy_from_slice(&g[b * p..(b + 1) * p]);
                }
                self.accumulate_owned(*input, gx);
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                cols,
            } => conv::conv3d_backward(self, *input, *weight, *bias, cols, g),
            Op::MaxPool { input, argmax } => {
                let mut gx = vec![T::zero(); self.value(*input).len()];
                for (&j, &gv) in argmax.iter().zip(g) {
                    gx[j as usize] = gx[j as usize] + gv;
                }
                self.accumulate_owned(*input, gx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => norm::batchnorm_backward(self, *input, *gamma, *beta, xhat, inv_std, *train, g),
            Op::Trilinear { grid, corners, weights } => point::trilinear_backward(self, *grid, corners, weights, g),
            Op::Pointwise {
                input,
                weight,
                bias,
                relu,
            } => point::pointwise_backward(self, i, *input, *weight, *bias, *relu, g),
            Op::Bce { logits, targets } => loss::bce_backward(self, *logits, targets, g[0]),
            Op::CrossEntropy { logits, targets, probs } => loss::cross_entropy_backward(self, *logits, targets, probs, g[0]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_grads() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let b = tape.param(Tensor::new(vec![2], vec![0.5, 0.25]).unwrap());
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().data, vec![1.0; 3]);
        // disconnected parameter: zero gradient
        assert_eq!(tape.grad(b).unwrap().data, vec![0.0; 2]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::scalar(2.0));
        let s = tape.sum(a);
        tape.backward(s).unwrap();
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::zeros(vec![2]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn concat_and_select_route_gradients() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.select_channel(c, 2).unwrap();
        assert_eq!(tape.value(s).data, vec![5.0, 6.0]);
        let l = tape.sum(s);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap().data, vec![0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn matmul_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }
}
