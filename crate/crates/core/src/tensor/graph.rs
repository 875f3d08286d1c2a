use super::kernels::{self, reduce_to};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::stft::StftConfig;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Sqrt,
    Square,
    Abs,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    SumAll(Var),
    MeanAll(Var),
    Matmul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Glu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Pool {
        x: Var,
        factor: usize,
        axis: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
        axis: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    ComplexFilter {
        w: Var,
        x: Tensor<T>,
    },
    Istft {
        x: Var,
        cfg: StftConfig,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape-style reverse-mode autodiff graph.
///
/// Nodes are appended in evaluation order, so reverse index order is a valid
/// topological order for backpropagation. Leaf gradients accumulate across
/// `backward` calls until [`Graph::zero_grad`]; calling `backward` twice on the
/// same loss therefore yields exactly twice the gradient.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
    macs: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates performed by linear, matmul, convolution and filter ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub(crate) fn add_macs(&mut self, n: usize) {
        self.macs += n as u64;
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        parents: &[Var],
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Backpropagate from a scalar loss, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        if self.leaf_grads.len() < self.nodes.len() {
            self.leaf_grads.resize_with(self.nodes.len(), || None);
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.leaf_grads[i] {
                    Some(acc) => {
                        let acc_data = std::mem::take(acc).into_data();
                        let summed = acc_data
                            .into_iter()
                            .zip(g.data())
                            .map(|(a, &b)| a + b)
                            .collect();
                        *acc = Tensor::from_parts(g.shape().to_vec(), summed);
                    }
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<T>>], to: Var, g: Vec<T>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let shape = self.nodes[to.0].value.shape();
        debug_assert_eq!(g.len(), shape.iter().product::<usize>());
        match &mut grads[to.0] {
            Some(acc) => {
                let mut data = std::mem::take(acc).into_data();
                for (a, b) in data.iter_mut().zip(g) {
                    *a += b;
                }
                *acc = Tensor::from_parts(shape.to_vec(), data);
            }
            slot => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
        }
    }

    fn backward_node(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                self.send(grads, *a, reduce_to(gd, out_shape, &sa));
                self.send(grads, *b, reduce_to(gd, out_shape, &sb));
            }
            Op::Sub(a, b) => {
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                self.send(grads, *a, reduce_to(gd, out_shape, &sa));
                let neg: Vec<T> = gd.iter().map(|&v| -v).collect();
                self.send(grads, *b, reduce_to(&neg, out_shape, &sb));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let sa = kernels::broadcast_strides(va.shape(), out_shape);
                let sb = kernels::broadcast_strides(vb.shape(), out_shape);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); gd.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, _, ib| {
                        ga[o] = gd[o] * vb.data()[ib]
                    });
                    self.send(grads, *a, reduce_to(&ga, out_shape, va.shape()));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); gd.len()];
                    kernels::for_each_broadcast(out_shape, &sa, &sb, |o, ia, _| {
                        gb[o] = gd[o] * va.data()[ia]
                    });
                    self.send(grads, *b, reduce_to(&gb, out_shape, vb.shape()));
                }
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gx = super::ops::unary_backward(*kind, xv, yv, gd);
                self.send(grads, *x, gx);
            }
            Op::Scale(x, s) => {
                self.send(grads, *x, gd.iter().map(|&v| v * *s).collect());
            }
            Op::AddScalar(x) => self.send(grads, *x, gd.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![gd[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![gd[0] / T::of(n as f64); n]);
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = super::ops::matmul_backward(self.value(*a), self.value(*b), &g);
                if self.requires_grad(*a) {
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    self.send(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = super::ops::linear_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    self.requires_grad(*x),
                );
                if let Some(gx) = gx {
                    self.send(grads, *x, gx);
                }
                self.send(grads, *w, gw);
                if let Some(b) = b {
                    self.send(grads, *b, gb);
                }
            }
            Op::Softmax(x) => {
                let gx = super::ops::softmax_backward(
                    node.value.data(),
                    gd,
                    *out_shape.last().unwrap_or(&1),
                );
                self.send(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gamma).data();
                let (gx, gg, gb) = super::ops::layernorm_backward(xhat, rstd, gv, gd);
                self.send(grads, *x, gx);
                self.send(grads, *gamma, gg);
                self.send(grads, *beta, gb);
            }
            Op::Glu(x) => {
                let gx = super::ops::glu_backward(self.value(*x), gd);
                self.send(grads, *x, gx);
            }
            Op::Conv2d { x, w, b } => {
                let (gx, gw, gb) = super::ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    self.requires_grad(*x),
                );
                if let Some(gx) = gx {
                    self.send(grads, *x, gx);
                }
                self.send(grads, *w, gw);
                if let Some(b) = b {
                    self.send(grads, *b, gb);
                }
            }
            Op::DepthwiseConv { x, w, b } => {
                let (gx, gw, gb) = super::ops::dconv_backward(self.value(*x), self.value(*w), &g);
                self.send(grads, *x, gx);
                self.send(grads, *w, gw);
                if let Some(b) = b {
                    self.send(grads, *b, gb);
                }
            }
            Op::Pool { x, factor, axis } => {
                let gx = super::ops::pool_backward(self.shape(*x), *factor, *axis, &g);
                self.send(grads, *x, gx);
            }
            Op::Upsample { x, factor, axis } => {
                let gx = super::ops::upsample_backward(self.shape(*x), *factor, *axis, &g);
                self.send(grads, *x, gx);
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, gx) = kernels::permute(gd, out_shape, &inv);
                self.send(grads, *x, gx);
            }
            Op::Reshape(x) => self.send(grads, *x, gd.to_vec()),
            Op::Slice { x, axis, start } => {
                let gx = super::ops::slice_backward(self.shape(*x), *axis, *start, &g);
                self.send(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let mut offset = 0;
                for x in xs {
                    let shape = self.shape(*x).to_vec();
                    let len = shape[*axis];
                    if self.requires_grad(*x) {
                        let part = super::ops::slice_forward(gd, out_shape, *axis, offset, len);
                        self.send(grads, *x, part);
                    }
                    offset += len;
                }
            }
            Op::ComplexFilter { w, x } => {
                let gw = super::ops::complex_filter_backward(self.shape(*w), x, gd);
                self.send(grads, *w, gw);
            }
            Op::Istft { x, cfg } => {
                let gx = super::ops::istft_backward(self.shape(*x), cfg, &g);
                self.send(grads, *x, gx);
            }
        }
    }
}
