//! Reverse-mode automatic differentiation on a recorded graph.
//!
//! Backward rules are themselves written with graph operations, so the
//! gradients returned by [`Graph::grad`] are ordinary [`Var`]s that can be
//! differentiated again. The gradient penalty relies on this: it takes the
//! norm of an input gradient and then differentiates that norm with respect
//! to the critic parameters.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Powf(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    /// Elementwise product with a fixed tensor (no gradient flows to the mask).
    MulConst(usize, Rc<Tensor>),
    Expand(usize),
    SumTo(usize),
    Reshape(usize),
    Conv(usize, usize),
    ConvDx(usize, usize),
    ConvDw(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        trans_a: bool,
        trans_b: bool,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Concat(Vec<usize>),
    SliceChannels(usize, usize),
    PadChannels(usize, usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probe point).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn unary(&self, a: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    fn binary(&self, a: usize, b: usize, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires(a) || self.requires(b);
        self.push(value, op, rg)
    }

    pub fn concat_channels<'g>(&'g self, parts: &[Var<'g>]) -> Var<'g> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(p.id)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat_channels(&refs);
        let rg = parts.iter().any(|p| self.requires(p.id));
        self.push(out, Op::Concat(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Gradients of the scalar `y` with respect to each of `wrt`.
    ///
    /// Inputs that `y` does not depend on receive a zero gradient.
    pub fn grad<'g>(&'g self, y: Var<'g>, wrt: &[Var<'g>]) -> Vec<Var<'g>> {
        assert_eq!(y.value().len(), 1, "grad needs a scalar output");
        let mut grads: Vec<Option<usize>> = vec![None; y.id + 1];
        let seed = self.constant(Tensor::ones(y.value().shape()));
        grads[y.id] = Some(seed.id);
        for id in (0..=y.id).rev() {
            let Some(gid) = grads[id] else { continue };
            if !self.requires(id) {
                continue;
            }
            let op = self.nodes.borrow()[id].op.clone();
            for (input, contrib) in self.backward(id, &op, self.var(gid)) {
                if !self.requires(input) {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(prev) => (self.var(prev) + contrib).id,
                    None => contrib.id,
                });
            }
        }
        wrt.iter()
            .map(|w| match grads.get(w.id).copied().flatten() {
                Some(g) => self.var(g),
                None => self.constant(Tensor::zeros(w.value().shape())),
            })
            .collect()
    }

    fn backward<'g>(&'g self, id: usize, op: &Op, g: Var<'g>) -> Vec<(usize, Var<'g>)> {
        let v = |i: usize| self.var(i);
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g), (*b, g)],
            Op::Sub(a, b) => vec![(*a, g), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![(*a, g * v(*b)), (*b, g * v(*a))],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::AddScalar(a) => vec![(*a, g)],
            Op::Powf(a, p) => vec![(*a, g * v(*a).powf(p - 1.0).scale(*p))],
            Op::Tanh(a) => {
                let y = v(id);
                vec![(*a, g * (y * y).scale(-1.0).add_scalar(1.0))]
            }
            Op::Sigmoid(a) => {
                let y = v(id);
                vec![(*a, g * y * y.scale(-1.0).add_scalar(1.0))]
            }
            Op::Softplus(a) => vec![(*a, g * v(*a).sigmoid())],
            Op::MulConst(a, m) => vec![(*a, g.mul_const_rc(Rc::clone(m)))],
            Op::Expand(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.sum_to(&shape))]
            }
            Op::SumTo(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.expand(&shape))]
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                vec![(*a, g.reshape(&shape))]
            }
            Op::Conv(x, w) => vec![
                (*x, g.conv2d_dx(v(*w), self.value(*x).shape())),
                (*w, v(*x).conv2d_dw(g, self.value(*w).shape())),
            ],
            // u = conv_dx(gy, w): <G, u> = T(G, w, gy)
            Op::ConvDx(gy, w) => vec![
                (*gy, g.conv2d(v(*w))),
                (*w, g.conv2d_dw(v(*gy), self.value(*w).shape())),
            ],
            // u = conv_dw(x, gy): <G, u> = T(x, G, gy)
            Op::ConvDw(x, gy) => vec![
                (*x, v(*gy).conv2d_dx(g, self.value(*x).shape())),
                (*gy, v(*x).conv2d(g)),
            ],
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => {
                let ga = if *trans_a {
                    v(*b).matmul_t(g, *trans_b, true)
                } else {
                    g.matmul_t(v(*b), false, !*trans_b)
                };
                let gb = if *trans_b {
                    g.matmul_t(v(*a), true, *trans_a)
                } else {
                    v(*a).matmul_t(g, !*trans_a, false)
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::AvgPool2(a) => vec![(*a, g.upsample2().scale(0.25))],
            Op::Upsample2(a) => vec![(*a, g.avg_pool2().scale(4.0))],
            Op::Concat(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let c = self.value(p).shape()[1];
                        let piece = g.slice_channels(start, c);
                        start += c;
                        (p, piece)
                    })
                    .collect()
            }
            Op::SliceChannels(a, start) => {
                let total = self.value(*a).shape()[1];
                vec![(*a, g.pad_channels(*start, total))]
            }
            Op::PadChannels(a, start) => {
                let c = self.value(*a).shape()[1];
                vec![(*a, g.slice_channels(*start, c))]
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    fn elementwise(self, other: Var<'g>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'g> {
        let out = self.value().zip_map(&other.value(), f);
        self.graph.binary(self.id, other.id, out, op)
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x * c);
        self.graph.unary(self.id, out, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        let out = self.value().map(|x| x + c);
        self.graph.unary(self.id, out, Op::AddScalar(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'g> {
        let out = self.value().map(|x| x.powf(p));
        self.graph.unary(self.id, out, Op::Powf(self.id, p))
    }

    pub fn square(self) -> Var<'g> {
        self * self
    }

    pub fn tanh(self) -> Var<'g> {
        let out = self.value().map(f64::tanh);
        self.graph.unary(self.id, out, Op::Tanh(self.id))
    }

    pub fn sigmoid(self) -> Var<'g> {
        let out = self.value().map(sigmoid);
        self.graph.unary(self.id, out, Op::Sigmoid(self.id))
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(self) -> Var<'g> {
        let out = self.value().map(softplus);
        self.graph.unary(self.id, out, Op::Softplus(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g> {
        let x = self.value();
        let mask = Rc::new(x.map(|v| if v > 0.0 { 1.0 } else { slope }));
        self.mul_const_rc(mask)
    }

    pub fn mul_const(self, mask: Tensor) -> Var<'g> {
        self.mul_const_rc(Rc::new(mask))
    }

    fn mul_const_rc(self, mask: Rc<Tensor>) -> Var<'g> {
        let out = self.value().zip_map(&mask, |a, b| a * b);
        self.graph.unary(self.id, out, Op::MulConst(self.id, mask))
    }

    /// Broadcast dimensions of size 1 up to `shape` (equal rank required).
    pub fn expand(self, shape: &[usize]) -> Var<'g> {
        if self.value().shape() == shape {
            return self;
        }
        let out = kernels::expand(&self.value(), shape);
        self.graph.unary(self.id, out, Op::Expand(self.id))
    }

    pub fn sum_to(self, shape: &[usize]) -> Var<'g> {
        if self.value().shape() == shape {
            return self;
        }
        let out = kernels::sum_to(&self.value(), shape);
        self.graph.unary(self.id, out, Op::SumTo(self.id))
    }

    /// Sum of all elements, as a tensor of the same rank with unit dims.
    pub fn sum_all(self) -> Var<'g> {
        let shape = vec![1; self.value().shape().len()];
        self.sum_to(&shape)
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(self) -> Var<'g> {
        let n = self.value().len() as f64;
        self.sum_all().reshape(&[1]).scale(1.0 / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g> {
        let out = self.value().as_ref().clone().reshape(shape);
        self.graph.unary(self.id, out, Op::Reshape(self.id))
    }

    pub fn conv2d(self, w: Var<'g>) -> Var<'g> {
        let out = kernels::conv2d(&self.value(), &w.value());
        self.graph.binary(self.id, w.id, out, Op::Conv(self.id, w.id))
    }

    fn conv2d_dx(self, w: Var<'g>, x_shape: &[usize]) -> Var<'g> {
        let out = kernels::conv2d_dx(&self.value(), &w.value(), x_shape);
        self.graph.binary(self.id, w.id, out, Op::ConvDx(self.id, w.id))
    }

    fn conv2d_dw(self, gy: Var<'g>, w_shape: &[usize]) -> Var<'g> {
        let out = kernels::conv2d_dw(&self.value(), &gy.value(), w_shape);
        self.graph.binary(self.id, gy.id, out, Op::ConvDw(self.id, gy.id))
    }

    pub fn matmul(self, b: Var<'g>) -> Var<'g> {
        self.matmul_t(b, false, false)
    }

    pub fn matmul_t(self, b: Var<'g>, trans_a: bool, trans_b: bool) -> Var<'g> {
        let out = kernels::matmul(&self.value(), &b.value(), trans_a, trans_b);
        self.graph.binary(
            self.id,
            b.id,
            out,
            Op::MatMul {
                a: self.id,
                b: b.id,
                trans_a,
                trans_b,
            },
        )
    }

    pub fn avg_pool2(self) -> Var<'g> {
        let out = kernels::avg_pool2(&self.value());
        self.graph.unary(self.id, out, Op::AvgPool2(self.id))
    }

    pub fn upsample2(self) -> Var<'g> {
        let out = kernels::upsample2(&self.value());
        self.graph.unary(self.id, out, Op::Upsample2(self.id))
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Var<'g> {
        let out = kernels::slice_channels(&self.value(), start, len);
        self.graph
            .unary(self.id, out, Op::SliceChannels(self.id, start))
    }

    fn pad_channels(self, start: usize, total: usize) -> Var<'g> {
        let out = kernels::pad_channels(&self.value(), start, total);
        self.graph.unary(self.id, out, Op::PadChannels(self.id, start))
    }
}

impl<'g> std::ops::Add for Var<'g> {
    type Output = Var<'g>;
    fn add(self, rhs: Var<'g>) -> Var<'g> {
        self.elementwise(rhs, |a, b| a + b, Op::Add(self.id, rhs.id))
    }
}

impl<'g> std::ops::Sub for Var<'g> {
    type Output = Var<'g>;
    fn sub(self, rhs: Var<'g>) -> Var<'g> {
        self.elementwise(rhs, |a, b| a - b, Op::Sub(self.id, rhs.id))
    }
}

impl<'g> std::ops::Mul for Var<'g> {
    type Output = Var<'g>;
    fn mul(self, rhs: Var<'g>) -> Var<'g> {
        self.elementwise(rhs, |a, b| a * b, Op::Mul(self.id, rhs.id))
    }
}

impl<'g> std::ops::Neg for Var<'g> {
    type Output = Var<'g>;
    fn neg(self) -> Var<'g> {
        self.scale(-1.0)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
