use std::cell::{Ref, RefCell};
use std::fmt;

use super::conv::{self, ConvGeometry};
use super::tensor::{broadcast_shapes, sum_to_shape, zip_broadcast, Tensor};
use crate::error::{Error, Result};
use crate::special::{digamma, lgamma, trigamma};

/// Append-only record of primitive operations for one forward pass.
///
/// Nodes are stored in creation order, which is a topological order of the graph,
/// so the reverse pass is a single backwards sweep.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Neg(usize),
    Lgamma(usize),
    Digamma(usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    SumAxis(usize, usize),
    Mean(usize),
    MeanAxis(usize, usize),
    Broadcast(usize),
    Reshape(usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    /// Diagonal Jacobian supplied by the caller: d out[i] / d parent_k[i] = partials[k][i].
    Elementwise {
        inputs: Vec<usize>,
        partials: Vec<Vec<f64>>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        geom: ConvGeometry,
    },
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, *self.value_ref())
    }
}

/// Gradients of a scalar output with respect to every `requires_grad` leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of its shape when `v` did not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.var(self.push(value, Op::Leaf, false))
    }

    /// Differentiable input; its gradient is reported by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.var(self.push(value, Op::Leaf, true))
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Records a value whose local derivatives are elementwise and supplied by the caller.
    ///
    /// Each `(parent, partial)` pair must match the shape of `value`.
    pub fn custom_elementwise<'t>(
        &'t self,
        value: Tensor,
        parents: &[(Var<'t>, Vec<f64>)],
    ) -> Result<Var<'t>> {
        let mut inputs = Vec::with_capacity(parents.len());
        let mut partials = Vec::with_capacity(parents.len());
        let mut rg = false;
        {
            let nodes = self.nodes.borrow();
            for (p, d) in parents {
                let node = &nodes[p.id];
                if node.value.shape() != value.shape() || d.len() != value.numel() {
                    return Err(Error::shape(
                        "custom_elementwise",
                        node.value.shape(),
                        value.shape(),
                    ));
                }
                rg |= node.requires_grad;
                inputs.push(p.id);
                partials.push(d.clone());
            }
        }
        let op = if rg {
            Op::Elementwise { inputs, partials }
        } else {
            Op::Leaf
        };
        Ok(self.var(self.push(value, op, rg)))
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            // constants never need their recipe replayed
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        nodes.len() - 1
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::shape("backward", out.value.shape(), &[]));
        }
        if !out.value.all_finite() {
            return Err(Error::NonFinite {
                context: "backward output".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.id + 1];
        let mut result: Vec<Option<Tensor>> = vec![None; output.id + 1];
        if out.requires_grad {
            grads[output.id] = Some(vec![1.0]);
        }
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    if g.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite {
                            context: format!("gradient of leaf #{id}"),
                        });
                    }
                    result[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                op => backprop(&nodes, op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads: result })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        slot => *slot = Some(contrib),
    }
}

fn reduce_binary(nodes: &[Node], out_shape: &[usize], id: usize, g: Vec<f64>) -> Vec<f64> {
    sum_to_shape(&g, out_shape, nodes[id].value.shape())
}

/// Values of a broadcast input laid out in the output shape.
fn expand(nodes: &[Node], id: usize, out_shape: &[usize]) -> Vec<f64> {
    let v = &nodes[id].value;
    if v.shape() == out_shape {
        return v.data().to_vec();
    }
    let ones = Tensor::from_parts(out_shape.to_vec(), vec![0.0; out_shape.iter().product()]);
    zip_broadcast(&ones, v, out_shape, |_, y| y)
}

fn unary_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    g: &[f64],
    d: impl Fn(usize) -> f64,
) {
    let contrib = g.iter().enumerate().map(|(i, gi)| gi * d(i)).collect();
    accumulate(nodes, grads, x, contrib);
}

fn backprop(nodes: &[Node], op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let shape = out.shape();
    match *op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, reduce_binary(nodes, shape, a, g.to_vec()));
            accumulate(nodes, grads, b, reduce_binary(nodes, shape, b, g.to_vec()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, reduce_binary(nodes, shape, a, g.to_vec()));
            let neg = g.iter().map(|x| -x).collect();
            accumulate(nodes, grads, b, reduce_binary(nodes, shape, b, neg));
        }
        Op::Mul(a, b) => {
            if nodes[a].requires_grad {
                let bv = expand(nodes, b, shape);
                let ga = g.iter().zip(&bv).map(|(g, y)| g * y).collect();
                accumulate(nodes, grads, a, reduce_binary(nodes, shape, a, ga));
            }
            if nodes[b].requires_grad {
                let av = expand(nodes, a, shape);
                let gb = g.iter().zip(&av).map(|(g, x)| g * x).collect();
                accumulate(nodes, grads, b, reduce_binary(nodes, shape, b, gb));
            }
        }
        Op::Div(a, b) => {
            let bv = expand(nodes, b, shape);
            if nodes[a].requires_grad {
                let ga = g.iter().zip(&bv).map(|(g, y)| g / y).collect();
                accumulate(nodes, grads, a, reduce_binary(nodes, shape, a, ga));
            }
            if nodes[b].requires_grad {
                // d(a/b)/db = -(a/b)/b
                let gb = g
                    .iter()
                    .zip(out.data())
                    .zip(&bv)
                    .map(|((g, q), y)| -g * q / y)
                    .collect();
                accumulate(nodes, grads, b, reduce_binary(nodes, shape, b, gb));
            }
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if nodes[a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, (n, 1), bv.data(), (1, n), &mut ga);
                accumulate(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), (1, k), g, (n, 1), &mut gb);
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Exp(x) => unary_grad(nodes, grads, x, g, |i| out.data()[i]),
        Op::Log(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| 1.0 / xv[i]);
        }
        Op::Tanh(x) => unary_grad(nodes, grads, x, g, |i| {
            let t = out.data()[i];
            1.0 - t * t
        }),
        Op::Relu(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| if xv[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Sigmoid(x) => unary_grad(nodes, grads, x, g, |i| {
            let s = out.data()[i];
            s * (1.0 - s)
        }),
        Op::Softplus(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| sigmoid(xv[i]));
        }
        Op::Square(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| 2.0 * xv[i]);
        }
        Op::Neg(x) => unary_grad(nodes, grads, x, g, |_| -1.0),
        Op::Lgamma(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| digamma(xv[i]));
        }
        Op::Digamma(x) => {
            let xv = nodes[x].value.data();
            unary_grad(nodes, grads, x, g, |i| trigamma(xv[i]));
        }
        Op::Scale(x, c) => unary_grad(nodes, grads, x, g, |_| c),
        Op::AddScalar(x) => accumulate(nodes, grads, x, g.to_vec()),
        Op::Sum(x) => {
            let n = nodes[x].value.numel();
            accumulate(nodes, grads, x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[x].value.numel();
            accumulate(nodes, grads, x, vec![g[0] / n as f64; n]);
        }
        Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
            let in_shape = nodes[x].value.shape();
            let scale = match *op {
                Op::MeanAxis(..) => 1.0 / in_shape[axis] as f64,
                _ => 1.0,
            };
            let gt = Tensor::from_parts(shape.to_vec(), g.iter().map(|v| v * scale).collect());
            let zeros = Tensor::zeros(in_shape.to_vec());
            let expanded = zip_broadcast(&zeros, &gt, in_shape, |_, y| y);
            accumulate(nodes, grads, x, expanded);
        }
        Op::Broadcast(x) => {
            let target = nodes[x].value.shape();
            accumulate(nodes, grads, x, sum_to_shape(g, shape, target));
        }
        Op::Reshape(x) => accumulate(nodes, grads, x, g.to_vec()),
        Op::Slice { input, axis, start } => {
            let in_shape = nodes[input].value.shape();
            let (outer, inner) = split_axis(in_shape, axis);
            let len = shape[axis];
            let mut gx = vec![0.0; nodes[input].value.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * in_shape[axis] + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, grads, input, gx);
        }
        Op::Concat { ref inputs, axis } => {
            let (outer, inner) = split_axis(shape, axis);
            let total = shape[axis];
            let mut offset = 0;
            for &p in inputs {
                let len = nodes[p].value.shape()[axis];
                if nodes[p].requires_grad {
                    let mut gp = Vec::with_capacity(nodes[p].value.numel());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[s..s + len * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Elementwise {
            ref inputs,
            ref partials,
        } => {
            for (&p, d) in inputs.iter().zip(partials) {
                let contrib = g.iter().zip(d).map(|(g, d)| g * d).collect();
                accumulate(nodes, grads, p, contrib);
            }
        }
        Op::Conv2d {
            input,
            weight,
            geom,
        } => {
            let (gx, gw) = conv::conv2d_backward(
                &nodes[input].value,
                &nodes[weight].value,
                g,
                &geom,
                nodes[input].requires_grad,
                nodes[weight].requires_grad,
            );
            if let Some(gx) = gx {
                accumulate(nodes, grads, input, gx);
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, weight, gw);
            }
        }
        Op::ConvTranspose2d {
            input,
            weight,
            geom,
        } => {
            let (gx, gw) = conv::conv_transpose2d_backward(
                &nodes[input].value,
                &nodes[weight].value,
                g,
                &geom,
                nodes[input].requires_grad,
                nodes[weight].requires_grad,
            );
            if let Some(gx) = gx {
                accumulate(nodes, grads, input, gx);
            }
            if let Some(gw) = gw {
                accumulate(nodes, grads, weight, gw);
            }
        }
    }
}

/// (product of extents before `axis`, product of extents after `axis`)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// C[m×n] += A[m×k] · B[k×n] with arbitrary (row, col) strides for A and B; C is row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn value_ref(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn value(&self) -> Tensor {
        self.value_ref().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value_ref().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var<'t> {
        let rg = self.tape.rg(inputs);
        self.tape.var(self.tape.push(value, op, rg))
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        op: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let shape = broadcast_shapes(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
            let data = zip_broadcast(a, b, &shape, f);
            Tensor::from_parts(shape, data)
        };
        Ok(self.emit(value, op(self.id, other.id), &[self.id, other.id]))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div, |x, y| x / y)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut c);
            Tensor::from_parts(vec![m, n], c)
        };
        Ok(self.emit(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    fn unary(&self, op: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.value_ref().map(f);
        self.emit(value, op(self.id), &[self.id])
    }

    fn check_positive(&self, name: &'static str) -> Result<()> {
        let v = self.value_ref();
        if let Some(bad) = v.data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain(
                name,
                format!("input must be strictly positive, found {bad}"),
            ));
        }
        Ok(())
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.check_positive("log")?;
        Ok(self.unary(Op::Log, f64::ln))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh, f64::tanh)
    }

    /// Rectifier; the derivative at exactly zero is taken as zero.
    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus, softplus)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn lgamma(&self) -> Result<Var<'t>> {
        self.check_positive("lgamma")?;
        Ok(self.unary(Op::Lgamma, lgamma))
    }

    pub fn digamma(&self) -> Result<Var<'t>> {
        self.check_positive("digamma")?;
        Ok(self.unary(Op::Digamma, digamma))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value_ref().map(|x| x * c);
        self.emit(value, Op::Scale(self.id, c), &[self.id])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let value = self.value_ref().map(|x| x + c);
        self.emit(value, Op::AddScalar(self.id), &[self.id])
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t> {
        let s = self.value_ref().data().iter().sum();
        self.emit(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value_ref();
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        self.emit(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            if axis >= v.rank() {
                return Err(Error::InvalidArgument(format!(
                    "axis {axis} out of range for shape {:?}",
                    v.shape()
                )));
            }
            let (outer, inner) = split_axis(v.shape(), axis);
            let len = v.shape()[axis];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                let dst = &mut out[o * inner..(o + 1) * inner];
                for j in 0..len {
                    let src = &v.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            if mean {
                let inv = 1.0 / len as f64;
                out.iter_mut().for_each(|x| *x *= inv);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = 1;
            Tensor::from_parts(shape, out)
        };
        let op = if mean {
            Op::MeanAxis(self.id, axis)
        } else {
            Op::SumAxis(self.id, axis)
        };
        Ok(self.emit(value, op, &[self.id]))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            match broadcast_shapes(v.shape(), shape) {
                Some(s) if s == shape => {}
                _ => return Err(Error::shape("broadcast", v.shape(), shape)),
            }
            let zeros = Tensor::zeros(shape.to_vec());
            Tensor::from_parts(shape.to_vec(), zip_broadcast(&zeros, &v, shape, |_, y| y))
        };
        Ok(self.emit(value, Op::Broadcast(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value_ref().reshape(shape.to_vec())?;
        Ok(self.emit(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let v = self.value_ref();
            if axis >= v.rank() || start + len > v.shape()[axis] || len == 0 {
                return Err(Error::InvalidArgument(format!(
                    "slice {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    v.shape()
                )));
            }
            let (outer, inner) = split_axis(v.shape(), axis);
            let extent = v.shape()[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * extent + start) * inner;
                data.extend_from_slice(&v.data()[s..s + len * inner]);
            }
            let mut shape = v.shape().to_vec();
            shape[axis] = len;
            Tensor::from_parts(shape, data)
        };
        Ok(self.emit(
            value,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::InvalidArgument(format!(
                    "concat axis {axis} for shape {base:?}"
                )));
            }
            let mut total = 0;
            for p in parts {
                first.same_tape(p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _) = split_axis(&base, axis);
            let mut shape = base.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.numel() / outer;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.emit(
            value,
            Op::Concat {
                inputs: ids.clone(),
                axis,
            },
            &ids,
        ))
    }

    /// 2-D convolution of `[N, C, H, W]` input with `[O, C, kh, kw]` weights (no bias).
    pub fn conv2d(&self, weight: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let geom = ConvGeometry::for_conv(x.shape(), w.shape(), stride, padding)?;
            (conv::conv2d_forward(x, w, &geom), geom)
        };
        Ok(self.emit(
            value,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
            &[self.id, weight.id],
        ))
    }

    /// Transposed convolution of `[N, Cin, H, W]` input with `[Cin, Cout, kh, kw]` weights.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'t>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let geom = ConvGeometry::for_transpose(x.shape(), w.shape(), stride, padding)?;
            (conv::conv_transpose2d_forward(x, w, &geom), geom)
        };
        Ok(self.emit(
            value,
            Op::ConvTranspose2d {
                input: self.id,
                weight: weight.id,
                geom,
            },
            &[self.id, weight.id],
        ))
    }
}
