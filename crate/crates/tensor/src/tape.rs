//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive applied through a [`Tape`] evaluates eagerly and appends a
//! node holding its output and whatever the backward rule needs. Nodes are
//! only ever appended, so the tape is topologically ordered by construction
//! and [`Tape::backward`] is a single reverse sweep.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom, MatmulDims};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul { a: Var, b: Var, dims: MatmulDims },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    BroadcastTo(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Clamp { x: Var, lo: T, hi: T },
    IndexSelect { table: Var, ids: Vec<usize> },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Name and arity of every differentiable primitive the tape records.
pub fn primitive_set() -> &'static [(&'static str, usize)] {
    &[
        ("add", 2),
        ("sub", 2),
        ("mul", 2),
        ("div", 2),
        ("scale", 1),
        ("add_scalar", 1),
        ("matmul", 2),
        ("conv2d", 2),
        ("permute", 1),
        ("reshape", 1),
        ("broadcast_to", 1),
        ("slice", 1),
        ("concat", 2),
        ("sum_axis", 1),
        ("sum", 1),
        ("mean", 1),
        ("softmax", 1),
        ("layer_norm", 1),
        ("silu", 1),
        ("sigmoid", 1),
        ("tanh", 1),
        ("exp", 1),
        ("log", 1),
        ("softplus", 1),
        ("clamp", 1),
        ("index_select", 1),
    ]
}

#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Element = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf created with `requires_grad`; `None` otherwise.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(T::of(value)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_with(self.value(b), "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.unary(x, Op::Offset(x), |v| v + c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("square of a tensor with itself")
    }

    /// `a @ b` over the last two axes; `b` is either 2-D (shared across the
    /// batch) or carries the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` where `b` is `[.., n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (dims, _) = kernels::matmul_dims(self.shape(a), self.shape(b), trans_b)?;
        let v = kernels::matmul_forward(self.value(a), self.value(b), trans_b)?;
        Ok(self.push(v, Op::MatMul { a, b, dims }, &[a, b]))
    }

    /// NHWC input, `[kh, kw, c_in, c_out]` weight, symmetric zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        let v = kernels::conv_forward(self.value(x), self.value(w), &geom);
        Ok(self.push(v, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let v = self.value(x).permute(axes)?;
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(TensorError::invalid("transpose", "needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).broadcast_to(shape)?;
        Ok(self.push(v, Op::BroadcastTo(x), &[x]))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&values, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let extent = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let row = &src[(o * extent + a) * inner..][..inner];
                for (d, &s) in out[o * inner..][..inner].iter_mut().zip(row) {
                    *d = *d + s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let extent = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| TensorError::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis, keepdim)?;
        Ok(self.scale(s, 1.0 / extent as f64))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = last_dim(self.shape(x));
        let t = self.value(x);
        let v = Tensor::new(t.shape(), kernels::softmax_rows(t.data(), cols)).expect("same shape");
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Normalizes the last axis to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let cols = last_dim(self.shape(x));
        let t = self.value(x);
        let (y, rstd) = kernels::layer_norm_rows(t.data(), cols, eps);
        let v = Tensor::new(t.shape(), y).expect("same shape");
        self.push(v, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Gathers rows of a 2-D `table`; output is `[ids.len(), cols]`.
    pub fn index_select(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::invalid("index_select", format!("table shape {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid(
                "index_select",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let v = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.push(
            v,
            Op::IndexSelect {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with `requires_grad` receives a gradient; leaves the
    /// loss does not depend on receive zeros. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut acc: Vec<Option<Vec<T>>> = vec![None; n];
        acc[loss.0] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = acc[i].take() else {
                continue;
            };
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            let g = Tensor::new(node.value.shape(), g)?;
            self.backprop_node(i, g, &mut acc)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && leaves[i].is_none() {
                leaves[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: leaves })
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, acc: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, grad: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut acc[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(grad) {
                        *e = *e + x;
                    }
                }
                slot => *slot = Some(grad),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.sum_to_shape(val(*a).shape())?.into_data());
                }
                if wants(*b) {
                    send(*b, g.sum_to_shape(val(*b).shape())?.into_data());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    send(*a, g.sum_to_shape(val(*a).shape())?.into_data());
                }
                if wants(*b) {
                    let gb = g.sum_to_shape(val(*b).shape())?;
                    send(*b, gb.data().iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let ga = g.zip_with(val(*b), "mul", |x, y| x * y)?;
                    send(*a, ga.sum_to_shape(val(*a).shape())?.into_data());
                }
                if wants(*b) {
                    let gb = g.zip_with(val(*a), "mul", |x, y| x * y)?;
                    send(*b, gb.sum_to_shape(val(*b).shape())?.into_data());
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    let ga = g.zip_with(val(*b), "div", |x, y| x / y)?;
                    send(*a, ga.sum_to_shape(val(*a).shape())?.into_data());
                }
                if wants(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let q = g.zip_with(&node.value, "div", |x, y| -x * y)?;
                    let gb = q.zip_with(val(*b), "div", |x, y| x / y)?;
                    send(*b, gb.sum_to_shape(val(*b).shape())?.into_data());
                }
            }
            Op::Scale(x, s) => send(*x, g.data().iter().map(|&v| v * *s).collect()),
            Op::Offset(x) => send(*x, g.into_data()),
            Op::MatMul { a, b, dims } => {
                if wants(*a) {
                    send(*a, kernels::matmul_grad_a(g.data(), val(*b), dims));
                }
                if wants(*b) {
                    send(*b, kernels::matmul_grad_b(g.data(), val(*a), dims));
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (gx, gw) =
                    kernels::conv_backward(g.data(), val(*x), val(*w), geom, wants(*x), wants(*w));
                if let Some(gx) = gx {
                    send(*x, gx);
                }
                if let Some(gw) = gw {
                    send(*w, gw);
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                send(*x, g.permute(&inverse)?.into_data());
            }
            Op::Reshape(x) => send(*x, g.into_data()),
            Op::BroadcastTo(x) => send(*x, g.sum_to_shape(val(*x).shape())?.into_data()),
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[*axis + 1..]);
                let (extent, len) = (shape[*axis], g.shape()[*axis]);
                let mut gx = vec![T::zero(); numel(shape)];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..][..len * inner]);
                }
                send(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        send(p, g.narrow(*axis, start, len)?.into_data());
                    }
                    start += len;
                }
            }
            Op::SumAxis { x, axis } => {
                let mut keep = val(*x).shape().to_vec();
                keep[*axis] = 1;
                let gk = g.into_reshaped(&keep)?;
                send(*x, gk.broadcast_to(val(*x).shape())?.into_data());
            }
            Op::SumAll(x) => {
                let s = g.data()[0];
                send(*x, vec![s; val(*x).numel()]);
            }
            Op::Softmax(x) => {
                let cols = last_dim(node.value.shape());
                send(*x, kernels::softmax_backward(node.value.data(), g.data(), cols));
            }
            Op::LayerNorm { x, rstd } => {
                let cols = last_dim(node.value.shape());
                send(*x, kernels::layer_norm_backward(node.value.data(), rstd, g.data(), cols));
            }
            Op::Silu(x) => {
                let gx = zip_map(g.data(), val(*x).data(), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (T::one() + xv * (T::one() - s))
                });
                send(*x, gx);
            }
            Op::Sigmoid(x) => send(*x, zip_map(g.data(), node.value.data(), |gv, y| gv * y * (T::one() - y))),
            Op::Tanh(x) => send(*x, zip_map(g.data(), node.value.data(), |gv, y| gv * (T::one() - y * y))),
            Op::Exp(x) => send(*x, zip_map(g.data(), node.value.data(), |gv, y| gv * y)),
            Op::Log(x) => send(*x, zip_map(g.data(), val(*x).data(), |gv, xv| gv / xv)),
            Op::Softplus(x) => send(*x, zip_map(g.data(), val(*x).data(), |gv, xv| gv * sigmoid(xv))),
            Op::Clamp { x, lo, hi } => {
                let gx = zip_map(g.data(), val(*x).data(), |gv, xv| {
                    if xv >= *lo && xv <= *hi {
                        gv
                    } else {
                        T::zero()
                    }
                });
                send(*x, gx);
            }
            Op::IndexSelect { table, ids } => {
                let shape = val(*table).shape();
                let cols = shape[1];
                let mut gt = vec![T::zero(); numel(shape)];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        gt[id * cols + c] = gt[id * cols + c] + g.data()[r * cols + c];
                    }
                }
                send(*table, gt);
            }
        }
        Ok(())
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1).max(1)
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2], &[1., 2.]));
        let b = tape.constant(t(&[2], &[3., 4.]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4., 6.]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_val = Tensor::from_fn(&[3, 4], |i| i as f64 * 0.5 - 1.0);
        let a = tape.constant(a_val.clone());
        let c = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(c), &a_val);
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[3]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.square(x);
        let loss = tape.sum(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn constant_function_gives_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let c = tape.constant(t(&[], &[5.0]));
        let loss = tape.scale(c, 2.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0., 0., 0.]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[1.]));
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
        let err = tape.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn index_select_rejects_bad_id() {
        let mut tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(tape.index_select(table, &[1, 4]).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0f64) - 1000.0).abs() < 1e-9);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
