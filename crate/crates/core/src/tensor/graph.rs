//! Dynamically recorded operation tape for reverse-mode differentiation.

use super::kernels::{self, LayerNormCache};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A single-input differentiable function defined outside the tape.
///
/// Any tensors other than the input are captured by the implementor and
/// treated as constants.
pub trait CustomOp<F: Real>: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, input: &Tensor<F>) -> Result<Tensor<F>>;

    fn backward(&self, input: &Tensor<F>, output: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F>;
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, F),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    ConcatLast(Vec<Var>),
    Gelu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, cache: LayerNormCache<F> },
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize },
    Resize { x: Var, scale: f64 },
    Sum(Var),
    Custom { input: Var, op: Box<dyn CustomOp<F>> },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Operation tape. Build one per forward pass and drop it after `backward`.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err!("mul: {:?} vs {:?}", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[..., D] + bias[D]`, broadcasting the bias over leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let d = *xv.shape().last().unwrap();
        if bv.shape() != [d] {
            return Err(shape_err!("add_bias: bias {:?} vs input {:?}", bv.shape(), xv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: F) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, k), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `out[i] = x[index[i]]` with `out` taking `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.numel()) {
            return Err(shape_err!("gather index {} out of range for {:?}", bad, src.shape()));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Gather(x, index), rg))
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var> {
        let [r, c] = *self.value(x).shape() else {
            return Err(shape_err!("transpose2d expects 2-D, got {:?}", self.value(x).shape()));
        };
        let index = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(x, index, &[c, r])
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = *self.value(x).shape() else {
            return Err(shape_err!("slice_cols expects 2-D, got {:?}", self.value(x).shape()));
        };
        if start + len > c || len == 0 {
            return Err(shape_err!("slice_cols {}..{} out of range for {} columns", start, start + len, c));
        }
        let index = (0..r).flat_map(|i| (start..start + len).map(move |j| i * c + j)).collect();
        self.gather(x, index, &[r, len])
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let lead = self.value(*first).shape()[..self.value(*first).ndim() - 1].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err!("concat_last: {:?} vs leading {:?}", s, lead));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatLast(parts.to_vec()), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let out = kernels::softmax_lastdim(self.value(x));
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: F) -> Result<Var> {
        let (out, cache) = kernels::layer_norm(self.value(x), self.value(gain), self.value(shift), eps)?;
        let rg = self.rg(&[x, gain, shift]);
        Ok(self.push(out, Op::LayerNorm { x, gain, shift, cache }, rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        let rg = self.rg(&[input, kernel, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, stride }, rg))
    }

    pub fn bilinear_resize(&mut self, x: Var, scale: f64) -> Result<Var> {
        let out = kernels::bilinear_resize(self.value(x), scale)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Resize { x, scale }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().fold(F::zero(), |a, b| a + b);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn custom(&mut self, input: Var, op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let out = op.forward(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Custom { input, op }, rg))
    }

    fn accumulate(&mut self, v: Var, g: Tensor<F>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            None => node.grad = Some(g),
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    /// Back-propagates from a single-element `loss`, leaving gradients on leaves.
    ///
    /// Intermediate gradients are released as soon as they have been consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let seed = Tensor::full(self.value(loss).shape().to_vec(), F::one());
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            for (v, gv) in self.input_grads(i, &g)? {
                self.accumulate(v, gv);
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &Tensor<F>) -> Result<Vec<(Var, Tensor<F>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
                    out.push((*a, Tensor::new(g.shape().to_vec(), d)?));
                }
                if needs(*b) {
                    let d = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                    out.push((*b, Tensor::new(g.shape().to_vec(), d)?));
                }
            }
            Op::AddBias(x, b) => {
                let d = val(*b).numel();
                let mut db = vec![F::zero(); d];
                for row in g.data().chunks_exact(d) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                out.push((*x, g.clone()));
                out.push((*b, Tensor::new([d], db)?));
            }
            Op::Scale(x, k) => out.push((*x, g.map(|v| v * *k))),
            Op::Reshape(x) => out.push((*x, g.clone().reshape(val(*x).shape().to_vec())?)),
            Op::Gather(x, index) => {
                let src = val(*x);
                let mut d = vec![F::zero(); src.numel()];
                for (&j, &v) in index.iter().zip(g.data()) {
                    d[j] += v;
                }
                out.push((*x, Tensor::new(src.shape().to_vec(), d)?));
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap();
                let rows = g.numel() / total;
                let mut offset = 0;
                for p in parts {
                    let s = val(*p).shape();
                    let w = *s.last().unwrap();
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((*p, Tensor::new(s.to_vec(), d)?));
                }
            }
            Op::Gelu(x) => out.push((*x, kernels::gelu_backward(val(*x), g))),
            Op::Softmax(x) => out.push((*x, kernels::softmax_backward(&node.value, g))),
            Op::LayerNorm { x, gain, shift, cache } => {
                let (dx, dg, ds) = kernels::layer_norm_backward(cache, val(*gain), g);
                out.push((*x, dx));
                out.push((*gain, dg));
                out.push((*shift, ds));
            }
            Op::Conv2d { input, kernel, bias, stride } => {
                let (dx, dk, db) = kernels::conv2d_backward(val(*input), val(*kernel), val(*bias), *stride, g)?;
                if needs(*input) {
                    out.push((*input, dx));
                }
                out.push((*kernel, dk));
                out.push((*bias, db));
            }
            Op::Resize { x, scale } => {
                out.push((*x, kernels::bilinear_resize_backward(val(*x).shape(), *scale, g)));
            }
            Op::Sum(x) => out.push((*x, Tensor::full(val(*x).shape().to_vec(), g.item()))),
            Op::Custom { input, op } => out.push((*input, op.backward(val(*input), &node.value, g))),
        }
        Ok(out)
    }
}
