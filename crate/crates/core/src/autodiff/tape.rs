//! Define-by-run tape for reverse-mode differentiation of dense tensors.
//!
//! Every forward operation appends a node holding its value and whatever it
//! needs for its backward rule. Nodes only ever reference earlier nodes, so a
//! single reverse sweep over the node list visits the graph in topological
//! order.

use super::AutodiffError;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Local derivative of a fused elementwise node with respect to one input.
#[derive(Clone, Debug)]
pub enum Partial {
    /// The input has the output's shape; `d out[i] / d in[i]`.
    Full(Vec<f64>),
    /// Element `index` of the input is broadcast over the whole output;
    /// `partial[i] = d out[i] / d in[index]`.
    Element { index: usize, partial: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct FusedInput {
    pub var: Var,
    pub partial: Partial,
}

/// Forward primitive selector for [`Tape::forward_primitive`].
pub enum Primitive<'a> {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    /// Elementwise function returning `(value, derivative)`.
    Unary(&'a dyn Fn(f64) -> (f64, f64)),
    ReduceMean,
    ReduceSum,
    Broadcast(Vec<usize>),
    Concat {
        axis: usize,
    },
    SoftmaxCrossEntropy(Vec<usize>),
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
}

impl ConvGeometry {
    fn out_h(&self) -> usize {
        self.height - self.kernel + 1
    }
    fn out_w(&self) -> usize {
        self.width - self.kernel + 1
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Map {
        input: Var,
        deriv: Vec<f64>,
    },
    Fused {
        inputs: Vec<FusedInput>,
    },
    Sum(Var),
    Mean(Var),
    Broadcast {
        input: Var,
        index_map: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Standardize {
        input: Var,
        inv_std: Vec<f64>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records forward operations and replays them backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it requires grad.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the variable, zero when absent.
    pub fn wrt(&self, tape: &Tape, var: Var) -> Tensor {
        let shape = tape.value(var).shape().to_vec();
        match self.get(var) {
            Some(g) => Tensor::from_parts_unchecked(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Records an input tensor. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, AutodiffError> {
        check_finite(name, value.data())?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shapes(&self, vars: &[Var]) -> Vec<Vec<usize>> {
        vars.iter().map(|v| self.value(*v).shape().to_vec()).collect()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                shapes: self.shapes(&[a, b]),
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts_unchecked(va.shape().to_vec(), data);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: self.shapes(&[a, b]),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(
            "matmul",
            Tensor::from_parts_unchecked(vec![m, n], out),
            Op::MatMul(a, b),
            rg,
        )
    }

    /// Elementwise function; `f` returns `(value, derivative)`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> (f64, f64)) -> Result<Var, AutodiffError> {
        let input = self.value(x);
        let mut data = Vec::with_capacity(input.len());
        let mut deriv = Vec::with_capacity(input.len());
        for &v in input.data() {
            let (y, d) = f(v);
            data.push(y);
            deriv.push(d);
        }
        let value = Tensor::from_parts_unchecked(input.shape().to_vec(), data);
        let rg = self.requires_grad(x);
        self.push("map", value, Op::Map { input: x, deriv }, rg)
    }

    /// Records an elementwise node whose value and local partials were
    /// computed by the caller.
    pub fn fused(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        inputs: Vec<FusedInput>,
    ) -> Result<Var, AutodiffError> {
        let len = value.len();
        if shape.iter().product::<usize>() != len {
            return Err(AutodiffError::DataLength { shape, len });
        }
        for input in &inputs {
            let in_len = self.value(input.var).len();
            let ok = match &input.partial {
                Partial::Full(p) => p.len() == len && in_len == len,
                Partial::Element { index, partial } => partial.len() == len && *index < in_len,
            };
            if !ok {
                let mut shapes = vec![shape.clone()];
                shapes.push(self.value(input.var).shape().to_vec());
                return Err(AutodiffError::ShapeMismatch { op: name, shapes });
            }
        }
        let rg = inputs.iter().any(|i| self.requires_grad(i.var));
        self.push(
            name,
            Tensor::from_parts_unchecked(shape, value),
            Op::Fused { inputs },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push("reduce-sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires_grad(x);
        self.push("reduce-mean", Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Broadcasts `x` to `shape` with trailing-dimension alignment; each
    /// input extent must equal the target extent or be 1.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let in_shape = self.value(x).shape().to_vec();
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "broadcast",
            shapes: vec![in_shape.clone(), shape.to_vec()],
        };
        if in_shape.len() > shape.len() || shape.contains(&0) {
            return Err(mismatch());
        }
        let offset = shape.len() - in_shape.len();
        // Input stride per output axis, zero on broadcast axes.
        let mut strides = vec![0usize; shape.len()];
        let mut acc = 1usize;
        for axis in (0..in_shape.len()).rev() {
            let (d_in, d_out) = (in_shape[axis], shape[axis + offset]);
            if d_in != d_out && d_in != 1 {
                return Err(mismatch());
            }
            strides[axis + offset] = if d_in == 1 { 0 } else { acc };
            acc *= d_in;
        }
        let total: usize = shape.iter().product();
        let mut index_map = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        let mut src = 0usize;
        for _ in 0..total {
            index_map.push(src);
            for axis in (0..shape.len()).rev() {
                counter[axis] += 1;
                src += strides[axis];
                if counter[axis] < shape[axis] {
                    break;
                }
                src -= strides[axis] * counter[axis];
                counter[axis] = 0;
            }
        }
        let input = self.value(x).data();
        let data = index_map.iter().map(|&i| input[i]).collect();
        let rg = self.requires_grad(x);
        self.push(
            "broadcast",
            Tensor::from_parts_unchecked(shape.to_vec(), data),
            Op::Broadcast { input: x, index_map },
            rg,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let shapes = self.shapes(inputs);
        let first = shapes.first().ok_or(AutodiffError::Arity {
            op: "concat",
            expected: 1,
            found: 0,
        })?;
        let compatible = shapes.iter().all(|s| {
            s.len() == first.len()
                && axis < s.len()
                && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b)
        });
        if !compatible {
            return Err(AutodiffError::ShapeMismatch { op: "concat", shapes });
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for (var, s) in inputs.iter().zip(&shapes) {
                let chunk = s[axis] * inner;
                data.extend_from_slice(&self.value(*var).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        self.push(
            "concat",
            Tensor::from_parts_unchecked(out_shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() || shape.contains(&0) {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                shapes: vec![v.shape().to_vec(), shape.to_vec()],
            });
        }
        let value = Tensor::from_parts_unchecked(shape.to_vec(), v.data().to_vec());
        let rg = self.requires_grad(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Mean softmax cross-entropy of `[n, c]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax-cross-entropy",
                shapes: vec![s.to_vec(), vec![labels.len()]],
            });
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(AutodiffError::LabelOutOfRange { label, classes: c });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (row, (&label, p)) in labels.iter().zip(probs.chunks_mut(c)).enumerate() {
            let z = &v.data()[row * c..(row + 1) * c];
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (pi, &zi) in p.iter_mut().zip(z) {
                *pi = (zi - max).exp();
                total += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= total;
            }
            loss += max + total.ln() - z[label];
        }
        let rg = self.requires_grad(logits);
        self.push(
            "softmax-cross-entropy",
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Per-row standardization of a `[n, d]` tensor to zero mean and unit
    /// variance (no affine parameters).
    pub fn standardize(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "standardize",
                shapes: vec![s.to_vec()],
            });
        }
        let (n, d) = (s[0], s[1]);
        let mut out = vec![0.0; n * d];
        let mut inv_std = Vec::with_capacity(n);
        for (row, o) in v.data().chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (oi, ri) in o.iter_mut().zip(row) {
                *oi = (ri - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.requires_grad(x);
        self.push(
            "standardize",
            Tensor::from_parts_unchecked(vec![n, d], out),
            Op::Standardize { input: x, inv_std },
            rg,
        )
    }

    /// Valid (unpadded) stride-1 convolution of `[n, c, h, w]` input with a
    /// `[o, c, k, k]` kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var, AutodiffError> {
        let (si, sk) = (self.value(input).shape(), self.value(kernel).shape());
        let bad = si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] || sk[2] > si[2] || sk[3] > si[3];
        if bad {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                shapes: self.shapes(&[input, kernel]),
            });
        }
        let geom = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            out_channels: sk[0],
            kernel: sk[2],
        };
        let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let mut out = vec![0.0; geom.batch * geom.out_channels * oh * ow];
        for b in 0..geom.batch {
            for o in 0..geom.out_channels {
                let dst = &mut out[(b * geom.out_channels + o) * oh * ow..][..oh * ow];
                for c in 0..geom.in_channels {
                    let src = &x[(b * geom.in_channels + c) * geom.height * geom.width..];
                    let ker = &w[(o * geom.in_channels + c) * k * k..][..k * k];
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for ki in 0..k {
                                let row = &src[(i + ki) * geom.width + j..][..k];
                                for kj in 0..k {
                                    acc += row[kj] * ker[ki * k + kj];
                                }
                            }
                            dst[i * ow + j] += acc;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(input) || self.requires_grad(kernel);
        self.push(
            "conv2d",
            Tensor::from_parts_unchecked(vec![geom.batch, geom.out_channels, oh, ow], out),
            Op::Conv2d { input, kernel, geom },
            rg,
        )
    }

    /// Uniform entry point over the primitive set.
    pub fn forward_primitive(&mut self, kind: Primitive<'_>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |op: &'static str, n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity {
                    op,
                    expected: n,
                    found: inputs.len(),
                })
            }
        };
        match kind {
            Primitive::Add => arity("add", 2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity("sub", 2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity("mul", 2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Div => arity("div", 2).and_then(|_| self.div(inputs[0], inputs[1])),
            Primitive::MatMul => arity("matmul", 2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Unary(f) => arity("map", 1).and_then(|_| self.map(inputs[0], f)),
            Primitive::ReduceMean => arity("reduce-mean", 1).and_then(|_| self.mean(inputs[0])),
            Primitive::ReduceSum => arity("reduce-sum", 1).and_then(|_| self.sum(inputs[0])),
            Primitive::Broadcast(shape) => arity("broadcast", 1).and_then(|_| self.broadcast(inputs[0], &shape)),
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::SoftmaxCrossEntropy(labels) => {
                arity("softmax-cross-entropy", 1).and_then(|_| self.softmax_cross_entropy(inputs[0], &labels))
            }
        }
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Every leaf recorded with `requires_grad` receives a gradient, zero if
    /// the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            self.backward_node(node, g, before);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(x, gi)| *x += sign * gi);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi * bi;
                    }
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if rg(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gi / bi;
                    }
                }
                if rg(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for (((x, gi), ai), bi) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *x -= gi * ai / (bi * bi);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    // dA = G · Bᵀ
                    let vb = self.value(*b).data();
                    let ga = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    let va = self.value(*a).data();
                    let gb = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        for p in 0..k {
                            let aip = va[i * k + p];
                            let row = &mut gb[p * n..(p + 1) * n];
                            for (x, gij) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *x += aip * gij;
                            }
                        }
                    }
                }
            }
            Op::Map { input, deriv } => {
                if rg(*input) {
                    let gi = accumulate(&mut grads[input.0], g.len());
                    for ((x, gv), d) in gi.iter_mut().zip(g).zip(deriv) {
                        *x += gv * d;
                    }
                }
            }
            Op::Fused { inputs } => {
                for input in inputs {
                    if !rg(input.var) {
                        continue;
                    }
                    let n = len_of(input.var);
                    let gi = accumulate(&mut grads[input.var.0], n);
                    match &input.partial {
                        Partial::Full(p) => {
                            for ((x, gv), d) in gi.iter_mut().zip(g).zip(p) {
                                *x += gv * d;
                            }
                        }
                        Partial::Element { index, partial } => {
                            gi[*index] += g.iter().zip(partial).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if rg(*x) {
                    let n = len_of(*x);
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        g[0] / n as f64
                    } else {
                        g[0]
                    };
                    accumulate(&mut grads[x.0], n).iter_mut().for_each(|v| *v += scale);
                }
            }
            Op::Broadcast { input, index_map } => {
                if rg(*input) {
                    let gi = accumulate(&mut grads[input.0], len_of(*input));
                    for (gv, &src) in g.iter().zip(index_map) {
                        gi[src] += gv;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for var in inputs {
                    let chunk = self.value(*var).shape()[*axis] * inner;
                    if rg(*var) {
                        let gi = accumulate(&mut grads[var.0], len_of(*var));
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (x, s) in gi[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *x += s;
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    let gi = accumulate(&mut grads[x.0], g.len());
                    gi.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if rg(*logits) {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let gi = accumulate(&mut grads[logits.0], n * c);
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gi[row * c + j] += scale * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Standardize { input, inv_std } => {
                if rg(*input) {
                    let d = node.value.shape()[1];
                    let y = node.value.data();
                    let gi = accumulate(&mut grads[input.0], y.len());
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gi[r * d + j] += inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, geom } => {
                let (oh, ow, k) = (geom.out_h(), geom.out_w(), geom.kernel);
                let (hw, ohw) = (geom.height * geom.width, oh * ow);
                if rg(*input) {
                    let w = self.value(*kernel).data();
                    let gi = accumulate(&mut grads[input.0], len_of(*input));
                    for b in 0..geom.batch {
                        for o in 0..geom.out_channels {
                            let go = &g[(b * geom.out_channels + o) * ohw..][..ohw];
                            for c in 0..geom.in_channels {
                                let ker = &w[(o * geom.in_channels + c) * k * k..][..k * k];
                                let dst = &mut gi[(b * geom.in_channels + c) * hw..][..hw];
                                for i in 0..oh {
                                    for j in 0..ow {
                                        let gv = go[i * ow + j];
                                        for ki in 0..k {
                                            for kj in 0..k {
                                                dst[(i + ki) * geom.width + j + kj] += gv * ker[ki * k + kj];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if rg(*kernel) {
                    let x = self.value(*input).data();
                    let gk = accumulate(&mut grads[kernel.0], len_of(*kernel));
                    for b in 0..geom.batch {
                        for o in 0..geom.out_channels {
                            let go = &g[(b * geom.out_channels + o) * ohw..][..ohw];
                            for c in 0..geom.in_channels {
                                let src = &x[(b * geom.in_channels + c) * hw..][..hw];
                                let dst = &mut gk[(o * geom.in_channels + c) * k * k..][..k * k];
                                for ki in 0..k {
                                    for kj in 0..k {
                                        let mut acc = 0.0;
                                        for i in 0..oh {
                                            for j in 0..ow {
                                                acc += go[i * ow + j] * src[(i + ki) * geom.width + j + kj];
                                            }
                                        }
                                        dst[ki * k + kj] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}
