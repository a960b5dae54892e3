//! Reverse-mode differentiation over a linear tape of coarse tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` simply walks it in reverse.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, ConvGeom, Tensor, NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind<S> {
    /// `(h, w, c_in)` input, `(k, k, c_in, c_out)` kernel, `(c_out)` bias.
    Conv2d,
    Relu,
    Sigmoid,
    /// `x (n, d) · w (d, m) + b (m)`; a 1-D `x` is one row.
    Linear,
    Add,
    Sub,
    Mul,
    Scale(S),
    /// `scale * x + shift`, elementwise.
    Affine { scale: S, shift: S },
    /// Tensor times a one-element tensor.
    MulScalar,
    /// Sum of the trailing-axis rows selected by the mask.
    MaskedSum(Vec<bool>),
    /// Row-wise unit normalization with the [`NORM_EPS`] zero convention.
    L2Normalize,
    Dot,
    Sum,
    /// `a (n, d) · b (m, d)ᵀ`.
    MatMulNT,
    /// Concatenation along the leading axis (1-D inputs stay 1-D).
    Concat,
    /// Stacks equal-length vectors into a matrix.
    StackRows,
    Row(usize),
    Reshape(Vec<usize>),
    /// Mean softmax cross-entropy over the non-ignored rows of `(n, m)` logits.
    SoftmaxCrossEntropy(Vec<Option<usize>>),
}

impl<S> OpKind<S> {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Affine { .. } => "affine",
            OpKind::MulScalar => "mul_scalar",
            OpKind::MaskedSum(_) => "masked_sum",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::Dot => "dot",
            OpKind::Sum => "sum",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::Concat => "concat",
            OpKind::StackRows => "stack_rows",
            OpKind::Row(_) => "row",
            OpKind::Reshape(_) => "reshape",
            OpKind::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
        }
    }
}

#[derive(Debug)]
enum Saved<S> {
    None,
    Norms(Vec<S>),
    Probs { probs: Vec<S>, count: usize },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Option<(OpKind<S>, Vec<Var>)>,
    needs_grad: bool,
    saved: Saved<S>,
}

/// A single-threaded computation record. One training step owns one tape.
#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn data(&self, v: Var) -> &[S] {
        self.get(v).map(|t| t.data()).unwrap_or(&[])
    }

    /// Euclidean norm of the gradient of `v` (0 when absent).
    pub fn norm(&self, v: Var) -> f64 {
        tensor::norm(self.data(v)).f64()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        let needs_grad = t.requires_grad;
        self.push(t, None, needs_grad, Saved::None)
    }

    pub fn constant(&mut self, mut t: Tensor<S>) -> Var {
        t.requires_grad = false;
        self.push(t, None, false, Saved::None)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Option<(OpKind<S>, Vec<Var>)>, needs_grad: bool, saved: Saved<S>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `kind` on `inputs` and records it.
    pub fn apply(&mut self, kind: OpKind<S>, inputs: &[Var]) -> Result<Var> {
        let arity = match &kind {
            OpKind::Conv2d | OpKind::Linear => Some(3),
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::MulScalar | OpKind::Dot | OpKind::MatMulNT => Some(2),
            OpKind::Concat | OpKind::StackRows => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(shape_err!("{} takes {} inputs, got {}", kind.name(), n, inputs.len()))
            }
            None if inputs.is_empty() => return Err(shape_err!("{} needs at least one input", kind.name())),
            _ => {}
        }
        let (value, saved) = self.eval(&kind, inputs)?;
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.0].needs_grad);
        let op = Some((kind, inputs.to_vec()));
        Ok(self.push(value, op, needs_grad, saved))
    }

    fn eval(&self, kind: &OpKind<S>, inputs: &[Var]) -> Result<(Tensor<S>, Saved<S>)> {
        let x = self.value(inputs[0]);
        let same_shape = |b: &Tensor<S>| -> Result<()> {
            if x.shape() != b.shape() {
                Err(shape_err!("{}: shapes {:?} and {:?} differ", kind.name(), x.shape(), b.shape()))
            } else {
                Ok(())
            }
        };
        let map = |f: &dyn Fn(S) -> S| Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect());
        let out = match kind {
            OpKind::Conv2d => {
                let (k, b) = (self.value(inputs[1]), self.value(inputs[2]));
                let g = ConvGeom::infer(x, k, b)?;
                let out = tensor::conv2d_forward(g, x.data(), k.data(), b.data());
                Tensor::new(vec![g.h, g.w, g.c_out], out)?
            }
            OpKind::Relu => map(&|v| if v > S::zero() { v } else { S::zero() })?,
            OpKind::Sigmoid => map(&tensor::sigmoid)?,
            OpKind::Scale(c) => map(&|v| v * *c)?,
            OpKind::Affine { scale, shift } => map(&|v| v * *scale + *shift)?,
            OpKind::Linear => {
                let (w, b) = (self.value(inputs[1]), self.value(inputs[2]));
                let (n, d) = (x.rows(), x.cols());
                if w.shape().len() != 2 || w.shape()[0] != d || b.shape() != [w.shape()[1]] {
                    return Err(shape_err!(
                        "linear: x {:?}, w {:?}, b {:?} do not conform",
                        x.shape(),
                        w.shape(),
                        b.shape()
                    ));
                }
                let m = w.shape()[1];
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let xr = x.row(i);
                    let mut row = b.data().to_vec();
                    for (kk, &xv) in xr.iter().enumerate() {
                        for (acc, &wv) in row.iter_mut().zip(w.row(kk)) {
                            *acc += xv * wv;
                        }
                    }
                    out.extend(row);
                }
                let shape = if x.shape().len() == 1 { vec![m] } else { vec![n, m] };
                Tensor::new(shape, out)?
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let b = self.value(inputs[1]);
                same_shape(b)?;
                let f = |a: S, c: S| match kind {
                    OpKind::Add => a + c,
                    OpKind::Sub => a - c,
                    _ => a * c,
                };
                Tensor::new(
                    x.shape().to_vec(),
                    x.data().iter().zip(b.data()).map(|(&a, &c)| f(a, c)).collect(),
                )?
            }
            OpKind::MulScalar => {
                let s = self.value(inputs[1]);
                if !s.is_scalar() {
                    return Err(shape_err!("mul_scalar: factor has shape {:?}", s.shape()));
                }
                let s = s.item();
                map(&|v| v * s)?
            }
            OpKind::MaskedSum(mask) => {
                let c = x.cols();
                if x.shape().len() < 2 || mask.len() != x.rows() {
                    return Err(shape_err!(
                        "masked_sum: mask of {} pixels for input {:?}",
                        mask.len(),
                        x.shape()
                    ));
                }
                let mut out = vec![S::zero(); c];
                for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (acc, &v) in out.iter_mut().zip(x.row(p)) {
                        *acc += v;
                    }
                }
                Tensor::vector(out)
            }
            OpKind::L2Normalize => {
                let (n, c) = (x.rows(), x.cols());
                let mut out = Vec::with_capacity(x.len());
                let mut norms = Vec::with_capacity(n);
                for i in 0..n {
                    let r = x.row(i);
                    norms.push(tensor::norm(r));
                    out.extend(tensor::l2_normalize(r));
                }
                debug_assert_eq!(out.len(), n * c);
                return Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::Norms(norms)));
            }
            OpKind::Dot => {
                let b = self.value(inputs[1]);
                if x.shape().len() != 1 {
                    return Err(shape_err!("dot: expected vectors, got {:?}", x.shape()));
                }
                same_shape(b)?;
                Tensor::scalar(tensor::dot(x.data(), b.data()))
            }
            OpKind::Sum => {
                let mut s = S::zero();
                for &v in x.data() {
                    s += v;
                }
                Tensor::scalar(s)
            }
            OpKind::MatMulNT => {
                let b = self.value(inputs[1]);
                if x.shape().len() != 2 || b.shape().len() != 2 || x.cols() != b.cols() {
                    return Err(shape_err!("matmul_nt: {:?} x {:?}ᵀ", x.shape(), b.shape()));
                }
                let (n, m) = (x.rows(), b.rows());
                let mut out = Vec::with_capacity(n * m);
                for i in 0..n {
                    let a = x.row(i);
                    for j in 0..m {
                        out.push(tensor::dot(a, b.row(j)));
                    }
                }
                Tensor::new(vec![n, m], out)?
            }
            OpKind::Concat => {
                let tail = &x.shape()[1..];
                let mut lead = 0;
                let mut out = Vec::new();
                for &v in inputs {
                    let t = self.value(v);
                    if t.shape().is_empty() || &t.shape()[1..] != tail {
                        return Err(shape_err!("concat: {:?} does not match trailing {:?}", t.shape(), tail));
                    }
                    lead += t.shape()[0];
                    out.extend_from_slice(t.data());
                }
                let mut shape = vec![lead];
                shape.extend_from_slice(tail);
                Tensor::new(shape, out)?
            }
            OpKind::StackRows => {
                let c = x.len();
                let mut out = Vec::with_capacity(c * inputs.len());
                for &v in inputs {
                    let t = self.value(v);
                    if t.shape() != [c] {
                        return Err(shape_err!("stack_rows: expected ({}), got {:?}", c, t.shape()));
                    }
                    out.extend_from_slice(t.data());
                }
                Tensor::new(vec![inputs.len(), c], out)?
            }
            OpKind::Row(i) => {
                if x.shape().len() != 2 || *i >= x.rows() {
                    return Err(shape_err!("row {} of {:?}", i, x.shape()));
                }
                Tensor::vector(x.row(*i).to_vec())
            }
            OpKind::Reshape(shape) => x.clone().reshaped(shape.clone()).map(|mut t| {
                t.requires_grad = false;
                t.grad = None;
                t
            })?,
            OpKind::SoftmaxCrossEntropy(targets) => {
                let (n, m) = (x.rows(), x.cols());
                if x.shape().len() != 2 || targets.len() != n {
                    return Err(shape_err!(
                        "softmax_cross_entropy: {} targets for logits {:?}",
                        targets.len(),
                        x.shape()
                    ));
                }
                let mut probs = vec![S::zero(); n * m];
                let mut total = S::zero();
                let mut count = 0usize;
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    if t >= m {
                        return Err(shape_err!("softmax_cross_entropy: target {} with {} classes", t, m));
                    }
                    let z = x.row(i);
                    let zmax = z.iter().copied().fold(S::neg_infinity(), S::max);
                    let p = &mut probs[i * m..(i + 1) * m];
                    let mut denom = S::zero();
                    for (pv, &zv) in p.iter_mut().zip(z) {
                        *pv = (zv - zmax).exp();
                        denom += *pv;
                    }
                    for pv in p.iter_mut() {
                        *pv /= denom;
                    }
                    total += denom.ln() + zmax - z[t];
                    count += 1;
                }
                if count == 0 {
                    return Err(Error::DegenerateBatch("every pixel carries the ignore label".into()));
                }
                let loss = total / S::of(count as f64);
                return Ok((Tensor::scalar(loss), Saved::Probs { probs, count }));
            }
        };
        Ok((out, Saved::None))
    }

    /// Propagates d`loss` back to every leaf that requires a gradient.
    /// Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some((kind, inputs)) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(kind, inputs, node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                if n.op.is_none() && n.needs_grad {
                    let data = g.unwrap_or_else(|| vec![S::zero(); n.value.len()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("gradient matches leaf"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop(&self, kind: &OpKind<S>, inputs: &[Var], node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        fn slot<'a, S: Scalar>(grads: &'a mut [Option<Vec<S>>], v: Var, len: usize) -> &'a mut Vec<S> {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); len])
        }
        let x = inputs[0];
        let xv = val(x);
        match kind {
            OpKind::Conv2d => {
                let (k, b) = (inputs[1], inputs[2]);
                let geom = ConvGeom::infer(xv, val(k), val(b)).expect("validated in forward");
                let mut di = wants(x).then(|| slot(grads, x, xv.len()).clone());
                let mut dk = wants(k).then(|| slot(grads, k, val(k).len()).clone());
                let mut db = wants(b).then(|| slot(grads, b, val(b).len()).clone());
                tensor::conv2d_backward(
                    geom,
                    xv.data(),
                    val(k).data(),
                    g,
                    di.as_deref_mut(),
                    dk.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, d) in [(x, di), (k, dk), (b, db)] {
                    if let Some(d) = d {
                        grads[v.0] = Some(d);
                    }
                }
            }
            OpKind::Relu => {
                let d = slot(grads, x, xv.len());
                for ((acc, &gv), &xi) in d.iter_mut().zip(g).zip(xv.data()) {
                    if xi > S::zero() {
                        *acc += gv;
                    }
                }
            }
            OpKind::Sigmoid => {
                let d = slot(grads, x, xv.len());
                for ((acc, &gv), &y) in d.iter_mut().zip(g).zip(node.value.data()) {
                    *acc += gv * y * (S::one() - y);
                }
            }
            OpKind::Scale(c) => {
                let d = slot(grads, x, xv.len());
                for (acc, &gv) in d.iter_mut().zip(g) {
                    *acc += gv * *c;
                }
            }
            OpKind::Affine { scale, .. } => {
                let d = slot(grads, x, xv.len());
                for (acc, &gv) in d.iter_mut().zip(g) {
                    *acc += gv * *scale;
                }
            }
            OpKind::Linear => {
                let (w, b) = (inputs[1], inputs[2]);
                let wv = val(w);
                let (n, d, m) = (xv.rows(), xv.cols(), wv.shape()[1]);
                if wants(x) {
                    let dx = slot(grads, x, n * d);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for kk in 0..d {
                            dx[i * d + kk] += tensor::dot(gr, wv.row(kk));
                        }
                    }
                }
                if wants(w) {
                    let dw = slot(grads, w, d * m);
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for (kk, &xval) in xv.row(i).iter().enumerate() {
                            for (acc, &gv) in dw[kk * m..(kk + 1) * m].iter_mut().zip(gr) {
                                *acc += xval * gv;
                            }
                        }
                    }
                }
                if wants(b) {
                    let db = slot(grads, b, m);
                    for i in 0..n {
                        for (acc, &gv) in db.iter_mut().zip(&g[i * m..(i + 1) * m]) {
                            *acc += gv;
                        }
                    }
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let y = inputs[1];
                let yv = val(y);
                if wants(x) {
                    let d = slot(grads, x, xv.len());
                    for (i, acc) in d.iter_mut().enumerate() {
                        *acc += match kind {
                            OpKind::Mul => g[i] * yv.data()[i],
                            _ => g[i],
                        };
                    }
                }
                if wants(y) {
                    let d = slot(grads, y, yv.len());
                    for (i, acc) in d.iter_mut().enumerate() {
                        match kind {
                            OpKind::Add => *acc += g[i],
                            OpKind::Sub => *acc -= g[i],
                            _ => *acc += g[i] * xv.data()[i],
                        }
                    }
                }
            }
            OpKind::MulScalar => {
                let s = inputs[1];
                let sv = val(s).item();
                if wants(x) {
                    let d = slot(grads, x, xv.len());
                    for (acc, &gv) in d.iter_mut().zip(g) {
                        *acc += gv * sv;
                    }
                }
                if wants(s) {
                    let ds = tensor::dot(g, xv.data());
                    slot(grads, s, 1)[0] += ds;
                }
            }
            OpKind::MaskedSum(mask) => {
                let c = xv.cols();
                let d = slot(grads, x, xv.len());
                for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for (acc, &gv) in d[p * c..(p + 1) * c].iter_mut().zip(g) {
                        *acc += gv;
                    }
                }
            }
            OpKind::L2Normalize => {
                let Saved::Norms(norms) = &node.saved else { unreachable!() };
                let c = xv.cols();
                let d = slot(grads, x, xv.len());
                for (i, &n) in norms.iter().enumerate() {
                    if n <= S::of(NORM_EPS) {
                        continue;
                    }
                    let y = node.value.row(i);
                    let gr = &g[i * c..(i + 1) * c];
                    let proj = tensor::dot(y, gr);
                    for kk in 0..c {
                        d[i * c + kk] += (gr[kk] - y[kk] * proj) / n;
                    }
                }
            }
            OpKind::Dot => {
                let y = inputs[1];
                let yv = val(y);
                let gs = g[0];
                if wants(x) {
                    let d = slot(grads, x, xv.len());
                    for (acc, &v) in d.iter_mut().zip(yv.data()) {
                        *acc += gs * v;
                    }
                }
                if wants(y) {
                    let d = slot(grads, y, yv.len());
                    for (acc, &v) in d.iter_mut().zip(xv.data()) {
                        *acc += gs * v;
                    }
                }
            }
            OpKind::Sum => {
                let d = slot(grads, x, xv.len());
                for acc in d.iter_mut() {
                    *acc += g[0];
                }
            }
            OpKind::MatMulNT => {
                let y = inputs[1];
                let yv = val(y);
                let (n, m, dd) = (xv.rows(), yv.rows(), xv.cols());
                if wants(x) {
                    let da = slot(grads, x, n * dd);
                    for i in 0..n {
                        let dr = &mut da[i * dd..(i + 1) * dd];
                        for j in 0..m {
                            let gv = g[i * m + j];
                            for (acc, &bv) in dr.iter_mut().zip(yv.row(j)) {
                                *acc += gv * bv;
                            }
                        }
                    }
                }
                if wants(y) {
                    let db = slot(grads, y, m * dd);
                    for i in 0..n {
                        let ar = xv.row(i);
                        for j in 0..m {
                            let gv = g[i * m + j];
                            for (acc, &av) in db[j * dd..(j + 1) * dd].iter_mut().zip(ar) {
                                *acc += gv * av;
                            }
                        }
                    }
                }
            }
            OpKind::Concat | OpKind::StackRows => {
                let mut off = 0;
                for &v in inputs {
                    let len = val(v).len();
                    if wants(v) {
                        let d = slot(grads, v, len);
                        for (acc, &gv) in d.iter_mut().zip(&g[off..off + len]) {
                            *acc += gv;
                        }
                    }
                    off += len;
                }
            }
            OpKind::Row(i) => {
                let c = xv.cols();
                let d = slot(grads, x, xv.len());
                for (acc, &gv) in d[i * c..(i + 1) * c].iter_mut().zip(g) {
                    *acc += gv;
                }
            }
            OpKind::Reshape(_) => {
                let d = slot(grads, x, xv.len());
                for (acc, &gv) in d.iter_mut().zip(g) {
                    *acc += gv;
                }
            }
            OpKind::SoftmaxCrossEntropy(targets) => {
                let Saved::Probs { probs, count } = &node.saved else { unreachable!() };
                let m = xv.cols();
                let scale = g[0] / S::of(*count as f64);
                let d = slot(grads, x, xv.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..m {
                        let onehot = if j == t { S::one() } else { S::zero() };
                        d[i * m + j] += (probs[i * m + j] - onehot) * scale;
                    }
                }
            }
        }
    }

    // Named conveniences over `apply`.

    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::Conv2d, &[x, kernel, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Linear, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn affine(&mut self, a: Var, scale: S, shift: S) -> Result<Var> {
        self.apply(OpKind::Affine { scale, shift }, &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.apply(OpKind::MulScalar, &[a, s])
    }

    pub fn masked_sum(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        self.apply(OpKind::MaskedSum(mask), &[x])
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.apply(OpKind::L2Normalize, &[x])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMulNT, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        self.apply(OpKind::StackRows, rows)
    }

    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        self.apply(OpKind::Row(i), &[m])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(OpKind::Reshape(shape), &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        self.apply(OpKind::SoftmaxCrossEntropy(targets), &[logits])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_forward() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn normalize_forward() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = t.l2_normalize(x).unwrap();
        let v = t.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.data(x), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::scalar(0.0).with_grad());
        let y = t.sigmoid(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.data(x), &[0.25]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(t.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_scalar_oracle() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap());
        let l = t.softmax_cross_entropy(z, vec![Some(0)]).unwrap();
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((t.value(l).item() - want).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_all_ignored_is_degenerate() {
        let mut t = Tape::<f64>::new();
        let z = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(
            t.softmax_cross_entropy(z, vec![None, None]),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn wrong_arity_and_shapes_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(t.add(a, b).is_err());
        assert!(t.apply(OpKind::Add, &[a]).is_err());
        assert!(t.masked_sum(a, vec![true]).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let b = t.leaf(Tensor::vector(vec![3.0]).with_grad());
        let l = t.sum(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.data(b), &[0.0]);
    }
}
