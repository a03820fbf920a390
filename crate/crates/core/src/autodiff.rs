//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node whose inputs
//! precede it, so node order is already a topological order and the
//! backward pass is a single reverse sweep. Reductions sum in index
//! order, which makes repeated forward/backward passes bit-exact.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Op {
    Constant,
    Parameter,
    Affine,
    Relu,
    Conv2d { stride: usize, padding: usize },
    Reshape,
    CrossEntropy { labels: Vec<usize> },
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Parameter,
    Affine,
    Relu,
    Conv2d,
    Reshape,
    CrossEntropy,
    Mse,
}

#[derive(Debug)]
struct Node<T> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    // softmax probabilities kept from the cross-entropy forward pass
    cache: Option<Vec<T>>,
}

#[derive(Debug)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor<T>, cache: Option<Vec<T>>) -> Var {
        let requires_grad = match op {
            Op::Constant => false,
            Op::Parameter => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            cache,
        });
        Var(self.nodes.len() - 1)
    }

    /// Data leaf; no gradient is ever propagated into it.
    pub fn constant(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(Op::Constant, Vec::new(), value, None)
    }

    /// Trainable leaf; its gradient slot is filled by [`Graph::backward`].
    pub fn parameter(&mut self, mut value: Tensor<T>) -> Var {
        value.clear_grad();
        self.push(Op::Parameter, Vec::new(), value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match self.nodes[v.0].op {
            Op::Constant => OpKind::Constant,
            Op::Parameter => OpKind::Parameter,
            Op::Affine => OpKind::Affine,
            Op::Relu => OpKind::Relu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Reshape => OpKind::Reshape,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse => OpKind::Mse,
        }
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// `x[B,I] · w[I,O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let (rows, inner, outs) = match (xs.as_slice(), ws.as_slice()) {
            ([r, i], [wi, o]) if i == wi => (*r, *i, *o),
            _ => {
                return Err(Error::Dimension {
                    op: "affine",
                    left: xs,
                    right: ws,
                })
            }
        };
        if bs != [outs] {
            return Err(Error::Dimension {
                op: "affine bias",
                left: ws,
                right: bs,
            });
        }
        let out = affine_forward(
            self.value(x).values(),
            self.value(w).values(),
            self.value(b).values(),
            rows,
            inner,
            outs,
        );
        let value = Tensor::new(vec![rows, outs], out)?;
        Ok(self.push(Op::Affine, vec![x, w, b], value, None))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv
            .values()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape as input");
        self.push(Op::Relu, vec![x], value, None)
    }

    /// 2-D convolution over `x[B,C,H,W]` with `w[O,C,K,K]` and `b[O]`,
    /// zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws, bs) = (
            self.value(x).shape().to_vec(),
            self.value(w).shape().to_vec(),
            self.value(b).shape().to_vec(),
        );
        let geom = ConvGeometry::new(&xs, &ws, stride, padding)?;
        if bs != [geom.out_ch] {
            return Err(Error::Dimension {
                op: "conv2d bias",
                left: ws,
                right: bs,
            });
        }
        let out = conv_forward(
            &geom,
            self.value(x).values(),
            self.value(w).values(),
            self.value(b).values(),
        );
        let value = Tensor::new(
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            out,
        )?;
        Ok(self.push(Op::Conv2d { stride, padding }, vec![x, w, b], value, None))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], value, None))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Mean softmax cross-entropy of `logits[B,C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = lv.as_matrix()?;
        if labels.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy labels",
                left: vec![rows, classes],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::validation(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv.values()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &z) in probs[r * classes..].iter_mut().zip(row) {
                *p = (z - max).exp();
                denom = denom + *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p = *p / denom;
            }
            total = total + (max + denom.ln() - row[label]);
        }
        let value = Tensor::scalar(total / T::from_f64(rows as f64));
        Ok(self.push(
            Op::CrossEntropy {
                labels: labels.to_vec(),
            },
            vec![logits],
            value,
            Some(probs),
        ))
    }

    /// Mean squared error; `target` is treated as a constant.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::Dimension {
                op: "mse",
                left: p.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        let sum = p
            .values()
            .iter()
            .zip(t.values())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let value = Tensor::scalar(sum / T::from_f64(p.len() as f64));
        Ok(self.push(Op::Mse, vec![pred, target], value, None))
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient slot of
    /// every parameter leaf that the loss depends on. Parameters the
    /// loss does not reach get an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Parameter => leaf_grads.push((id, g)),
                Op::Affine => {
                    let [x, w, _b] = [node.inputs[0], node.inputs[1], node.inputs[2]];
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (rows, inner) = (xv.shape()[0], xv.shape()[1]);
                    let outs = wv.shape()[1];
                    let (dx, dw, db) =
                        affine_backward(xv.values(), wv.values(), &g, rows, inner, outs);
                    let b = node.inputs[2];
                    self.accumulate(&mut grads, x, dx);
                    self.accumulate(&mut grads, w, dw);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Relu => {
                    let x = node.inputs[0];
                    let dx = self.nodes[x.0]
                        .value
                        .values()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, x, dx);
                }
                Op::Conv2d { stride, padding } => {
                    let [x, w, b] = [node.inputs[0], node.inputs[1], node.inputs[2]];
                    let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let geom = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *padding)?;
                    let (dx, dw, db) = conv_backward(&geom, xv.values(), wv.values(), &g);
                    self.accumulate(&mut grads, x, dx);
                    self.accumulate(&mut grads, w, dw);
                    self.accumulate(&mut grads, b, db);
                }
                Op::Reshape => {
                    let x = node.inputs[0];
                    self.accumulate(&mut grads, x, g);
                }
                Op::CrossEntropy { labels } => {
                    let logits = node.inputs[0];
                    let probs = node.cache.as_ref().expect("softmax cache");
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = g[0] / T::from_f64(rows as f64);
                    let mut dz = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        dz[r * classes + label] = dz[r * classes + label] - T::one();
                    }
                    for v in &mut dz {
                        *v = *v * scale;
                    }
                    self.accumulate(&mut grads, logits, dz);
                }
                Op::Mse => {
                    let (pred, target) = (node.inputs[0], node.inputs[1]);
                    let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
                    let scale = g[0] * T::from_f64(2.0 / p.len() as f64);
                    let dp = p
                        .values()
                        .iter()
                        .zip(t.values())
                        .map(|(&a, &b)| (a - b) * scale)
                        .collect();
                    self.accumulate(&mut grads, pred, dp);
                }
            }
        }

        for node in self.nodes.iter_mut().filter(|n| n.op == Op::Parameter) {
            node.value.clear_grad();
        }
        for (id, g) in leaf_grads {
            self.nodes[id].value.set_grad(g)?;
        }
        for node in self.nodes.iter_mut().filter(|n| n.op == Op::Parameter) {
            if node.value.grad().is_none() {
                let zeros = vec![T::zero(); node.value.len()];
                node.value.set_grad(zeros)?;
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], target: Var, contribution: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }
}

fn affine_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    rows: usize,
    inner: usize,
    outs: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * outs];
    for r in 0..rows {
        let acc = &mut out[r * outs..(r + 1) * outs];
        for k in 0..inner {
            let xv = x[r * inner + k];
            let wrow = &w[k * outs..(k + 1) * outs];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a = *a + xv * wv;
            }
        }
        for (a, &bv) in acc.iter_mut().zip(b) {
            *a = *a + bv;
        }
    }
    out
}

fn affine_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    g: &[T],
    rows: usize,
    inner: usize,
    outs: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * inner];
    let mut dw = vec![T::zero(); inner * outs];
    let mut db = vec![T::zero(); outs];
    for r in 0..rows {
        let grow = &g[r * outs..(r + 1) * outs];
        for k in 0..inner {
            let wrow = &w[k * outs..(k + 1) * outs];
            dx[r * inner + k] = grow
                .iter()
                .zip(wrow)
                .fold(T::zero(), |acc, (&gv, &wv)| acc + gv * wv);
            let xv = x[r * inner + k];
            for (d, &gv) in dw[k * outs..(k + 1) * outs].iter_mut().zip(grow) {
                *d = *d + xv * gv;
            }
        }
        for (d, &gv) in db.iter_mut().zip(grow) {
            *d = *d + gv;
        }
    }
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(xs: &[usize], ws: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch = || Error::Dimension {
            op: "conv2d",
            left: xs.to_vec(),
            right: ws.to_vec(),
        };
        let (&[batch, in_ch, in_h, in_w], &[out_ch, w_in, kh, kw]) = (xs, ws) else {
            return Err(mismatch());
        };
        if w_in != in_ch || kh != kw || stride == 0 {
            return Err(mismatch());
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(mismatch());
        }
        Ok(Self {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kernel: kh,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Input coordinate for output position `o` and kernel offset `k`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        (o * self.stride + k)
            .checked_sub(self.padding)
            .filter(|&i| i < extent)
    }
}

fn conv_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let k = geo.kernel;
    let mut out = vec![T::zero(); geo.batch * geo.out_ch * geo.out_h * geo.out_w];
    for n in 0..geo.batch {
        for o in 0..geo.out_ch {
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let mut acc = T::zero();
                    for c in 0..geo.in_ch {
                        for ky in 0..k {
                            let Some(iy) = geo.source(oy, ky, geo.in_h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.source(ox, kx, geo.in_w) else { continue };
                                let xv = x[((n * geo.in_ch + c) * geo.in_h + iy) * geo.in_w + ix];
                                let wv = w[((o * geo.in_ch + c) * k + ky) * k + kx];
                                acc = acc + xv * wv;
                            }
                        }
                    }
                    out[((n * geo.out_ch + o) * geo.out_h + oy) * geo.out_w + ox] = acc + b[o];
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(
    geo: &ConvGeometry,
    x: &[T],
    w: &[T],
    g: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let k = geo.kernel;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); geo.out_ch];
    for n in 0..geo.batch {
        for o in 0..geo.out_ch {
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let gv = g[((n * geo.out_ch + o) * geo.out_h + oy) * geo.out_w + ox];
                    db[o] = db[o] + gv;
                    for c in 0..geo.in_ch {
                        for ky in 0..k {
                            let Some(iy) = geo.source(oy, ky, geo.in_h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.source(ox, kx, geo.in_w) else { continue };
                                let xi = ((n * geo.in_ch + c) * geo.in_h + iy) * geo.in_w + ix;
                                let wi = ((o * geo.in_ch + c) * k + ky) * k + kx;
                                dx[xi] = dx[xi] + gv * w[wi];
                                dw[wi] = dw[wi] + gv * x[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
