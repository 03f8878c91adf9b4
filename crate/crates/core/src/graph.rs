//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value; `backward`
//! walks the tape in reverse. Nodes are never mutated after creation, so a
//! graph doubles as the record of an autoregressive run.

use crate::conv;
use crate::error::{Result, VleError};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// (B,C,H,W) ⊙ (B,1,H,W), mask broadcast across channels.
    MulMask(Var, Var),
    Scale(Var, f64),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Silu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Concat(Vec<Var>),
    Narrow { input: Var, start: usize, len: usize },
    MeanSquarePerSample(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Same value, cut from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.derived(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.derived(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.derived(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiply an image-shaped tensor by a single-channel mask.
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        self.value(mask).expect_shape(&[b, 1, h, w])?;
        let plane = h * w;
        let xs = self.value(x).data();
        let ms = self.value(mask).data();
        let mut out = Vec::with_capacity(xs.len());
        for n in 0..b {
            let m = &ms[n * plane..(n + 1) * plane];
            for ch in 0..c {
                let off = (n * c + ch) * plane;
                out.extend(xs[off..off + plane].iter().zip(m).map(|(&a, &s)| a * s));
            }
        }
        let value = Tensor::from_vec(&[b, c, h, w], out)?;
        Ok(self.derived(value, Op::MulMask(x, mask), &[x, mask]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::lit(factor);
        let value = self.value(a).map(|x| x * f);
        self.derived(value, Op::Scale(a, factor), &[a])
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.derived(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            &inputs,
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); b * c * h2 * w2];
        for p in 0..b * c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(p * h2 + y) * w2 + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_vec(&[b, c, h2, w2], out)?;
        Ok(self.derived(value, Op::Upsample2x(x), &[x]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.derived(value, Op::Silu(x), &[x])
    }

    /// `max(x, slope·x)`; positively homogeneous, so bias-free stacks commute with scaling.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let value = self.value(x).map(|v| if v > T::zero() { v } else { s * v });
        self.derived(value, Op::LeakyRelu(x, slope), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.derived(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.derived(value, Op::Tanh(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.derived(value, Op::Exp(x), &[x])
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| VleError::contract("concat of zero tensors"))?;
        let (b, _, h, w) = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let (b2, c2, h2, w2) = self.value(p).dims4()?;
            if (b2, h2, w2) != (b, h, w) {
                return Err(VleError::shape(&[b, c2, h, w], self.shape(p)));
            }
            total_c += c2;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total_c * plane);
        for n in 0..b {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[b, total_c, h, w], out)?;
        Ok(self.derived(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Channels `start..start + len` of a rank-4 tensor.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if start + len > c || len == 0 {
            return Err(VleError::contract(format!(
                "channel slice {start}..{} outside 0..{c}",
                start + len
            )));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for n in 0..b {
            let off = (n * c + start) * plane;
            out.extend_from_slice(&src[off..off + len * plane]);
        }
        let value = Tensor::from_vec(&[b, len, h, w], out)?;
        Ok(self.derived(value, Op::Narrow { input: x, start, len }, &[x]))
    }

    /// Per-sample mean of squares over all non-batch axes; output shape `[B]`.
    pub fn mean_square_per_sample(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let b = *t
            .shape()
            .first()
            .ok_or_else(|| VleError::contract("mean_square_per_sample on a scalar"))?;
        if b == 0 || t.is_empty() {
            return Err(VleError::contract("mean_square_per_sample on an empty tensor"));
        }
        let per = t.len() / b;
        let d = T::lit(per as f64);
        let out: Vec<T> = t
            .data()
            .chunks(per)
            .map(|row| row.iter().map(|&v| v * v).sum::<T>() / d)
            .collect();
        let value = Tensor::from_vec(&[b], out)?;
        Ok(self.derived(value, Op::MeanSquarePerSample(x), &[x]))
    }

    /// Mean over all elements; rank-0 output.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(VleError::contract("mean of an empty tensor"));
        }
        let n = T::lit(t.len() as f64);
        let value = Tensor::scalar(t.data().iter().copied().sum::<T>() / n);
        Ok(self.derived(value, Op::Mean(x), &[x]))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(VleError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.map(|g| -g));
            }
            Op::Mul(a, b) => {
                if self.requires_grad(b) {
                    let gb = dy.zip_map(self.value(a), |g, x| g * x)?;
                    self.accumulate(grads, b, gb);
                }
                if self.requires_grad(a) {
                    let ga = dy.zip_map(self.value(b), |g, x| g * x)?;
                    self.accumulate(grads, a, ga);
                }
            }
            Op::MulMask(x, mask) => {
                let (b, c, h, w) = dy.dims4()?;
                let plane = h * w;
                let xs = self.value(x).data();
                let ms = self.value(mask).data();
                if self.requires_grad(x) {
                    let mut gx = Vec::with_capacity(dy.len());
                    for n in 0..b {
                        let m = &ms[n * plane..(n + 1) * plane];
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            gx.extend(dy.data()[off..off + plane].iter().zip(m).map(|(&g, &s)| g * s));
                        }
                    }
                    self.accumulate(grads, x, Tensor::from_vec(dy.shape(), gx)?);
                }
                if self.requires_grad(mask) {
                    let mut gm = vec![T::zero(); b * plane];
                    for n in 0..b {
                        let dst = &mut gm[n * plane..(n + 1) * plane];
                        for ch in 0..c {
                            let off = (n * c + ch) * plane;
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d += dy.data()[off + i] * xs[off + i];
                            }
                        }
                    }
                    self.accumulate(grads, mask, Tensor::from_vec(&[b, 1, h, w], gm)?);
                }
            }
            Op::Scale(a, factor) => {
                let f = T::lit(factor);
                self.accumulate(grads, a, dy.map(|g| g * f));
            }
            Op::Conv {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let cg = conv::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    dy,
                    stride,
                    pad,
                    self.requires_grad(input),
                    self.requires_grad(weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                )?;
                if let Some(g) = cg.input {
                    self.accumulate(grads, input, g);
                }
                if let Some(g) = cg.weight {
                    self.accumulate(grads, weight, g);
                }
                if let (Some(b), Some(g)) = (bias, cg.bias) {
                    self.accumulate(grads, b, g);
                }
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.value(x).dims4()?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); b * c * h * w];
                for p in 0..b * c {
                    for yy in 0..h2 {
                        for xx in 0..w2 {
                            gx[(p * h + yy / 2) * w + xx / 2] += dy.data()[(p * h2 + yy) * w2 + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(&[b, c, h, w], gx)?);
            }
            Op::Silu(x) => {
                let gx = dy.zip_map(self.value(x), |g, v| {
                    let s = T::one() / (T::one() + (-v).exp());
                    g * s * (T::one() + v * (T::one() - s))
                })?;
                self.accumulate(grads, x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = T::lit(slope);
                let gx = dy.zip_map(self.value(x), |g, v| if v > T::zero() { g } else { s * g })?;
                self.accumulate(grads, x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = dy.zip_map(y, |g, s| g * s * (T::one() - s))?;
                self.accumulate(grads, x, gx);
            }
            Op::Tanh(x) => {
                let gx = dy.zip_map(y, |g, t| g * (T::one() - t * t))?;
                self.accumulate(grads, x, gx);
            }
            Op::Exp(x) => {
                let gx = dy.zip_map(y, |g, e| g * e)?;
                self.accumulate(grads, x, gx);
            }
            Op::Concat(ref parts) => {
                let (b, total_c, h, w) = dy.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(b * c * plane);
                        for n in 0..b {
                            let off = (n * total_c + offset) * plane;
                            gp.extend_from_slice(&dy.data()[off..off + c * plane]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(&[b, c, h, w], gp)?);
                    }
                    offset += c;
                }
            }
            Op::Narrow { input, start, len } => {
                let (b, c, h, w) = self.value(input).dims4()?;
                let plane = h * w;
                let mut gx = Tensor::zeros(&[b, c, h, w]);
                for n in 0..b {
                    let dst = (n * c + start) * plane;
                    let src = n * len * plane;
                    gx.data_mut()[dst..dst + len * plane]
                        .copy_from_slice(&dy.data()[src..src + len * plane]);
                }
                self.accumulate(grads, input, gx);
            }
            Op::MeanSquarePerSample(x) => {
                let xv = self.value(x);
                let b = dy.len();
                let per = xv.len() / b;
                let two_over_d = T::lit(2.0 / per as f64);
                let mut gx = Vec::with_capacity(xv.len());
                for (n, row) in xv.data().chunks(per).enumerate() {
                    let g = dy.data()[n] * two_over_d;
                    gx.extend(row.iter().map(|&v| g * v));
                }
                self.accumulate(grads, x, Tensor::from_vec(xv.shape(), gx)?);
            }
            Op::Mean(x) => {
                let xv = self.value(x);
                let g = dy.item() / T::lit(xv.len() as f64);
                self.accumulate(grads, x, Tensor::full(xv.shape(), g));
            }
        }
        Ok(())
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences on every element of every leaf, in f64.
    fn check(build: impl Fn(&mut Graph<f64>, &[Var]) -> Var, leaves: Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().cloned().map(|t| g.param(t)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let eps = 1e-6;
        for (li, leaf) in leaves.iter().enumerate() {
            for i in 0..leaf.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let vars: Vec<Var> = leaves
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == li {
                                t.data_mut()[i] += delta;
                            }
                            g.param(t)
                        })
                        .collect();
                    let l = build(&mut g, &vars);
                    g.value(l).item()
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let analytic = grads.get(vars[li]).map_or(0.0, |t| t.data()[i]);
                let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
                assert!(err < 1e-6, "leaf {li} elem {i}: analytic {analytic} numeric {numeric}");
            }
        }
    }

    fn rand_tensor(shape: &[usize], seed: usize) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| (((i + 1) * (seed * 7919 + 13)) as f64 * 0.618).sin())
    }

    #[test]
    fn elementwise_ops_gradients() {
        check(
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let s = g.sub(a, v[2]).unwrap();
                let m = g.mul(s, v[0]).unwrap();
                let t = g.tanh(m);
                let si = g.silu(t);
                let lr = g.leaky_relu(si, 0.2);
                let sg = g.sigmoid(lr);
                let e = g.exp(sg);
                let sc = g.scale(e, -0.7);
                g.mean(sc).unwrap()
            },
            vec![rand_tensor(&[2, 3], 1), rand_tensor(&[2, 3], 2), rand_tensor(&[2, 3], 3)],
        );
    }

    #[test]
    fn structural_ops_gradients() {
        check(
            |g, v| {
                let masked = g.mul_mask(v[0], v[1]).unwrap();
                let cat = g.concat_channels(&[masked, v[1]]).unwrap();
                let up = g.upsample2x(cat).unwrap();
                let part = g.narrow_channels(up, 1, 2).unwrap();
                let ms = g.mean_square_per_sample(part).unwrap();
                g.mean(ms).unwrap()
            },
            vec![rand_tensor(&[2, 2, 3, 3], 4), rand_tensor(&[2, 1, 3, 3], 5)],
        );
    }

    #[test]
    fn conv_gradients() {
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
                let y = g.silu(y);
                let ms = g.mean_square_per_sample(y).unwrap();
                g.mean(ms).unwrap()
            },
            vec![rand_tensor(&[2, 2, 4, 4], 6), rand_tensor(&[3, 2, 3, 3], 7), rand_tensor(&[3], 8)],
        );
    }

    #[test]
    fn leaky_relu_commutes_with_positive_scaling() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[2, 5], 9));
        let sx = g.scale(x, 4.0);
        let a = g.leaky_relu(sx, 0.2);
        let b = g.leaky_relu(x, 0.2);
        let b = g.scale(b, 4.0);
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn detached_and_constant_nodes_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let d = g.detach(x);
        let y = g.mul(d, c).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 1.0);
        assert!(grads.get(c).is_none());
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
