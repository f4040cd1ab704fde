//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every operation appends a node holding its output value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are only ever
//! appended, so the record is already in topological order and backward
//! is a single reverse sweep.

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::tensor::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance guard added to the sums of squares in the Pearson loss.
pub const PEARSON_EPS: f64 = 1e-12;
/// Probability floor applied before taking logs in the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geometry: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Tanh(Var),
    ScaleShift {
        input: Var,
        scale: T,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Nll {
        log_probs: Var,
        labels: Vec<usize>,
    },
    Pearson {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The operation record.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("expected a 2-D tensor, got {shape:?}"))),
    }
}

/// (batch, channels, elements per channel per sample) of an `[N, C, ...]` tensor.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("batch norm needs [N, C, ...], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geometry = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
        )?;
        if let Some(b) = bias {
            if self.value(b).shape() != [geometry.out_channels] {
                return Err(Error::shape("conv2d bias length must equal output channels"));
            }
        }
        let out = conv2d_forward(
            &geometry,
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
        );
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            },
            &parents,
        ))
    }

    fn check_affine(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = channel_layout(self.value(input).shape())?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!("batch norm affine parameters must have length {c}")));
        }
        Ok((n, c, s))
    }

    fn normalize(&self, input: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> Tensor<T> {
        let x = self.value(input);
        let (n, c, s) = channel_layout(x.shape()).expect("checked");
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = x.data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                let (m, k, gg, bb) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for v in &mut out[off..off + s] {
                    *v = gg * ((*v - m) * k) + bb;
                }
            }
        }
        Tensor::new(x.shape(), out).expect("same shape")
    }

    /// Batch normalization with batch statistics. Returns the output and the
    /// per-channel batch mean and biased variance.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, s) = self.check_affine(input, gamma, beta)?;
        if n < 2 {
            return Err(Error::shape("batch norm in training mode needs a batch of at least 2"));
        }
        let x = self.value(input).data();
        let count = T::lit((n * s) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * s;
                acc = acc + x[off..off + s].iter().copied().sum();
            }
            let m = acc / count;
            let mut sq = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * s;
                sq = sq + x[off..off + s].iter().map(|&v| (v - m) * (v - m)).sum();
            }
            mean[ch] = m;
            var[ch] = sq / count;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let out = self.normalize(input, gamma, beta, &mean, &inv_std);
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats: true,
            },
            &[input, gamma, beta],
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (_, c, _) = self.check_affine(input, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("running statistics length mismatch"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + T::lit(eps)).sqrt().recip()).collect();
        let out = self.normalize(input, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats: false,
            },
            &[input, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    /// `a * x + b` with constant scalars.
    pub fn scale_shift(&mut self, x: Var, a: T, b: T) -> Var {
        let out = self.value(x).map(|v| a * v + b);
        self.push(out, Op::ScaleShift { input: x, scale: a }, &[x])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "elementwise operands differ: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::shape(format!("global pooling expects NCHW, got {:?}", t.shape())));
        };
        let s = h * w;
        let scale = T::lit(1.0 / s as f64);
        let data = t.data().chunks(s).map(|p| p.iter().copied().sum::<T>() * scale).collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d_in) = rows_cols(self.value(input).shape())?;
        let (d_out, w_in) = rows_cols(self.value(weight).shape())?;
        if w_in != d_in {
            return Err(Error::shape(format!(
                "linear layer expects {w_in} inputs, got {d_in}"
            )));
        }
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [d_out] {
                return Err(Error::shape("linear bias length must equal output width"));
            }
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            n,
            d_in,
            d_out,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            true,
            T::one(),
            &mut out,
        );
        let out = Tensor::new(&[n, d_out], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(out, Op::Linear { input, weight, bias }, &parents))
    }

    /// Row-wise softmax of a `[N, C]` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = rows_cols(t.shape())?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z = z + *v;
            }
            row.iter_mut().for_each(|v| *v = *v / z);
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// Row-wise log-softmax via the max shift.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, c) = rows_cols(t.shape())?;
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::LogSoftmax(x), &[x]))
    }

    fn check_labels(&self, x: Var, labels: &[usize]) -> Result<(usize, usize)> {
        let (n, c) = rows_cols(self.value(x).shape())?;
        if labels.len() != n {
            return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(format!("label {l} outside [0, {c})")));
        }
        Ok((n, c))
    }

    /// Mean negative log of the true-class probability, probabilities floored at 1e-12.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.check_labels(probs, labels)?;
        let p = self.value(probs).data();
        let floor = T::lit(PROB_FLOOR);
        let total: T = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -(p[i * c + l].max(floor)).ln())
            .sum();
        let out = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            &[probs],
        ))
    }

    /// Mean negative log-likelihood given log-probabilities.
    pub fn nll(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.check_labels(log_probs, labels)?;
        let lp = self.value(log_probs).data();
        let total: T = labels.iter().enumerate().map(|(i, &l)| -lp[i * c + l]).sum();
        let out = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            out,
            Op::Nll {
                log_probs,
                labels: labels.to_vec(),
            },
            &[log_probs],
        ))
    }

    /// `1 - r` between the flattened `pred` and a constant `target`.
    pub fn pearson_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} targets",
                p.len(),
                target.len()
            )));
        }
        if p.len() < 2 {
            return Err(Error::precondition("Pearson loss needs at least two samples"));
        }
        let r = pearson_parts(p, target).r;
        let out = Tensor::scalar(T::one() - r);
        Ok(self.push(
            out,
            Op::Pearson {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                v.shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::full(v.shape(), T::one()))
    }

    /// Backward sweep starting from an arbitrary output gradient.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape("seed gradient shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geometry,
            } => {
                let cg = conv2d_backward(
                    geometry,
                    self.value(*input),
                    self.value(*weight),
                    &g,
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = cg.input {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = cg.weight {
                    accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let x = self.value(*input);
                let (n, c, s) = channel_layout(x.shape()).expect("checked");
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let xd = x.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xd.len()];
                let count = T::lit((n * s) as f64);
                for ch in 0..c {
                    let (m, k) = (mean[ch], inv_std[ch]);
                    let mut sum_dy = T::zero();
                    let mut sum_dy_xhat = T::zero();
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            let xhat = (xd[j] - m) * k;
                            sum_dy = sum_dy + gd[j];
                            sum_dy_xhat = sum_dy_xhat + gd[j] * xhat;
                        }
                    }
                    dgamma[ch] = sum_dy_xhat;
                    dbeta[ch] = sum_dy;
                    let gk = gam[ch] * k;
                    for i in 0..n {
                        let off = (i * c + ch) * s;
                        for j in off..off + s {
                            dx[j] = if *batch_stats {
                                let xhat = (xd[j] - m) * k;
                                gk * (gd[j] - sum_dy / count - xhat * sum_dy_xhat / count)
                            } else {
                                gk * gd[j]
                            };
                        }
                    }
                }
                if self.needs(*input) {
                    accumulate(grads, *input, Tensor::new(x.shape(), dx).expect("shape"));
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma).expect("shape"));
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta).expect("shape"));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let data = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::Tanh(x) => {
                let data = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect();
                accumulate(grads, *x, Tensor::new(g.shape(), data).expect("shape"));
            }
            Op::ScaleShift { input, scale } => {
                accumulate(grads, *input, g.map(|d| d * *scale));
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = g.data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *a, Tensor::new(g.shape(), d).expect("shape"));
                }
                if self.needs(*b) {
                    let d = g.data().iter().zip(av).map(|(&x, &y)| x * y).collect();
                    accumulate(grads, *b, Tensor::new(g.shape(), d).expect("shape"));
                }
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let s = shape[2] * shape[3];
                let scale = T::lit(1.0 / s as f64);
                let mut d = Vec::with_capacity(s * g.len());
                for &v in g.data() {
                    d.extend(std::iter::repeat_n(v * scale, s));
                }
                accumulate(grads, *x, Tensor::new(shape, d).expect("shape"));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xv = self.value(*input);
                let wv = self.value(*weight);
                let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
                let d_out = wv.shape()[0];
                if self.needs(*input) {
                    let mut dx = vec![T::zero(); n * d_in];
                    gemm(n, d_out, d_in, g.data(), false, wv.data(), false, T::zero(), &mut dx);
                    accumulate(grads, *input, Tensor::new(&[n, d_in], dx).expect("shape"));
                }
                if self.needs(*weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    gemm(d_out, n, d_in, g.data(), true, xv.data(), false, T::zero(), &mut dw);
                    accumulate(grads, *weight, Tensor::new(&[d_out, d_in], dw).expect("shape"));
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.data().chunks(d_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    accumulate(grads, b, Tensor::new(&[d_out], db).expect("shape"));
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                }
                accumulate(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::LogSoftmax(x) => {
                let c = node.value.shape()[1];
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                    let total: T = gr.iter().copied().sum();
                    d.extend(gr.iter().zip(yr).map(|(&a, &y)| a - y.exp() * total));
                }
                accumulate(grads, *x, Tensor::new(g.shape(), d).expect("shape"));
            }
            Op::CrossEntropy { probs, labels } => {
                let pv = self.value(*probs);
                let c = pv.shape()[1];
                let n = labels.len();
                let scale = g.data()[0] / T::lit(n as f64);
                let floor = T::lit(PROB_FLOOR);
                let mut d = vec![T::zero(); pv.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let p = pv.data()[i * c + l];
                    if p > floor {
                        d[i * c + l] = -scale / p;
                    }
                }
                accumulate(grads, *probs, Tensor::new(pv.shape(), d).expect("shape"));
            }
            Op::Nll { log_probs, labels } => {
                let lv = self.value(*log_probs);
                let c = lv.shape()[1];
                let scale = g.data()[0] / T::lit(labels.len() as f64);
                let mut d = vec![T::zero(); lv.len()];
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] = -scale;
                }
                accumulate(grads, *log_probs, Tensor::new(lv.shape(), d).expect("shape"));
            }
            Op::Pearson { pred, target } => {
                let pv = self.value(*pred);
                let parts = pearson_parts(pv.data(), target);
                let scale = g.data()[0];
                let d = parts
                    .pred_centered
                    .iter()
                    .zip(&parts.target_centered)
                    .map(|(&pc, &tc)| -scale * (tc / parts.norm - parts.r * pc / parts.ss_pred))
                    .collect();
                accumulate(grads, *pred, Tensor::new(pv.shape(), d).expect("shape"));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let v = g.data()[0] / T::lit(t.len() as f64);
                accumulate(grads, *x, Tensor::full(t.shape(), v));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape();
                accumulate(grads, *x, g.reshape(shape).expect("same size"));
            }
        }
    }
}

struct PearsonParts<T> {
    pred_centered: Vec<T>,
    target_centered: Vec<T>,
    ss_pred: T,
    norm: T,
    r: T,
}

fn pearson_parts<T: Scalar>(pred: &[T], target: &[T]) -> PearsonParts<T> {
    let n = T::lit(pred.len() as f64);
    let mp = pred.iter().copied().sum::<T>() / n;
    let mt = target.iter().copied().sum::<T>() / n;
    let pc: Vec<T> = pred.iter().map(|&v| v - mp).collect();
    let tc: Vec<T> = target.iter().map(|&v| v - mt).collect();
    let eps = T::lit(PEARSON_EPS);
    let ss_pred = pc.iter().map(|&v| v * v).sum::<T>() + eps;
    let ss_target = tc.iter().map(|&v| v * v).sum::<T>() + eps;
    let cov: T = pc.iter().zip(&tc).map(|(&a, &b)| a * b).sum();
    let norm = (ss_pred * ss_target).sqrt();
    PearsonParts {
        pred_centered: pc,
        target_centered: tc,
        ss_pred,
        norm,
        r: cov / norm,
    }
}

/// True when either side of a Pearson loss has (near) zero spread, in which
/// case the loss only reflects the variance guard.
pub fn pearson_is_degenerate<T: Scalar>(pred: &[T], target: &[T]) -> bool {
    let spread = |v: &[T]| {
        let n = T::lit(v.len() as f64);
        let m = v.iter().copied().sum::<T>() / n;
        v.iter().map(|&x| (x - m) * (x - m)).sum::<T>()
    };
    pred.len() < 2
        || spread(pred).as_f64() <= PEARSON_EPS
        || spread(target).as_f64() <= PEARSON_EPS
}
