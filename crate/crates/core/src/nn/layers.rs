//! Parameterized layers and the plumbing that binds their tensors onto a tape.

use rand::Rng;

use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters are learnable; buffers (running statistics) are not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

/// Anything holding named tensors. Parameters must be visited in the same
/// order the layer binds them during its forward pass.
pub trait Module<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind));
    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    );

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t, k| {
            if k == TensorKind::Param {
                out.push(t);
            }
        });
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut |_, t, k| {
            if k == TensorKind::Param {
                out.push(t);
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t, _| out.push((name, t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Records which tape nodes hold a module's parameters during one forward
/// pass, plus the batch statistics its normalization layers observed.
pub struct Binding<T> {
    pub vars: Vec<Var>,
    pub bn_stats: Vec<(Vec<T>, Vec<T>, usize)>,
    trainable: bool,
}

impl<T: Scalar> Binding<T> {
    /// Parameters become differentiable leaves.
    pub fn trainable() -> Self {
        Binding {
            vars: Vec::new(),
            bn_stats: Vec::new(),
            trainable: true,
        }
    }

    /// Parameters are recorded as constants and receive no gradient.
    pub fn frozen() -> Self {
        Binding {
            trainable: false,
            ..Self::trainable()
        }
    }

    pub fn bind(&mut self, tape: &mut Tape<T>, t: &Tensor<T>) -> Var {
        let v = if self.trainable {
            tape.leaf(t.clone())
        } else {
            tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialized, no bias.
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Conv2d {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], (2.0 / fan_in).sqrt(), rng),
            bias: None,
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, b: &mut Binding<T>) -> Result<Var> {
        let w = b.bind(tape, &self.weight);
        let bias = self.bias.as_ref().map(|t| b.bind(tape, t));
        tape.conv2d(x, w, bias, self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "weight"), &self.weight, TensorKind::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, TensorKind::Param);
        }
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        f(join(prefix, "weight"), &mut self.weight, TensorKind::Param);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b, TensorKind::Param);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode, b: &mut Binding<T>) -> Result<Var> {
        let g = b.bind(tape, &self.gamma);
        let be = b.bind(tape, &self.beta);
        match mode {
            Mode::Train => {
                let shape = tape.value(x).shape();
                let count = shape[0] * shape[2..].iter().product::<usize>();
                let (y, mean, var) = tape.batch_norm_train(x, g, be, self.eps)?;
                b.bn_stats.push((mean, var, count));
                Ok(y)
            }
            Mode::Eval => tape.batch_norm_eval(
                x,
                g,
                be,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            ),
        }
    }

    /// Folds one batch's statistics into the running estimates; the
    /// variance is stored unbiased.
    pub fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let unbias = T::lit(count as f64 / (count.max(2) - 1) as f64);
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * v;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = keep * *r + m * v * unbias;
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "gamma"), &self.gamma, TensorKind::Param);
        f(join(prefix, "beta"), &self.beta, TensorKind::Param);
        f(join(prefix, "running_mean"), &self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &self.running_var, TensorKind::Buffer);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        f(join(prefix, "gamma"), &mut self.gamma, TensorKind::Param);
        f(join(prefix, "beta"), &mut self.beta, TensorKind::Param);
        f(join(prefix, "running_mean"), &mut self.running_mean, TensorKind::Buffer);
        f(join(prefix, "running_var"), &mut self.running_var, TensorKind::Buffer);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    /// Normal init with std `1/sqrt(in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self::with_std(d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn with_std<R: Rng + ?Sized>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[d_out, d_in], std, rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_out, d_in]),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, b: &mut Binding<T>) -> Result<Var> {
        let w = b.bind(tape, &self.weight);
        let bias = b.bind(tape, &self.bias);
        tape.linear(x, w, Some(bias))
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorKind)) {
        f(join(prefix, "weight"), &self.weight, TensorKind::Param);
        f(join(prefix, "bias"), &self.bias, TensorKind::Param);
    }

    fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &'a mut Tensor<T>, TensorKind),
    ) {
        f(join(prefix, "weight"), &mut self.weight, TensorKind::Param);
        f(join(prefix, "bias"), &mut self.bias, TensorKind::Param);
    }
}
