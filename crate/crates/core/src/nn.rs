//! Differentiable building blocks: affine maps, same-padded 1-D convolution,
//! layer normalisation, the two-layer feed-forward network and the dilated
//! residual TCN block.
//!
//! Sequences are `channels×frames` matrices; every layer acts per frame or
//! along the frame axis and never changes the frame count.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{ParamTensor, Tape, Var};

/// Walks the learnable tensors of a module under dotted names.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform in ±sqrt(1/fan_in).
pub(crate) fn fan_in_uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> ParamTensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| dist.sample(rng)).collect();
    ParamTensor::new(shape, values).expect("shape and length agree")
}

#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: ParamTensor,
    pub bias: ParamTensor,
}

impl Affine {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Affine {
            weight: fan_in_uniform(rng, &[output, input], input),
            bias: fan_in_uniform(rng, &[output], input),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// `W·x + b` on an `in×T` sequence.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(w, x)?;
        tape.add_col_bias(y, b)
    }
}

impl Module for Affine {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `out×in×kernel`
    pub weight: ParamTensor,
    pub bias: ParamTensor,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::EvenKernel(kernel));
        }
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        Ok(Conv1d {
            weight: fan_in_uniform(rng, &[output, input, kernel], input * kernel),
            bias: fan_in_uniform(rng, &[output], input * kernel),
            kernel,
            dilation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Symmetric zero padding of `dilation·(kernel−1)/2` frames on each side.
    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv1d(x, w, self.kernel, self.dilation)?;
        tape.add_col_bias(y, b)
    }
}

impl Module for Conv1d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamTensor,
    pub bias: ParamTensor,
}

impl LayerNorm {
    pub fn new(channels: usize) -> Self {
        LayerNorm {
            gain: ParamTensor::new(&[channels], vec![1.0; channels]).expect("positive dims"),
            bias: ParamTensor::zeros(&[channels]).expect("positive dims"),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b)
    }
}

impl Module for LayerNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "gain"), &self.gain);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Affine → ReLU → Affine, width-preserving. No internal residual.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Affine,
    pub project: Affine,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            expand: Affine::new(dim, hidden, rng),
            project: Affine::new(hidden, dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.expand.forward(tape, x)?;
        let h = tape.relu(h);
        self.project.forward(tape, h)
    }
}

impl Module for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.expand.visit(&join(prefix, "expand"), f);
        self.project.visit(&join(prefix, "project"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.expand.visit_mut(&join(prefix, "expand"), f);
        self.project.visit_mut(&join(prefix, "project"), f);
    }
}

/// `x + conv₂(relu(conv₁(x)))` with both convolutions sharing kernel and dilation.
#[derive(Debug, Clone)]
pub struct TcnBlock {
    pub first: Conv1d,
    pub second: Conv1d,
}

impl TcnBlock {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, dilation: usize, rng: &mut R) -> Result<Self> {
        Ok(TcnBlock {
            first: Conv1d::new(channels, channels, kernel, dilation, rng)?,
            second: Conv1d::new(channels, channels, kernel, dilation, rng)?,
        })
    }

    /// Frames on either side of `t` that can influence output frame `t`.
    pub fn reach(&self) -> usize {
        self.first.padding() + self.second.padding()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = tape.relu(h);
        let h = self.second.forward(tape, h)?;
        tape.add(x, h)
    }
}

impl Module for TcnBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.first.visit(&join(prefix, "first"), f);
        self.second.visit(&join(prefix, "second"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.first.visit_mut(&join(prefix, "first"), f);
        self.second.visit_mut(&join(prefix, "second"), f);
    }
}
