//! Frame-level encoders for the two modalities.
//!
//! The audio side is a plain convolutional stack over 80-dim filter-bank-like
//! frames at 100 Hz. The visual side maps 32-dim per-frame lip features at
//! 25 Hz through an affine layer and two dilated TCN blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{join, Affine, Conv1d, LayerNorm, Module, TcnBlock};
use crate::tensor::{ParamTensor, Tape, Var};

pub const AUDIO_INPUT_DIM: usize = 80;
pub const VISUAL_INPUT_DIM: usize = 32;
pub const TCN_KERNEL: usize = 5;
const TCN_DILATIONS: [usize; 2] = [1, 2];
const AUDIO_KERNELS: [(usize, usize); 3] = [(5, 1), (3, 2), (3, 3)];

/// A `channels×frames` real matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    channels: usize,
    frames: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(channels: usize, frames: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || frames == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        if channels * frames != data.len() {
            return Err(Error::shape("FeatureSequence::new", &[channels, frames], &[data.len()]));
        }
        Ok(FeatureSequence { channels, frames, data })
    }

    pub fn zeros(channels: usize, frames: usize) -> Result<Self> {
        Self::new(channels, frames, vec![0.0; channels * frames])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, channel: usize, frame: usize) -> f64 {
        self.data[channel * self.frames + frame]
    }

    /// Column `frame` as a vector over channels.
    pub fn frame(&self, frame: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.get(c, frame)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tape(&self, tape: &mut Tape) -> Var {
        tape.constant(self.channels, self.frames, self.data.clone())
            .expect("validated at construction")
    }

    pub fn from_tape(tape: &Tape, v: Var) -> Self {
        let (c, t) = tape.dims(v);
        FeatureSequence {
            channels: c,
            frames: t,
            data: tape.value(v).to_vec(),
        }
    }
}

fn check_input(kind: &'static str, expected: usize, got: (usize, usize)) -> Result<()> {
    if got.0 != expected {
        return Err(Error::InvalidArgument(format!(
            "{kind} encoder expects {expected} input channels, got {}",
            got.0
        )));
    }
    if got.1 == 0 {
        return Err(Error::Empty(kind));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct AudioBlock {
    pub conv: Conv1d,
    pub norm: LayerNorm,
}

/// Three conv → ReLU → LN blocks followed by a kernel-1 conv + ReLU projection.
#[derive(Debug, Clone)]
pub struct AudioEncoder {
    pub blocks: Vec<AudioBlock>,
    pub projection: Conv1d,
}

impl AudioEncoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let mut blocks = Vec::with_capacity(AUDIO_KERNELS.len());
        let mut width = input_dim;
        for &(kernel, dilation) in &AUDIO_KERNELS {
            blocks.push(AudioBlock {
                conv: Conv1d::new(width, channels, kernel, dilation, rng)?,
                norm: LayerNorm::new(channels),
            });
            width = channels;
        }
        Ok(AudioEncoder {
            blocks,
            projection: Conv1d::new(channels, channels, 1, 1, rng)?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].conv.input_dim()
    }

    pub fn channels(&self) -> usize {
        self.projection.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input("audio", self.input_dim(), tape.dims(x))?;
        let mut h = x;
        for block in &self.blocks {
            h = block.conv.forward(tape, h)?;
            h = tape.relu(h);
            h = block.norm.forward(tape, h)?;
        }
        let h = self.projection.forward(tape, h)?;
        Ok(tape.relu(h))
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let v = x.to_tape(&mut tape);
        let y = self.forward(&mut tape, v)?;
        Ok(FeatureSequence::from_tape(&tape, y))
    }
}

impl Module for AudioEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("conv{i}")), f);
            b.norm.visit(&join(prefix, &format!("norm{i}")), f);
        }
        self.projection.visit(&join(prefix, "projection"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("conv{i}")), f);
            b.norm.visit_mut(&join(prefix, &format!("norm{i}")), f);
        }
        self.projection.visit_mut(&join(prefix, "projection"), f);
    }
}

/// Per-frame affine map into `channels`, then TCN blocks with dilations 1 and 2.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub input: Affine,
    pub tcn: Vec<TcnBlock>,
}

impl VisualEncoder {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, channels: usize, rng: &mut R) -> Result<Self> {
        let input = Affine::new(input_dim, channels, rng);
        let tcn = TCN_DILATIONS
            .iter()
            .map(|&d| TcnBlock::new(channels, TCN_KERNEL, d, rng))
            .collect::<Result<_>>()?;
        Ok(VisualEncoder { input, tcn })
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    pub fn channels(&self) -> usize {
        self.input.output_dim()
    }

    /// Frames on either side of `t` that can influence output frame `t`.
    pub fn receptive_reach(&self) -> usize {
        self.tcn.iter().map(TcnBlock::reach).sum()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_input("visual", self.input_dim(), tape.dims(x))?;
        let mut h = self.input.forward(tape, x)?;
        for block in &self.tcn {
            h = block.forward(tape, h)?;
        }
        Ok(h)
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<FeatureSequence> {
        let mut tape = Tape::new();
        let v = x.to_tape(&mut tape);
        let y = self.forward(&mut tape, v)?;
        Ok(FeatureSequence::from_tape(&tape, y))
    }
}

impl Module for VisualEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.input.visit(&join(prefix, "input"), f);
        for (i, b) in self.tcn.iter().enumerate() {
            b.visit(&join(prefix, &format!("tcn{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.input.visit_mut(&join(prefix, "input"), f);
        for (i, b) in self.tcn.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("tcn{i}")), f);
        }
    }
}
