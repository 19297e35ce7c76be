//! Cross-modal boosters built from MaxFormer blocks.
//!
//! A booster aligns a source-modality sequence to a target-modality sequence.
//! Inside each block the target stream supplies the queries and the source
//! stream the keys and values of a multi-head cross attention; the attended
//! (transferred) features then compete elementwise with an affine view of the
//! target stream through a max-feature-map, and the winner map is refined by
//! a kernel-1 convolution, layer norm and feed-forward network.
//!
//! Attention output length always equals the query length, so the booster
//! output has the target's frame count whatever the source length is.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, join, Affine, Conv1d, FeedForward, LayerNorm, Module};
use crate::tensor::{ParamTensor, Tape, Var};

/// Denominator inside the attention softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionScaling {
    /// `sqrt(d)` with `d` the model width.
    ModelDim,
    /// `sqrt(d/m)`, the usual transformer choice.
    HeadDim,
}

impl AttentionScaling {
    pub fn divisor(self, model_dim: usize, head_dim: usize) -> f64 {
        match self {
            AttentionScaling::ModelDim => (model_dim as f64).sqrt(),
            AttentionScaling::HeadDim => (head_dim as f64).sqrt(),
        }
    }
}

/// Projection weights of one attention head, each `d×d_h`.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub query: ParamTensor,
    pub key: ParamTensor,
    pub value: ParamTensor,
}

impl AttentionHead {
    pub fn new<R: Rng + ?Sized>(model_dim: usize, head_dim: usize, rng: &mut R) -> Self {
        AttentionHead {
            query: fan_in_uniform(rng, &[model_dim, head_dim], model_dim),
            key: fan_in_uniform(rng, &[model_dim, head_dim], model_dim),
            value: fan_in_uniform(rng, &[model_dim, head_dim], model_dim),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.query.shape()[1]
    }
}

impl Module for AttentionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "query"), &self.query);
        f(&join(prefix, "key"), &self.key);
        f(&join(prefix, "value"), &self.value);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "query"), &mut self.query);
        f(&join(prefix, "key"), &mut self.key);
        f(&join(prefix, "value"), &mut self.value);
    }
}

/// Output of one head: `d_h×T_q` features and the `T_q×T_k` attention map.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub features: Var,
    pub attention: Var,
}

/// `softmax((QᵀW_Q)(KᵀW_K)ᵀ / scale) · (VᵀW_V)`, returned transposed to `d_h×T_q`.
pub fn single_head_transfer(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    values: Var,
    head: &AttentionHead,
    scale: f64,
) -> Result<HeadOutput> {
    let (dq, _) = tape.dims(queries);
    let (dk, tk) = tape.dims(keys);
    let (dv, tv) = tape.dims(values);
    if dq != dk || dk != dv || tk != tv {
        return Err(Error::shape("single_head_transfer", &[dq, dk, dv], &[tk, tv]));
    }
    let wq = tape.param(&head.query);
    let wk = tape.param(&head.key);
    let wv = tape.param(&head.value);
    let qt = tape.transpose(queries);
    let q = tape.matmul(qt, wq)?;
    let kt = tape.transpose(keys);
    let k = tape.matmul(kt, wk)?;
    let k = tape.transpose(k);
    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, 1.0 / scale);
    let attention = tape.softmax_rows(scores);
    let vt = tape.transpose(values);
    let v = tape.matmul(vt, wv)?;
    let out = tape.matmul(attention, v)?;
    Ok(HeadOutput {
        features: tape.transpose(out),
        attention,
    })
}

/// Pre-attention FFN followed by layer norm, applied per frame.
#[derive(Debug, Clone)]
pub struct StreamPrep {
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl StreamPrep {
    fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        StreamPrep {
            ffn: FeedForward::new(dim, hidden, rng),
            norm: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.ffn.forward(tape, x)?;
        self.norm.forward(tape, h)
    }
}

impl Module for StreamPrep {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.ffn.visit(&join(prefix, "ffn"), f);
        self.norm.visit(&join(prefix, "norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.ffn.visit_mut(&join(prefix, "ffn"), f);
        self.norm.visit_mut(&join(prefix, "norm"), f);
    }
}

#[derive(Debug, Clone)]
pub struct MaxFormerBlock {
    pub target_prep: StreamPrep,
    pub source_prep: StreamPrep,
    pub heads: Vec<AttentionHead>,
    /// `(m·d_h)×d`
    pub output: ParamTensor,
    /// Affine view of the target stream entering the max (the layers before MFM).
    pub pre_mfm: Affine,
    pub post_conv: Conv1d,
    pub post_norm: LayerNorm,
    pub post_ffn: FeedForward,
    pub scaling: AttentionScaling,
}

/// Everything a block records, exposed for inspection.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub queries: Var,
    pub keys: Var,
    pub transferred: Var,
    pub target_branch: Var,
    pub fused: Var,
    pub output: Var,
    pub attention: Vec<Var>,
}

impl MaxFormerBlock {
    pub fn new<R: Rng + ?Sized>(
        model_dim: usize,
        heads: usize,
        ffn_hidden: usize,
        scaling: AttentionScaling,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "model width {model_dim} is not divisible by {heads} heads"
            )));
        }
        let head_dim = model_dim / heads;
        Ok(MaxFormerBlock {
            target_prep: StreamPrep::new(model_dim, ffn_hidden, rng),
            source_prep: StreamPrep::new(model_dim, ffn_hidden, rng),
            heads: (0..heads).map(|_| AttentionHead::new(model_dim, head_dim, rng)).collect(),
            output: fan_in_uniform(rng, &[heads * head_dim, model_dim], heads * head_dim),
            pre_mfm: Affine::new(model_dim, model_dim, rng),
            post_conv: Conv1d::new(model_dim, model_dim, 1, 1, rng)?,
            post_norm: LayerNorm::new(model_dim),
            post_ffn: FeedForward::new(model_dim, ffn_hidden, rng),
            scaling,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.output.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.heads[0].head_dim()
    }

    pub fn attention_scale(&self) -> f64 {
        self.scaling.divisor(self.model_dim(), self.head_dim())
    }

    /// Concatenates every head's output along channels and projects back to `d`.
    /// Returns the `d×T_q` transferred map and each head's attention.
    pub fn multi_head_transfer(
        &self,
        tape: &mut Tape,
        queries: Var,
        keys: Var,
        values: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let scale = self.attention_scale();
        let mut features = Vec::with_capacity(self.heads.len());
        let mut attention = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let out = single_head_transfer(tape, queries, keys, values, head, scale)?;
            features.push(out.features);
            attention.push(out.attention);
        }
        let concat = tape.vstack(&features)?;
        let w = tape.param(&self.output);
        let wt = tape.transpose(w);
        Ok((tape.matmul(wt, concat)?, attention))
    }

    /// `max(F_θ1(target), transferred)`, the competitive selection before refinement.
    /// Returns `(target_branch, fused)`.
    pub fn mfm_select(&self, tape: &mut Tape, target: Var, transferred: Var) -> Result<(Var, Var)> {
        let (dt, tt) = tape.dims(target);
        let (dx, tx) = tape.dims(transferred);
        if (dt, tt) != (dx, tx) {
            return Err(Error::shape("mfm_fuse", &[dt, tt], &[dx, tx]));
        }
        let branch = self.pre_mfm.forward(tape, target)?;
        let fused = tape.max(branch, transferred)?;
        Ok((branch, fused))
    }

    /// Layers after the max: kernel-1 conv, layer norm, FFN.
    pub fn refine(&self, tape: &mut Tape, fused: Var) -> Result<Var> {
        let h = self.post_conv.forward(tape, fused)?;
        let h = self.post_norm.forward(tape, h)?;
        self.post_ffn.forward(tape, h)
    }

    /// `G_θ2(max(F_θ1(target), transferred))`.
    pub fn mfm_fuse(&self, tape: &mut Tape, target: Var, transferred: Var) -> Result<Var> {
        let (_, fused) = self.mfm_select(tape, target, transferred)?;
        self.refine(tape, fused)
    }

    pub fn forward(&self, tape: &mut Tape, target: Var, source: Var) -> Result<BlockTrace> {
        let queries = self.target_prep.forward(tape, target)?;
        let keys = self.source_prep.forward(tape, source)?;
        let (transferred, attention) = self.multi_head_transfer(tape, queries, keys, keys)?;
        let (target_branch, fused) = self.mfm_select(tape, queries, transferred)?;
        let output = self.refine(tape, fused)?;
        Ok(BlockTrace {
            queries,
            keys,
            transferred,
            target_branch,
            fused,
            output,
            attention,
        })
    }
}

impl Module for MaxFormerBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.target_prep.visit(&join(prefix, "target_prep"), f);
        self.source_prep.visit(&join(prefix, "source_prep"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("head{i}")), f);
        }
        f(&join(prefix, "output"), &self.output);
        self.pre_mfm.visit(&join(prefix, "pre_mfm"), f);
        self.post_conv.visit(&join(prefix, "post_conv"), f);
        self.post_norm.visit(&join(prefix, "post_norm"), f);
        self.post_ffn.visit(&join(prefix, "post_ffn"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.target_prep.visit_mut(&join(prefix, "target_prep"), f);
        self.source_prep.visit_mut(&join(prefix, "source_prep"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("head{i}")), f);
        }
        f(&join(prefix, "output"), &mut self.output);
        self.pre_mfm.visit_mut(&join(prefix, "pre_mfm"), f);
        self.post_conv.visit_mut(&join(prefix, "post_conv"), f);
        self.post_norm.visit_mut(&join(prefix, "post_norm"), f);
        self.post_ffn.visit_mut(&join(prefix, "post_ffn"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoosterConfig {
    pub source_channels: usize,
    pub target_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub scaling: AttentionScaling,
}

/// Input affines into width `d`, then a stack of MaxFormer blocks. The fused
/// output of block k is the target stream of block k+1; every block reads
/// the same projected source stream through its own FFN + LN.
#[derive(Debug, Clone)]
pub struct CrossModalBooster {
    pub source_in: Affine,
    pub target_in: Affine,
    pub blocks: Vec<MaxFormerBlock>,
}

#[derive(Debug, Clone)]
pub struct BoosterTrace {
    pub output: Var,
    pub blocks: Vec<BlockTrace>,
}

impl CrossModalBooster {
    pub fn new<R: Rng + ?Sized>(cfg: &BoosterConfig, rng: &mut R) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::InvalidArgument("a booster needs at least one block".into()));
        }
        let source_in = Affine::new(cfg.source_channels, cfg.model_dim, rng);
        let target_in = Affine::new(cfg.target_channels, cfg.model_dim, rng);
        let blocks = (0..cfg.blocks)
            .map(|_| MaxFormerBlock::new(cfg.model_dim, cfg.heads, cfg.ffn_hidden, cfg.scaling, rng))
            .collect::<Result<_>>()?;
        Ok(CrossModalBooster {
            source_in,
            target_in,
            blocks,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.target_in.output_dim()
    }

    pub fn forward_traced(&self, tape: &mut Tape, source: Var, target: Var) -> Result<BoosterTrace> {
        let src = self.source_in.forward(tape, source)?;
        let mut tgt = self.target_in.forward(tape, target)?;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let trace = block.forward(tape, tgt, src)?;
            tgt = trace.output;
            traces.push(trace);
        }
        Ok(BoosterTrace {
            output: tgt,
            blocks: traces,
        })
    }

    /// `d×T_target` enhanced target-modality features.
    pub fn forward(&self, tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, source, target)?.output)
    }
}

impl Module for CrossModalBooster {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.source_in.visit(&join(prefix, "source_in"), f);
        self.target_in.visit(&join(prefix, "target_in"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.source_in.visit_mut(&join(prefix, "source_in"), f);
        self.target_in.visit_mut(&join(prefix, "target_in"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}
