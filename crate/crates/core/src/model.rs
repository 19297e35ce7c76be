//! Unimodal baselines and the co-learning network.
//!
//! The co-learning model runs both encoders, feeds the visual booster
//! (source audio, target visual) and the audio booster (source visual,
//! target audio), and pools each of the four streams with its own decoder
//! and loss head. Baselines keep a single encoder/decoder/head chain.

use std::fmt;

use crate::config::ModelConfig;
use crate::decoders::{AamSoftmaxHead, AspDecoder, SpeakerEmbedding};
use crate::encoders::{AudioEncoder, FeatureSequence, VisualEncoder, AUDIO_INPUT_DIM, VISUAL_INPUT_DIM};
use crate::error::{Error, Result};
use crate::maxformer::{BoosterConfig, CrossModalBooster};
use crate::nn::{join, Module};
use crate::seed;
use crate::synth::RATE_RATIO;
use crate::tensor::{ParamTensor, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    BaselineAudio,
    BaselineVisual,
    CoLearn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::BaselineAudio => "baseline-audio",
            ModelKind::BaselineVisual => "baseline-visual",
            ModelKind::CoLearn => "co-learn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline-audio" => Some(ModelKind::BaselineAudio),
            "baseline-visual" => Some(ModelKind::BaselineVisual),
            "co-learn" => Some(ModelKind::CoLearn),
            _ => None,
        }
    }

    pub fn uses_audio(self) -> bool {
        self != ModelKind::BaselineVisual
    }

    pub fn uses_visual(self) -> bool {
        self != ModelKind::BaselineAudio
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One value per embedding branch; absent branches are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerBranch<T> {
    pub audio: Option<T>,
    pub visual: Option<T>,
    pub audio_transferred: Option<T>,
    pub visual_transferred: Option<T>,
}

impl<T> Default for PerBranch<T> {
    fn default() -> Self {
        PerBranch {
            audio: None,
            visual: None,
            audio_transferred: None,
            visual_transferred: None,
        }
    }
}

impl<T> PerBranch<T> {
    pub fn as_array(&self) -> [Option<&T>; 4] {
        [
            self.audio.as_ref(),
            self.visual.as_ref(),
            self.audio_transferred.as_ref(),
            self.visual_transferred.as_ref(),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerBranch<U> {
        PerBranch {
            audio: self.audio.as_ref().map(&mut f),
            visual: self.visual.as_ref().map(&mut f),
            audio_transferred: self.audio_transferred.as_ref().map(&mut f),
            visual_transferred: self.visual_transferred.as_ref().map(&mut f),
        }
    }
}

/// Which branch losses enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossMask {
    pub audio: bool,
    pub visual: bool,
    pub audio_transferred: bool,
    pub visual_transferred: bool,
}

impl LossMask {
    pub const ALL: LossMask = LossMask {
        audio: true,
        visual: true,
        audio_transferred: true,
        visual_transferred: true,
    };
    pub const UNIMODAL: LossMask = LossMask {
        audio: true,
        visual: true,
        audio_transferred: false,
        visual_transferred: false,
    };

    /// Branch losses that can depend on the named model tensor. Summing just
    /// these gives the same derivative as the full objective.
    pub fn depending_on(name: &str) -> LossMask {
        let none = LossMask {
            audio: false,
            visual: false,
            audio_transferred: false,
            visual_transferred: false,
        };
        let boosted = LossMask {
            audio_transferred: true,
            visual_transferred: true,
            ..none
        };
        if name.starts_with("audio.encoder.") {
            LossMask { audio: true, ..boosted }
        } else if name.starts_with("visual.encoder.") {
            LossMask { visual: true, ..boosted }
        } else if name.starts_with("audio.") {
            LossMask { audio: true, ..none }
        } else if name.starts_with("visual.") {
            LossMask { visual: true, ..none }
        } else if name.starts_with("audio_booster.") || name.starts_with("audio_transferred.") {
            LossMask {
                audio_transferred: true,
                ..none
            }
        } else if name.starts_with("visual_booster.") || name.starts_with("visual_transferred.") {
            LossMask {
                visual_transferred: true,
                ..none
            }
        } else {
            LossMask::ALL
        }
    }

    fn transferred(self) -> bool {
        self.audio_transferred || self.visual_transferred
    }
}

/// Decoder plus loss head for one stream.
#[derive(Debug, Clone)]
pub struct Branch {
    pub decoder: AspDecoder,
    pub head: AamSoftmaxHead,
}

impl Branch {
    fn new(channels: usize, classes: usize, cfg: &ModelConfig, root: u64, name: &str) -> Result<Self> {
        let mut rng = seed::rng(root, &format!("init/{name}.decoder"));
        let decoder = AspDecoder::new(channels, cfg.asp_hidden, cfg.embedding_dim, cfg.pooling, &mut rng)?;
        let mut rng = seed::rng(root, &format!("init/{name}.head"));
        let head = AamSoftmaxHead::new(classes, cfg.embedding_dim, cfg.aam_scale, cfg.aam_margin, &mut rng)?;
        Ok(Branch { decoder, head })
    }

    fn embed(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        Ok(self.decoder.forward(tape, features)?.embedding)
    }
}

impl Module for Branch {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub classes: usize,
    pub audio_encoder: Option<AudioEncoder>,
    pub visual_encoder: Option<VisualEncoder>,
    pub audio: Option<Branch>,
    pub visual: Option<Branch>,
    /// Source visual, target audio.
    pub audio_booster: Option<CrossModalBooster>,
    /// Source audio, target visual.
    pub visual_booster: Option<CrossModalBooster>,
    pub audio_transferred: Option<Branch>,
    pub visual_transferred: Option<Branch>,
}

/// Tape nodes of the four embeddings for one utterance.
pub type BranchVars = PerBranch<Var>;

impl Model {
    /// Fresh initialisation. Every component draws from its own named
    /// substream of `root`, so equally named parts of different model kinds
    /// start identical.
    pub fn new(kind: ModelKind, cfg: &ModelConfig, classes: usize, root: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 training speakers, got {classes}")));
        }
        let mut model = Model {
            kind,
            config: cfg.clone(),
            classes,
            audio_encoder: None,
            visual_encoder: None,
            audio: None,
            visual: None,
            audio_booster: None,
            visual_booster: None,
            audio_transferred: None,
            visual_transferred: None,
        };
        if kind.uses_audio() {
            let mut rng = seed::rng(root, "init/audio.encoder");
            model.audio_encoder = Some(AudioEncoder::new(AUDIO_INPUT_DIM, cfg.audio_channels, &mut rng)?);
            model.audio = Some(Branch::new(cfg.audio_channels, classes, cfg, root, "audio")?);
        }
        if kind.uses_visual() {
            let mut rng = seed::rng(root, "init/visual.encoder");
            model.visual_encoder = Some(VisualEncoder::new(VISUAL_INPUT_DIM, cfg.visual_channels, &mut rng)?);
            model.visual = Some(Branch::new(cfg.visual_channels, classes, cfg, root, "visual")?);
        }
        if kind == ModelKind::CoLearn {
            let booster = |source, target, name: &str| {
                let bc = BoosterConfig {
                    source_channels: source,
                    target_channels: target,
                    model_dim: cfg.model_dim,
                    heads: cfg.heads,
                    blocks: cfg.blocks,
                    ffn_hidden: cfg.ffn_hidden,
                    scaling: cfg.scaling,
                };
                CrossModalBooster::new(&bc, &mut seed::rng(root, &format!("init/{name}")))
            };
            model.audio_booster = Some(booster(cfg.visual_channels, cfg.audio_channels, "audio_booster")?);
            model.visual_booster = Some(booster(cfg.audio_channels, cfg.visual_channels, "visual_booster")?);
            model.audio_transferred = Some(Branch::new(cfg.model_dim, classes, cfg, root, "audio_transferred")?);
            model.visual_transferred = Some(Branch::new(cfg.model_dim, classes, cfg, root, "visual_transferred")?);
        }
        Ok(model)
    }

    fn check_inputs(&self, audio: &FeatureSequence, visual: &FeatureSequence) -> Result<()> {
        if self.kind.uses_audio() && audio.channels() != AUDIO_INPUT_DIM {
            return Err(Error::shape("model audio input", &[AUDIO_INPUT_DIM], &[audio.channels()]));
        }
        if self.kind.uses_visual() && visual.channels() != VISUAL_INPUT_DIM {
            return Err(Error::shape("model visual input", &[VISUAL_INPUT_DIM], &[visual.channels()]));
        }
        if self.kind == ModelKind::CoLearn && audio.frames() != RATE_RATIO * visual.frames() {
            return Err(Error::Precondition(format!(
                "audio has {} frames but visual has {}; expected a {RATE_RATIO}:1 ratio",
                audio.frames(),
                visual.frames()
            )));
        }
        Ok(())
    }

    /// Records the embeddings of every branch enabled by `mask`.
    pub fn embeddings_on_tape(
        &self,
        tape: &mut Tape,
        audio: &FeatureSequence,
        visual: &FeatureSequence,
        mask: LossMask,
    ) -> Result<BranchVars> {
        self.check_inputs(audio, visual)?;
        let mut out = PerBranch::default();
        let fa = match &self.audio_encoder {
            Some(enc) => {
                let x = audio.to_tape(tape);
                Some(enc.forward(tape, x)?)
            }
            None => None,
        };
        let fv = match &self.visual_encoder {
            Some(enc) => {
                let x = visual.to_tape(tape);
                Some(enc.forward(tape, x)?)
            }
            None => None,
        };
        if let (Some(b), Some(f), true) = (&self.audio, fa, mask.audio) {
            out.audio = Some(b.embed(tape, f)?);
        }
        if let (Some(b), Some(f), true) = (&self.visual, fv, mask.visual) {
            out.visual = Some(b.embed(tape, f)?);
        }
        if let (Some(fa), Some(fv), true) = (fa, fv, mask.transferred()) {
            if let (Some(booster), Some(b), true) =
                (&self.audio_booster, &self.audio_transferred, mask.audio_transferred)
            {
                let boosted = booster.forward(tape, fv, fa)?;
                out.audio_transferred = Some(b.embed(tape, boosted)?);
            }
            if let (Some(booster), Some(b), true) =
                (&self.visual_booster, &self.visual_transferred, mask.visual_transferred)
            {
                let boosted = booster.forward(tape, fa, fv)?;
                out.visual_transferred = Some(b.embed(tape, boosted)?);
            }
        }
        Ok(out)
    }

    /// Per-branch AAM losses for one labelled utterance.
    pub fn losses_on_tape(
        &self,
        tape: &mut Tape,
        audio: &FeatureSequence,
        visual: &FeatureSequence,
        label: usize,
        mask: LossMask,
    ) -> Result<BranchVars> {
        let emb = self.embeddings_on_tape(tape, audio, visual, mask)?;
        let loss = |tape: &mut Tape, b: &Option<Branch>, e: Option<Var>| -> Result<Option<Var>> {
            match (b, e) {
                (Some(b), Some(e)) => Ok(Some(b.head.loss(tape, e, label)?)),
                _ => Ok(None),
            }
        };
        Ok(PerBranch {
            audio: loss(tape, &self.audio, emb.audio)?,
            visual: loss(tape, &self.visual, emb.visual)?,
            audio_transferred: loss(tape, &self.audio_transferred, emb.audio_transferred)?,
            visual_transferred: loss(tape, &self.visual_transferred, emb.visual_transferred)?,
        })
    }

    /// Sum of the present branch losses.
    pub fn total_loss(tape: &mut Tape, losses: &BranchVars) -> Result<Var> {
        let parts: Vec<Var> = losses.as_array().into_iter().flatten().copied().collect();
        let mut it = parts.into_iter();
        let first = it.next().ok_or(Error::Empty("loss branches"))?;
        it.try_fold(first, |acc, v| tape.add(acc, v))
    }

    pub fn embed(&self, audio: &FeatureSequence, visual: &FeatureSequence) -> Result<PerBranch<SpeakerEmbedding>> {
        let mut tape = Tape::new();
        let vars = self.embeddings_on_tape(&mut tape, audio, visual, LossMask::ALL)?;
        Ok(vars.map(|&v| SpeakerEmbedding::from_tape(&tape, v)))
    }

    /// Enables or disables gradients for both encoders.
    pub fn set_encoders_trainable(&mut self, on: bool) {
        if let Some(e) = &mut self.audio_encoder {
            e.visit_mut("", &mut |_, p| p.set_requires_grad(on));
        }
        if let Some(e) = &mut self.visual_encoder {
            e.visit_mut("", &mut |_, p| p.set_requires_grad(on));
        }
    }

    /// Named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ParamTensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p.clone())));
        out
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        if let Some(e) = &self.audio_encoder {
            e.visit(&join(prefix, "audio.encoder"), f);
        }
        if let Some(b) = &self.audio {
            b.visit(&join(prefix, "audio"), f);
        }
        if let Some(e) = &self.visual_encoder {
            e.visit(&join(prefix, "visual.encoder"), f);
        }
        if let Some(b) = &self.visual {
            b.visit(&join(prefix, "visual"), f);
        }
        if let Some(b) = &self.audio_booster {
            b.visit(&join(prefix, "audio_booster"), f);
        }
        if let Some(b) = &self.visual_booster {
            b.visit(&join(prefix, "visual_booster"), f);
        }
        if let Some(b) = &self.audio_transferred {
            b.visit(&join(prefix, "audio_transferred"), f);
        }
        if let Some(b) = &self.visual_transferred {
            b.visit(&join(prefix, "visual_transferred"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        if let Some(e) = &mut self.audio_encoder {
            e.visit_mut(&join(prefix, "audio.encoder"), f);
        }
        if let Some(b) = &mut self.audio {
            b.visit_mut(&join(prefix, "audio"), f);
        }
        if let Some(e) = &mut self.visual_encoder {
            e.visit_mut(&join(prefix, "visual.encoder"), f);
        }
        if let Some(b) = &mut self.visual {
            b.visit_mut(&join(prefix, "visual"), f);
        }
        if let Some(b) = &mut self.audio_booster {
            b.visit_mut(&join(prefix, "audio_booster"), f);
        }
        if let Some(b) = &mut self.visual_booster {
            b.visit_mut(&join(prefix, "visual_booster"), f);
        }
        if let Some(b) = &mut self.audio_transferred {
            b.visit_mut(&join(prefix, "audio_transferred"), f);
        }
        if let Some(b) = &mut self.visual_transferred {
            b.visit_mut(&join(prefix, "visual_transferred"), f);
        }
    }
}
