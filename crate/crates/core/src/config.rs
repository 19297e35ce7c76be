//! Run configuration: `[data]`, `[model]` and `[train]` sections of
//! `key = value` lines. `#` starts a comment. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use crate::decoders::PoolingAttention;
use crate::error::{Error, Result};
use crate::maxformer::AttentionScaling;
use crate::synth::DataConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub audio_channels: usize,
    pub visual_channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_hidden: usize,
    pub asp_hidden: usize,
    pub embedding_dim: usize,
    pub aam_scale: f64,
    pub aam_margin: f64,
    pub pooling: PoolingAttention,
    pub scaling: AttentionScaling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_channels: 64,
            visual_channels: 64,
            model_dim: 128,
            heads: 4,
            blocks: 3,
            ffn_hidden: 256,
            asp_hidden: 32,
            embedding_dim: 192,
            aam_scale: 30.0,
            aam_margin: 0.2,
            pooling: PoolingAttention::PerChannel,
            scaling: AttentionScaling::ModelDim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of through the gradient.
    pub decoupled_decay: bool,
    /// Keep warm-started encoders fixed during co-learning.
    pub freeze_encoders: bool,
    /// Also copy the unimodal decoders and loss heads when warm starting.
    pub warm_decoders: bool,
    /// Standard deviation of additive Gaussian noise on input frames during training.
    pub feature_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            milestones: vec![10, 15],
            gamma: 0.1,
            weight_decay: 1e-7,
            decoupled_decay: false,
            freeze_encoders: false,
            warm_decoders: true,
            feature_noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    let v = v.trim_start_matches('[').trim_end_matches(']');
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    /// Reduced model and schedule that trains on one CPU core in minutes
    /// while keeping the default corpus. The full-size model costs about
    /// 200 s per co-learning epoch at this corpus size.
    pub fn desk() -> Self {
        let base = RunConfig::default();
        RunConfig {
            model: ModelConfig {
                audio_channels: 32,
                visual_channels: 32,
                model_dim: 32,
                heads: 4,
                blocks: 1,
                ffn_hidden: 64,
                asp_hidden: 16,
                embedding_dim: 32,
                ..base.model
            },
            train: TrainConfig {
                epochs: 8,
                milestones: vec![5, 7],
                ..base.train
            },
            ..base
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        let mut ffn_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !matches!(section.as_str(), "data" | "model" | "train") {
                    return Err(Error::Config(format!("line {}: unknown section [{section}]", n + 1)));
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if full == "model.ffn_hidden" {
                ffn_set = true;
            }
            cfg.set(&full, value.trim())?;
        }
        if !ffn_set {
            cfg.model.ffn_hidden = 2 * cfg.model.model_dim;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one `section.key` field from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (d, m, t) = (&mut self.data, &mut self.model, &mut self.train);
        match key {
            "data.train_speakers" => d.train_speakers = num(key, v)?,
            "data.train_utterances" => d.train_utterances = num(key, v)?,
            "data.test_speakers" => d.test_speakers = num(key, v)?,
            "data.test_utterances" => d.test_utterances = num(key, v)?,
            "data.visual_frames" => d.visual_frames = num(key, v)?,
            "data.audio_noise" => d.audio_noise = num(key, v)?,
            "data.visual_noise" => d.visual_noise = num(key, v)?,
            "data.signal_gain" => d.signal_gain = num(key, v)?,
            "data.targets" => d.targets = num(key, v)?,
            "data.nontargets" => d.nontargets = num(key, v)?,
            "model.audio_channels" => m.audio_channels = num(key, v)?,
            "model.visual_channels" => m.visual_channels = num(key, v)?,
            "model.model_dim" => m.model_dim = num(key, v)?,
            "model.heads" => m.heads = num(key, v)?,
            "model.blocks" => m.blocks = num(key, v)?,
            "model.ffn_hidden" => m.ffn_hidden = num(key, v)?,
            "model.asp_hidden" => m.asp_hidden = num(key, v)?,
            "model.embedding_dim" => m.embedding_dim = num(key, v)?,
            "model.aam_scale" => m.aam_scale = num(key, v)?,
            "model.aam_margin" => m.aam_margin = num(key, v)?,
            "model.pooling" => {
                m.pooling = match v {
                    "per_channel" => PoolingAttention::PerChannel,
                    "shared" => PoolingAttention::Shared,
                    _ => return Err(Error::Config(format!("`{key}`: expected per_channel or shared"))),
                }
            }
            "model.attention_scaling" => {
                m.scaling = match v {
                    "model_dim" => AttentionScaling::ModelDim,
                    "head_dim" => AttentionScaling::HeadDim,
                    _ => return Err(Error::Config(format!("`{key}`: expected model_dim or head_dim"))),
                }
            }
            "train.epochs" => t.epochs = num(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.lr" => t.lr = num(key, v)?,
            "train.milestones" => t.milestones = list(key, v)?,
            "train.gamma" => t.gamma = num(key, v)?,
            "train.weight_decay" => t.weight_decay = num(key, v)?,
            "train.decoupled_decay" => t.decoupled_decay = flag(key, v)?,
            "train.freeze_encoders" => t.freeze_encoders = flag(key, v)?,
            "train.warm_decoders" => t.warm_decoders = flag(key, v)?,
            "train.feature_noise" => t.feature_noise = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let m = &self.model;
        if m.heads == 0 || !m.model_dim.is_multiple_of(m.heads) {
            return bad(format!("model_dim {} is not divisible by heads {}", m.model_dim, m.heads));
        }
        if [m.audio_channels, m.visual_channels, m.model_dim, m.blocks, m.ffn_hidden, m.asp_hidden, m.embedding_dim]
            .contains(&0)
        {
            return bad("model widths and block count must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(t.lr >= 0.0 && t.gamma > 0.0 && t.weight_decay >= 0.0 && t.feature_noise >= 0.0) {
            return bad("lr, weight_decay and feature_noise must be nonnegative and gamma positive".into());
        }
        if t.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        Ok(())
    }

    /// Canonical text form; `parse(render())` gives back an equal config.
    pub fn render(&self) -> String {
        let (d, m, t) = (&self.data, &self.model, &self.train);
        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(w, "[data]");
        let _ = writeln!(w, "train_speakers = {}", d.train_speakers);
        let _ = writeln!(w, "train_utterances = {}", d.train_utterances);
        let _ = writeln!(w, "test_speakers = {}", d.test_speakers);
        let _ = writeln!(w, "test_utterances = {}", d.test_utterances);
        let _ = writeln!(w, "visual_frames = {}", d.visual_frames);
        let _ = writeln!(w, "audio_noise = {:?}", d.audio_noise);
        let _ = writeln!(w, "visual_noise = {:?}", d.visual_noise);
        let _ = writeln!(w, "signal_gain = {:?}", d.signal_gain);
        let _ = writeln!(w, "targets = {}", d.targets);
        let _ = writeln!(w, "nontargets = {}", d.nontargets);
        let _ = writeln!(w, "\n[model]");
        let _ = writeln!(w, "audio_channels = {}", m.audio_channels);
        let _ = writeln!(w, "visual_channels = {}", m.visual_channels);
        let _ = writeln!(w, "model_dim = {}", m.model_dim);
        let _ = writeln!(w, "heads = {}", m.heads);
        let _ = writeln!(w, "blocks = {}", m.blocks);
        let _ = writeln!(w, "ffn_hidden = {}", m.ffn_hidden);
        let _ = writeln!(w, "asp_hidden = {}", m.asp_hidden);
        let _ = writeln!(w, "embedding_dim = {}", m.embedding_dim);
        let _ = writeln!(w, "aam_scale = {:?}", m.aam_scale);
        let _ = writeln!(w, "aam_margin = {:?}", m.aam_margin);
        let pooling = match m.pooling {
            PoolingAttention::PerChannel => "per_channel",
            PoolingAttention::Shared => "shared",
        };
        let _ = writeln!(w, "pooling = {pooling}");
        let scaling = match m.scaling {
            AttentionScaling::ModelDim => "model_dim",
            AttentionScaling::HeadDim => "head_dim",
        };
        let _ = writeln!(w, "attention_scaling = {scaling}");
        let _ = writeln!(w, "\n[train]");
        let _ = writeln!(w, "epochs = {}", t.epochs);
        let _ = writeln!(w, "batch_size = {}", t.batch_size);
        let _ = writeln!(w, "lr = {:?}", t.lr);
        let ms: Vec<String> = t.milestones.iter().map(usize::to_string).collect();
        let _ = writeln!(w, "milestones = [{}]", ms.join(", "));
        let _ = writeln!(w, "gamma = {:?}", t.gamma);
        let _ = writeln!(w, "weight_decay = {:?}", t.weight_decay);
        let _ = writeln!(w, "decoupled_decay = {}", t.decoupled_decay);
        let _ = writeln!(w, "freeze_encoders = {}", t.freeze_encoders);
        let _ = writeln!(w, "warm_decoders = {}", t.warm_decoders);
        let _ = writeln!(w, "feature_noise = {:?}", t.feature_noise);
        s
    }
}
