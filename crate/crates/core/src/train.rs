//! Training loop for unimodal baselines and the co-learning model.
//!
//! Gradients are accumulated utterance by utterance and averaged over the
//! batch before each Adam update. Utterance order is reshuffled every epoch
//! from a named substream of the root seed.

use std::borrow::Cow;
use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::{load_into, Checkpoint};
use crate::config::{RunConfig, TrainConfig};
use crate::encoders::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{LossMask, Model, ModelKind, PerBranch};
use crate::nn::Module;
use crate::optim::{Adam, MultiStepLr};
use crate::seed;
use crate::synth::{Corpus, Split, RATE_RATIO};
use crate::tensor::Tape;

/// One labelled training example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub audio: &'a FeatureSequence,
    pub visual: &'a FeatureSequence,
    pub label: usize,
}

/// Batch-mean branch losses and their sum.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Losses {
    pub branches: PerBranch<f64>,
    pub total: f64,
}

impl Losses {
    fn add(&mut self, other: &PerBranch<f64>, total: f64) {
        let acc = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + b);
            }
        };
        acc(&mut self.branches.audio, other.audio);
        acc(&mut self.branches.visual, other.visual);
        acc(&mut self.branches.audio_transferred, other.audio_transferred);
        acc(&mut self.branches.visual_transferred, other.visual_transferred);
        self.total += total;
    }

    fn scaled(&self, k: f64) -> Losses {
        Losses {
            branches: self.branches.map(|v| v * k),
            total: self.total * k,
        }
    }
}

fn sample_losses(model: &Model, tape: &mut Tape, s: &Sample, mask: LossMask) -> Result<(PerBranch<f64>, crate::Var)> {
    let vars = model.losses_on_tape(tape, s.audio, s.visual, s.label, mask)?;
    let total = Model::total_loss(tape, &vars)?;
    let values = vars.map(|&v| tape.value(v)[0]);
    let t = tape.value(total)[0];
    if !t.is_finite() {
        return Err(Error::Numerical(format!("non-finite training loss {t}")));
    }
    Ok((values, total))
}

/// Forward, backward and one optimizer update on `batch`. Returns the
/// batch-mean losses measured before the update.
pub fn train_step(model: &mut Model, opt: &mut Adam, batch: &[Sample], lr: f64, mask: LossMask) -> Result<Losses> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    model.visit_mut("", &mut |_, p| p.zero_grad());
    let mut sum = Losses::default();
    for s in batch {
        let mut tape = Tape::new();
        let (values, total) = sample_losses(model, &mut tape, s, mask)?;
        sum.add(&values, tape.value(total)[0]);
        let grads = tape.backward(total)?;
        model.visit_mut("", &mut |_, p| grads.accumulate_into(p));
    }
    let k = 1.0 / batch.len() as f64;
    opt.update(model, lr, k)?;
    Ok(sum.scaled(k))
}

/// Batch-mean losses without touching the model.
pub fn evaluate_losses(model: &Model, batch: &[Sample], mask: LossMask) -> Result<Losses> {
    if batch.is_empty() {
        return Err(Error::Empty("evaluation batch"));
    }
    let mut sum = Losses::default();
    for s in batch {
        let mut tape = Tape::new();
        let (values, total) = sample_losses(model, &mut tape, s, mask)?;
        sum.add(&values, tape.value(total)[0]);
    }
    Ok(sum.scaled(1.0 / batch.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub losses: Losses,
}

impl fmt::Display for EpochLog {
    /// `epoch lr L_a L_v L_at L_vt L_co`, `-` for absent branches.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: Option<&f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let b = self.losses.branches.as_array();
        write!(
            f,
            "{} {:e} {} {} {} {} {:.6}",
            self.epoch,
            self.lr,
            cell(b[0]),
            cell(b[1]),
            cell(b[2]),
            cell(b[3]),
            self.losses.total
        )
    }
}

pub const LOG_HEADER: &str = "epoch lr L_a L_v L_at L_vt L_co";

/// Training utterances with their dense class labels.
pub fn training_samples(corpus: &Corpus) -> Result<Vec<Sample<'_>>> {
    let classes = corpus.train_classes();
    if classes.len() < 2 {
        return Err(Error::Precondition("corpus has fewer than 2 training speakers".into()));
    }
    corpus
        .split(Split::Train)
        .map(|u| {
            if u.audio.frames() != RATE_RATIO * u.visual.frames() {
                return Err(Error::Precondition(format!(
                    "utterance {} breaks the {RATE_RATIO}:1 audio/visual frame contract",
                    u.id
                )));
            }
            Ok(Sample {
                audio: &u.audio,
                visual: &u.visual,
                label: classes[&u.speaker],
            })
        })
        .collect()
}

fn noisy(x: &FeatureSequence, sigma: f64, rng: &mut seed::Rng) -> FeatureSequence {
    let mut y = x.clone();
    for v in y.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *v += sigma * e;
    }
    y
}

/// Runs `cfg.epochs` epochs, calling `on_epoch` after each with the
/// epoch-mean losses.
pub fn run_epochs(
    model: &mut Model,
    opt: &mut Adam,
    corpus: &Corpus,
    cfg: &TrainConfig,
    root: u64,
    mask: LossMask,
    mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    let samples = training_samples(corpus)?;
    if samples.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if model.classes != corpus.train_classes().len() {
        return Err(Error::Precondition(format!(
            "model has {} classes but the corpus has {} training speakers",
            model.classes,
            corpus.train_classes().len()
        )));
    }
    let schedule = MultiStepLr {
        base: cfg.lr,
        milestones: cfg.milestones.clone(),
        gamma: cfg.gamma,
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seed::rng(root, &format!("batching/epoch{epoch}")));
        let mut aug = seed::rng(root, &format!("augment/epoch{epoch}"));
        let mut sum = Losses::default();
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<(Cow<FeatureSequence>, Cow<FeatureSequence>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let s = samples[i];
                    if cfg.feature_noise > 0.0 {
                        (
                            Cow::Owned(noisy(s.audio, cfg.feature_noise, &mut aug)),
                            Cow::Owned(noisy(s.visual, cfg.feature_noise, &mut aug)),
                            s.label,
                        )
                    } else {
                        (Cow::Borrowed(s.audio), Cow::Borrowed(s.visual), s.label)
                    }
                })
                .collect();
            let batch: Vec<Sample> = owned
                .iter()
                .map(|(a, v, label)| Sample {
                    audio: a,
                    visual: v,
                    label: *label,
                })
                .collect();
            let step = train_step(model, opt, &batch, lr, mask)?;
            sum.add(&step.branches.map(|v| v * batch.len() as f64), step.total * batch.len() as f64);
        }
        let log = EpochLog {
            epoch,
            lr,
            losses: sum.scaled(1.0 / samples.len() as f64),
        };
        on_epoch(&log)?;
        logs.push(log);
    }
    Ok(logs)
}

/// A trained model with its optimizer state and per-epoch log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub logs: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.optimizer, self.logs.len() as u64, cfg)
    }
}

fn fit(
    mut model: Model,
    cfg: &RunConfig,
    corpus: &Corpus,
    root: u64,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut optimizer = Adam::new(&model, cfg.train.weight_decay, cfg.train.decoupled_decay);
    let logs = run_epochs(&mut model, &mut optimizer, corpus, &cfg.train, root, LossMask::ALL, on_epoch)?;
    Ok(TrainOutcome { model, optimizer, logs })
}

/// Single encoder, decoder and loss head for one modality.
pub fn train_baseline(
    kind: ModelKind,
    cfg: &RunConfig,
    corpus: &Corpus,
    root: u64,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    if kind == ModelKind::CoLearn {
        return Err(Error::InvalidArgument("train_baseline needs a unimodal model kind".into()));
    }
    let model = Model::new(kind, &cfg.model, corpus.train_classes().len(), root)?;
    fit(model, cfg, corpus, root, on_epoch)
}

/// Co-learning from a fresh initialisation.
pub fn run_training(
    cfg: &RunConfig,
    corpus: &Corpus,
    root: u64,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = Model::new(ModelKind::CoLearn, &cfg.model, corpus.train_classes().len(), root)?;
    fit(model, cfg, corpus, root, on_epoch)
}

/// Co-learning model whose encoders (and, with `warm_decoders`, decoders
/// and loss heads) come from unimodal baseline checkpoints. Boosters and
/// transferred branches start fresh.
pub fn warm_start(audio: &Checkpoint, visual: &Checkpoint, cfg: &RunConfig, root: u64) -> Result<Model> {
    if audio.kind != ModelKind::BaselineAudio || visual.kind != ModelKind::BaselineVisual {
        return Err(Error::Precondition(format!(
            "warm start needs baseline-audio and baseline-visual checkpoints, got {} and {}",
            audio.kind, visual.kind
        )));
    }
    if audio.classes != visual.classes {
        return Err(Error::Precondition(format!(
            "baseline checkpoints disagree on speaker count ({} vs {})",
            audio.classes, visual.classes
        )));
    }
    let mut model = Model::new(ModelKind::CoLearn, &cfg.model, audio.classes, root)?;
    let wanted = |name: &str, modality: &str| {
        name.starts_with(&format!("{modality}.encoder."))
            || (cfg.train.warm_decoders
                && (name.starts_with(&format!("{modality}.decoder.")) || name.starts_with(&format!("{modality}.head."))))
    };
    load_into(
        &mut model,
        |name| {
            if wanted(name, "audio") {
                audio.tensor(name)
            } else if wanted(name, "visual") {
                visual.tensor(name)
            } else {
                None
            }
        },
        false,
    )?;
    // Every transferred tensor must actually have been present.
    for (name, _) in model.named_tensors() {
        let donor = if wanted(&name, "audio") {
            Some(audio)
        } else if wanted(&name, "visual") {
            Some(visual)
        } else {
            None
        };
        if let Some(ck) = donor {
            if ck.tensor(&name).is_none() {
                return Err(Error::Precondition(format!("baseline checkpoint lacks `{name}`")));
            }
        }
    }
    Ok(model)
}

/// Co-learning continued from a warm-started model.
pub fn train_warm(
    audio: &Checkpoint,
    visual: &Checkpoint,
    cfg: &RunConfig,
    corpus: &Corpus,
    root: u64,
    on_epoch: impl FnMut(&EpochLog) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut model = warm_start(audio, visual, cfg, root)?;
    if cfg.train.freeze_encoders {
        model.set_encoders_trainable(false);
    }
    fit(model, cfg, corpus, root, on_epoch)
}
