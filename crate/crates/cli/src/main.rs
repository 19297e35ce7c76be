//! `colearn`: generate a synthetic corpus, train baseline or co-learning
//! models, evaluate checkpoints and run whole-model gradient checks.
//!
//! Exit codes: 0 success, 2 configuration or precondition error,
//! 3 numerical failure (non-finite loss or a failed gradient check).

mod manifest;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use colearn_core::checkpoint::Checkpoint;
use colearn_core::config::RunConfig;
use colearn_core::eval::evaluate;
use colearn_core::gradcheck::check_micro_model;
use colearn_core::model::ModelKind;
use colearn_core::scoring::System;
use colearn_core::synth::{corpus_files, read_trials, Corpus, Split};
use colearn_core::tensor::{Fault, OpKind};
use colearn_core::train::{run_training, train_baseline, train_warm, EpochLog, TrainOutcome, LOG_HEADER};
use colearn_core::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "colearn", version, about = "Audio-visual speaker co-learning on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Sectioned `key = value` config file; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed for every random substream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override one config value, e.g. `--set train.lr=5e-4`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and trial list.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Replace the corpus in a non-empty output directory.
        #[arg(long)]
        force: bool,
        /// Target and non-target trial counts.
        #[arg(long, num_args = 2, value_names = ["TARGETS", "NONTARGETS"])]
        trials: Option<Vec<usize>>,
    },
    /// Train a baseline or co-learning model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        audio_checkpoint: Option<PathBuf>,
        #[arg(long)]
        visual_checkpoint: Option<PathBuf>,
    },
    /// Score the trial list with a checkpoint and report EER/minDCF.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Trial list to score instead of the corpus's own.
        #[arg(long)]
        trials: Option<PathBuf>,
    },
    /// Finite-difference check of every micro-model parameter tensor.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Scale the backward rule of one primitive (negative control).
        #[arg(long, value_name = "OP")]
        fault: Option<String>,
        #[arg(long, default_value_t = 1.5)]
        fault_factor: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    BaselineAudio,
    BaselineVisual,
    CoLearnScratch,
    CoLearnWarm,
}

/// A failure together with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Numerical(_) | Error::ZeroNorm(_) | Error::NonScalarLoss(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn precondition(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            common,
            out,
            force,
            trials,
        } => gen_data(&common, &out, force, trials),
        Command::Train {
            common,
            out,
            corpus,
            mode,
            epochs,
            audio_checkpoint,
            visual_checkpoint,
        } => train(
            &common,
            &out,
            &corpus,
            mode,
            epochs,
            audio_checkpoint.as_deref(),
            visual_checkpoint.as_deref(),
        ),
        Command::Eval {
            common,
            out,
            checkpoint,
            corpus,
            trials,
        } => eval(&common, &out, &checkpoint, &corpus, trials.as_deref()),
        Command::Gradcheck {
            common,
            out,
            fault,
            fault_factor,
        } => gradcheck(&common, out.as_deref(), fault.as_deref(), fault_factor),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_config(common: &Common, base: Option<RunConfig>) -> Outcome<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::from_file(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    for o in &common.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| precondition(format!("--set expects SECTION.KEY=VALUE, got `{o}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs `body` with a manifest that is on disk (status `running`) before
/// any work starts and rewritten with the final status afterwards.
fn with_manifest(
    mut m: RunManifest,
    body: impl FnOnce(&mut RunManifest) -> Outcome,
) -> Outcome {
    m.write()?;
    let result = body(&mut m);
    m.status = match &result {
        Ok(()) => "ok".into(),
        Err(f) => format!("failed ({}): {}", f.code, f.message),
    };
    m.write()?;
    result
}

fn gen_data(common: &Common, out: &Path, force: bool, trials: Option<Vec<usize>>) -> Outcome {
    let mut cfg = load_config(common, None)?;
    if let Some(t) = trials {
        cfg.data.targets = t[0];
        cfg.data.nontargets = t[1];
    }
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            return Err(precondition(format!(
                "{} is not empty; pass --force to replace the corpus",
                out.display()
            )));
        }
        for sub in ["audio", "visual"] {
            if out.join(sub).is_dir() {
                fs::remove_dir_all(out.join(sub))?;
            }
        }
    }
    let m = RunManifest::new("gen-data", common.config.as_deref(), cfg.render(), common.seed, out);
    with_manifest(m, |m| {
        let corpus = Corpus::generate(&cfg.data, common.seed)?;
        corpus.write(out)?;
        for f in corpus_files(out)? {
            m.artifact(&f)?;
        }
        print_corpus_stats(&corpus);
        Ok(())
    })
}

fn print_corpus_stats(corpus: &Corpus) {
    println!("{:<6} {:>8} {:>10} {:>12} {:>13}", "split", "speakers", "utterances", "audio_frames", "visual_frames");
    for split in [Split::Train, Split::Test] {
        let utts: Vec<_> = corpus.split(split).collect();
        let frames = |f: &dyn Fn(&colearn_core::synth::Utterance) -> usize| utts.first().map_or(0, |u| f(u));
        println!(
            "{:<6} {:>8} {:>10} {:>12} {:>13}",
            split.as_str(),
            corpus.speaker_count(split),
            utts.len(),
            frames(&|u| u.audio.frames()),
            frames(&|u| u.visual.frames()),
        );
    }
    let targets = corpus.trials.iter().filter(|t| t.target).count();
    println!("trials: {} ({} target, {} non-target)", corpus.trials.len(), targets, corpus.trials.len() - targets);
}

#[allow(clippy::too_many_arguments)]
fn train(
    common: &Common,
    out: &Path,
    corpus_dir: &Path,
    mode: Mode,
    epochs: Option<usize>,
    audio_ck: Option<&Path>,
    visual_ck: Option<&Path>,
) -> Outcome {
    let warm = match (mode, audio_ck, visual_ck) {
        (Mode::CoLearnWarm, Some(a), Some(v)) => Some((Checkpoint::load(a)?, Checkpoint::load(v)?)),
        (Mode::CoLearnWarm, _, _) => {
            return Err(precondition(
                "--mode co-learn-warm needs --audio-checkpoint and --visual-checkpoint; \
                 produce them with `train --mode baseline-audio` and `train --mode baseline-visual`",
            ))
        }
        _ => None,
    };
    // A warm start inherits the baselines' configuration unless one is given.
    let base = warm.as_ref().map(|(a, _)| a.run_config()).transpose()?;
    let mut cfg = load_config(common, base)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let corpus = Corpus::read(corpus_dir)?;

    let source = common.config.as_deref().or(if warm.is_some() { audio_ck } else { None });
    let mut m = RunManifest::new("train", source, cfg.render(), common.seed, out);
    m.input("corpus/index.txt", &corpus_dir.join(Corpus::INDEX_FILE))?;
    for (label, path) in [("audio_checkpoint", audio_ck), ("visual_checkpoint", visual_ck)] {
        if let (Some(path), true) = (path, warm.is_some()) {
            m.input(label, path)?;
        }
    }
    with_manifest(m, |m| {
        let log_path = out.join("train.log");
        let mut log = File::create(&log_path)?;
        writeln!(log, "{LOG_HEADER}")?;
        println!("{LOG_HEADER}");
        let mut log = OpenOptions::new().append(true).open(&log_path)?;
        let on_epoch = |l: &EpochLog| -> colearn_core::Result<()> {
            println!("{l}");
            writeln!(log, "{l}")?;
            Ok(())
        };
        let seed = common.seed;
        let outcome: TrainOutcome = match (mode, &warm) {
            (Mode::BaselineAudio, _) => train_baseline(ModelKind::BaselineAudio, &cfg, &corpus, seed, on_epoch)?,
            (Mode::BaselineVisual, _) => train_baseline(ModelKind::BaselineVisual, &cfg, &corpus, seed, on_epoch)?,
            (Mode::CoLearnScratch, _) => run_training(&cfg, &corpus, seed, on_epoch)?,
            (Mode::CoLearnWarm, Some((a, v))) => train_warm(a, v, &cfg, &corpus, seed, on_epoch)?,
            (Mode::CoLearnWarm, None) => unreachable!("checked above"),
        };
        outcome.checkpoint(&cfg).save(&out.join("model.ckpt"))?;
        m.artifact(Path::new("model.ckpt"))?;
        m.artifact(Path::new("train.log"))?;
        Ok(())
    })
}

fn eval(common: &Common, out: &Path, checkpoint: &Path, corpus_dir: &Path, trials: Option<&Path>) -> Outcome {
    let ck = Checkpoint::load(checkpoint)?;
    // The model is rebuilt from the checkpoint's own configuration.
    let (model, _, cfg) = ck.restore()?;
    let corpus = Corpus::read(corpus_dir)?;
    let trial_list = trials.map(read_trials).transpose()?;

    let mut m = RunManifest::new("eval", Some(checkpoint), cfg.render(), common.seed, out);
    m.input("checkpoint", checkpoint)?;
    m.input("corpus/index.txt", &corpus_dir.join(Corpus::INDEX_FILE))?;
    if let Some(t) = trials {
        m.input("trials", t)?;
    }
    with_manifest(m, |m| {
        let report = evaluate(&model, &corpus, trial_list.as_deref())?;
        report.write_scores(File::create(out.join("scores.txt"))?)?;
        fs::write(out.join("report.txt"), report.render_summary())?;
        m.artifact(Path::new("scores.txt"))?;
        m.artifact(Path::new("report.txt"))?;
        println!("{:<22} {:>8} {:>8}", "system", "EER(%)", "minDCF");
        for sys in System::ALL {
            if let Some(r) = report.metrics(sys) {
                println!("{:<22} {:>8.3} {:>8.4}", sys.key(), 100.0 * r.eer, r.min_dcf);
            }
        }
        Ok(())
    })
}

fn gradcheck(common: &Common, out: Option<&Path>, fault: Option<&str>, factor: f64) -> Outcome {
    let fault = fault
        .map(|name| {
            let op = OpKind::parse(name).ok_or_else(|| {
                let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
                precondition(format!("unknown primitive `{name}`; one of {}", known.join(", ")))
            })?;
            Ok::<_, Failure>(Fault { op, factor })
        })
        .transpose()?;
    let body = |m: Option<&mut RunManifest>| -> Outcome {
        let report = check_micro_model(common.seed, fault)?;
        let mut table = format!("{:<32} {:>12}  status\n", "module", "max_rel_err");
        for (module, err) in report.by_module(2) {
            let status = if err < report.tolerance { "ok" } else { "FAIL" };
            table.push_str(&format!("{module:<32} {err:>12.3e}  {status}\n"));
        }
        print!("{table}");
        if let (Some(dir), Some(m)) = (out, m) {
            fs::write(dir.join("gradcheck.txt"), format!("{table}\n{report}"))?;
            m.artifact(Path::new("gradcheck.txt"))?;
        }
        if report.passed() {
            println!("gradcheck passed (max relative error {:.3e})", report.max_rel_err());
            Ok(())
        } else {
            let names: Vec<&str> = report.failures().map(|t| t.name.as_str()).collect();
            Err(Failure {
                code: 3,
                message: format!("gradcheck failed for {}", names.join(", ")),
            })
        }
    };
    match out {
        Some(dir) => {
            let cfg = format!("# micro model\n{:?}\n", colearn_core::gradcheck::micro_model_config());
            let m = RunManifest::new("gradcheck", common.config.as_deref(), cfg, common.seed, dir);
            with_manifest(m, |m| body(Some(m)))
        }
        None => body(None),
    }
}
