//! Central finite-difference checks of tape gradients.
//!
//! Errors are measured per tensor as `‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖)`,
//! with an absolute floor on the denominator so that tensors whose gradient
//! is legitimately zero do not report rounding noise as failure.
//!
//! A difference quotient is only meaningful if both probes stay on the same
//! smooth piece as the unperturbed point. When a probe flips a ReLU, `max`
//! or clamp decision, the element is retried with a step ten times smaller,
//! down to [`MIN_STEP`]; elements that still straddle a kink are excluded
//! and counted in [`TensorCheck::kinks`].

use std::fmt;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{LossMask, Model, ModelKind};
use crate::nn::Module;
use crate::seed;
use crate::synth::{gen_population, gen_utterance, MixingMaps, SyntheticUtterance};
use crate::tensor::{Fault, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const MIN_STEP: f64 = 1e-8;
/// Below this gradient norm a tensor is compared on absolute error; it sits
/// well above the rounding noise of a difference quotient at the default step.
pub const DENOMINATOR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    pub rel_err: f64,
    /// Elements left out because every probe step crossed a kink.
    pub kinks: usize,
    /// Elements that needed a step smaller than the default.
    pub refined: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl TensorCheck {
    pub fn ok(&self, tolerance: f64) -> bool {
        self.rel_err < tolerance && (self.kinks < self.len || self.len == 0)
    }
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Tensors over tolerance, or with no element left to compare.
    pub fn failures(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.ok(self.tolerance))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max)
    }

    /// Worst error per module, grouping tensors by the first `depth` name
    /// components (`audio.encoder.conv0.weight` → `audio.encoder` at depth 2).
    pub fn by_module(&self, depth: usize) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = Vec::new();
        for t in &self.tensors {
            let key: Vec<&str> = t.name.split('.').take(depth).collect();
            let key = key.join(".");
            match out.iter_mut().find(|(k, _)| *k == key) {
                Some((_, e)) => *e = e.max(t.rel_err),
                None => out.push((key, t.rel_err)),
            }
        }
        out
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            let status = if t.ok(self.tolerance) { "ok" } else { "FAIL" };
            writeln!(
                f,
                "{status:4} {:48} n={:<6} rel={:.3e} abs={:.3e} refined={} kinks={}",
                t.name, t.len, t.rel_err, t.max_abs_err, t.refined, t.kinks
            )?;
        }
        Ok(())
    }
}

fn compare(name: String, analytic: &[f64], numeric: &[Option<f64>], refined: usize) -> TensorCheck {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut max_abs: f64 = 0.0;
    let kinks = numeric.iter().filter(|n| n.is_none()).count();
    for (a, n) in analytic.iter().zip(numeric) {
        let Some(n) = n else { continue };
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = (na.sqrt() + nn.sqrt()).max(DENOMINATOR_FLOOR);
    TensorCheck {
        name,
        len: analytic.len(),
        max_abs_err: max_abs,
        rel_err: diff.sqrt() / denom,
        kinks,
        refined,
    }
}

/// Central difference at `step`, shrinking it while either probe leaves the
/// smooth piece identified by `center`. `eval` returns the loss and branch
/// signature at a point given as an offset from the current value.
fn difference(
    step: f64,
    center: u64,
    mut eval: impl FnMut(f64) -> Result<(f64, u64)>,
) -> Result<(Option<f64>, bool)> {
    let mut h = step;
    let mut refined = false;
    while h >= MIN_STEP {
        let (plus, sp) = eval(h)?;
        let (minus, sm) = eval(-h)?;
        if sp == center && sm == center {
            return Ok((Some((plus - minus) / (2.0 * h)), refined));
        }
        h /= 10.0;
        refined = true;
    }
    Ok((None, refined))
}

/// Checks the gradient of `loss` with respect to every parameter of `module`
/// whose name passes `filter`. `fault` corrupts one backward rule for
/// negative-control runs.
pub fn check_module<M, F>(
    module: &mut M,
    step: f64,
    tolerance: f64,
    fault: Option<Fault>,
    filter: impl Fn(&str) -> bool,
    loss: F,
) -> Result<GradcheckReport>
where
    M: Module,
    F: Fn(&M, &mut Tape) -> Result<Var>,
{
    check_module_split(module, step, tolerance, fault, filter, &loss, |_, m, t| loss(m, t))
}

/// Like [`check_module`], but the finite differences for tensor `name` use
/// `partial(name, ..)`, which must differ from `loss` only by terms that do
/// not depend on that tensor. Dropping constant terms keeps the difference
/// quotient out of the rounding noise of a large total.
pub fn check_module_split<M, F, P>(
    module: &mut M,
    step: f64,
    tolerance: f64,
    fault: Option<Fault>,
    filter: impl Fn(&str) -> bool,
    loss: F,
    partial: P,
) -> Result<GradcheckReport>
where
    M: Module,
    F: Fn(&M, &mut Tape) -> Result<Var>,
    P: Fn(&str, &M, &mut Tape) -> Result<Var>,
{
    let mut tape = fault.map(Tape::with_fault).unwrap_or_default();
    let out = loss(module, &mut tape)?;
    let grads = tape.backward(out)?;

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |name, p| {
        if filter(name) {
            let g = grads.param(p.id()).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]);
            analytic.push((name.to_string(), g));
        }
    });

    let eval = |name: &str, m: &M| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let v = partial(name, m, &mut t)?;
        Ok((t.scalar(v)?, t.branch_signature()))
    };

    let mut tensors = Vec::with_capacity(analytic.len());
    for (name, a) in analytic {
        let (_, center) = eval(&name, module)?;
        let mut numeric = Vec::with_capacity(a.len());
        let mut refined = 0;
        for i in 0..a.len() {
            let orig = nudge(module, &name, i, None);
            let (d, r) = difference(step, center, |offset| {
                nudge(module, &name, i, Some(orig + offset));
                eval(&name, module)
            })?;
            nudge(module, &name, i, Some(orig));
            numeric.push(d);
            refined += usize::from(r);
        }
        tensors.push(compare(name, &a, &numeric, refined));
    }
    Ok(GradcheckReport { tolerance, tensors })
}

/// Reads element `i` of the named tensor, optionally overwriting it.
fn nudge<M: Module>(module: &mut M, name: &str, i: usize, set: Option<f64>) -> f64 {
    let mut old = f64::NAN;
    module.visit_mut("", &mut |n, p| {
        if n == name {
            old = p.values()[i];
            if let Some(v) = set {
                p.values_mut()[i] = v;
            }
        }
    });
    old
}

/// Finite-difference check with respect to tape inputs rather than
/// parameters. Each input is `(rows, cols, values)`.
pub fn check_inputs(
    inputs: &[(usize, usize, Vec<f64>)],
    step: f64,
    tolerance: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    let build = |tape: &mut Tape, values: &[Vec<f64>]| -> Result<(Vec<Var>, Var)> {
        let vars = inputs
            .iter()
            .zip(values)
            .map(|(&(r, c, _), v)| tape.input(r, c, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(tape, &vars)?;
        Ok((vars, out))
    };
    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, _, v)| v.clone()).collect();

    let mut tape = Tape::new();
    let (vars, out) = build(&mut tape, &values)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&values)
        .map(|(&v, x)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let probe = |values: &[Vec<f64>]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let (_, o) = build(&mut t, values)?;
        Ok((t.scalar(o)?, t.branch_signature()))
    };
    let (_, center) = probe(&values)?;
    let mut tensors = Vec::new();
    for (k, a) in analytic.into_iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        let mut refined = 0;
        for i in 0..a.len() {
            let orig = values[k][i];
            let (d, r) = difference(step, center, |offset| {
                values[k][i] = orig + offset;
                probe(&values)
            })?;
            values[k][i] = orig;
            numeric.push(d);
            refined += usize::from(r);
        }
        tensors.push(compare(format!("input{k}"), &a, &numeric, refined));
    }
    Ok(GradcheckReport { tolerance, tensors })
}

/// The small co-learning network used for whole-model gradient checks:
/// `d=8`, two heads, one block per booster, three speakers.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        audio_channels: 4,
        visual_channels: 4,
        model_dim: 8,
        heads: 2,
        blocks: 1,
        ffn_hidden: 16,
        asp_hidden: 4,
        embedding_dim: 4,
        ..ModelConfig::default()
    }
}

pub const MICRO_SPEAKERS: usize = 3;
pub const MICRO_VISUAL_FRAMES: usize = 5;

/// Checks every tensor of the micro model against the summed four-branch
/// loss of one utterance per speaker.
pub fn check_micro_model(root: u64, fault: Option<Fault>) -> Result<GradcheckReport> {
    let cfg = micro_model_config();
    let mut model = Model::new(ModelKind::CoLearn, &cfg, MICRO_SPEAKERS, seed::substream(root, "gradcheck/model"))?;
    let speakers = gen_population(MICRO_SPEAKERS, seed::substream(root, "gradcheck/population"))?;
    let mixing = MixingMaps::generate(seed::substream(root, "gradcheck/mixing"), 1.0);
    let utts: Vec<SyntheticUtterance> = speakers
        .iter()
        .map(|s| {
            let name = format!("gradcheck/utt{}", s.id);
            gen_utterance(s, &mixing, MICRO_VISUAL_FRAMES, 0.5, 1.0, seed::substream(root, &name))
        })
        .collect::<Result<_>>()?;
    let summed = |m: &Model, tape: &mut Tape, mask: LossMask| -> Result<Var> {
        let mut total = None;
        for (label, u) in utts.iter().enumerate() {
            let losses = m.losses_on_tape(tape, &u.audio, &u.visual, label, mask)?;
            let l = Model::total_loss(tape, &losses)?;
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        Ok(total.expect("three utterances"))
    };
    check_module_split(
        &mut model,
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        fault,
        |_| true,
        |m, tape| summed(m, tape, LossMask::ALL),
        |name, m, tape| summed(m, tape, LossMask::depending_on(name)),
    )
}
