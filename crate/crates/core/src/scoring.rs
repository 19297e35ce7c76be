//! Trial scoring, score fusion and verification metrics.
//!
//! Both metrics sweep thresholds placed at the midpoints between consecutive
//! distinct scores plus the two infinite endpoints. A trial is accepted when
//! its score is `>= threshold`: the false-acceptance rate counts accepted
//! non-targets, the false-rejection rate counts rejected targets.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use crate::decoders::SpeakerEmbedding;
use crate::error::{Error, Result};

pub fn cosine_score(a: &SpeakerEmbedding, b: &SpeakerEmbedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("cosine_score", &[a.dim()], &[b.dim()]));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm("cosine_score"));
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Weights of a three-score fusion: primary modality, auxiliary modality,
/// and the auxiliary modality's transferred counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub primary: f64,
    pub auxiliary: f64,
    pub transferred: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        FusionWeights {
            primary: 0.5,
            auxiliary: 0.25,
            transferred: 0.25,
        }
    }
}

impl FusionWeights {
    /// The two auxiliary terms are summed first: with the default weights
    /// `0.25x + 0.25x` and `0.5x + 0.5x` are exact, so equal inputs fuse to
    /// themselves bit for bit.
    pub fn fuse(&self, primary: f64, auxiliary: f64, transferred: f64) -> f64 {
        self.primary * primary + (self.auxiliary * auxiliary + self.transferred * transferred)
    }
}

/// `0.5·s_a + 0.25·s_v + 0.25·s_v′`
pub fn fuse_audio_driven(s_a: f64, s_v: f64, s_vt: f64) -> f64 {
    FusionWeights::default().fuse(s_a, s_v, s_vt)
}

/// `0.5·s_v + 0.25·s_a + 0.25·s_a′`
pub fn fuse_visual_driven(s_v: f64, s_a: f64, s_at: f64) -> f64 {
    FusionWeights::default().fuse(s_v, s_a, s_at)
}

/// Error rates at one threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

/// FAR/FRR at `-inf`, at the midpoint between every pair of consecutive
/// distinct scores, and at `+inf`, in increasing threshold order.
pub fn operating_points(scores: &[f64], labels: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::shape("operating_points", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));

    let (np, nn) = (n_pos as f64, n_neg as f64);
    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(OperatingPoint {
        threshold: f64::NEG_INFINITY,
        far: 1.0,
        frr: 0.0,
    });
    // Positives below / negatives at-or-above the running threshold.
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let s = order[i].0;
        while i < order.len() && order[i].0 == s {
            if order[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let threshold = if i < order.len() {
            s + (order[i].0 - s) / 2.0
        } else {
            f64::INFINITY
        };
        points.push(OperatingPoint {
            threshold,
            far: (n_neg - neg_below) as f64 / nn,
            frr: pos_below as f64 / np,
        });
    }
    Ok(points)
}

/// Equal error rate, linearly interpolated between the two adjacent
/// operating points where `FAR − FRR` changes sign. Returns `(eer, threshold)`.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    let points = operating_points(scores, labels)?;
    Ok(eer_from_points(&points))
}

pub(crate) fn eer_from_points(points: &[OperatingPoint]) -> (f64, f64) {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.far - a.frr;
        let db = b.far - b.frr;
        if da == 0.0 {
            return (a.far, a.threshold);
        }
        if da > 0.0 && db <= 0.0 {
            if db == 0.0 {
                return (b.far, b.threshold);
            }
            let alpha = da / (da - db);
            let eer = a.far + alpha * (b.far - a.far);
            let threshold = interpolate_threshold(a.threshold, b.threshold, alpha);
            return (eer, threshold);
        }
    }
    // The last point always has FAR = 0 <= FRR = 1, so the sweep above returns.
    unreachable!("FAR - FRR ends non-positive")
}

fn interpolate_threshold(lo: f64, hi: f64, alpha: f64) -> f64 {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) => lo + alpha * (hi - lo),
        (true, false) => lo,
        (false, true) => hi,
        (false, false) => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn normalizer(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }

    pub fn cost(&self, far: f64, frr: f64) -> f64 {
        (self.c_miss * self.p_target * frr + self.c_fa * (1.0 - self.p_target) * far) / self.normalizer()
    }
}

/// Minimum normalised detection cost over the threshold sweep.
pub fn compute_min_dcf(scores: &[f64], labels: &[bool], params: DcfParams) -> Result<f64> {
    let points = operating_points(scores, labels)?;
    Ok(min_dcf_from_points(&points, params).0)
}

pub(crate) fn min_dcf_from_points(points: &[OperatingPoint], params: DcfParams) -> (f64, f64) {
    points
        .iter()
        .map(|p| (params.cost(p.far, p.frr), p.threshold))
        .fold((f64::INFINITY, 0.0), |best, c| if c.0 < best.0 { c } else { best })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub min_dcf_threshold: f64,
}

pub fn evaluate_scores(scores: &[f64], labels: &[bool], params: DcfParams) -> Result<Metrics> {
    let points = operating_points(scores, labels)?;
    let (eer, eer_threshold) = eer_from_points(&points);
    let (min_dcf, min_dcf_threshold) = min_dcf_from_points(&points, params);
    Ok(Metrics {
        eer,
        eer_threshold,
        min_dcf,
        min_dcf_threshold,
    })
}

/// Branch scores for one trial. Fused scores are derived.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialScore {
    pub enroll: String,
    pub test: String,
    pub label: bool,
    pub audio: Option<f64>,
    pub visual: Option<f64>,
    pub audio_transferred: Option<f64>,
    pub visual_transferred: Option<f64>,
}

impl TrialScore {
    pub fn audio_driven(&self, w: &FusionWeights) -> Option<f64> {
        Some(w.fuse(self.audio?, self.visual?, self.visual_transferred?))
    }

    pub fn visual_driven(&self, w: &FusionWeights) -> Option<f64> {
        Some(w.fuse(self.visual?, self.audio?, self.audio_transferred?))
    }
}

/// The row taxonomy of an evaluation report.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum System {
    Audio,
    Visual,
    AudioTransferred,
    VisualTransferred,
    AudioDrivenFusion,
    VisualDrivenFusion,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Audio,
        System::Visual,
        System::AudioTransferred,
        System::VisualTransferred,
        System::AudioDrivenFusion,
        System::VisualDrivenFusion,
    ];

    pub fn key(self) -> &'static str {
        match self {
            System::Audio => "audio",
            System::Visual => "visual",
            System::AudioTransferred => "audio_transferred",
            System::VisualTransferred => "visual_transferred",
            System::AudioDrivenFusion => "audio_driven_fusion",
            System::VisualDrivenFusion => "visual_driven_fusion",
        }
    }

    fn score(self, t: &TrialScore, w: &FusionWeights) -> Option<f64> {
        match self {
            System::Audio => t.audio,
            System::Visual => t.visual,
            System::AudioTransferred => t.audio_transferred,
            System::VisualTransferred => t.visual_transferred,
            System::AudioDrivenFusion => t.audio_driven(w),
            System::VisualDrivenFusion => t.visual_driven(w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub trials: Vec<TrialScore>,
    pub rows: Vec<(System, Metrics)>,
}

pub const EER_CONVENTION: &str = "linear-interpolation-at-far-frr-crossing";

impl ScoreReport {
    /// Summarises every system for which all trials carry a score.
    pub fn build(trials: Vec<TrialScore>, weights: &FusionWeights, params: DcfParams) -> Result<Self> {
        let labels: Vec<bool> = trials.iter().map(|t| t.label).collect();
        let mut rows = Vec::new();
        for sys in System::ALL {
            let scores: Option<Vec<f64>> = trials.iter().map(|t| sys.score(t, weights)).collect();
            if let Some(scores) = scores {
                rows.push((sys, evaluate_scores(&scores, &labels, params)?));
            }
        }
        Ok(ScoreReport { trials, rows })
    }

    pub fn metrics(&self, sys: System) -> Option<&Metrics> {
        self.rows.iter().find(|(s, _)| *s == sys).map(|(_, m)| m)
    }

    /// `enroll test label score_a score_v score_at score_vt`, six decimals,
    /// `-` for a branch the model does not have.
    pub fn write_scores(&self, mut out: impl Write) -> io::Result<()> {
        let fmt = |s: Option<f64>| s.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        for t in &self.trials {
            writeln!(
                out,
                "{} {} {} {} {} {} {}",
                t.enroll,
                t.test,
                u8::from(t.label),
                fmt(t.audio),
                fmt(t.visual),
                fmt(t.audio_transferred),
                fmt(t.visual_transferred)
            )?;
        }
        Ok(())
    }

    /// `key = value` summary lines.
    pub fn render_summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "eer_convention = {EER_CONVENTION}");
        let _ = writeln!(s, "trials = {}", self.trials.len());
        let _ = writeln!(s, "targets = {}", self.trials.iter().filter(|t| t.label).count());
        for (sys, m) in &self.rows {
            let k = sys.key();
            let _ = writeln!(s, "{k}.eer = {}", m.eer);
            let _ = writeln!(s, "{k}.eer_threshold = {}", m.eer_threshold);
            let _ = writeln!(s, "{k}.min_dcf = {}", m.min_dcf);
        }
        s
    }
}

/// Reads a score file written by [`ScoreReport::write_scores`].
pub fn read_scores(path: &Path) -> Result<Vec<TrialScore>> {
    let file = fs::File::open(path)?;
    let parse = |tok: &str| -> Result<Option<f64>> {
        if tok == "-" {
            return Ok(None);
        }
        tok.parse::<f64>()
            .map(Some)
            .map_err(|e| Error::format(path, format!("bad score {tok:?}: {e}")))
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 7 {
            return Err(Error::format(path, format!("line {}: expected 7 fields", n + 1)));
        }
        let label = match f[2] {
            "1" => true,
            "0" => false,
            other => return Err(Error::format(path, format!("line {}: bad label {other:?}", n + 1))),
        };
        out.push(TrialScore {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            label,
            audio: parse(f[3])?,
            visual: parse(f[4])?,
            audio_transferred: parse(f[5])?,
            visual_transferred: parse(f[6])?,
        });
    }
    Ok(out)
}
