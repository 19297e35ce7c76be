//! Attentive statistics pooling decoders and the additive angular margin
//! softmax loss.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, join, Affine, Conv1d, Module};
use crate::tensor::{ParamTensor, Tape, Var};

/// Floor on the attentive variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingAttention {
    /// One softmax over frames per channel.
    PerChannel,
    /// One softmax over frames shared by all channels.
    Shared,
}

#[derive(Debug, Clone)]
pub struct AspDecoder {
    pub scorer_in: Conv1d,
    pub scorer_out: Conv1d,
    pub embedding: Affine,
    pub attention: PoolingAttention,
}

#[derive(Debug, Clone, Copy)]
pub struct PooledOutput {
    pub embedding: Var,
    /// Attention weights, `C×T` (per channel) or `1×T` (shared).
    pub attention: Var,
    pub mean: Var,
    pub std: Var,
}

impl AspDecoder {
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        hidden: usize,
        embedding_dim: usize,
        attention: PoolingAttention,
        rng: &mut R,
    ) -> Result<Self> {
        let score_rows = match attention {
            PoolingAttention::PerChannel => channels,
            PoolingAttention::Shared => 1,
        };
        Ok(AspDecoder {
            scorer_in: Conv1d::new(channels, hidden, 1, 1, rng)?,
            scorer_out: Conv1d::new(hidden, score_rows, 1, 1, rng)?,
            embedding: Affine::new(2 * channels, embedding_dim, rng),
            attention,
        })
    }

    pub fn channels(&self) -> usize {
        self.scorer_in.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding.output_dim()
    }

    /// Pools a `C×T` sequence into an `E×1` embedding.
    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<PooledOutput> {
        let (c, t) = tape.dims(features);
        if t == 0 {
            return Err(Error::Empty("asp_pool"));
        }
        if c != self.channels() {
            return Err(Error::shape("asp_pool", &[self.channels()], &[c, t]));
        }
        let h = self.scorer_in.forward(tape, features)?;
        let h = tape.tanh(h);
        let scores = self.scorer_out.forward(tape, h)?;
        let attention = tape.softmax_rows(scores);
        let weights = match self.attention {
            PoolingAttention::PerChannel => attention,
            PoolingAttention::Shared => {
                let ones = tape.constant(c, 1, vec![1.0; c])?;
                tape.matmul(ones, attention)?
            }
        };
        let weighted = tape.mul(weights, features)?;
        let mean = tape.sum_rows(weighted);
        // Centred form: every weight row sums to one, so this equals
        // E[x²] − μ² without that formula's cancellation.
        let neg_mean = tape.scale(mean, -1.0);
        let centred = tape.add_col_bias(features, neg_mean)?;
        let sq = tape.mul(centred, centred)?;
        let weighted_sq = tape.mul(weights, sq)?;
        let var = tape.sum_rows(weighted_sq);
        let var = tape.clamp_min(var, VARIANCE_FLOOR);
        let std = tape.sqrt(var);
        let stats = tape.vstack(&[mean, std])?;
        let embedding = self.embedding.forward(tape, stats)?;
        Ok(PooledOutput {
            embedding,
            attention,
            mean,
            std,
        })
    }
}

impl Module for AspDecoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.scorer_in.visit(&join(prefix, "scorer_in"), f);
        self.scorer_out.visit(&join(prefix, "scorer_out"), f);
        self.embedding.visit(&join(prefix, "embedding"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.scorer_in.visit_mut(&join(prefix, "scorer_in"), f);
        self.scorer_out.visit_mut(&join(prefix, "scorer_out"), f);
        self.embedding.visit_mut(&join(prefix, "embedding"), f);
    }
}

/// A fixed-dimension speaker identity vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(pub Vec<f64>);

impl SpeakerEmbedding {
    pub fn from_tape(tape: &Tape, v: Var) -> Self {
        SpeakerEmbedding(tape.value(v).to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

/// Class weights for the additive angular margin softmax.
#[derive(Debug, Clone)]
pub struct AamSoftmaxHead {
    /// `n_classes×E`, row-normalised at use.
    pub weight: ParamTensor,
    pub scale: f64,
    pub margin: f64,
}

impl AamSoftmaxHead {
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        embedding_dim: usize,
        scale: f64,
        margin: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if scale <= 0.0 || !(0.0..FRAC_PI_2).contains(&margin) {
            return Err(Error::InvalidArgument(format!(
                "AAM softmax needs scale > 0 and 0 <= margin < pi/2, got s={scale} m={margin}"
            )));
        }
        Ok(AamSoftmaxHead {
            weight: fan_in_uniform(rng, &[classes, embedding_dim], embedding_dim),
            scale,
            margin,
        })
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Cosines between the normalised embedding and every normalised class row (`n×1`).
    pub fn cosines(&self, tape: &mut Tape, embedding: Var) -> Result<Var> {
        let (e, one) = tape.dims(embedding);
        if one != 1 || e != self.weight.shape()[1] {
            return Err(Error::shape("aam_loss", &[self.weight.shape()[1], 1], &[e, one]));
        }
        let row = tape.transpose(embedding);
        let unit = tape.normalize_rows(row).map_err(|_| Error::ZeroNorm("aam_loss embedding"))?;
        let w = tape.param(&self.weight);
        let w_unit = tape.normalize_rows(w)?;
        let col = tape.transpose(unit);
        tape.matmul(w_unit, col)
    }

    pub fn loss(&self, tape: &mut Tape, embedding: Var, label: usize) -> Result<Var> {
        if label >= self.classes() {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.classes(),
            });
        }
        let cos = self.cosines(tape, embedding)?;
        let logits = tape.aam_logits(cos, label, self.scale, self.margin)?;
        tape.cross_entropy(logits, label)
    }
}

impl Module for AamSoftmaxHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&join(prefix, "weight"), &self.weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

/// Equal-weight sum of the four branch losses.
pub fn co_learning_loss(audio: f64, visual: f64, audio_transferred: f64, visual_transferred: f64) -> f64 {
    audio + visual + audio_transferred + visual_transferred
}

/// Tape version of [`co_learning_loss`] over any number of branch losses.
pub fn co_learning_loss_on_tape(tape: &mut Tape, losses: &[Var]) -> Result<Var> {
    let (&first, rest) = losses.split_first().ok_or(Error::Empty("co-learning loss"))?;
    let mut total = first;
    for &l in rest {
        total = tape.add(total, l)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::seed;

    fn zero_scorer(d: &mut AspDecoder) {
        d.scorer_in.visit_mut("", &mut |_, p| p.values_mut().iter_mut().for_each(|v| *v = 0.0));
        d.scorer_out.visit_mut("", &mut |_, p| p.values_mut().iter_mut().for_each(|v| *v = 0.0));
    }

    fn pooled_stats(dec: &AspDecoder, c: usize, t: usize, data: Vec<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.constant(c, t, data).unwrap();
        let out = dec.forward(&mut tape, x).unwrap();
        (
            tape.value(out.mean).to_vec(),
            tape.value(out.std).to_vec(),
            tape.value(out.attention).to_vec(),
        )
    }

    #[test]
    fn constant_input_hits_variance_floor() {
        let mut rng = seed::rng(0, "asp");
        let dec = AspDecoder::new(3, 4, 5, PoolingAttention::PerChannel, &mut rng).unwrap();
        let data: Vec<f64> = [0.5, -2.0, 3.0].iter().flat_map(|&v| vec![v; 6]).collect();
        let (mean, std, _) = pooled_stats(&dec, 3, 6, data);
        for (m, want) in mean.iter().zip([0.5, -2.0, 3.0]) {
            assert!((m - want).abs() < 1e-12);
        }
        for s in std {
            assert!((s - VARIANCE_FLOOR.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn single_frame_pools_to_that_frame() {
        let mut rng = seed::rng(0, "asp");
        let dec = AspDecoder::new(3, 4, 5, PoolingAttention::PerChannel, &mut rng).unwrap();
        let (mean, std, attn) = pooled_stats(&dec, 3, 1, vec![1.5, -0.5, 2.0]);
        assert_eq!(mean, vec![1.5, -0.5, 2.0]);
        assert!(std.iter().all(|&s| (s - VARIANCE_FLOOR.sqrt()).abs() < 1e-15));
        assert!(attn.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn uniform_attention_gives_plain_statistics() {
        for mode in [PoolingAttention::PerChannel, PoolingAttention::Shared] {
            let mut rng = seed::rng(1, "asp");
            let mut dec = AspDecoder::new(2, 3, 4, mode, &mut rng).unwrap();
            zero_scorer(&mut dec);
            let data: Vec<f64> = (0..10).map(|i| ((i * 7 % 5) as f64) * 0.3 - 0.4).collect();
            let (mean, std, attn) = pooled_stats(&dec, 2, 5, data.clone());
            assert!(attn.iter().all(|&a| (a - 0.2).abs() < 1e-15));
            for c in 0..2 {
                let row = &data[c * 5..(c + 1) * 5];
                let mu = row.iter().sum::<f64>() / 5.0;
                let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / 5.0;
                assert!((mean[c] - mu).abs() < 1e-12);
                assert!((std[c] - var.max(VARIANCE_FLOOR).sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn asp_gradient_matches_finite_differences() {
        for mode in [PoolingAttention::PerChannel, PoolingAttention::Shared] {
            let mut rng = seed::rng(2, "asp");
            let mut dec = AspDecoder::new(3, 4, 2, mode, &mut rng).unwrap();
            let data: Vec<f64> = (0..21).map(|i| (i as f64 * 0.9).sin()).collect();
            let report = gradcheck::check_module(
                &mut dec,
                gradcheck::DEFAULT_STEP,
                gradcheck::DEFAULT_TOLERANCE,
                None,
                |_| true,
                |m, tape| {
                    let x = tape.constant(3, 7, data.clone())?;
                    let e = m.forward(tape, x)?.embedding;
                    let sq = tape.mul(e, e)?;
                    Ok(tape.sum(sq))
                },
            )
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    fn head_with(rows: &[[f64; 2]], scale: f64, margin: f64) -> AamSoftmaxHead {
        let mut rng = seed::rng(0, "aam");
        let mut h = AamSoftmaxHead::new(rows.len(), 2, scale, margin, &mut rng).unwrap();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        h.weight.assign(&flat).unwrap();
        h
    }

    fn loss_of(head: &AamSoftmaxHead, e: &[f64], label: usize) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(e.len(), 1, e.to_vec()).unwrap();
        let l = head.loss(&mut tape, v, label).unwrap();
        tape.scalar(l).unwrap()
    }

    #[test]
    fn closed_form_two_class_example() {
        // embedding at angle 0; class 0 at pi/6, class 1 at pi/2
        let (a, b) = (std::f64::consts::FRAC_PI_6, FRAC_PI_2);
        let head = head_with(&[[a.cos(), a.sin()], [b.cos(), b.sin()]], 30.0, 0.2);
        let got = loss_of(&head, &[2.0, 0.0], 0);
        let target = 30.0 * (a + 0.2).cos();
        let other = 30.0 * b.cos();
        let want = -target + (target.exp() + other.exp()).ln();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn zero_margin_unit_scale_is_plain_cross_entropy() {
        let head = head_with(&[[1.0, 0.5], [-0.3, 0.8], [0.2, -1.0]], 1.0, 0.0);
        let e = [0.7, -0.4];
        let en = (0.7f64 * 0.7 + 0.16).sqrt();
        let cos: Vec<f64> = [[1.0, 0.5], [-0.3, 0.8], [0.2, -1.0]]
            .iter()
            .map(|w: &[f64; 2]| (w[0] * e[0] + w[1] * e[1]) / (en * (w[0] * w[0] + w[1] * w[1]).sqrt()))
            .collect();
        let z: f64 = cos.iter().map(|c| c.exp()).sum();
        for label in 0..3 {
            let want = -(cos[label].exp() / z).ln();
            assert!((loss_of(&head, &e, label) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn single_class_loss_is_zero() {
        let head = head_with(&[[0.3, 0.4]], 30.0, 0.2);
        assert_eq!(loss_of(&head, &[1.0, -1.0], 0), 0.0);
    }

    #[test]
    fn rejects_zero_embedding_and_bad_label() {
        let head = head_with(&[[1.0, 0.0], [0.0, 1.0]], 30.0, 0.2);
        let mut tape = Tape::new();
        let z = tape.constant(2, 1, vec![0.0, 0.0]).unwrap();
        assert!(matches!(head.loss(&mut tape, z, 0), Err(Error::ZeroNorm(_))));
        let e = tape.constant(2, 1, vec![1.0, 0.0]).unwrap();
        assert!(matches!(head.loss(&mut tape, e, 2), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn margin_bounds_enforced() {
        let mut rng = seed::rng(0, "aam");
        assert!(AamSoftmaxHead::new(2, 2, 30.0, FRAC_PI_2, &mut rng).is_err());
        assert!(AamSoftmaxHead::new(2, 2, 0.0, 0.2, &mut rng).is_err());
        assert!(AamSoftmaxHead::new(2, 2, 30.0, -0.1, &mut rng).is_err());
    }

    #[test]
    fn aam_gradient_matches_finite_differences() {
        let mut rng = seed::rng(3, "aam");
        let mut head = AamSoftmaxHead::new(4, 3, 30.0, 0.2, &mut rng).unwrap();
        for label in 0..4 {
            let report = gradcheck::check_module(
                &mut head,
                gradcheck::DEFAULT_STEP,
                gradcheck::DEFAULT_TOLERANCE,
                None,
                |_| true,
                |m, tape| {
                    let e = tape.constant(3, 1, vec![0.4, -1.2, 0.9])?;
                    m.loss(tape, e, label)
                },
            )
            .unwrap();
            assert!(report.passed(), "{report}");
        }
    }

    #[test]
    fn co_learning_loss_is_a_plain_sum() {
        assert_eq!(co_learning_loss(0.0, 0.0, 0.0, 0.0), 0.0);
        assert_eq!(co_learning_loss(1.0, 2.0, 3.0, 4.0), 10.0);
        let mut tape = Tape::new();
        let vars: Vec<Var> = (1..=4).map(|i| tape.input(1, 1, vec![i as f64]).unwrap()).collect();
        let total = co_learning_loss_on_tape(&mut tape, &vars).unwrap();
        assert_eq!(tape.scalar(total).unwrap(), 10.0);
        let g = tape.backward(total).unwrap();
        for v in vars {
            assert_eq!(g.wrt(v).unwrap(), &[1.0]);
        }
    }
}
