//! Embeds the trial utterances once per branch and scores every trial.

use std::collections::BTreeMap;

use crate::decoders::SpeakerEmbedding;
use crate::error::{Error, Result};
use crate::model::{Model, PerBranch};
use crate::scoring::{cosine_score, DcfParams, FusionWeights, ScoreReport, TrialScore};
use crate::synth::{Corpus, TrialPair};

pub type EmbeddingCache = BTreeMap<String, PerBranch<SpeakerEmbedding>>;

/// Embeddings of every utterance named in `trials`, each computed once.
pub fn embed_trial_utterances(model: &Model, corpus: &Corpus, trials: &[TrialPair]) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::new();
    for id in trials.iter().flat_map(|t| [&t.enroll, &t.test]) {
        if cache.contains_key(id) {
            continue;
        }
        let utt = corpus
            .get(id)
            .ok_or_else(|| Error::Precondition(format!("trial utterance `{id}` is not in the corpus")))?;
        cache.insert(id.clone(), model.embed(&utt.audio, &utt.visual)?);
    }
    Ok(cache)
}

fn branch_score(a: Option<&SpeakerEmbedding>, b: Option<&SpeakerEmbedding>) -> Result<Option<f64>> {
    match (a, b) {
        (Some(a), Some(b)) => cosine_score(a, b).map(Some),
        _ => Ok(None),
    }
}

pub fn score_trials(cache: &EmbeddingCache, trials: &[TrialPair]) -> Result<Vec<TrialScore>> {
    trials
        .iter()
        .map(|t| {
            let get = |id: &str| {
                cache
                    .get(id)
                    .ok_or_else(|| Error::Precondition(format!("no embedding for utterance `{id}`")))
            };
            let (e, s) = (get(&t.enroll)?, get(&t.test)?);
            Ok(TrialScore {
                enroll: t.enroll.clone(),
                test: t.test.clone(),
                label: t.target,
                audio: branch_score(e.audio.as_ref(), s.audio.as_ref())?,
                visual: branch_score(e.visual.as_ref(), s.visual.as_ref())?,
                audio_transferred: branch_score(e.audio_transferred.as_ref(), s.audio_transferred.as_ref())?,
                visual_transferred: branch_score(e.visual_transferred.as_ref(), s.visual_transferred.as_ref())?,
            })
        })
        .collect()
}

/// Scores `trials` (the corpus list when `None`) and computes EER/minDCF
/// for every available branch and fusion.
pub fn evaluate(model: &Model, corpus: &Corpus, trials: Option<&[TrialPair]>) -> Result<ScoreReport> {
    let trials = trials.unwrap_or(&corpus.trials);
    let cache = embed_trial_utterances(model, corpus, trials)?;
    let scores = score_trials(&cache, trials)?;
    ScoreReport::build(scores, &FusionWeights::default(), DcfParams::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::ModelKind;
    use crate::scoring::System;
    use crate::synth::DataConfig;

    fn setup() -> (ModelConfig, Corpus) {
        let data = DataConfig {
            train_speakers: 3,
            train_utterances: 2,
            test_speakers: 2,
            test_utterances: 3,
            visual_frames: 4,
            targets: 4,
            nontargets: 6,
            ..DataConfig::default()
        };
        let model = ModelConfig {
            audio_channels: 5,
            visual_channels: 4,
            model_dim: 4,
            heads: 2,
            blocks: 1,
            ffn_hidden: 4,
            asp_hidden: 3,
            embedding_dim: 4,
            ..ModelConfig::default()
        };
        (model, Corpus::generate(&data, 1).unwrap())
    }

    #[test]
    fn row_count_by_model_kind() {
        let (cfg, corpus) = setup();
        let co = Model::new(ModelKind::CoLearn, &cfg, 3, 1).unwrap();
        assert_eq!(evaluate(&co, &corpus, None).unwrap().rows.len(), 6);
        let base = Model::new(ModelKind::BaselineAudio, &cfg, 3, 1).unwrap();
        let report = evaluate(&base, &corpus, None).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert!(report.metrics(System::Audio).is_some());
    }

    #[test]
    fn single_class_and_missing_utterances_are_rejected() {
        let (cfg, corpus) = setup();
        let m = Model::new(ModelKind::BaselineVisual, &cfg, 3, 1).unwrap();
        let same: Vec<TrialPair> = corpus.trials.iter().filter(|t| t.target).cloned().collect();
        assert!(matches!(evaluate(&m, &corpus, Some(&same)), Err(Error::SingleClass)));
        let ghost = vec![TrialPair {
            enroll: "nobody".into(),
            test: corpus.trials[0].test.clone(),
            target: false,
        }];
        let err = evaluate(&m, &corpus, Some(&ghost)).unwrap_err();
        assert!(err.to_string().contains("nobody"));
    }

    #[test]
    fn rerun_gives_identical_report_bytes() {
        let (cfg, corpus) = setup();
        let m = Model::new(ModelKind::CoLearn, &cfg, 3, 2).unwrap();
        let render = |r: &ScoreReport| {
            let mut b = Vec::new();
            r.write_scores(&mut b).unwrap();
            (b, r.render_summary())
        };
        assert_eq!(
            render(&evaluate(&m, &corpus, None).unwrap()),
            render(&evaluate(&m, &corpus, None).unwrap())
        );
    }
}
