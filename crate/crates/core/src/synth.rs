//! Synthetic speaker-labelled audio/visual corpora.
//!
//! Each speaker has a fixed audio identity, visual identity and shared
//! identity vector. An utterance draws one smooth 16-dim latent trajectory
//! `z(t)` and samples it at 100 Hz for audio and 25 Hz for video, so the two
//! streams are synchronised and correlated through `shared ⊙ z(t)`:
//!
//! ```text
//! audio(t)  = A · [audio_identity;  shared ⊙ z(t)] + σ_a · noise
//! visual(t) = B · [visual_identity; shared ⊙ z(t)] + σ_v · noise
//! ```
//!
//! `A` and `B` are corpus-wide mixing maps drawn once from the seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::encoders::{FeatureSequence, AUDIO_INPUT_DIM, VISUAL_INPUT_DIM};
use crate::error::{Error, Result};
use crate::seed;

pub const SHARED_DIM: usize = 16;
pub const AUDIO_RATE_HZ: usize = 100;
pub const VISUAL_RATE_HZ: usize = 25;
pub const RATE_RATIO: usize = AUDIO_RATE_HZ / VISUAL_RATE_HZ;
const LATENT_COMPONENTS: usize = 3;
const LATENT_FREQ_HZ: (f64, f64) = (0.25, 2.0);

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpeaker {
    pub id: usize,
    pub audio_identity: Vec<f64>,
    pub visual_identity: Vec<f64>,
    pub shared_identity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub speaker: usize,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
    pub audio_noise: f64,
    pub visual_noise: f64,
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, n);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn gen_population(n_speakers: usize, seed: u64) -> Result<Vec<SyntheticSpeaker>> {
    if n_speakers < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 speakers, got {n_speakers}"
        )));
    }
    let mut rng = seed::rng(seed, "population");
    Ok((0..n_speakers)
        .map(|id| SyntheticSpeaker {
            id,
            audio_identity: unit_vec(&mut rng, AUDIO_INPUT_DIM),
            visual_identity: unit_vec(&mut rng, VISUAL_INPUT_DIM),
            shared_identity: unit_vec(&mut rng, SHARED_DIM),
        })
        .collect())
}

/// Corpus-wide linear maps from `[identity; shared ⊙ z]` to observed frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingMaps {
    /// `80×(80+16)`
    pub audio: Vec<f64>,
    /// `32×(32+16)`
    pub visual: Vec<f64>,
}

impl MixingMaps {
    /// Entries are `N(0, gain²/fan_in)`, so a unit-norm input gives frames of
    /// norm about `gain·sqrt(out/fan_in)`.
    pub fn generate(seed: u64, gain: f64) -> Self {
        let mut rng = seed::rng(seed, "mixing");
        let mut draw = |rows: usize, cols: usize| -> Vec<f64> {
            let s = gain / (cols as f64).sqrt();
            gaussian_vec(&mut rng, rows * cols).into_iter().map(|x| x * s).collect()
        };
        let audio = draw(AUDIO_INPUT_DIM, AUDIO_INPUT_DIM + SHARED_DIM);
        let visual = draw(VISUAL_INPUT_DIM, VISUAL_INPUT_DIM + SHARED_DIM);
        MixingMaps { audio, visual }
    }
}

/// A random low-frequency sinusoid mixture per latent dimension.
struct Trajectory {
    // (amplitude, frequency Hz, phase) per dim per component
    terms: Vec<[(f64, f64, f64); LATENT_COMPONENTS]>,
}

impl Trajectory {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let freq = Uniform::new(LATENT_FREQ_HZ.0, LATENT_FREQ_HZ.1).expect("valid range");
        let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let amp_scale = 1.0 / (LATENT_COMPONENTS as f64).sqrt();
        let terms = (0..SHARED_DIM)
            .map(|_| {
                std::array::from_fn(|_| {
                    let a: f64 = StandardNormal.sample(rng);
                    (a * amp_scale, freq.sample(rng), phase.sample(rng))
                })
            })
            .collect();
        Trajectory { terms }
    }

    fn at(&self, seconds: f64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|comps| {
                comps
                    .iter()
                    .map(|&(a, f, p)| a * (std::f64::consts::TAU * f * seconds + p).sin())
                    .sum()
            })
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn render<R: Rng + ?Sized>(
    rng: &mut R,
    mixing: &[f64],
    identity: &[f64],
    shared: &[f64],
    traj: &Trajectory,
    frames: usize,
    rate_hz: usize,
    noise: f64,
) -> Result<FeatureSequence> {
    let out_dim = identity.len();
    let in_dim = identity.len() + SHARED_DIM;
    let mut data = vec![0.0; out_dim * frames];
    let mut input = vec![0.0; in_dim];
    input[..identity.len()].copy_from_slice(identity);
    for t in 0..frames {
        let z = traj.at(t as f64 / rate_hz as f64);
        for k in 0..SHARED_DIM {
            input[identity.len() + k] = shared[k] * z[k];
        }
        for o in 0..out_dim {
            let row = &mixing[o * in_dim..(o + 1) * in_dim];
            let signal: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum();
            let eps: f64 = StandardNormal.sample(rng);
            data[o * frames + t] = signal + noise * eps;
        }
    }
    FeatureSequence::new(out_dim, frames, data)
}

/// One utterance of `visual_frames` video frames and `4·visual_frames` audio frames.
pub fn gen_utterance(
    speaker: &SyntheticSpeaker,
    mixing: &MixingMaps,
    visual_frames: usize,
    audio_noise: f64,
    visual_noise: f64,
    seed: u64,
) -> Result<SyntheticUtterance> {
    if visual_frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "utterances need at least 2 visual frames, got {visual_frames}"
        )));
    }
    if !(audio_noise >= 0.0 && visual_noise >= 0.0) {
        return Err(Error::InvalidArgument("noise levels must be nonnegative".into()));
    }
    let mut rng = seed::rng(seed, "utterance");
    let traj = Trajectory::sample(&mut rng);
    let audio = render(
        &mut rng,
        &mixing.audio,
        &speaker.audio_identity,
        &speaker.shared_identity,
        &traj,
        visual_frames * RATE_RATIO,
        AUDIO_RATE_HZ,
        audio_noise,
    )?;
    let visual = render(
        &mut rng,
        &mixing.visual,
        &speaker.visual_identity,
        &speaker.shared_identity,
        &traj,
        visual_frames,
        VISUAL_RATE_HZ,
        visual_noise,
    )?;
    Ok(SyntheticUtterance {
        speaker: speaker.id,
        audio,
        visual,
        audio_noise,
        visual_noise,
    })
}

/// An (enrollment, test) pair with its same-speaker label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialPair {
    pub enroll: String,
    pub test: String,
    pub target: bool,
}

/// Draws exactly `n_target` same-speaker and `n_nontarget` different-speaker
/// pairs, without self-pairs or repeated pairs.
pub fn build_trials(
    utterances: &[(String, usize)],
    n_target: usize,
    n_nontarget: usize,
    seed: u64,
) -> Result<Vec<TrialPair>> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..utterances.len() {
        for j in i + 1..utterances.len() {
            if utterances[i].1 == utterances[j].1 {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    if same.len() < n_target || diff.len() < n_nontarget {
        return Err(Error::Precondition(format!(
            "cannot draw {n_target} target / {n_nontarget} non-target trials: only {} / {} distinct pairs exist",
            same.len(),
            diff.len()
        )));
    }
    let mut rng = seed::rng(seed, "trials");
    let (picked_same, _) = same.partial_shuffle(&mut rng, n_target);
    let (picked_diff, _) = diff.partial_shuffle(&mut rng, n_nontarget);
    let mut trials: Vec<TrialPair> = picked_same
        .iter()
        .map(|&p| (p, true))
        .chain(picked_diff.iter().map(|&p| (p, false)))
        .map(|((i, j), target)| TrialPair {
            enroll: utterances[i].0.clone(),
            test: utterances[j].0.clone(),
            target,
        })
        .collect();
    trials.shuffle(&mut rng);
    Ok(trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub split: Split,
    pub audio: FeatureSequence,
    pub visual: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub train_speakers: usize,
    pub train_utterances: usize,
    pub test_speakers: usize,
    pub test_utterances: usize,
    pub visual_frames: usize,
    pub audio_noise: f64,
    pub visual_noise: f64,
    pub signal_gain: f64,
    pub targets: usize,
    pub nontargets: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_speakers: 16,
            train_utterances: 30,
            test_speakers: 8,
            test_utterances: 10,
            visual_frames: 50,
            audio_noise: 0.5,
            visual_noise: 1.0,
            signal_gain: 1.0,
            targets: 300,
            nontargets: 1200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub trials: Vec<TrialPair>,
}

impl Corpus {
    pub fn generate(cfg: &DataConfig, root_seed: u64) -> Result<Self> {
        let total = cfg.train_speakers + cfg.test_speakers;
        if cfg.train_speakers < 2 || cfg.test_speakers < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 train and 2 test speakers".into(),
            ));
        }
        let population = gen_population(total, seed::substream(root_seed, "corpus/population"))?;
        let mixing = MixingMaps::generate(seed::substream(root_seed, "corpus/mixing"), cfg.signal_gain);
        let mut utterances = Vec::new();
        for spk in &population {
            let (split, count) = if spk.id < cfg.train_speakers {
                (Split::Train, cfg.train_utterances)
            } else {
                (Split::Test, cfg.test_utterances)
            };
            for u in 0..count {
                let id = format!("s{:03}u{:03}", spk.id, u);
                let utt = gen_utterance(
                    spk,
                    &mixing,
                    cfg.visual_frames,
                    cfg.audio_noise,
                    cfg.visual_noise,
                    seed::substream(root_seed, &format!("corpus/utt/{id}")),
                )?;
                utterances.push(Utterance {
                    id,
                    speaker: spk.id,
                    split,
                    audio: utt.audio,
                    visual: utt.visual,
                });
            }
        }
        let test: Vec<(String, usize)> = utterances
            .iter()
            .filter(|u| u.split == Split::Test)
            .map(|u| (u.id.clone(), u.speaker))
            .collect();
        let trials = build_trials(
            &test,
            cfg.targets,
            cfg.nontargets,
            seed::substream(root_seed, "corpus/trials"),
        )?;
        Ok(Corpus { utterances, trials })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Training speakers mapped to dense class indices in ascending id order.
    pub fn train_classes(&self) -> BTreeMap<usize, usize> {
        let mut ids: Vec<usize> = self.split(Split::Train).map(|u| u.speaker).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().enumerate().map(|(i, s)| (s, i)).collect()
    }

    pub fn speaker_count(&self, split: Split) -> usize {
        let mut ids: Vec<usize> = self.split(split).map(|u| u.speaker).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub const INDEX_FILE: &'static str = "index.txt";
    pub const TRIALS_FILE: &'static str = "trials.txt";

    /// Writes `index.txt`, `trials.txt` and one matrix file per utterance and modality.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("audio"))?;
        fs::create_dir_all(dir.join("visual"))?;
        let mut index = BufWriter::new(fs::File::create(dir.join(Self::INDEX_FILE))?);
        for u in &self.utterances {
            let a = format!("audio/{}.bin", u.id);
            let v = format!("visual/{}.bin", u.id);
            write_matrix(&dir.join(&a), &u.audio)?;
            write_matrix(&dir.join(&v), &u.visual)?;
            writeln!(index, "{} {} {} {} {}", u.id, u.speaker, u.split.as_str(), a, v)?;
        }
        index.flush()?;
        write_trials(&dir.join(Self::TRIALS_FILE), &self.trials)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(Self::INDEX_FILE);
        let file = fs::File::open(&index_path).map_err(|e| {
            Error::Precondition(format!("no corpus index at {}: {e}", index_path.display()))
        })?;
        let mut utterances = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            let bad = |why: &str| Error::format(&index_path, format!("line {}: {why}", n + 1));
            if f.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let speaker = f[1].parse().map_err(|_| bad("bad speaker id"))?;
            let split = Split::parse(f[2]).ok_or_else(|| bad("bad split"))?;
            utterances.push(Utterance {
                id: f[0].to_string(),
                speaker,
                split,
                audio: read_matrix(&dir.join(f[3]))?,
                visual: read_matrix(&dir.join(f[4]))?,
            });
        }
        let trials = read_trials(&dir.join(Self::TRIALS_FILE))?;
        Ok(Corpus { utterances, trials })
    }
}

/// Two little-endian `u32` dims (rows, cols), then row-major little-endian `f64`s.
pub fn write_matrix(path: &Path, m: &FeatureSequence) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(m.channels() as u32).to_le_bytes())?;
    w.write_all(&(m.frames() as u32).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<FeatureSequence> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 8 {
        return Err(Error::format(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(
            path,
            format!("{rows}x{cols} header but {} payload bytes", body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    FeatureSequence::new(rows, cols, data)
}

/// `enroll test label` per line, label `1` for same speaker.
pub fn write_trials(path: &Path, trials: &[TrialPair]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in trials {
        writeln!(w, "{} {} {}", t.enroll, t.test, u8::from(t.target))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialPair>> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Precondition(format!("cannot open trial list {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let target = match f.as_slice() {
            [_, _, "1"] => true,
            [_, _, "0"] => false,
            _ => return Err(Error::format(path, format!("line {}: expected `enroll test 0|1`", n + 1))),
        };
        out.push(TrialPair {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            target,
        });
    }
    Ok(out)
}

/// All files under a corpus directory, relative paths in sorted order.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![PathBuf::from(Corpus::INDEX_FILE), PathBuf::from(Corpus::TRIALS_FILE)];
    for sub in ["audio", "visual"] {
        let mut names: Vec<PathBuf> = fs::read_dir(dir.join(sub))?
            .map(|e| e.map(|e| PathBuf::from(sub).join(e.file_name())))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        out.extend(names);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    fn time_mean(s: &FeatureSequence) -> Vec<f64> {
        (0..s.channels())
            .map(|c| (0..s.frames()).map(|t| s.get(c, t)).sum::<f64>() / s.frames() as f64)
            .collect()
    }

    #[test]
    fn population_is_deterministic_and_distinct() {
        assert_eq!(gen_population(8, 42).unwrap(), gen_population(8, 42).unwrap());
        let two = gen_population(2, 0).unwrap();
        assert!(dot(&two[0].shared_identity, &two[1].shared_identity) < 1.0);
        assert!(dot(&two[0].audio_identity, &two[1].audio_identity) < 1.0);
        for v in [&two[0].audio_identity, &two[0].visual_identity, &two[0].shared_identity] {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
        }
        assert!(gen_population(1, 0).is_err());
    }

    #[test]
    fn shared_identities_are_roughly_orthogonal() {
        let pop = gen_population(100, 7).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..pop.len() {
            for j in i + 1..pop.len() {
                total += dot(&pop[i].shared_identity, &pop[j].shared_identity);
                n += 1;
            }
        }
        assert!((total / n as f64).abs() < 0.1);
    }

    #[test]
    fn utterance_rate_contract_and_determinism() {
        let pop = gen_population(2, 1).unwrap();
        let mix = MixingMaps::generate(1, 1.0);
        let a = gen_utterance(&pop[0], &mix, 50, 0.0, 0.0, 9).unwrap();
        let b = gen_utterance(&pop[0], &mix, 50, 0.0, 0.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.audio.channels(), a.audio.frames()), (80, 200));
        assert_eq!((a.visual.channels(), a.visual.frames()), (32, 50));
        assert!(a.audio.is_finite() && a.visual.is_finite());
        assert!(gen_utterance(&pop[0], &mix, 1, 0.0, 0.0, 9).is_err());
        assert!(gen_utterance(&pop[0], &mix, 0, 0.5, 1.0, 9).is_err());
    }

    #[test]
    fn audio_and_visual_share_the_latent_clock() {
        // With zero noise, audio frame 4k and visual frame k see the same z(t).
        let pop = gen_population(2, 3).unwrap();
        let mut spk = pop[0].clone();
        spk.audio_identity.iter_mut().for_each(|v| *v = 0.0);
        spk.visual_identity.iter_mut().for_each(|v| *v = 0.0);
        let mix = MixingMaps::generate(3, 1.0);
        let u = gen_utterance(&spk, &mix, 10, 0.0, 0.0, 4).unwrap();
        // Recover shared⊙z from the visual frame by least squares is overkill; compare
        // energy profiles instead: both are linear in the same z(t) samples.
        let ea: Vec<f64> = (0..10).map(|k| u.audio.frame(4 * k).iter().map(|x| x.abs()).sum()).collect();
        let ev: Vec<f64> = (0..10).map(|k| u.visual.frame(k).iter().map(|x| x.abs()).sum()).collect();
        assert!(cosine(&ea, &ev) > 0.5);
    }

    #[test]
    fn overwhelming_visual_noise_hides_identity() {
        let pop = gen_population(10, 5).unwrap();
        let mix = MixingMaps::generate(5, 1.0);
        let means: Vec<(usize, Vec<f64>)> = (0..100)
            .map(|i| {
                let spk = &pop[i % 10];
                let u = gen_utterance(spk, &mix, 20, 0.5, 1e6, i as u64).unwrap();
                (spk.id, time_mean(&u.visual))
            })
            .collect();
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                let c = cosine(&means[i].1, &means[j].1);
                if means[i].0 == means[j].0 {
                    same += c;
                    ns += 1;
                } else {
                    diff += c;
                    nd += 1;
                }
            }
        }
        assert!((same / ns as f64 - diff / nd as f64).abs() < 0.05);

        // Control: at moderate noise the same statistic separates clearly.
        let means: Vec<(usize, Vec<f64>)> = (0..100)
            .map(|i| {
                let spk = &pop[i % 10];
                let u = gen_utterance(spk, &mix, 20, 0.5, 1.0, i as u64).unwrap();
                (spk.id, time_mean(&u.visual))
            })
            .collect();
        let c_same = cosine(&means[0].1, &means[10].1);
        let c_diff = cosine(&means[0].1, &means[1].1);
        assert!(c_same > c_diff);
    }

    /// Ridge regression `x → y` via the normal equations (Gauss-Jordan).
    fn ridge(xs: &[Vec<f64>], ys: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
        let (dx, dy) = (xs[0].len() + 1, ys[0].len());
        let aug = |x: &Vec<f64>| x.iter().copied().chain([1.0]).collect::<Vec<f64>>();
        let mut m = vec![vec![0.0; dx + dy]; dx];
        for (x, y) in xs.iter().zip(ys) {
            let x = aug(x);
            for i in 0..dx {
                for j in 0..dx {
                    m[i][j] += x[i] * x[j];
                }
                for j in 0..dy {
                    m[i][dx + j] += x[i] * y[j];
                }
            }
        }
        for (i, row) in m.iter_mut().enumerate() {
            row[i] += lambda;
        }
        for c in 0..dx {
            let p = (c..dx).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            m[c].iter_mut().for_each(|v| *v /= piv);
            for r in 0..dx {
                if r != c {
                    let f = m[r][c];
                    let pivot_row = m[c].clone();
                    m[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
        // Row i of the solution maps input feature i to every output.
        m.into_iter().map(|row| row[dx..].to_vec()).collect()
    }

    fn probe_mse(w: &[Vec<f64>], xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let x: Vec<f64> = x.iter().copied().chain([1.0]).collect();
            for (j, yj) in y.iter().enumerate() {
                let pred: f64 = x.iter().zip(w).map(|(xi, row)| xi * row[j]).sum();
                total += (pred - yj).powi(2);
            }
        }
        total / (xs.len() * ys[0].len()) as f64
    }

    #[test]
    fn audio_linearly_predicts_visual_on_held_out_utterances() {
        for seed in [1, 2, 3] {
            let cfg = DataConfig {
                test_speakers: 2,
                test_utterances: 2,
                targets: 1,
                nontargets: 1,
                ..DataConfig::default()
            };
            let corpus = Corpus::generate(&cfg, seed).unwrap();
            let (mut fit, mut held) = ((vec![], vec![]), (vec![], vec![]));
            for u in corpus.split(Split::Train) {
                let index: usize = u.id[5..].parse().unwrap();
                let side = if index % 3 == 0 { &mut held } else { &mut fit };
                side.0.push(time_mean(&u.audio));
                side.1.push(time_mean(&u.visual));
            }
            let true_map = ridge(&fit.0, &fit.1, 1.0);
            let mut shuffled = fit.1.clone();
            shuffled.shuffle(&mut seed::rng(seed, "probe/shuffle"));
            let shuffled_map = ridge(&fit.0, &shuffled, 1.0);
            let (paired, baseline) = (
                probe_mse(&true_map, &held.0, &held.1),
                probe_mse(&shuffled_map, &held.0, &held.1),
            );
            assert!(paired < baseline, "seed {seed}: paired {paired} vs shuffled {baseline}");
        }
    }

    #[test]
    fn trial_counts_and_determinism() {
        let utts: Vec<(String, usize)> = (0..40).map(|i| (format!("u{i}"), i / 10)).collect();
        let a = build_trials(&utts, 40, 160, 3).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.iter().filter(|t| t.target).count(), 40);
        assert!(a.iter().all(|t| t.enroll != t.test));
        let spk = |id: &str| utts.iter().find(|u| u.0 == id).unwrap().1;
        assert!(a.iter().all(|t| (spk(&t.enroll) == spk(&t.test)) == t.target));
        assert_eq!(a, build_trials(&utts, 40, 160, 3).unwrap());
        assert_ne!(a, build_trials(&utts, 40, 160, 4).unwrap());
        // 4 speakers x C(10,2) = 180 target pairs available
        assert!(build_trials(&utts, 181, 10, 3).is_err());
    }

    #[test]
    fn corpus_roundtrip_on_disk() {
        let cfg = DataConfig {
            train_speakers: 3,
            train_utterances: 2,
            test_speakers: 2,
            test_utterances: 3,
            visual_frames: 4,
            targets: 2,
            nontargets: 5,
            ..DataConfig::default()
        };
        let corpus = Corpus::generate(&cfg, 11).unwrap();
        assert_eq!(corpus.utterances.len(), 12);
        assert_eq!(corpus.speaker_count(Split::Train), 3);
        assert_eq!(corpus.train_classes().len(), 3);
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        assert_eq!(Corpus::read(dir.path()).unwrap(), corpus);
        assert_eq!(corpus, Corpus::generate(&cfg, 11).unwrap());
        let files = corpus_files(dir.path()).unwrap();
        assert_eq!(files.len(), 2 + 2 * 12);
    }

    #[test]
    fn matrix_file_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = FeatureSequence::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 6 * 8);
        assert_eq!(read_matrix(&p).unwrap(), m);
        fs::write(&p, &bytes[..20]).unwrap();
        assert!(read_matrix(&p).is_err());
    }
}
