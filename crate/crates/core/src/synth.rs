//! Deterministic synthetic digit corpus.
//!
//! Every utterance walks the 3-state chains of its digits between edge
//! silences, dwelling a random number of frames in each state. A frame is
//! the state's canonical mean plus the speaker's offset for that state
//! plus Gaussian noise. A speaker's offset is a shared shift plus an
//! independent per-state shift, so speaker traits depend on what is said.
//! The states of one word sit closer together than states of different
//! words. Offsets and noise are drawn independently for the MFCC and filterbank streams. Values
//! are rounded to `f32` precision so that files written by
//! [`write_corpus`] reload bit-identically.
//!
//! On-disk layout under the output directory:
//!
//! ```text
//! corpus/feats/<utt>.mfcc.dvfe     MFCC60 stream
//! corpus/feats/<utt>.fbank.dvfe    FBANK120 stream
//! corpus/transcripts/{background,enroll,test}.txt   "<utt> <digits>"
//! corpus/trials/trials.txt         "<speaker> <utt> <digits> <category>"
//! ```
//!
//! Utterance ids are `<speaker>_<tag>`, so the speaker is the text before
//! the last underscore.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::eval::{format_trials, parse_trials, Category, EvalError, TrialRecord};
use crate::features::{FeatureKind, FeatureSequence};
use crate::io::{read_features, write_features, IoError};
use crate::{NUM_STATES, NUM_WORDS, SILENCE_WORD, STATES_PER_WORD};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Fs(#[from] std::io::Error),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Layout { path: PathBuf, message: String },
}

/// How wrong-content prompts are derived from the spoken digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorruptionMode {
    /// A fresh random string of the same length, different from the input.
    #[default]
    WholePrompt,
    /// One position replaced by a different digit.
    SingleDigit,
}

impl FromStr for CorruptionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whole_prompt" | "whole-prompt" => Ok(Self::WholePrompt),
            "single_digit" | "single-digit" => Ok(Self::SingleDigit),
            other => Err(format!("unknown corruption mode {other:?}")),
        }
    }
}

impl fmt::Display for CorruptionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::WholePrompt => "whole_prompt",
            Self::SingleDigit => "single_digit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Evaluation speakers (enrolled and tested).
    pub n_speakers: usize,
    /// Speakers whose data trains the background models.
    pub n_background_speakers: usize,
    pub background_utterances: usize,
    pub enroll_utterances: usize,
    pub enroll_digits: usize,
    pub test_utterances: usize,
    pub test_digits: usize,
    pub mfcc_dim: usize,
    pub fbank_dim: usize,
    /// Expected distance between canonical state means of different words,
    /// in units of `noise_scale`.
    pub state_separation: f64,
    /// Expected distance between canonical state means of one word, in the
    /// same units. At most `state_separation`.
    pub within_word_separation: f64,
    /// Per-dimension standard deviation of a speaker's offset from the
    /// canonical means. 0 removes all speaker information.
    pub speaker_offset_scale: f64,
    /// Fraction of the offset variance that is drawn independently per
    /// state; the rest is one shift shared by all states.
    pub state_offset_share: f64,
    /// Per-dimension standard deviation of the frame noise.
    pub noise_scale: f64,
    pub dwell_min: usize,
    pub dwell_max: usize,
    pub silence_dwell_min: usize,
    pub silence_dwell_max: usize,
    /// Chance of a short pause between two digits.
    pub pause_probability: f64,
    pub corruption: CorruptionMode,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            n_background_speakers: 40,
            background_utterances: 6,
            enroll_utterances: 3,
            enroll_digits: 10,
            test_utterances: 4,
            test_digits: 5,
            mfcc_dim: 60,
            fbank_dim: 120,
            state_separation: 3.5,
            within_word_separation: 1.5,
            speaker_offset_scale: 0.3,
            state_offset_share: 0.97,
            noise_scale: 1.0,
            dwell_min: 2,
            dwell_max: 6,
            silence_dwell_min: 3,
            silence_dwell_max: 8,
            pause_probability: 0.15,
            corruption: CorruptionMode::WholePrompt,
            seed: 42,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::ConfigInvalid(m.to_string()));
        if self.n_speakers < 2 {
            return bad("n_speakers must be at least 2");
        }
        if self.n_background_speakers < 2 || self.background_utterances < 2 {
            return bad("need at least 2 background speakers with 2 utterances each");
        }
        if self.enroll_utterances == 0 || self.test_utterances == 0 || self.enroll_digits == 0 || self.test_digits == 0 {
            return bad("utterance and digit counts must be positive");
        }
        if self.enroll_utterances * self.enroll_digits < 10 {
            return bad("enrollment cannot cover all ten digits");
        }
        if self.mfcc_dim == 0 || self.fbank_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        if !(self.noise_scale > 0.0 && self.state_separation > 0.0 && self.speaker_offset_scale >= 0.0) {
            return bad("scales must be positive (speaker offsets may be 0)");
        }
        if !(0.0..=1.0).contains(&self.state_offset_share) {
            return bad("state_offset_share must lie in [0, 1]");
        }
        if !(self.within_word_separation >= 0.0 && self.within_word_separation <= self.state_separation) {
            return bad("within_word_separation must lie in [0, state_separation]");
        }
        if self.dwell_min < 2 || self.dwell_max < self.dwell_min || self.silence_dwell_min < 2 || self.silence_dwell_max < self.silence_dwell_min {
            return bad("dwell ranges must start at 2 frames or more");
        }
        if !(0.0..=1.0).contains(&self.pause_probability) {
            return bad("pause_probability must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Background,
    Enroll,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: String,
    pub role: Role,
    pub transcript: String,
    /// True state of every frame.
    pub states: Vec<usize>,
    pub mfcc: FeatureSequence,
    pub fbank: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub utterances: Vec<Utterance>,
    pub trials: Vec<TrialRecord>,
}

impl Corpus {
    pub fn utterance(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.role == role)
    }

    /// Evaluation speakers in generation order.
    pub fn eval_speakers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for u in self.with_role(Role::Enroll) {
            if out.last() != Some(&u.speaker) {
                out.push(u.speaker.clone());
            }
        }
        out
    }
}

/// Speaker part of an utterance id.
pub fn speaker_of(utt_id: &str) -> &str {
    utt_id.rsplit_once('_').map_or(utt_id, |(s, _)| s)
}

fn random_digits(len: usize, rng: &mut impl Rng) -> String {
    (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect()
}

/// Derives a wrong prompt from `digits` using a dedicated generator.
pub fn corrupt_prompt(digits: &str, mode: CorruptionMode, seed: u64) -> String {
    corrupt_with(digits, mode, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn corrupt_with(digits: &str, mode: CorruptionMode, rng: &mut impl Rng) -> String {
    match mode {
        CorruptionMode::WholePrompt => loop {
            let candidate = random_digits(digits.len(), rng);
            if candidate != digits {
                return candidate;
            }
        },
        CorruptionMode::SingleDigit => {
            let mut bytes = digits.as_bytes().to_vec();
            let pos = rng.gen_range(0..bytes.len());
            let old = bytes[pos];
            // shift by 1..=9 so the new digit always differs
            let shift = rng.gen_range(1..10u8);
            bytes[pos] = b'0' + (old - b'0' + shift) % 10;
            String::from_utf8(bytes).expect("ascii digits")
        }
    }
}

fn gaussian_rows(rows: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, dim), |_| scale * rng.sample::<f64, _>(StandardNormal))
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    mfcc_means: Array2<f64>,
    fbank_means: Array2<f64>,
}

impl Generator<'_> {
    /// State path of one utterance: edge silences, digits, optional pauses.
    fn state_path(&self, transcript: &str, rng: &mut impl Rng) -> Vec<usize> {
        let cfg = self.cfg;
        let mut path = Vec::new();
        let silence = |path: &mut Vec<usize>, lo: usize, hi: usize, rng: &mut dyn rand::RngCore| {
            for k in 0..STATES_PER_WORD {
                let dwell = rng.gen_range(lo..=hi);
                path.extend(std::iter::repeat(SILENCE_WORD * STATES_PER_WORD + k).take(dwell));
            }
        };
        silence(&mut path, cfg.silence_dwell_min, cfg.silence_dwell_max, rng);
        for (i, ch) in transcript.bytes().enumerate() {
            if i > 0 && rng.gen_bool(cfg.pause_probability) {
                silence(&mut path, 2, 3, rng);
            }
            let word = (ch - b'0') as usize;
            for k in 0..STATES_PER_WORD {
                let dwell = rng.gen_range(cfg.dwell_min..=cfg.dwell_max);
                path.extend(std::iter::repeat(word * STATES_PER_WORD + k).take(dwell));
            }
        }
        silence(&mut path, cfg.silence_dwell_min, cfg.silence_dwell_max, rng);
        path
    }

    fn render(&self, means: &Array2<f64>, offset: &Array2<f64>, states: &[usize], rng: &mut impl Rng) -> Array2<f64> {
        let d = means.ncols();
        Array2::from_shape_fn((states.len(), d), |(t, j)| {
            let v = means[[states[t], j]] + offset[[states[t], j]] + self.cfg.noise_scale * rng.sample::<f64, _>(StandardNormal);
            v as f32 as f64
        })
    }

    fn utterance(&self, id: String, speaker: &Speaker, role: Role, transcript: String, rng: &mut impl Rng) -> Utterance {
        let states = self.state_path(&transcript, rng);
        let mfcc = self.render(&self.mfcc_means, &speaker.mfcc_offset, &states, rng);
        let fbank = self.render(&self.fbank_means, &speaker.fbank_offset, &states, rng);
        Utterance {
            id,
            speaker: speaker.name.clone(),
            role,
            transcript,
            states,
            mfcc: FeatureSequence::new(mfcc, FeatureKind::from_width(self.cfg.mfcc_dim).expect("nonzero")).expect("finite"),
            fbank: FeatureSequence::new(fbank, FeatureKind::from_width(self.cfg.fbank_dim).expect("nonzero")).expect("finite"),
        }
    }
}

struct Speaker {
    name: String,
    mfcc_offset: Array2<f64>,
    fbank_offset: Array2<f64>,
}

fn make_speaker(name: String, cfg: &SynthConfig, rng: &mut impl Rng) -> Speaker {
    let mut offset = |d: usize| -> Array2<f64> {
        let shared_sd = cfg.speaker_offset_scale * (1.0 - cfg.state_offset_share).sqrt();
        let shared: Vec<f64> = (0..d).map(|_| shared_sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let per_state = gaussian_rows(NUM_STATES, d, cfg.speaker_offset_scale * cfg.state_offset_share.sqrt(), &mut *rng);
        per_state + &ndarray::ArrayView1::from(&shared)
    };
    let mfcc_offset = offset(cfg.mfcc_dim);
    let fbank_offset = offset(cfg.fbank_dim);
    Speaker { name, mfcc_offset, fbank_offset }
}

/// Canonical state means: a centroid per word plus a per-state deviation.
/// With spherical draws `E|m_a - m_b|^2 = 2 d sd^2`, so the two scales are
/// set to give the configured within-word and between-word distances.
fn state_means(cfg: &SynthConfig, d: usize, rng: &mut impl Rng) -> Array2<f64> {
    let unit = cfg.noise_scale / (2.0 * d as f64).sqrt();
    let within = cfg.within_word_separation;
    let word_sd = (cfg.state_separation.powi(2) - within.powi(2)).sqrt() * unit;
    let words = gaussian_rows(NUM_WORDS, d, word_sd, rng);
    let mut means = gaussian_rows(NUM_STATES, d, within * unit, rng);
    for (s, mut row) in means.outer_iter_mut().enumerate() {
        row += &words.row(s / STATES_PER_WORD);
    }
    means
}

/// Draws `count` digit strings of length `len` whose union covers all ten
/// digits, redrawing the whole set until it does.
fn covering_prompts(count: usize, len: usize, rng: &mut impl Rng) -> Vec<String> {
    loop {
        let prompts: Vec<String> = (0..count).map(|_| random_digits(len, rng)).collect();
        let mut seen = [false; 10];
        for p in &prompts {
            for b in p.bytes() {
                seen[(b - b'0') as usize] = true;
            }
        }
        if seen.iter().all(|&s| s) {
            return prompts;
        }
    }
}

/// Generates the corpus described by `cfg`. The same config always yields
/// the same corpus.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // spherical means: E|m_a - m_b|^2 = 2 d sd^2, so pick sd for the target distance
    let mfcc_means = state_means(cfg, cfg.mfcc_dim, &mut rng);
    let fbank_means = state_means(cfg, cfg.fbank_dim, &mut rng);
    let gen = Generator { cfg, mfcc_means, fbank_means };

    let mut utterances = Vec::new();
    let mut all_background_prompts = Vec::new();
    for b in 0..cfg.n_background_speakers {
        let spk = make_speaker(format!("bg{b:03}"), cfg, &mut rng);
        for k in 0..cfg.background_utterances {
            let len = if k % 2 == 0 { cfg.enroll_digits } else { cfg.test_digits };
            let transcript = random_digits(len, &mut rng);
            all_background_prompts.push(transcript.clone());
            utterances.push(gen.utterance(format!("{}_b{k}", spk.name), &spk, Role::Background, transcript, &mut rng));
        }
    }
    // the background set trains the HMMs, so it must cover every digit too
    let covered = all_background_prompts.iter().flat_map(|p| p.bytes()).fold([false; 10], |mut acc, b| {
        acc[(b - b'0') as usize] = true;
        acc
    });
    if covered.iter().any(|c| !c) {
        let spk = make_speaker("bg_cover".into(), cfg, &mut rng);
        let transcript = "0123456789".to_string();
        utterances.push(gen.utterance(format!("{}_b0", spk.name), &spk, Role::Background, transcript, &mut rng));
    }

    let mut test_ids: Vec<(String, String, String)> = Vec::new();
    for s in 0..cfg.n_speakers {
        let spk = make_speaker(format!("spk{s:02}"), cfg, &mut rng);
        for (k, transcript) in covering_prompts(cfg.enroll_utterances, cfg.enroll_digits, &mut rng).into_iter().enumerate() {
            utterances.push(gen.utterance(format!("{}_e{k}", spk.name), &spk, Role::Enroll, transcript, &mut rng));
        }
        for k in 0..cfg.test_utterances {
            let transcript = random_digits(cfg.test_digits, &mut rng);
            let wrong = corrupt_with(&transcript, cfg.corruption, &mut rng);
            let id = format!("{}_t{k}", spk.name);
            test_ids.push((id.clone(), transcript.clone(), wrong));
            utterances.push(gen.utterance(id, &spk, Role::Test, transcript, &mut rng));
        }
    }

    let mut trials = Vec::new();
    for s in 0..cfg.n_speakers {
        let model = format!("spk{s:02}");
        for (id, right, wrong) in &test_ids {
            let target = speaker_of(id) == model;
            let (correct, incorrect) = if target { (Category::Tc, Category::Tw) } else { (Category::Ic, Category::Iw) };
            trials.push(TrialRecord { speaker: model.clone(), utterance: id.clone(), prompt: right.clone(), category: correct });
            trials.push(TrialRecord { speaker: model.clone(), utterance: id.clone(), prompt: wrong.clone(), category: incorrect });
        }
    }
    Ok(Corpus { utterances, trials })
}

fn transcript_file(corpus: &Corpus, role: Role) -> String {
    corpus.with_role(role).map(|u| format!("{} {}\n", u.id, u.transcript)).collect()
}

/// Writes the corpus under `dir/corpus/`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<(), SynthError> {
    let root = dir.join("corpus");
    let feats = root.join("feats");
    let transcripts = root.join("transcripts");
    let trials = root.join("trials");
    for d in [&feats, &transcripts, &trials] {
        fs::create_dir_all(d)?;
    }
    for u in &corpus.utterances {
        write_features(&feats.join(format!("{}.mfcc.dvfe", u.id)), &u.mfcc)?;
        write_features(&feats.join(format!("{}.fbank.dvfe", u.id)), &u.fbank)?;
    }
    fs::write(transcripts.join("background.txt"), transcript_file(corpus, Role::Background))?;
    fs::write(transcripts.join("enroll.txt"), transcript_file(corpus, Role::Enroll))?;
    fs::write(transcripts.join("test.txt"), transcript_file(corpus, Role::Test))?;
    fs::write(trials.join("trials.txt"), format_trials(&corpus.trials))?;
    Ok(())
}

/// Parses `<utt> <digits>` lines.
pub fn parse_transcripts(path: &Path, text: &str) -> Result<Vec<(String, String)>, SynthError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |message: String| SynthError::Layout { path: path.to_path_buf(), message: format!("line {}: {message}", i + 1) };
        if fields.len() != 2 {
            return Err(bad(format!("expected `<utt> <digits>`, got {} fields", fields.len())));
        }
        if !fields[1].bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad(format!("transcript {:?} is not a digit string", fields[1])));
        }
        out.push((fields[0].to_string(), fields[1].to_string()));
    }
    Ok(out)
}

/// Path of the transcript list for `role` under a corpus root.
pub fn transcript_path(root: &Path, role: Role) -> PathBuf {
    let name = match role {
        Role::Background => "background.txt",
        Role::Enroll => "enroll.txt",
        Role::Test => "test.txt",
    };
    root.join("transcripts").join(name)
}

/// Paths of the MFCC and filterbank files of one utterance.
pub fn feature_paths(root: &Path, utt: &str) -> (PathBuf, PathBuf) {
    let feats = root.join("feats");
    (feats.join(format!("{utt}.mfcc.dvfe")), feats.join(format!("{utt}.fbank.dvfe")))
}

/// Reads a corpus laid out as [`write_corpus`] writes it, with `root`
/// pointing at the `corpus` directory itself. State paths are not stored
/// on disk, so every loaded utterance has an empty `states`.
pub fn read_corpus(root: &Path) -> Result<Corpus, SynthError> {
    let mut utterances = Vec::new();
    for role in [Role::Background, Role::Enroll, Role::Test] {
        let path = transcript_path(root, role);
        for (id, transcript) in parse_transcripts(&path, &fs::read_to_string(&path)?)? {
            let (m, f) = feature_paths(root, &id);
            utterances.push(Utterance {
                speaker: speaker_of(&id).to_string(),
                mfcc: read_features(&m)?,
                fbank: read_features(&f)?,
                id,
                role,
                transcript,
                states: Vec::new(),
            });
        }
    }
    let trials = parse_trials(&fs::read_to_string(root.join("trials").join("trials.txt"))?)?;
    Ok(Corpus { utterances, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{compile_graph, SilencePolicy};

    fn small() -> SynthConfig {
        SynthConfig { n_speakers: 3, n_background_speakers: 3, background_utterances: 2, test_utterances: 2, ..Default::default() }
    }

    #[test]
    fn single_digit_hamming_one() {
        for seed in 0..50 {
            let out = corrupt_prompt("12345", CorruptionMode::SingleDigit, seed);
            assert_eq!(out.bytes().zip("12345".bytes()).filter(|(a, b)| a != b).count(), 1);
        }
    }

    #[test]
    fn whole_prompt_differs_and_is_seeded() {
        for seed in 0..50 {
            let out = corrupt_prompt("7", CorruptionMode::WholePrompt, seed);
            assert_ne!(out, "7");
            assert_eq!(out, corrupt_prompt("7", CorruptionMode::WholePrompt, seed));
        }
    }

    #[test]
    fn deterministic_and_consistent() {
        let a = generate_corpus(&small()).unwrap();
        let b = generate_corpus(&small()).unwrap();
        assert_eq!(a, b);
        for u in &a.utterances {
            assert_eq!(u.states.len(), u.mfcc.num_frames());
            assert_eq!(u.mfcc.kind(), FeatureKind::Mfcc60);
            assert_eq!(u.fbank.kind(), FeatureKind::Fbank120);
            let g = compile_graph(&u.transcript, SilencePolicy::default()).unwrap();
            assert!(u.states.len() >= g.min_length());
        }
        for t in &a.trials {
            assert!(a.utterance(&t.utterance).is_some());
        }
        let mut seen = [false; 10];
        for u in a.with_role(Role::Enroll).filter(|u| u.speaker == "spk00") {
            for b in u.transcript.bytes() {
                seen[(b - b'0') as usize] = true;
            }
        }
        assert!(seen.iter().all(|s| *s));
    }

    #[test]
    fn all_categories_present() {
        let c = generate_corpus(&small()).unwrap();
        for cat in [Category::Tc, Category::Tw, Category::Ic, Category::Iw] {
            assert!(c.trials.iter().any(|t| t.category == cat));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SynthConfig { n_speakers: 1, ..Default::default() };
        assert!(matches!(generate_corpus(&cfg), Err(SynthError::ConfigInvalid(_))));
        let cfg = SynthConfig { dwell_min: 1, ..Default::default() };
        assert!(matches!(generate_corpus(&cfg), Err(SynthError::ConfigInvalid(_))));
    }

    #[test]
    fn disk_round_trip() {
        let c = generate_corpus(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&c, dir.path()).unwrap();
        let back = read_corpus(&dir.path().join("corpus")).unwrap();
        assert_eq!(back.trials, c.trials);
        assert_eq!(back.utterances.len(), c.utterances.len());
        // read back grouped by role, generation order within a role
        let mut orig: Vec<&Utterance> = c.utterances.iter().collect();
        orig.sort_by_key(|u| match u.role {
            Role::Background => 0,
            Role::Enroll => 1,
            Role::Test => 2,
        });
        for (a, b) in back.utterances.iter().zip(orig) {
            assert_eq!((&a.id, &a.speaker, a.role, &a.transcript), (&b.id, &b.speaker, b.role, &b.transcript));
            assert_eq!(a.mfcc, b.mfcc);
            assert_eq!(a.fbank, b.fbank);
        }
    }

    #[test]
    fn transcript_lines_validated() {
        let p = Path::new("t.txt");
        assert_eq!(parse_transcripts(p, "a_1 123\n\nb_2 9\n").unwrap().len(), 2);
        assert!(matches!(parse_transcripts(p, "a_1 12x"), Err(SynthError::Layout { .. })));
        assert!(matches!(parse_transcripts(p, "a_1"), Err(SynthError::Layout { .. })));
    }

    #[test]
    fn state_offsets_vary_by_state() {
        let cfg = SynthConfig { state_offset_share: 1.0, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spk = make_speaker("s".into(), &cfg, &mut rng);
        assert_eq!(spk.mfcc_offset.dim(), (NUM_STATES, cfg.mfcc_dim));
        assert_ne!(spk.mfcc_offset.row(0), spk.mfcc_offset.row(1));
        let cfg = SynthConfig { state_offset_share: 0.0, ..small() };
        let spk = make_speaker("s".into(), &cfg, &mut rng);
        assert_eq!(spk.fbank_offset.row(0), spk.fbank_offset.row(NUM_STATES - 1));
    }
}
