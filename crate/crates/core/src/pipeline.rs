//! Stage functions shared by the command-line tool, and an in-memory
//! end-to-end experiment over a synthetic corpus.
//!
//! The experiment trains every model on the background speakers, enrolls
//! the evaluation speakers, scores every trial with each speaker system
//! and each content scorer, and reports EER / minDCF per condition.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::aligner::{mlp_posteriors, train_mlp, MlpError, MlpModel, MlpTrainConfig, TrainReport};
use crate::config::{AlignSource, PipelineConfig};
use crate::content::{kl_score, pool_classes, smooth, ClassLevel, ContentError, PhoneticClassMap};
use crate::eval::{evaluate, format_report, format_score, partition_trials, Condition, EvalError, MetricsRow, ScoreSet, TrialRecord};
use crate::features::{splice, FeatureError, FeatureSequence};
use crate::gmm::{train_em, DiagGmm, GmmError, GmmTrainConfig};
use crate::hmm::{
    compile_graph, fb_align, fb_align_with_state_ll, hybrid_state_log_likelihoods, train_hmm_set, viterbi_align,
    viterbi_align_with_state_ll, AlignmentMatrix, HmmError, HmmSet, HmmTrainConfig, SilencePolicy, TrainingUtterance,
};
use crate::io::{write_model, IoError, Model};
use crate::ivector::{extract_ivector, train_tv, IVector, IvectorError, TvConfig, TvModel};
use crate::map::{enroll, llr_score, MapError, SpeakerModel};
use crate::pgmm::{
    accumulate_stats, init_pgmm, mixture_posteriors, pgmm_em_step, pgmm_objective, ubm_posteriors, Background, MixturePosteriors, Pgmm,
    PgmmError, SuffStats,
};
use crate::plda::{plda_score, train_backend, BackendConfig, PldaBackend, PldaError};
use crate::synth::{Corpus, Role, SynthError, Utterance};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Gmm(#[from] GmmError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Pgmm(#[from] PgmmError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Ivector(#[from] IvectorError),
    #[error(transparent)]
    Plda(#[from] PldaError),
    #[error(transparent)]
    Content(#[from] ContentError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Fs(#[from] std::io::Error),
    #[error("missing input: {0}")]
    Missing(String),
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Hard (Viterbi) or soft (forward-backward) alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    Viterbi,
    #[default]
    Fb,
}

impl FromStr for AlignMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "viterbi" => Ok(Self::Viterbi),
            "fb" => Ok(Self::Fb),
            other => Err(format!("unknown alignment mode {other:?} (expected viterbi or fb)")),
        }
    }
}

pub fn hmm_train_config(cfg: &PipelineConfig) -> HmmTrainConfig {
    HmmTrainConfig { components: cfg.hmm_components, silence_policy: cfg.silence_policy, ..HmmTrainConfig::default() }
}

pub fn gmm_train_config(cfg: &PipelineConfig, components: usize) -> GmmTrainConfig {
    GmmTrainConfig { target_components: components, em_iterations: cfg.em_iterations, ..GmmTrainConfig::default() }
}

pub fn mlp_train_config(cfg: &PipelineConfig) -> MlpTrainConfig {
    MlpTrainConfig { hidden: cfg.mlp_hidden.clone(), epochs: cfg.mlp_epochs, seed: cfg.seed, ..MlpTrainConfig::default() }
}

pub fn tv_config(cfg: &PipelineConfig) -> TvConfig {
    TvConfig { rank: cfg.ivector_rank, iterations: cfg.tv_iterations, seed: cfg.seed }
}

pub fn backend_config(cfg: &PipelineConfig) -> BackendConfig {
    BackendConfig { lda_dim: cfg.lda_dim, plda_iterations: cfg.plda_iterations }
}

/// Viterbi state labels for classifier training.
pub fn viterbi_labels(hmms: &HmmSet, mfcc: &FeatureSequence, transcript: &str, policy: SilencePolicy) -> Result<Vec<usize>> {
    let graph = compile_graph(transcript, policy)?;
    Ok(viterbi_align(&graph, hmms, mfcc)?.states)
}

/// Stacks the spliced frames and Viterbi labels of `(mfcc, fbank,
/// transcript)` triples and trains the state classifier on them.
pub fn train_aligner(
    hmms: &HmmSet,
    data: &[(&FeatureSequence, &FeatureSequence, &str)],
    cfg: &PipelineConfig,
) -> Result<(MlpModel, TrainReport)> {
    let prepared: Vec<(Vec<usize>, FeatureSequence)> = data
        .par_iter()
        .map(|(mfcc, fbank, transcript)| -> Result<_> {
            let labels = viterbi_labels(hmms, mfcc, transcript, cfg.silence_policy)?;
            Ok((labels, splice(fbank, cfg.context)?))
        })
        .collect::<Result<_>>()?;
    let rows: usize = prepared.iter().map(|(l, _)| l.len()).sum();
    let width = prepared.first().map(|(_, f)| f.dim()).ok_or_else(|| PipelineError::Missing("aligner training data".into()))?;
    let mut x = Array2::zeros((rows, width));
    let mut labels = Vec::with_capacity(rows);
    let mut at = 0;
    for (l, f) in prepared {
        let n = l.len();
        x.slice_mut(ndarray::s![at..at + n, ..]).assign(f.frames());
        labels.extend(l);
        at += n;
    }
    Ok(train_mlp(&x, &labels, &mlp_train_config(cfg))?)
}

/// Classifier posteriors for raw filterbank frames.
pub fn dnn_alignment(mlp: &MlpModel, fbank: &FeatureSequence, context: usize) -> Result<AlignmentMatrix> {
    Ok(mlp_posteriors(mlp, &splice(fbank, context)?)?)
}

/// Pools the frames of several utterances into one matrix.
pub fn stack_frames(feats: &[&FeatureSequence]) -> Result<Array2<f64>> {
    let d = feats.first().map(|f| f.dim()).ok_or_else(|| PipelineError::Missing("feature frames".into()))?;
    let mut all = Vec::new();
    for f in feats {
        if f.dim() != d {
            return Err(PipelineError::Missing(format!("features of width {d}, found {}", f.dim())));
        }
        all.extend(f.frames().iter().copied());
    }
    Ok(Array2::from_shape_vec((all.len() / d, d), all).expect("whole frames"))
}

pub fn train_ubm(feats: &[&FeatureSequence], cfg: &PipelineConfig) -> Result<DiagGmm> {
    Ok(train_em(&stack_frames(feats)?, &gmm_train_config(cfg, cfg.ubm_components))?)
}

/// Hard-assignment initialization followed by `pgmm_em_passes` EM steps.
/// Returns the model and the objective before every pass and after the
/// last.
pub fn train_phonetic_gmm(data: &[(&AlignmentMatrix, &FeatureSequence)], cfg: &PipelineConfig) -> Result<(Pgmm, Vec<f64>)> {
    let mut pgmm = init_pgmm(data, &gmm_train_config(cfg, cfg.pgmm_components))?;
    let mut trace = Vec::with_capacity(cfg.pgmm_em_passes + 1);
    for _ in 0..cfg.pgmm_em_passes {
        let step = pgmm_em_step(&pgmm, data)?;
        trace.push(step.objective);
        pgmm = step.pgmm;
    }
    trace.push(pgmm_objective(&pgmm, data)?);
    Ok((pgmm, trace))
}

/// Models available for alignment. Each source needs only its own parts.
#[derive(Debug, Clone, Copy)]
pub struct Aligners<'a> {
    pub hmms: Option<&'a HmmSet>,
    pub mlp: Option<&'a MlpModel>,
    pub policy: SilencePolicy,
    pub context: usize,
}

impl Aligners<'_> {
    fn hmms(&self) -> Result<&HmmSet> {
        self.hmms.ok_or_else(|| PipelineError::Missing("HMM set".into()))
    }

    fn mlp(&self) -> Result<&MlpModel> {
        self.mlp.ok_or_else(|| PipelineError::Missing("state classifier".into()))
    }

    /// Aligns one utterance. `dnn` may carry precomputed classifier
    /// posteriors for `fbank`; the prompt is ignored by the pure DNN source.
    pub fn align(
        &self,
        source: AlignSource,
        mode: AlignMode,
        mfcc: &FeatureSequence,
        fbank: &FeatureSequence,
        dnn: Option<&AlignmentMatrix>,
        prompt: &str,
    ) -> Result<AlignmentMatrix> {
        let dnn_post = |this: &Self| -> Result<AlignmentMatrix> {
            match dnn {
                Some(d) => Ok(d.clone()),
                None => dnn_alignment(this.mlp()?, fbank, this.context),
            }
        };
        match source {
            AlignSource::GmmHmm => {
                let graph = compile_graph(prompt, self.policy)?;
                let hmms = self.hmms()?;
                match mode {
                    AlignMode::Fb => Ok(fb_align(&graph, hmms, mfcc)?),
                    AlignMode::Viterbi => Ok(AlignmentMatrix::from_path(&viterbi_align(&graph, hmms, mfcc)?.states)?),
                }
            }
            AlignSource::Dnn => dnn_post(self),
            AlignSource::DnnHmm => {
                let graph = compile_graph(prompt, self.policy)?;
                let post = dnn_post(self)?;
                let ll = hybrid_state_log_likelihoods(&post, &self.mlp()?.log_priors)?;
                let min = graph.min_length();
                if ll.nrows() < min {
                    return Err(HmmError::TooShort { frames: ll.nrows(), min }.into());
                }
                let loops = self.hmms()?.self_loops();
                match mode {
                    AlignMode::Fb => Ok(fb_align_with_state_ll(&graph, &loops, &ll)?.0),
                    AlignMode::Viterbi => Ok(AlignmentMatrix::from_path(&viterbi_align_with_state_ll(&graph, &loops, &ll)?.states)?),
                }
            }
        }
    }
}

/// Which frame posteriors feed a speaker model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosteriorSystem {
    /// Unsupervised: component posteriors of the UBM.
    Ubm,
    /// A phonetic GMM under the given alignment.
    Aligned(AlignSource),
}

impl PosteriorSystem {
    pub const ALL: [PosteriorSystem; 4] = [
        PosteriorSystem::Ubm,
        PosteriorSystem::Aligned(AlignSource::GmmHmm),
        PosteriorSystem::Aligned(AlignSource::Dnn),
        PosteriorSystem::Aligned(AlignSource::DnnHmm),
    ];

    pub fn uses_prompt(self) -> bool {
        matches!(self, PosteriorSystem::Aligned(AlignSource::GmmHmm | AlignSource::DnnHmm))
    }

    /// Lower-case name for file names and command-line values.
    pub fn slug(self) -> String {
        match self {
            PosteriorSystem::Ubm => "ubm".into(),
            PosteriorSystem::Aligned(src) => src.to_string(),
        }
    }
}

impl FromStr for PosteriorSystem {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ubm" | "gmm-ubm" => Ok(Self::Ubm),
            other => other
                .parse()
                .map(Self::Aligned)
                .map_err(|_| format!("unknown posterior system {s:?} (expected ubm, gmm-hmm, dnn or dnn-hmm)")),
        }
    }
}

impl fmt::Display for PosteriorSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosteriorSystem::Ubm => "GMM-UBM",
            PosteriorSystem::Aligned(AlignSource::GmmHmm) => "HMM",
            PosteriorSystem::Aligned(AlignSource::Dnn) => "DNN",
            PosteriorSystem::Aligned(AlignSource::DnnHmm) => "DNN-HMM",
        })
    }
}

/// Everything trained on the background speakers.
#[derive(Debug, Clone)]
pub struct Models {
    pub hmms: HmmSet,
    pub mlp: MlpModel,
    pub ubm: DiagGmm,
    /// Digit-state GMMs trained under classifier alignments.
    pub pgmm_dnn: Pgmm,
    /// Digit-state emission mixtures of the HMM set.
    pub pgmm_hmm: Pgmm,
}

impl Models {
    pub fn aligners(&self, cfg: &PipelineConfig) -> Aligners<'_> {
        Aligners { hmms: Some(&self.hmms), mlp: Some(&self.mlp), policy: cfg.silence_policy, context: cfg.context }
    }

    fn pgmm_for(&self, source: AlignSource) -> &Pgmm {
        match source {
            AlignSource::GmmHmm => &self.pgmm_hmm,
            AlignSource::Dnn | AlignSource::DnnHmm => &self.pgmm_dnn,
        }
    }

    pub fn background(&self, system: PosteriorSystem) -> Background {
        match system {
            PosteriorSystem::Ubm => Background::from_gmm(&self.ubm),
            PosteriorSystem::Aligned(src) => Background::from_pgmm(self.pgmm_for(src)),
        }
    }

    /// Writes every model to `dir` under fixed names.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_model(&dir.join("hmm.dvmd"), &Model::Hmm(self.hmms.clone()))?;
        write_model(&dir.join("mlp.dvmd"), &Model::Mlp(self.mlp.clone()))?;
        write_model(&dir.join("ubm.dvmd"), &Model::Ubm(self.ubm.clone()))?;
        write_model(&dir.join("pgmm_dnn.dvmd"), &Model::Pgmm(self.pgmm_dnn.clone()))?;
        Ok(())
    }
}

/// Trains all background models from the background utterances.
pub fn train_models(corpus: &Corpus, cfg: &PipelineConfig) -> Result<Models> {
    let bg: Vec<&Utterance> = corpus.with_role(Role::Background).collect();
    let train: Vec<TrainingUtterance> =
        bg.iter().map(|u| TrainingUtterance { id: &u.id, feats: &u.mfcc, transcription: &u.transcript }).collect();
    log::info!("training HMM set on {} utterances", train.len());
    let (hmms, _) = train_hmm_set(&train, &hmm_train_config(cfg))?;

    log::info!("training state classifier");
    let triples: Vec<(&FeatureSequence, &FeatureSequence, &str)> = bg.iter().map(|u| (&u.mfcc, &u.fbank, u.transcript.as_str())).collect();
    let (mlp, _) = train_aligner(&hmms, &triples, cfg)?;

    log::info!("training {}-component UBM", cfg.ubm_components);
    let mfccs: Vec<&FeatureSequence> = bg.iter().map(|u| &u.mfcc).collect();
    let ubm = train_ubm(&mfccs, cfg)?;

    log::info!("training phonetic GMMs under classifier alignments");
    let dnn: Vec<AlignmentMatrix> = bg.par_iter().map(|u| dnn_alignment(&mlp, &u.fbank, cfg.context)).collect::<Result<_>>()?;
    let data: Vec<(&AlignmentMatrix, &FeatureSequence)> = dnn.iter().zip(&mfccs).map(|(a, f)| (a, *f)).collect();
    let (pgmm_dnn, _) = train_phonetic_gmm(&data, cfg)?;
    let pgmm_hmm = Pgmm::from_hmm(&hmms, false);
    Ok(Models { hmms, mlp, ubm, pgmm_dnn, pgmm_hmm })
}

/// Per-utterance caches: classifier posteriors once per utterance and
/// prompt-dependent alignments once per `(utterance, prompt)`.
struct AlignmentCache<'a> {
    utts: HashMap<&'a str, &'a Utterance>,
    dnn: HashMap<&'a str, AlignmentMatrix>,
    prompted: HashMap<(AlignSource, String, String), AlignmentMatrix>,
}

impl<'a> AlignmentCache<'a> {
    fn build(corpus: &'a Corpus, models: &Models, cfg: &PipelineConfig) -> Result<Self> {
        let eval: Vec<&Utterance> = corpus.utterances.iter().filter(|u| u.role != Role::Background).collect();
        let utts: HashMap<&str, &Utterance> = corpus.utterances.iter().map(|u| (u.id.as_str(), u)).collect();
        let dnn: Vec<AlignmentMatrix> =
            eval.par_iter().map(|u| dnn_alignment(&models.mlp, &u.fbank, cfg.context)).collect::<Result<_>>()?;
        let dnn: HashMap<&str, AlignmentMatrix> = eval.iter().map(|u| u.id.as_str()).zip(dnn).collect();

        let mut keys: Vec<(&str, &str)> = eval.iter().filter(|u| u.role == Role::Enroll).map(|u| (u.id.as_str(), u.transcript.as_str())).collect();
        keys.extend(corpus.trials.iter().map(|t| (t.utterance.as_str(), t.prompt.as_str())));
        keys.sort_unstable();
        keys.dedup();
        let aligners = models.aligners(cfg);
        let mut prompted = HashMap::new();
        for source in [AlignSource::GmmHmm, AlignSource::DnnHmm] {
            let done: Vec<AlignmentMatrix> = keys
                .par_iter()
                .map(|&(id, prompt)| {
                    let u = utts.get(id).ok_or_else(|| PipelineError::Missing(format!("utterance {id}")))?;
                    aligners.align(source, AlignMode::Fb, &u.mfcc, &u.fbank, dnn.get(id), prompt)
                })
                .collect::<Result<_>>()?;
            prompted.extend(keys.iter().map(|&(id, p)| (source, id.to_string(), p.to_string())).zip(done));
        }
        Ok(Self { utts, dnn, prompted })
    }

    fn utt(&self, id: &str) -> Result<&'a Utterance> {
        self.utts.get(id).copied().ok_or_else(|| PipelineError::Missing(format!("utterance {id}")))
    }

    fn alignment(&self, source: AlignSource, id: &str, prompt: &str) -> Result<&AlignmentMatrix> {
        let found = match source {
            AlignSource::Dnn => self.dnn.get(id),
            _ => self.prompted.get(&(source, id.to_string(), prompt.to_string())),
        };
        found.ok_or_else(|| PipelineError::Missing(format!("{source} alignment of {id} for {prompt}")))
    }

    fn posteriors(&self, models: &Models, system: PosteriorSystem, id: &str, prompt: &str) -> Result<MixturePosteriors> {
        let u = self.utt(id)?;
        Ok(match system {
            PosteriorSystem::Ubm => ubm_posteriors(&models.ubm, &u.mfcc)?,
            PosteriorSystem::Aligned(src) => mixture_posteriors(models.pgmm_for(src), self.alignment(src, id, prompt)?, &u.mfcc)?,
        })
    }
}

/// Scores for one system, aligned with the corpus trial list.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemScores {
    pub name: String,
    pub scores: Vec<f64>,
}

impl SystemScores {
    /// `<speaker> <utterance> <prompt> <score>` lines.
    pub fn to_text(&self, trials: &[TrialRecord]) -> String {
        trials.iter().zip(&self.scores).map(|(t, s)| format_score(t, *s)).collect()
    }

    pub fn score_set(&self, trials: &[TrialRecord], condition: Condition) -> Result<ScoreSet> {
        let index: HashMap<(&str, &str, &str), f64> =
            trials.iter().zip(&self.scores).map(|(t, s)| ((t.speaker.as_str(), t.utterance.as_str(), t.prompt.as_str()), *s)).collect();
        let (scores, labels) = partition_trials(trials, condition)
            .into_iter()
            .map(|(t, l)| (index[&(t.speaker.as_str(), t.utterance.as_str(), t.prompt.as_str())], l))
            .unzip();
        Ok(ScoreSet::new(scores, labels)?)
    }
}

/// Which systems an experiment runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOptions {
    pub gmm_map: Vec<PosteriorSystem>,
    pub ivector: Vec<PosteriorSystem>,
    /// Prompt aligners compared against the classifier for content scoring.
    pub content: Vec<AlignSource>,
}

impl Default for ExperimentOptions {
    fn default() -> Self {
        Self {
            gmm_map: PosteriorSystem::ALL.to_vec(),
            ivector: vec![PosteriorSystem::Ubm, PosteriorSystem::Aligned(AlignSource::GmmHmm), PosteriorSystem::Aligned(AlignSource::Dnn)],
            content: vec![AlignSource::GmmHmm, AlignSource::DnnHmm],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub speaker: Vec<SystemScores>,
    pub content: Vec<SystemScores>,
    pub rows: Vec<MetricsRow>,
}

impl ExperimentReport {
    pub fn row(&self, system: &str, condition: Condition) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.system == system && r.condition == condition)
    }

    pub fn table(&self) -> String {
        format_report(&self.rows)
    }
}

fn speaker_ids(corpus: &Corpus) -> Vec<String> {
    corpus.eval_speakers()
}

fn gmm_map_scores(corpus: &Corpus, models: &Models, cache: &AlignmentCache, system: PosteriorSystem, relevance: f64) -> Result<Vec<f64>> {
    let bg = models.background(system);
    let enroll_utts: Vec<&Utterance> = corpus.with_role(Role::Enroll).collect();
    let speakers: Vec<(String, SpeakerModel)> = speaker_ids(corpus)
        .into_par_iter()
        .map(|spk| {
            let utts: Vec<&&Utterance> = enroll_utts.iter().filter(|u| u.speaker == spk).collect();
            let gammas: Vec<MixturePosteriors> =
                utts.iter().map(|u| cache.posteriors(models, system, &u.id, &u.transcript)).collect::<Result<_>>()?;
            let pairs: Vec<(&MixturePosteriors, &FeatureSequence)> = gammas.iter().zip(&utts).map(|(g, u)| (g, &u.mfcc)).collect();
            Ok((spk, enroll(&bg, &pairs, relevance)?))
        })
        .collect::<Result<_>>()?;
    let speakers: HashMap<String, SpeakerModel> = speakers.into_iter().collect();

    // test posteriors once per (utterance, prompt) or per utterance
    let key = |t: &TrialRecord| (t.utterance.clone(), if system.uses_prompt() { t.prompt.clone() } else { String::new() });
    let mut keys: Vec<(String, String)> = corpus.trials.iter().map(key).collect();
    keys.sort_unstable();
    keys.dedup();
    // prompt-free systems leave the prompt part of the key empty
    let gammas: Vec<MixturePosteriors> = keys.par_iter().map(|(id, p)| cache.posteriors(models, system, id, p)).collect::<Result<_>>()?;
    let gammas: HashMap<(String, String), MixturePosteriors> = keys.into_iter().zip(gammas).collect();
    corpus
        .trials
        .par_iter()
        .map(|t| {
            let spk = speakers.get(&t.speaker).ok_or_else(|| PipelineError::Missing(format!("speaker {}", t.speaker)))?;
            let u = cache.utt(&t.utterance)?;
            Ok(llr_score(spk, &bg, &gammas[&key(t)], &u.mfcc)?)
        })
        .collect()
}

/// Statistics of every background utterance, grouped by speaker.
fn background_stats(corpus: &Corpus, models: &Models, system: PosteriorSystem, cfg: &PipelineConfig) -> Result<Vec<(String, SuffStats)>> {
    let bg = models.background(system);
    let utts: Vec<&Utterance> = corpus.with_role(Role::Background).collect();
    let aligners = models.aligners(cfg);
    utts.par_iter()
        .map(|u| {
            let gammas = match system {
                PosteriorSystem::Ubm => ubm_posteriors(&models.ubm, &u.mfcc)?,
                PosteriorSystem::Aligned(src) => {
                    let align = aligners.align(src, AlignMode::Fb, &u.mfcc, &u.fbank, None, &u.transcript)?;
                    mixture_posteriors(models.pgmm_for(src), &align, &u.mfcc)?
                }
            };
            Ok((u.speaker.clone(), accumulate_stats(&gammas, &u.mfcc, &bg)?))
        })
        .collect()
}

fn ivector_scores(
    corpus: &Corpus,
    models: &Models,
    cache: &AlignmentCache,
    system: PosteriorSystem,
    cfg: &PipelineConfig,
) -> Result<(TvModel, PldaBackend, Vec<f64>)> {
    let bg = models.background(system);
    let train = background_stats(corpus, models, system, cfg)?;
    let stats: Vec<SuffStats> = train.iter().map(|(_, s)| s.clone()).collect();
    let (tv, _) = train_tv(&stats, &bg, &tv_config(cfg))?;
    let train_iv: Vec<(String, IVector)> =
        train.par_iter().map(|(spk, s)| Ok((spk.clone(), extract_ivector(s, &tv)?))).collect::<Result<_>>()?;
    let (backend, _) = train_backend(&train_iv, &backend_config(cfg))?;

    let ivector_of = |id: &str, prompt: &str| -> Result<IVector> {
        let u = cache.utt(id)?;
        let gammas = cache.posteriors(models, system, id, prompt)?;
        let iv = extract_ivector(&accumulate_stats(&gammas, &u.mfcc, &bg)?, &tv)?;
        Ok(backend.transform(&iv)?)
    };
    let enroll_utts: Vec<&Utterance> = corpus.with_role(Role::Enroll).collect();
    let enrolled: Vec<(String, Vec<IVector>)> = speaker_ids(corpus)
        .into_par_iter()
        .map(|spk| {
            let ivs = enroll_utts.iter().filter(|u| u.speaker == spk).map(|u| ivector_of(&u.id, &u.transcript)).collect::<Result<_>>()?;
            Ok((spk, ivs))
        })
        .collect::<Result<_>>()?;
    let enrolled: HashMap<String, Vec<IVector>> = enrolled.into_iter().collect();
    let mut keys: Vec<(&str, &str)> = corpus.trials.iter().map(|t| (t.utterance.as_str(), t.prompt.as_str())).collect();
    keys.sort_unstable();
    keys.dedup();
    let tests: Vec<IVector> = keys.par_iter().map(|(id, p)| ivector_of(id, p)).collect::<Result<_>>()?;
    let tests: HashMap<(&str, &str), IVector> = keys.into_iter().zip(tests).collect();
    let scores = corpus
        .trials
        .par_iter()
        .map(|t| {
            let e = enrolled.get(&t.speaker).ok_or_else(|| PipelineError::Missing(format!("speaker {}", t.speaker)))?;
            Ok(plda_score(&backend, e, &tests[&(t.utterance.as_str(), t.prompt.as_str())])?)
        })
        .collect::<Result<_>>()?;
    Ok((tv, backend, scores))
}

/// Negated KL between the prompt alignment and the classifier posteriors,
/// so that higher means more likely correct content.
pub fn content_score(prompt_align: &AlignmentMatrix, dnn: &AlignmentMatrix, level: ClassLevel, epsilon: f64) -> Result<f64> {
    let map = PhoneticClassMap::new(level);
    let a = smooth(&pool_classes(prompt_align, &map)?, epsilon)?;
    let b = smooth(&pool_classes(dnn, &map)?, epsilon)?;
    Ok(-kl_score(&a, &b)?)
}

fn content_scores(corpus: &Corpus, cache: &AlignmentCache, source: AlignSource, level: ClassLevel, epsilon: f64) -> Result<Vec<f64>> {
    corpus
        .trials
        .par_iter()
        .map(|t| {
            let dnn = cache.alignment(AlignSource::Dnn, &t.utterance, &t.prompt)?;
            content_score(cache.alignment(source, &t.utterance, &t.prompt)?, dnn, level, epsilon)
        })
        .collect()
}

pub fn content_system_name(source: AlignSource, level: ClassLevel) -> String {
    let aligner = match source {
        AlignSource::GmmHmm => "GMM-HMM",
        AlignSource::Dnn => "DNN",
        AlignSource::DnnHmm => "DNN-HMM",
    };
    format!("DNN+{aligner} ({level})")
}

/// Trains models on `corpus`, scores every trial and evaluates.
pub fn run_experiment(corpus: &Corpus, cfg: &PipelineConfig, opts: &ExperimentOptions) -> Result<(Models, ExperimentReport)> {
    let models = train_models(corpus, cfg)?;
    let report = evaluate_models(corpus, &models, cfg, opts)?;
    Ok((models, report))
}

/// Scores and evaluates with already trained models.
pub fn evaluate_models(corpus: &Corpus, models: &Models, cfg: &PipelineConfig, opts: &ExperimentOptions) -> Result<ExperimentReport> {
    let cache = AlignmentCache::build(corpus, models, cfg)?;
    let dcfs = cfg.dcf_params();
    let mut speaker = Vec::new();
    for &system in &opts.gmm_map {
        log::info!("scoring {system}/GMM-MAP");
        speaker.push(SystemScores { name: format!("{system}/GMM-MAP"), scores: gmm_map_scores(corpus, models, &cache, system, cfg.relevance)? });
    }
    for &system in &opts.ivector {
        log::info!("scoring {system}/i-vector");
        let (_, _, scores) = ivector_scores(corpus, models, &cache, system, cfg)?;
        speaker.push(SystemScores { name: format!("{system}/i-vector"), scores });
    }
    let mut content = Vec::new();
    for &source in &opts.content {
        for level in [ClassLevel::State, ClassLevel::Digit] {
            content.push(SystemScores {
                name: content_system_name(source, level),
                scores: content_scores(corpus, &cache, source, level, cfg.epsilon)?,
            });
        }
    }
    let mut rows = Vec::new();
    for s in &speaker {
        for cond in [Condition::TcIc, Condition::TcTw, Condition::TcIw] {
            rows.push(evaluate(&s.name, cond, &s.score_set(&corpus.trials, cond)?, &dcfs)?);
        }
    }
    for s in &content {
        rows.push(evaluate(&s.name, Condition::TcTw, &s.score_set(&corpus.trials, Condition::TcTw)?, &dcfs)?);
    }
    Ok(ExperimentReport { speaker, content, rows })
}

/// Runs the experiment and writes `models/`, `scores/` and `report.txt`
/// under `dir`.
pub fn run_to_dir(corpus: &Corpus, cfg: &PipelineConfig, opts: &ExperimentOptions, dir: &Path) -> Result<ExperimentReport> {
    let (models, report) = run_experiment(corpus, cfg, opts)?;
    write_results(corpus, &models, &report, dir)?;
    Ok(report)
}

/// Writes the layout of [`run_to_dir`] for already computed results.
pub fn write_results(corpus: &Corpus, models: &Models, report: &ExperimentReport, dir: &Path) -> Result<()> {
    models.save(&dir.join("models"))?;
    let scores = dir.join("scores");
    std::fs::create_dir_all(&scores)?;
    for s in report.speaker.iter().chain(&report.content) {
        let file: String = s.name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
        std::fs::write(scores.join(format!("{file}.txt")), s.to_text(&corpus.trials))?;
    }
    std::fs::write(dir.join("report.txt"), report.table())?;
    Ok(())
}
