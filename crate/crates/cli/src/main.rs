//! `dpsv`: one subcommand per pipeline stage, handing off through files.
//!
//! Results go to standard output. Progress goes to standard error as
//! `stage=<name> key=value ...` lines. Exit status is 0 on success, 1 on a
//! usage error and 2 when the data or a model is invalid.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use dpsv::config::{AlignSource, PipelineConfig};
use dpsv::content::ClassLevel;
use dpsv::eval::{evaluate, format_report, format_score, parse_scores, parse_trials, score_set_for, Condition, DcfParams, TrialRecord};
use dpsv::features::{apply_cmvn, extract_fbank, extract_mfcc, AudioClip, FeatureConfig};
use dpsv::gmm::DiagGmm;
use dpsv::hmm::{AlignmentMatrix, HmmSet, TrainingUtterance};
use dpsv::io::{
    load_external_posteriors, read_ivectors, read_model, read_stats, write_features, write_ivectors, write_model, write_posteriors,
    write_stats, Model,
};
use dpsv::ivector::{extract_ivector, train_tv, IVector, TvModel};
use dpsv::map::{llr_score, map_adapt, SpeakerModel};
use dpsv::aligner::MlpModel;
use dpsv::pgmm::{accumulate_stats, mixture_posteriors, ubm_posteriors, Background, MixturePosteriors, Pgmm, SuffStats};
use dpsv::pipeline::{
    content_score, hmm_train_config, run_to_dir, tv_config, backend_config, train_aligner, train_phonetic_gmm, train_ubm, AlignMode,
    Aligners, ExperimentOptions, PosteriorSystem,
};
use dpsv::hmm::train_hmm_set;
use dpsv::plda::{plda_score, train_backend, PldaBackend};
use dpsv::synth::{
    feature_paths, generate_corpus, parse_transcripts, read_corpus, speaker_of, transcript_path, write_corpus, CorruptionMode, Role,
    SynthConfig, Utterance,
};

/// A failure caused by how the tool was invoked rather than by its inputs.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "dpsv", version, about = "Digit-prompted speaker verification stages")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// `key = value` config file; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides one config key; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, value_name = "DIR")]
    corpus_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    model_dir: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    score_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic corpus under `<out>/corpus/`.
    Synth(SynthArgs),
    /// Extracts CMVN-normalized MFCC and filterbank streams from WAV files.
    ExtractFeats(ExtractArgs),
    /// Trains the digit and silence HMMs on the background set.
    TrainHmm(OutArg),
    /// Trains the unsupervised UBM on the background set.
    TrainUbm(OutArg),
    /// Trains the frame-level state classifier on Viterbi labels.
    TrainMlp(OutArg),
    /// Writes per-utterance state posteriors as DVPO files.
    Align(AlignArgs),
    /// Trains the phonetic GMMs from an alignment source.
    TrainPgmm(TrainPgmmArgs),
    /// Writes per-utterance Baum-Welch statistics as DVST files.
    AccumulateStats(StatsArgs),
    /// MAP-adapts one speaker model per enrolled speaker.
    EnrollMap(EnrollArgs),
    /// Trains the total-variability matrix on background statistics.
    TrainTv(TrainTvArgs),
    /// Extracts i-vectors for a set into a DVIV archive.
    ExtractIvector(ExtractIvectorArgs),
    /// Trains the LDA and PLDA backend on background i-vectors.
    TrainBackend(TrainBackendArgs),
    /// Scores every trial with a speaker model.
    ScoreSpeaker(ScoreSpeakerArgs),
    /// Scores every trial with the KL content measure.
    ScoreContent(ScoreContentArgs),
    /// Computes EER and minDCF for a score file.
    Evaluate(EvaluateArgs),
    /// Runs every stage in memory and writes models, scores and a report.
    Run(RunArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    corpus_seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().n_speakers)]
    speakers: usize,
    #[arg(long, default_value_t = SynthConfig::default().n_background_speakers)]
    background_speakers: usize,
    #[arg(long, default_value_t = SynthConfig::default().corruption)]
    corruption: CorruptionMode,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Lines of `<utt> <wav path>`.
    #[arg(long)]
    list: PathBuf,
    /// Defaults to `<corpus-dir>/feats`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OutArg {
    /// Defaults to a fixed name under the model directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    source: Option<AlignSource>,
    #[arg(long, default_value = "fb")]
    mode: AlignMode,
    #[arg(long = "role", default_value = "background")]
    role: RoleArg,
    #[arg(long)]
    out_dir: PathBuf,
    /// Directory of `<utt>.dvpo` classifier posteriors used instead of the
    /// trained classifier.
    #[arg(long)]
    dnn_posteriors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainPgmmArgs {
    #[arg(long)]
    source: Option<AlignSource>,
    /// Directory of `<utt>.dvpo` alignments of the background set, used
    /// instead of aligning here.
    #[arg(long)]
    posteriors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long, default_value = "ubm")]
    system: PosteriorSystem,
    #[arg(long = "role", default_value = "background")]
    role: RoleArg,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    dnn_posteriors: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EnrollArgs {
    #[arg(long, default_value = "ubm")]
    system: PosteriorSystem,
    /// Statistics of the enrollment utterances.
    #[arg(long)]
    stats_dir: PathBuf,
    /// Defaults to `<model-dir>/map_<system>`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainTvArgs {
    #[arg(long, default_value = "ubm")]
    system: PosteriorSystem,
    /// Statistics of the background utterances.
    #[arg(long)]
    stats_dir: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractIvectorArgs {
    #[arg(long, default_value = "ubm")]
    system: PosteriorSystem,
    /// Defaults to `<model-dir>/tv_<system>.dvmd`.
    #[arg(long)]
    tv: Option<PathBuf>,
    #[arg(long)]
    stats_dir: PathBuf,
    #[arg(long = "role", default_value = "background")]
    role: RoleArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainBackendArgs {
    /// Background i-vectors; speakers come from the utterance ids.
    #[arg(long)]
    ivectors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreSpeakerArgs {
    #[arg(long, default_value = "ubm")]
    system: PosteriorSystem,
    /// `map` (needs --speakers-dir) or `ivector` (needs --tv, --plda and
    /// --enroll-ivectors).
    #[arg(long, default_value = "map")]
    backend: String,
    #[arg(long)]
    speakers_dir: Option<PathBuf>,
    #[arg(long)]
    tv: Option<PathBuf>,
    #[arg(long)]
    plda: Option<PathBuf>,
    #[arg(long)]
    enroll_ivectors: Option<PathBuf>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    dnn_posteriors: Option<PathBuf>,
    /// Writes the scores here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreContentArgs {
    /// Prompt aligner compared against the classifier.
    #[arg(long, default_value = "dnn-hmm")]
    source: AlignSource,
    #[arg(long)]
    level: Option<ClassLevel>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long)]
    dnn_posteriors: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: Option<PathBuf>,
    #[arg(long, default_value = "TC-IC")]
    condition: Condition,
    /// DCF parameter set (sre08 or sre10); may be repeated.
    #[arg(long)]
    dcf: Vec<String>,
    /// System name for the report row; defaults to the score file stem.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    out: PathBuf,
    /// Uses the reduced model sizes suited to the synthetic corpus.
    #[arg(long)]
    desk: bool,
}

#[derive(Debug, Clone, Copy)]
struct RoleArg(Role);

impl std::str::FromStr for RoleArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "background" => Ok(Self(Role::Background)),
            "enroll" => Ok(Self(Role::Enroll)),
            "test" => Ok(Self(Role::Test)),
            other => Err(format!("unknown role {other:?} (expected background, enroll or test)")),
        }
    }
}

fn progress(stage: &str, fields: &[(&str, String)]) {
    let mut line = format!("stage={stage}");
    for (k, v) in fields {
        line.push_str(&format!(" {k}={v}"));
    }
    eprintln!("{line}");
}

fn load_config(global: &Global, desk: bool) -> Result<PipelineConfig> {
    let mut cfg = match &global.config {
        Some(path) => PipelineConfig::from_file(path)?,
        None if desk => PipelineConfig::desk(),
        None => PipelineConfig::default(),
    };
    if desk && global.config.is_some() {
        return Err(usage("--desk cannot be combined with --config"));
    }
    for o in &global.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k, v).map_err(|e| usage(format!("--set {o}: {e}")))?;
    }
    if let Some(d) = &global.corpus_dir {
        cfg.corpus_dir = d.clone();
    }
    if let Some(d) = &global.model_dir {
        cfg.model_dir = d.clone();
    }
    if let Some(d) = &global.score_dir {
        cfg.score_dir = d.clone();
    }
    Ok(cfg)
}

/// Reads the utterances of one role from the corpus directory.
fn load_role(cfg: &PipelineConfig, role: Role) -> Result<Vec<Utterance>> {
    let path = transcript_path(&cfg.corpus_dir, role);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    parse_transcripts(&path, &text)?
        .into_par_iter()
        .map(|(id, transcript)| {
            let (m, f) = feature_paths(&cfg.corpus_dir, &id);
            Ok(Utterance {
                speaker: speaker_of(&id).to_string(),
                mfcc: dpsv::io::read_features(&m)?,
                fbank: dpsv::io::read_features(&f)?,
                id,
                role,
                transcript,
                states: Vec::new(),
            })
        })
        .collect()
}

fn load_trials(cfg: &PipelineConfig, path: Option<&Path>) -> Result<Vec<TrialRecord>> {
    let default = cfg.corpus_dir.join("trials").join("trials.txt");
    let path = path.unwrap_or(&default);
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_trials(&text).with_context(|| format!("parsing {}", path.display()))
}

fn model(path: &Path) -> Result<Model> {
    read_model(path).with_context(|| format!("loading {}", path.display()))
}

fn save(path: &Path, m: &Model) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_model(path, m)?;
    progress("write", &[("kind", m.kind_name().into()), ("path", path.display().to_string())]);
    Ok(())
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Lazily loaded models under the model directory.
struct Store<'a> {
    cfg: &'a PipelineConfig,
    hmms: Option<HmmSet>,
    mlp: Option<MlpModel>,
    ubm: Option<DiagGmm>,
    pgmm_dnn: Option<Pgmm>,
}

impl<'a> Store<'a> {
    fn new(cfg: &'a PipelineConfig) -> Self {
        Self { cfg, hmms: None, mlp: None, ubm: None, pgmm_dnn: None }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.model_dir.join(name)
    }

    fn load_hmms(&mut self) -> Result<()> {
        if self.hmms.is_none() {
            self.hmms = Some(model(&self.path("hmm.dvmd"))?.into_hmm()?);
        }
        Ok(())
    }

    fn load_mlp(&mut self) -> Result<()> {
        if self.mlp.is_none() {
            self.mlp = Some(model(&self.path("mlp.dvmd"))?.into_mlp()?);
        }
        Ok(())
    }

    /// Loads what `source` needs. External classifier posteriors replace
    /// the classifier for the pure DNN source only; the hybrid still needs
    /// its state priors.
    fn load_for(&mut self, source: AlignSource, external_dnn: bool) -> Result<()> {
        match source {
            AlignSource::GmmHmm => self.load_hmms(),
            AlignSource::Dnn if external_dnn => Ok(()),
            AlignSource::Dnn => self.load_mlp(),
            AlignSource::DnnHmm => {
                self.load_hmms()?;
                self.load_mlp()
            }
        }
    }

    fn load_system(&mut self, system: PosteriorSystem, external_dnn: bool) -> Result<()> {
        match system {
            PosteriorSystem::Ubm => {
                if self.ubm.is_none() {
                    self.ubm = Some(model(&self.path("ubm.dvmd"))?.into_ubm()?);
                }
            }
            PosteriorSystem::Aligned(src) => {
                self.load_for(src, external_dnn)?;
                if src != AlignSource::GmmHmm && self.pgmm_dnn.is_none() {
                    self.pgmm_dnn = Some(model(&self.path("pgmm_dnn.dvmd"))?.into_pgmm()?);
                }
                if src == AlignSource::GmmHmm {
                    self.load_hmms()?;
                }
            }
        }
        Ok(())
    }

    fn aligners(&self) -> Aligners<'_> {
        Aligners { hmms: self.hmms.as_ref(), mlp: self.mlp.as_ref(), policy: self.cfg.silence_policy, context: self.cfg.context }
    }

    fn pgmm(&self, src: AlignSource) -> Pgmm {
        match src {
            AlignSource::GmmHmm => Pgmm::from_hmm(self.hmms.as_ref().expect("loaded"), false),
            _ => self.pgmm_dnn.clone().expect("loaded"),
        }
    }

    fn background(&self, system: PosteriorSystem) -> Background {
        match system {
            PosteriorSystem::Ubm => Background::from_gmm(self.ubm.as_ref().expect("loaded")),
            PosteriorSystem::Aligned(src) => Background::from_pgmm(&self.pgmm(src)),
        }
    }
}

fn external_dnn(dir: Option<&Path>, utt: &str) -> Result<Option<AlignmentMatrix>> {
    dir.map(|d| {
        let path = d.join(format!("{utt}.dvpo"));
        load_external_posteriors(&path).with_context(|| format!("loading {}", path.display()))
    })
    .transpose()
}

/// Mixture posteriors of `u` under `system`, aligned against `prompt`.
fn system_posteriors(
    store: &Store,
    pgmm: Option<&Pgmm>,
    system: PosteriorSystem,
    u: &Utterance,
    prompt: &str,
    dnn_dir: Option<&Path>,
) -> Result<MixturePosteriors> {
    Ok(match system {
        PosteriorSystem::Ubm => ubm_posteriors(store.ubm.as_ref().expect("loaded"), &u.mfcc)?,
        PosteriorSystem::Aligned(src) => {
            let dnn = external_dnn(dnn_dir, &u.id)?;
            let align = store.aligners().align(src, AlignMode::Fb, &u.mfcc, &u.fbank, dnn.as_ref(), prompt)?;
            mixture_posteriors(pgmm.expect("aligned systems carry a pgmm"), &align, &u.mfcc)?
        }
    })
}

fn read_stats_for(dir: &Path, utts: &[Utterance]) -> Result<Vec<SuffStats>> {
    utts.par_iter()
        .map(|u| {
            let path = dir.join(format!("{}.dvst", u.id));
            read_stats(&path).with_context(|| format!("loading {}", path.display()))
        })
        .collect()
}

/// Groups ids by speaker in order of first appearance.
fn by_speaker<T: Clone>(items: &[(String, T)]) -> Vec<(String, Vec<T>)> {
    let mut out: Vec<(String, Vec<T>)> = Vec::new();
    for (id, v) in items {
        let spk = speaker_of(id);
        match out.iter_mut().find(|(s, _)| s == spk) {
            Some((_, vs)) => vs.push(v.clone()),
            None => out.push((spk.to_string(), vec![v.clone()])),
        }
    }
    out
}

fn run(cli: Cli) -> Result<()> {
    let desk = matches!(&cli.command, Command::Run(r) if r.desk);
    let cfg = load_config(&cli.global, desk)?;
    match cli.command {
        Command::Synth(a) => {
            let sc = SynthConfig {
                seed: a.corpus_seed,
                n_speakers: a.speakers,
                n_background_speakers: a.background_speakers,
                corruption: a.corruption,
                ..SynthConfig::default()
            };
            let corpus = generate_corpus(&sc)?;
            write_corpus(&corpus, &a.out)?;
            println!("utterances={} trials={} dir={}", corpus.utterances.len(), corpus.trials.len(), a.out.join("corpus").display());
        }
        Command::ExtractFeats(a) => {
            let out_dir = a.out_dir.unwrap_or_else(|| cfg.corpus_dir.join("feats"));
            fs::create_dir_all(&out_dir)?;
            let text = fs::read_to_string(&a.list).with_context(|| format!("reading {}", a.list.display()))?;
            let fc = FeatureConfig::default();
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let (utt, wav) = line
                    .trim()
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| anyhow!("{} line {}: expected `<utt> <wav path>`", a.list.display(), i + 1))?;
                let clip = AudioClip::read_wav(Path::new(wav.trim()))?;
                let mfcc = apply_cmvn(&extract_mfcc(&clip, &fc)?)?;
                let fbank = apply_cmvn(&extract_fbank(&clip, &fc)?)?;
                write_features(&out_dir.join(format!("{utt}.mfcc.dvfe")), &mfcc)?;
                write_features(&out_dir.join(format!("{utt}.fbank.dvfe")), &fbank)?;
                println!("{utt} {}", mfcc.num_frames());
            }
        }
        Command::TrainHmm(a) => {
            let bg = load_role(&cfg, Role::Background)?;
            let train: Vec<TrainingUtterance> =
                bg.iter().map(|u| TrainingUtterance { id: &u.id, feats: &u.mfcc, transcription: &u.transcript }).collect();
            let (hmms, stages) = train_hmm_set(&train, &hmm_train_config(&cfg))?;
            for s in &stages {
                let last = s.log_likelihoods.last().copied().unwrap_or(f64::NAN);
                progress("train-hmm", &[("components", s.components.to_string()), ("log_likelihood", format!("{last:e}"))]);
            }
            let out = a.out.unwrap_or_else(|| cfg.model_dir.join("hmm.dvmd"));
            save(&out, &Model::Hmm(hmms))?;
            println!("{}", out.display());
        }
        Command::TrainUbm(a) => {
            let bg = load_role(&cfg, Role::Background)?;
            let mfccs: Vec<_> = bg.iter().map(|u| &u.mfcc).collect();
            let ubm = train_ubm(&mfccs, &cfg)?;
            let out = a.out.unwrap_or_else(|| cfg.model_dir.join("ubm.dvmd"));
            save(&out, &Model::Ubm(ubm))?;
            println!("{}", out.display());
        }
        Command::TrainMlp(a) => {
            let mut store = Store::new(&cfg);
            store.load_hmms()?;
            let bg = load_role(&cfg, Role::Background)?;
            let triples: Vec<_> = bg.iter().map(|u| (&u.mfcc, &u.fbank, u.transcript.as_str())).collect();
            let (mlp, report) = train_aligner(store.hmms.as_ref().expect("loaded"), &triples, &cfg)?;
            for (e, (tr, ho)) in report.train_loss.iter().zip(&report.held_out_loss).enumerate() {
                progress("train-mlp", &[("epoch", (e + 1).to_string()), ("train_loss", format!("{tr:.6}")), ("held_out_loss", format!("{ho:.6}"))]);
            }
            let out = a.out.unwrap_or_else(|| cfg.model_dir.join("mlp.dvmd"));
            save(&out, &Model::Mlp(mlp))?;
            println!("{}", out.display());
        }
        Command::Align(a) => {
            let source = a.source.unwrap_or(cfg.alignment);
            let mut store = Store::new(&cfg);
            store.load_for(source, a.dnn_posteriors.is_some())?;
            let utts = load_role(&cfg, a.role.0)?;
            fs::create_dir_all(&a.out_dir)?;
            let aligners = store.aligners();
            let frames: Vec<usize> = utts
                .par_iter()
                .map(|u| {
                    let dnn = external_dnn(a.dnn_posteriors.as_deref(), &u.id)?;
                    let al = aligners.align(source, a.mode, &u.mfcc, &u.fbank, dnn.as_ref(), &u.transcript)?;
                    write_posteriors(&a.out_dir.join(format!("{}.dvpo", u.id)), al.posteriors())?;
                    Ok(al.num_frames())
                })
                .collect::<Result<_>>()?;
            for (u, n) in utts.iter().zip(frames) {
                println!("{} {n}", u.id);
            }
        }
        Command::TrainPgmm(a) => {
            let source = a.source.unwrap_or(cfg.alignment);
            let bg = load_role(&cfg, Role::Background)?;
            let aligns: Vec<AlignmentMatrix> = match &a.posteriors {
                Some(dir) => bg.par_iter().map(|u| Ok(external_dnn(Some(dir), &u.id)?.expect("dir given"))).collect::<Result<_>>()?,
                None => {
                    let mut store = Store::new(&cfg);
                    store.load_for(source, false)?;
                    let aligners = store.aligners();
                    bg.par_iter()
                        .map(|u| Ok(aligners.align(source, AlignMode::Fb, &u.mfcc, &u.fbank, None, &u.transcript)?))
                        .collect::<Result<_>>()?
                }
            };
            let data: Vec<_> = aligns.iter().zip(&bg).map(|(al, u)| (al, &u.mfcc)).collect();
            let (pgmm, trace) = train_phonetic_gmm(&data, &cfg)?;
            for (i, obj) in trace.iter().enumerate() {
                progress("train-pgmm", &[("pass", i.to_string()), ("objective", format!("{obj:e}"))]);
            }
            let out = a.out.unwrap_or_else(|| cfg.model_dir.join("pgmm_dnn.dvmd"));
            save(&out, &Model::Pgmm(pgmm))?;
            println!("{}", out.display());
        }
        Command::AccumulateStats(a) => {
            let mut store = Store::new(&cfg);
            store.load_system(a.system, a.dnn_posteriors.is_some())?;
            let pgmm = match a.system {
                PosteriorSystem::Aligned(src) => Some(store.pgmm(src)),
                PosteriorSystem::Ubm => None,
            };
            let bg = store.background(a.system);
            let utts = load_role(&cfg, a.role.0)?;
            fs::create_dir_all(&a.out_dir)?;
            utts.par_iter()
                .map(|u| {
                    let g = system_posteriors(&store, pgmm.as_ref(), a.system, u, &u.transcript, a.dnn_posteriors.as_deref())?;
                    write_stats(&a.out_dir.join(format!("{}.dvst", u.id)), &accumulate_stats(&g, &u.mfcc, &bg)?)?;
                    Ok(())
                })
                .collect::<Result<Vec<()>>>()?;
            println!("utterances={} system={} dir={}", utts.len(), a.system.slug(), a.out_dir.display());
        }
        Command::EnrollMap(a) => {
            let mut store = Store::new(&cfg);
            store.load_system(a.system, true)?;
            let bg = store.background(a.system);
            let utts = load_role(&cfg, Role::Enroll)?;
            let stats = read_stats_for(&a.stats_dir, &utts)?;
            let pairs: Vec<(String, SuffStats)> = utts.iter().map(|u| u.id.clone()).zip(stats).collect();
            let out_dir = a.out_dir.unwrap_or_else(|| cfg.model_dir.join(format!("map_{}", a.system.slug())));
            fs::create_dir_all(&out_dir)?;
            for (spk, group) in by_speaker(&pairs) {
                let mut merged = group[0].clone();
                for s in &group[1..] {
                    merged.merge(s)?;
                }
                let m = map_adapt(&bg, &merged, cfg.relevance)?;
                write_model(&out_dir.join(format!("{spk}.dvmd")), &Model::Speaker(m))?;
                println!("{spk} {}", group.len());
            }
        }
        Command::TrainTv(a) => {
            let mut store = Store::new(&cfg);
            store.load_system(a.system, true)?;
            let bg = store.background(a.system);
            let utts = load_role(&cfg, Role::Background)?;
            let stats = read_stats_for(&a.stats_dir, &utts)?;
            let (tv, trace) = train_tv(&stats, &bg, &tv_config(&cfg))?;
            for (i, obj) in trace.iter().enumerate() {
                progress("train-tv", &[("iteration", i.to_string()), ("objective", format!("{obj:e}"))]);
            }
            let out = a.out.unwrap_or_else(|| cfg.model_dir.join(format!("tv_{}.dvmd", a.system.slug())));
            save(&out, &Model::Tv(tv))?;
            println!("{}", out.display());
        }
        Command::ExtractIvector(a) => {
            let tv_path = a.tv.unwrap_or_else(|| cfg.model_dir.join(format!("tv_{}.dvmd", a.system.slug())));
            let tv: TvModel = model(&tv_path)?.into_tv()?;
            let utts = load_role(&cfg, a.role.0)?;
            let stats = read_stats_for(&a.stats_dir, &utts)?;
            let ivs: Vec<(String, IVector)> = utts
                .par_iter()
                .zip(&stats)
                .map(|(u, s)| Ok((u.id.clone(), extract_ivector(s, &tv)?)))
                .collect::<Result<_>>()?;
            write_ivectors(&a.out, &ivs)?;
            println!("ivectors={} dim={} path={}", ivs.len(), tv.rank(), a.out.display());
        }
        Command::TrainBackend(a) => {
            let ivs = read_ivectors(&a.ivectors)?;
            let labelled: Vec<(String, IVector)> = ivs.into_iter().map(|(id, v)| (speaker_of(&id).to_string(), v)).collect();
            let (backend, trace) = train_backend(&labelled, &backend_config(&cfg))?;
            for (i, obj) in trace.iter().enumerate() {
                progress("train-backend", &[("iteration", i.to_string()), ("objective", format!("{obj:e}"))]);
            }
            save(&a.out, &Model::Plda(backend))?;
            println!("{}", a.out.display());
        }
        Command::ScoreSpeaker(a) => score_speaker(&cfg, a)?,
        Command::ScoreContent(a) => {
            let level = a.level.unwrap_or(cfg.class_level);
            let epsilon = a.epsilon.unwrap_or(cfg.epsilon);
            if !(epsilon > 0.0 && epsilon < 1.0) {
                return Err(usage(format!("--epsilon must lie in (0, 1), got {epsilon}")));
            }
            if a.source == AlignSource::Dnn {
                return Err(usage("--source dnn compares the classifier with itself; use gmm-hmm or dnn-hmm"));
            }
            let mut store = Store::new(&cfg);
            store.load_for(a.source, false)?;
            if a.dnn_posteriors.is_none() {
                store.load_mlp()?;
            }
            let trials = load_trials(&cfg, a.trials.as_deref())?;
            let tests = load_role(&cfg, Role::Test)?;
            let tests: HashMap<&str, &Utterance> = tests.iter().map(|u| (u.id.as_str(), u)).collect();
            let aligners = store.aligners();
            let lines: Vec<String> = trials
                .par_iter()
                .map(|t| {
                    let u = tests.get(t.utterance.as_str()).ok_or_else(|| anyhow!("trial utterance {} is not in the test set", t.utterance))?;
                    let dnn = match external_dnn(a.dnn_posteriors.as_deref(), &u.id)? {
                        Some(d) => d,
                        None => aligners.align(AlignSource::Dnn, AlignMode::Fb, &u.mfcc, &u.fbank, None, &t.prompt)?,
                    };
                    let prompt = aligners.align(a.source, AlignMode::Fb, &u.mfcc, &u.fbank, Some(&dnn), &t.prompt)?;
                    Ok(format_score(t, content_score(&prompt, &dnn, level, epsilon)?))
                })
                .collect::<Result<_>>()?;
            progress("score-content", &[("trials", trials.len().to_string()), ("level", level.to_string()), ("epsilon", format!("{epsilon:e}"))]);
            emit(a.out.as_deref(), &lines.concat())?;
        }
        Command::Evaluate(a) => {
            let trials = load_trials(&cfg, a.trials.as_deref())?;
            let text = fs::read_to_string(&a.scores).with_context(|| format!("reading {}", a.scores.display()))?;
            let scores = parse_scores(&text).with_context(|| format!("parsing {}", a.scores.display()))?;
            let names = if a.dcf.is_empty() { cfg.dcf.clone() } else { a.dcf.clone() };
            let mut dcfs = Vec::new();
            for n in names {
                let p: DcfParams = n.parse().map_err(|e| usage(format!("--dcf {n}: {e}")))?;
                dcfs.push((n.to_ascii_lowercase(), p));
            }
            let set = score_set_for(&trials, &scores, a.condition)?;
            let name = a.name.unwrap_or_else(|| a.scores.file_stem().map_or("scores".into(), |s| s.to_string_lossy().into_owned()));
            let row = evaluate(&name, a.condition, &set, &dcfs)?;
            print!("{}", format_report(&[row]));
        }
        Command::Run(a) => {
            let corpus = read_corpus(&cfg.corpus_dir)?;
            let report = run_to_dir(&corpus, &cfg, &ExperimentOptions::default(), &a.out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn score_speaker(cfg: &PipelineConfig, a: ScoreSpeakerArgs) -> Result<()> {
    enum Scorer {
        Map(HashMap<String, SpeakerModel>),
        Ivector { tv: TvModel, plda: PldaBackend, enrolled: HashMap<String, Vec<IVector>> },
    }
    let require = |p: &Option<PathBuf>, flag: &str| p.clone().ok_or_else(|| usage(format!("--backend {} needs {flag}", a.backend)));
    let trials = load_trials(cfg, a.trials.as_deref())?;
    let scorer = match a.backend.as_str() {
        "map" => {
            let dir = require(&a.speakers_dir, "--speakers-dir")?;
            let mut speakers = HashMap::new();
            for t in &trials {
                if !speakers.contains_key(&t.speaker) {
                    let m = model(&dir.join(format!("{}.dvmd", t.speaker)))?.into_speaker()?;
                    speakers.insert(t.speaker.clone(), m);
                }
            }
            Scorer::Map(speakers)
        }
        "ivector" => {
            let tv = model(&require(&a.tv, "--tv")?)?.into_tv()?;
            let plda = model(&require(&a.plda, "--plda")?)?.into_plda()?;
            let enroll = read_ivectors(&require(&a.enroll_ivectors, "--enroll-ivectors")?)?;
            let transformed: Vec<(String, IVector)> =
                enroll.iter().map(|(id, v)| Ok((id.clone(), plda.transform(v)?))).collect::<Result<_>>()?;
            Scorer::Ivector { tv, plda, enrolled: by_speaker(&transformed).into_iter().collect() }
        }
        other => return Err(usage(format!("--backend expects map or ivector, got {other:?}"))),
    };
    let mut store = Store::new(cfg);
    store.load_system(a.system, a.dnn_posteriors.is_some())?;
    let pgmm = match a.system {
        PosteriorSystem::Aligned(src) => Some(store.pgmm(src)),
        PosteriorSystem::Ubm => None,
    };
    let bg = store.background(a.system);
    let tests = load_role(cfg, Role::Test)?;
    let tests: HashMap<&str, &Utterance> = tests.iter().map(|u| (u.id.as_str(), u)).collect();

    // test-side posteriors depend on the claimed prompt only for prompted systems
    let key = |t: &TrialRecord| (t.utterance.clone(), if a.system.uses_prompt() { t.prompt.clone() } else { String::new() });
    let mut keys: Vec<(String, String)> = trials.iter().map(key).collect();
    keys.sort_unstable();
    keys.dedup();
    let gammas: Vec<MixturePosteriors> = keys
        .par_iter()
        .map(|(id, prompt)| {
            let u = tests.get(id.as_str()).ok_or_else(|| anyhow!("trial utterance {id} is not in the test set"))?;
            let prompt = if prompt.is_empty() { &u.transcript } else { prompt };
            system_posteriors(&store, pgmm.as_ref(), a.system, u, prompt, a.dnn_posteriors.as_deref())
        })
        .collect::<Result<_>>()?;
    let gammas: HashMap<(String, String), MixturePosteriors> = keys.into_iter().zip(gammas).collect();
    let lines: Vec<String> = trials
        .par_iter()
        .map(|t| {
            let u = tests[t.utterance.as_str()];
            let g = &gammas[&key(t)];
            let score = match &scorer {
                Scorer::Map(speakers) => llr_score(&speakers[&t.speaker], &bg, g, &u.mfcc)?,
                Scorer::Ivector { tv, plda, enrolled } => {
                    let e = enrolled.get(&t.speaker).ok_or_else(|| anyhow!("no enrollment i-vectors for {}", t.speaker))?;
                    let test = plda.transform(&extract_ivector(&accumulate_stats(g, &u.mfcc, &bg)?, tv)?)?;
                    plda_score(plda, e, &test)?
                }
            };
            Ok(format_score(t, score))
        })
        .collect::<Result<_>>()?;
    progress("score-speaker", &[("trials", trials.len().to_string()), ("system", a.system.slug()), ("backend", a.backend.clone())]);
    emit(a.out.as_deref(), &lines.concat())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
