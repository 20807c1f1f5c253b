//! Pipeline configuration in a `key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Later assignments win, so
//! command-line overrides are applied after the file with
//! [`PipelineConfig::set`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::content::ClassLevel;
use crate::eval::DcfParams;
use crate::hmm::SilencePolicy;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {message}")]
    BadValue { key: String, value: String, message: String },
    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<ConfigError> },
    #[error("cannot read {path}: {message}")]
    Read { path: PathBuf, message: String },
}

/// Which frame alignment drives the phonetic GMMs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignSource {
    /// Prompt-constrained forward-backward through the GMM-HMMs.
    GmmHmm,
    /// Frame-wise posteriors of the state classifier.
    Dnn,
    /// Forward-backward over the prompt graph with classifier-derived
    /// emission scores.
    DnnHmm,
}

impl FromStr for AlignSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gmm-hmm" | "hmm" => Ok(Self::GmmHmm),
            "dnn" => Ok(Self::Dnn),
            "dnn-hmm" => Ok(Self::DnnHmm),
            _ => Err(format!("unknown alignment source {s:?} (expected gmm-hmm, dnn or dnn-hmm)")),
        }
    }
}

impl fmt::Display for AlignSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::GmmHmm => "gmm-hmm",
            Self::Dnn => "dnn",
            Self::DnnHmm => "dnn-hmm",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub alignment: AlignSource,
    pub corpus_dir: PathBuf,
    pub model_dir: PathBuf,
    pub score_dir: PathBuf,
    pub silence_policy: SilencePolicy,
    pub hmm_components: usize,
    pub ubm_components: usize,
    pub pgmm_components: usize,
    pub em_iterations: usize,
    pub pgmm_em_passes: usize,
    pub context: usize,
    pub mlp_hidden: Vec<usize>,
    pub mlp_epochs: usize,
    pub relevance: f64,
    pub ivector_rank: usize,
    pub tv_iterations: usize,
    pub lda_dim: usize,
    pub plda_iterations: usize,
    pub epsilon: f64,
    pub class_level: ClassLevel,
    pub dcf: Vec<String>,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alignment: AlignSource::Dnn,
            corpus_dir: PathBuf::from("corpus"),
            model_dir: PathBuf::from("models"),
            score_dir: PathBuf::from("scores"),
            silence_policy: SilencePolicy::OptionalBetween,
            hmm_components: 16,
            ubm_components: 512,
            pgmm_components: 16,
            em_iterations: 10,
            pgmm_em_passes: 2,
            context: 5,
            mlp_hidden: vec![512; 4],
            mlp_epochs: 10,
            relevance: 5.0,
            ivector_rank: 400,
            tv_iterations: 5,
            lda_dim: 150,
            plda_iterations: 10,
            epsilon: 1e-5,
            class_level: ClassLevel::Digit,
            dcf: vec!["sre08".into(), "sre10".into()],
            seed: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue { key: key.into(), value: value.into(), message: e.to_string() })
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(ConfigError::BadValue { key: key.into(), value: value.into(), message: "must be positive".into() });
    }
    Ok(v)
}

fn positive_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if !(v > 0.0 && v.is_finite()) {
        return Err(ConfigError::BadValue { key: key.into(), value: value.into(), message: "must be positive".into() });
    }
    Ok(v)
}

impl PipelineConfig {
    /// Smaller models for the synthetic corpus, where the full sizes would
    /// be slow and heavily over-parameterized.
    pub fn desk() -> Self {
        Self {
            hmm_components: 4,
            ubm_components: 128,
            pgmm_components: 4,
            mlp_hidden: vec![256, 256],
            mlp_epochs: 6,
            ivector_rank: 60,
            lda_dim: 30,
            ..Self::default()
        }
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key.trim() {
            "alignment" => self.alignment = parse(key, value)?,
            "corpus_dir" => self.corpus_dir = PathBuf::from(value),
            "model_dir" => self.model_dir = PathBuf::from(value),
            "score_dir" => self.score_dir = PathBuf::from(value),
            "silence_policy" => self.silence_policy = parse(key, value)?,
            "hmm_components" => self.hmm_components = positive(key, value)?,
            "ubm_components" => self.ubm_components = positive(key, value)?,
            "pgmm_components" => self.pgmm_components = positive(key, value)?,
            "em_iterations" => self.em_iterations = positive(key, value)?,
            "pgmm_em_passes" => self.pgmm_em_passes = parse(key, value)?,
            "context" => self.context = parse(key, value)?,
            "mlp_hidden" => {
                self.mlp_hidden = value.split(',').map(|v| positive(key, v.trim())).collect::<Result<_, _>>()?;
            }
            "mlp_epochs" => self.mlp_epochs = positive(key, value)?,
            "relevance" => self.relevance = positive_f64(key, value)?,
            "ivector_rank" => self.ivector_rank = positive(key, value)?,
            "tv_iterations" => self.tv_iterations = parse(key, value)?,
            "lda_dim" => self.lda_dim = positive(key, value)?,
            "plda_iterations" => self.plda_iterations = parse(key, value)?,
            "epsilon" => self.epsilon = positive_f64(key, value)?,
            "class_level" => self.class_level = parse(key, value)?,
            "dcf" => {
                let names: Vec<String> = value.split(',').map(|v| v.trim().to_ascii_lowercase()).collect();
                for n in &names {
                    parse::<DcfParams>(key, n)?;
                }
                self.dcf = names;
            }
            "seed" => self.seed = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k, v).map_err(|e| ConfigError::AtLine { line: i + 1, source: Box::new(e) })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.to_path_buf(), message: e.to_string() })?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Named DCF parameter sets.
    pub fn dcf_params(&self) -> Vec<(String, DcfParams)> {
        self.dcf.iter().map(|n| (n.clone(), n.parse().expect("validated on assignment"))).collect()
    }

    /// The config as `key = value` lines that [`apply_text`](Self::apply_text) reads back.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.mlp_hidden.iter().map(|h| h.to_string()).collect();
        [
            format!("alignment = {}", self.alignment),
            format!("corpus_dir = {}", self.corpus_dir.display()),
            format!("model_dir = {}", self.model_dir.display()),
            format!("score_dir = {}", self.score_dir.display()),
            format!("silence_policy = {}", self.silence_policy),
            format!("hmm_components = {}", self.hmm_components),
            format!("ubm_components = {}", self.ubm_components),
            format!("pgmm_components = {}", self.pgmm_components),
            format!("em_iterations = {}", self.em_iterations),
            format!("pgmm_em_passes = {}", self.pgmm_em_passes),
            format!("context = {}", self.context),
            format!("mlp_hidden = {}", hidden.join(",")),
            format!("mlp_epochs = {}", self.mlp_epochs),
            format!("relevance = {}", self.relevance),
            format!("ivector_rank = {}", self.ivector_rank),
            format!("tv_iterations = {}", self.tv_iterations),
            format!("lda_dim = {}", self.lda_dim),
            format!("plda_iterations = {}", self.plda_iterations),
            format!("epsilon = {:e}", self.epsilon),
            format!("class_level = {}", self.class_level),
            format!("dcf = {}", self.dcf.join(",")),
            format!("seed = {}", self.seed),
        ]
        .iter()
        .map(|l| format!("{l}\n"))
        .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_model_sizes() {
        let c = PipelineConfig::default();
        assert_eq!((c.relevance, c.ivector_rank, c.lda_dim, c.epsilon), (5.0, 400, 150, 1e-5));
        assert_eq!(c.mlp_hidden, vec![512; 4]);
        assert_eq!(c.class_level, ClassLevel::Digit);
    }

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = PipelineConfig::desk();
        c.alignment = AlignSource::DnnHmm;
        c.dcf = vec!["sre10".into()];
        let mut back = PipelineConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        back.apply_text("# comment\nrelevance = 2.5 # trailing\n").unwrap();
        assert_eq!(back.relevance, 2.5);
    }

    #[test]
    fn errors_name_line_and_key() {
        let mut c = PipelineConfig::default();
        assert_eq!(c.apply_text("relevance 5"), Err(ConfigError::Syntax { line: 1 }));
        let e = c.apply_text("\nbogus = 1").unwrap_err();
        assert!(matches!(e, ConfigError::AtLine { line: 2, .. }));
        assert!(matches!(c.set("alignment", "xyz"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("dcf", "sre99"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(c.set("relevance", "0"), Err(ConfigError::BadValue { .. })));
    }
}
