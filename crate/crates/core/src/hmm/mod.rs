//! Whole-word left-to-right HMMs for the ten digits plus silence.
//!
//! Every word has three emitting states with a self-loop/forward
//! transition pair and a diagonal GMM emission. Alignment works on a
//! [`StateGraph`] compiled from the prompted digit string.

mod align;
mod graph;
mod train;

use ndarray::Array2;
use thiserror::Error;

use crate::features::{FeatureKind, FeatureSequence};
use crate::gmm::{DiagGmm, GmmError};
use crate::NUM_STATES;

pub use align::{
    fb_align, fb_align_with_state_ll, forward_backward, hybrid_state_log_likelihoods, viterbi_align,
    viterbi_align_with_state_ll, viterbi_with_emissions, FbResult, ViterbiPath,
};
pub use graph::{compile_graph, SilencePolicy, Slot, StateGraph, Topology};
pub use train::{train_hmm_set, HmmTrainConfig, HmmTrainStage, TrainingUtterance};

#[derive(Debug, Error, PartialEq)]
pub enum HmmError {
    #[error("transcription is empty")]
    EmptyTranscription,
    #[error("unknown token {token:?} at position {position}")]
    UnknownToken { token: char, position: usize },
    #[error("{frames} frames cannot cover a graph needing at least {min}")]
    TooShort { frames: usize, min: usize },
    #[error("digit {0} never appears in the training transcriptions")]
    MissingDigitCoverage(usize),
    #[error("utterance {id} has {frames} frames but its graph needs {min}")]
    UnalignableUtterance { id: String, frames: usize, min: usize },
    #[error("alignment source {0:?} is not allowed here")]
    SourceMismatch(AlignmentSource),
    #[error("expected MFCC60 features, got {0:?}")]
    WrongKind(FeatureKind),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid HMM set: {0}")]
    InvalidSet(String),
    #[error("alignment matrix invalid: {0}")]
    InvalidAlignment(String),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

/// One emitting state: its emission mixture and self-loop probability.
/// The forward transition is `1 - self_loop`.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmState {
    pub gmm: DiagGmm,
    pub self_loop: f64,
}

/// The 33-state model set, indexed word-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSet {
    states: Vec<HmmState>,
}

impl HmmSet {
    pub fn new(states: Vec<HmmState>) -> Result<Self, HmmError> {
        if states.len() != NUM_STATES {
            return Err(HmmError::InvalidSet(format!("expected {NUM_STATES} states, got {}", states.len())));
        }
        let dim = states[0].gmm.dim();
        for (s, st) in states.iter().enumerate() {
            if st.gmm.dim() != dim {
                return Err(HmmError::InvalidSet(format!("state {s} has dim {} (expected {dim})", st.gmm.dim())));
            }
            if !(st.self_loop > 0.0 && st.self_loop < 1.0) {
                return Err(HmmError::InvalidSet(format!("state {s} self-loop {} outside (0, 1)", st.self_loop)));
            }
        }
        Ok(Self { states })
    }

    pub fn states(&self) -> &[HmmState] {
        &self.states
    }

    pub fn state(&self, s: usize) -> &HmmState {
        &self.states[s]
    }

    pub fn dim(&self) -> usize {
        self.states[0].gmm.dim()
    }

    pub fn self_loops(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.self_loop).collect()
    }

    /// Total Gaussian count over `states`.
    pub fn mixture_count(&self, states: impl IntoIterator<Item = usize>) -> usize {
        states.into_iter().map(|s| self.states[s].gmm.num_components()).sum()
    }

    /// T x 33 emission log-likelihoods; only `states` are evaluated, the
    /// rest are `-inf`. Filterbank streams are rejected.
    pub fn state_log_likelihoods(&self, feats: &FeatureSequence, states: &[usize]) -> Result<Array2<f64>, HmmError> {
        if !matches!(feats.kind(), FeatureKind::Mfcc60 | FeatureKind::Raw { .. }) {
            return Err(HmmError::WrongKind(feats.kind()));
        }
        if feats.dim() != self.dim() {
            return Err(GmmError::DimMismatch { expected: self.dim(), actual: feats.dim() }.into());
        }
        let mut unique: Vec<usize> = states.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let t_len = feats.num_frames();
        let mut out = Array2::from_elem((t_len, NUM_STATES), f64::NEG_INFINITY);
        let max_c = unique.iter().map(|&s| self.states[s].gmm.num_components()).max().unwrap_or(1);
        let mut scratch = vec![0.0; max_c];
        for t in 0..t_len {
            let x = feats.frame(t);
            for &s in &unique {
                let gmm = &self.states[s].gmm;
                out[[t, s]] = gmm.log_likelihood_unchecked(x, &mut scratch[..gmm.num_components()]);
            }
        }
        Ok(out)
    }
}

/// Where a frame alignment came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignmentSource {
    HmmFb,
    HmmViterbi,
    Dnn,
}

impl AlignmentSource {
    pub fn is_hmm(self) -> bool {
        matches!(self, AlignmentSource::HmmFb | AlignmentSource::HmmViterbi)
    }
}

/// T x 33 per-frame state posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    posteriors: Array2<f64>,
    source: AlignmentSource,
}

impl AlignmentMatrix {
    /// Validates shape, nonnegativity and row sums (within 1e-6).
    pub fn new(posteriors: Array2<f64>, source: AlignmentSource) -> Result<Self, HmmError> {
        if posteriors.ncols() != NUM_STATES {
            return Err(HmmError::InvalidAlignment(format!("{} columns, expected {NUM_STATES}", posteriors.ncols())));
        }
        if posteriors.nrows() == 0 {
            return Err(HmmError::InvalidAlignment("no frames".into()));
        }
        for (t, row) in posteriors.outer_iter().enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(HmmError::InvalidAlignment(format!("row {t} has a negative or non-finite entry")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(HmmError::InvalidAlignment(format!("row {t} sums to {sum}")));
            }
        }
        Ok(Self { posteriors, source })
    }

    /// One-hot matrix from a hard state path.
    pub fn from_path(states: &[usize]) -> Result<Self, HmmError> {
        let mut post = Array2::zeros((states.len(), NUM_STATES));
        for (t, &s) in states.iter().enumerate() {
            if s >= NUM_STATES {
                return Err(HmmError::InvalidAlignment(format!("state {s} out of range")));
            }
            post[[t, s]] = 1.0;
        }
        Self::new(post, AlignmentSource::HmmViterbi)
    }

    pub fn posteriors(&self) -> &Array2<f64> {
        &self.posteriors
    }

    pub fn source(&self) -> AlignmentSource {
        self.source
    }

    pub fn num_frames(&self) -> usize {
        self.posteriors.nrows()
    }

    /// Index of the most probable state per frame (first on ties).
    pub fn hard_states(&self) -> Vec<usize> {
        self.posteriors
            .outer_iter()
            .map(|row| {
                let mut best = 0;
                for (s, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = s;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alignment_validation() {
        let mut p = Array2::zeros((2, NUM_STATES));
        p[[0, 3]] = 1.0;
        p[[1, 4]] = 0.5;
        assert!(AlignmentMatrix::new(p.clone(), AlignmentSource::Dnn).is_err());
        p[[1, 5]] = 0.5;
        let a = AlignmentMatrix::new(p, AlignmentSource::Dnn).unwrap();
        assert_eq!(a.hard_states(), vec![3, 4]);
        assert!(AlignmentMatrix::new(Array2::zeros((1, 30)), AlignmentSource::Dnn).is_err());
    }

    #[test]
    fn hard_assignment_is_argmax() {
        let mut p = Array2::zeros((1, NUM_STATES));
        p[[0, 0]] = 0.1;
        p[[0, 1]] = 0.7;
        p[[0, 2]] = 0.2;
        let a = AlignmentMatrix::new(p, AlignmentSource::Dnn).unwrap();
        assert_eq!(a.hard_states(), vec![1]);
    }
}
