//! Digit-prompted speaker verification built on frame alignments.
//!
//! The crate covers the whole chain: feature extraction, whole-word digit
//! HMMs with Viterbi and forward-backward alignment, a feed-forward state
//! classifier used as an alternative alignment source, phonetic GMMs trained
//! under either alignment, Baum-Welch statistics, GMM-MAP and i-vector/PLDA
//! speaker backends, and a KL-divergence score that checks whether the
//! spoken digits match the prompt. A synthetic corpus generator and EER /
//! minDCF evaluation make the pipeline runnable without licensed data.
//!
//! Global state indexing is word-major: word `w` (digits `0`..`9`, then
//! silence as word 10) owns states `3w`, `3w + 1` and `3w + 2`.

pub mod aligner;
pub mod config;
pub mod content;
pub mod eval;
pub mod features;
pub mod gmm;
pub mod hmm;
pub mod io;
pub mod ivector;
pub mod map;
pub mod pgmm;
pub mod pipeline;
pub mod plda;
pub mod synth;

mod util;

/// Words modeled by the HMM set: ten digits plus silence.
pub const NUM_WORDS: usize = 11;
/// Emitting states per word model.
pub const STATES_PER_WORD: usize = 3;
/// Total number of HMM states (and neural aligner outputs).
pub const NUM_STATES: usize = NUM_WORDS * STATES_PER_WORD;
/// Word index used for silence.
pub const SILENCE_WORD: usize = 10;
/// Number of digit states, i.e. all states except silence.
pub const NUM_DIGIT_STATES: usize = SILENCE_WORD * STATES_PER_WORD;

/// Returns true when `state` belongs to the silence model.
pub fn is_silence_state(state: usize) -> bool {
    state / STATES_PER_WORD == SILENCE_WORD
}

/// Word label used in transcripts and reports.
pub fn word_label(word: usize) -> &'static str {
    const LABELS: [&str; NUM_WORDS] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "sil"];
    LABELS[word]
}
