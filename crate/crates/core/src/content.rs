//! Content verification by KL divergence between an HMM alignment, which
//! follows the prompt, and a DNN alignment, which does not.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::hmm::{
    compile_graph, fb_align, fb_align_with_state_ll, hybrid_state_log_likelihoods, AlignmentMatrix, HmmError, HmmSet,
    SilencePolicy,
};
use crate::pgmm::{MixturePosteriors, Pgmm, PosteriorSource};
use crate::{NUM_STATES, NUM_WORDS, STATES_PER_WORD};

/// Smoothing constant used unless configured otherwise.
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum ContentError {
    #[error("expected {expected} state columns, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("posteriors must be smoothed before KL scoring")]
    NotSmoothed,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("expected {expected:?} posteriors, got {actual:?}")]
    SourceMismatch { expected: PosteriorSource, actual: PosteriorSource },
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Hmm(#[from] HmmError),
}

/// Granularity of the phonetic classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClassLevel {
    State,
    /// All states of a word form one class; silence is the eleventh.
    #[default]
    Digit,
}

impl FromStr for ClassLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "state" => Ok(Self::State),
            "digit" => Ok(Self::Digit),
            other => Err(format!("unknown class level {other:?}")),
        }
    }
}

impl fmt::Display for ClassLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::State => "state",
            Self::Digit => "digit",
        })
    }
}

/// Total map from the 33 states to phonetic classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneticClassMap {
    level: ClassLevel,
    class_of: [usize; NUM_STATES],
    classes: usize,
}

impl PhoneticClassMap {
    pub fn new(level: ClassLevel) -> Self {
        let mut class_of = [0; NUM_STATES];
        for (s, c) in class_of.iter_mut().enumerate() {
            *c = match level {
                ClassLevel::State => s,
                ClassLevel::Digit => s / STATES_PER_WORD,
            };
        }
        let classes = match level {
            ClassLevel::State => NUM_STATES,
            ClassLevel::Digit => NUM_WORDS,
        };
        Self { level, class_of, classes }
    }

    pub fn level(&self) -> ClassLevel {
        self.level
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn class_of(&self, state: usize) -> usize {
        self.class_of[state]
    }
}

/// T x P class posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPosteriorSequence {
    values: Array2<f64>,
    source: PosteriorSource,
    smoothed: bool,
}

impl ClassPosteriorSequence {
    pub fn new(values: Array2<f64>, source: PosteriorSource) -> Result<Self, ContentError> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ContentError::ShapeMismatch("class posteriors must be finite and nonnegative".into()));
        }
        Ok(Self { values, source, smoothed: false })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn source(&self) -> PosteriorSource {
        self.source
    }

    pub fn is_smoothed(&self) -> bool {
        self.smoothed
    }

    pub fn num_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }
}

/// Sums state posteriors into classes.
pub fn pool_classes(align: &AlignmentMatrix, map: &PhoneticClassMap) -> Result<ClassPosteriorSequence, ContentError> {
    pool_state_matrix(align.posteriors(), align.source().into(), map)
}

/// Sums a raw T x 33 state-posterior matrix into classes.
pub fn pool_state_matrix(post: &Array2<f64>, source: PosteriorSource, map: &PhoneticClassMap) -> Result<ClassPosteriorSequence, ContentError> {
    if post.ncols() != NUM_STATES {
        return Err(ContentError::WidthMismatch { expected: NUM_STATES, actual: post.ncols() });
    }
    let mut out = Array2::zeros((post.nrows(), map.num_classes()));
    for (t, row) in post.outer_iter().enumerate() {
        for (s, &p) in row.iter().enumerate() {
            out[[t, map.class_of(s)]] += p;
        }
    }
    ClassPosteriorSequence::new(out, source)
}

/// Sums mixture posteriors over components and then over class members.
pub fn pool_mixture_classes(gammas: &MixturePosteriors, model: &Pgmm, map: &PhoneticClassMap) -> Result<ClassPosteriorSequence, ContentError> {
    if gammas.num_mixtures() != model.num_mixtures() {
        return Err(ContentError::WidthMismatch { expected: model.num_mixtures(), actual: gammas.num_mixtures() });
    }
    let mut state_of = Vec::with_capacity(model.num_mixtures());
    for (k, g) in model.gmms().iter().enumerate() {
        state_of.extend(std::iter::repeat(model.state_ids()[k]).take(g.num_components()));
    }
    let mut out = Array2::zeros((gammas.num_frames(), map.num_classes()));
    for (t, row) in gammas.frames().iter().enumerate() {
        for &(m, g) in row {
            out[[t, map.class_of(state_of[m as usize])]] += g;
        }
    }
    ClassPosteriorSequence::new(out, gammas.source())
}

/// `(gamma + eps) / sum_p (gamma + eps)` per row.
pub fn smooth(post: &ClassPosteriorSequence, epsilon: f64) -> Result<ClassPosteriorSequence, ContentError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(ContentError::BadEpsilon(epsilon));
    }
    let mut values = post.values.mapv(|v| v + epsilon);
    for mut row in values.outer_iter_mut() {
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    Ok(ClassPosteriorSequence { values, source: post.source, smoothed: true })
}

/// Per-frame average of `sum_p h log(h / d)`.
pub fn kl_score(hmm: &ClassPosteriorSequence, dnn: &ClassPosteriorSequence) -> Result<f64, ContentError> {
    if !hmm.smoothed || !dnn.smoothed {
        return Err(ContentError::NotSmoothed);
    }
    if hmm.values.dim() != dnn.values.dim() || hmm.num_frames() == 0 {
        return Err(ContentError::ShapeMismatch(format!("{:?} vs {:?}", hmm.values.dim(), dnn.values.dim())));
    }
    if hmm.source != PosteriorSource::Hmm {
        return Err(ContentError::SourceMismatch { expected: PosteriorSource::Hmm, actual: hmm.source });
    }
    if dnn.source != PosteriorSource::Dnn {
        return Err(ContentError::SourceMismatch { expected: PosteriorSource::Dnn, actual: dnn.source });
    }
    let mut total = 0.0;
    for (h, d) in hmm.values.outer_iter().zip(dnn.values.outer_iter()) {
        for (&a, &b) in h.iter().zip(d.iter()) {
            if a != b {
                total += a * (a / b).ln();
            }
        }
    }
    Ok((total / hmm.num_frames() as f64).max(0.0))
}

/// Which model produces the prompt-constrained alignment.
#[derive(Debug, Clone, Copy)]
pub enum PromptAligner<'a> {
    /// GMM emissions.
    GmmHmm(&'a HmmSet),
    /// DNN posteriors divided by state priors, with the given transitions.
    DnnHmm { self_loops: &'a [f64], log_priors: &'a [f64] },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentDecision {
    pub kl: f64,
    pub accept: bool,
}

/// Forward-backward aligns `mfcc` to `transcription`, pools and smooths
/// both alignments and compares them. Accepts when `kl <= threshold`.
#[allow(clippy::too_many_arguments)]
pub fn content_verify(
    mfcc: &FeatureSequence,
    transcription: &str,
    policy: SilencePolicy,
    aligner: PromptAligner<'_>,
    dnn: &AlignmentMatrix,
    map: &PhoneticClassMap,
    epsilon: f64,
    threshold: f64,
) -> Result<ContentDecision, ContentError> {
    let hmm_align = prompt_alignment(mfcc, transcription, policy, aligner, dnn)?;
    let kl = kl_score(&smooth(&pool_classes(&hmm_align, map)?, epsilon)?, &smooth(&pool_classes(dnn, map)?, epsilon)?)?;
    Ok(ContentDecision { kl, accept: kl <= threshold })
}

/// Prompt-constrained forward-backward alignment from either HMM flavour.
pub fn prompt_alignment(
    mfcc: &FeatureSequence,
    transcription: &str,
    policy: SilencePolicy,
    aligner: PromptAligner<'_>,
    dnn: &AlignmentMatrix,
) -> Result<AlignmentMatrix, ContentError> {
    let graph = compile_graph(transcription, policy)?;
    match aligner {
        PromptAligner::GmmHmm(hmms) => Ok(fb_align(&graph, hmms, mfcc)?),
        PromptAligner::DnnHmm { self_loops, log_priors } => {
            let ll = hybrid_state_log_likelihoods(dnn, log_priors)?;
            let min = graph.min_length();
            if ll.nrows() < min {
                return Err(HmmError::TooShort { frames: ll.nrows(), min }.into());
            }
            Ok(fb_align_with_state_ll(&graph, self_loops, &ll)?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::AlignmentSource;
    use proptest::prelude::*;

    fn seq(rows: &[&[f64]], source: PosteriorSource) -> ClassPosteriorSequence {
        let p = rows[0].len();
        ClassPosteriorSequence::new(Array2::from_shape_vec((rows.len(), p), rows.concat()).unwrap(), source).unwrap()
    }

    #[test]
    fn digit_pooling() {
        let mut p = Array2::zeros((1, NUM_STATES));
        p[[0, 3]] = 0.2;
        p[[0, 4]] = 0.3;
        p[[0, 5]] = 0.1;
        p[[0, 31]] = 0.4;
        let a = AlignmentMatrix::new(p.clone(), AlignmentSource::HmmFb).unwrap();
        let d = pool_classes(&a, &PhoneticClassMap::new(ClassLevel::Digit)).unwrap();
        assert!((d.values()[[0, 1]] - 0.6).abs() < 1e-15);
        assert!((d.values()[[0, 10]] - 0.4).abs() < 1e-15);
        let s = pool_classes(&a, &PhoneticClassMap::new(ClassLevel::State)).unwrap();
        assert_eq!(s.values(), &p);
        assert_eq!(
            pool_state_matrix(&Array2::zeros((1, 30)), PosteriorSource::Hmm, &PhoneticClassMap::new(ClassLevel::State)),
            Err(ContentError::WidthMismatch { expected: 33, actual: 30 })
        );
    }

    #[test]
    fn smoothing_hand_case() {
        let s = smooth(&seq(&[&[1.0, 0.0]], PosteriorSource::Hmm), 1e-5).unwrap();
        assert!((s.values()[[0, 0]] - (1.0 + 1e-5) / (1.0 + 2e-5)).abs() < 1e-15);
        assert!((s.values()[[0, 1]] - 1e-5 / (1.0 + 2e-5)).abs() < 1e-15);
        let u = smooth(&seq(&[&[0.25; 4]], PosteriorSource::Hmm), 1e-5).unwrap();
        assert!(u.values().iter().all(|v| (*v - 0.25).abs() < 1e-16));
    }

    #[test]
    fn kl_cases() {
        let h = smooth(&seq(&[&[1.0, 0.0], &[1.0, 0.0]], PosteriorSource::Hmm), 1e-5).unwrap();
        let d = smooth(&seq(&[&[0.5, 0.5], &[0.5, 0.5]], PosteriorSource::Dnn), 1e-5).unwrap();
        let kl = kl_score(&h, &d).unwrap();
        let a: f64 = (1.0 + 1e-5) / (1.0 + 2e-5);
        let b: f64 = 1e-5 / (1.0 + 2e-5);
        let expect = a * (a / 0.5).ln() + b * (b / 0.5).ln();
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 2f64.ln()).abs() < 1e-3);

        let same_h = smooth(&seq(&[&[0.3, 0.7]], PosteriorSource::Hmm), 1e-5).unwrap();
        let same_d = smooth(&seq(&[&[0.3, 0.7]], PosteriorSource::Dnn), 1e-5).unwrap();
        assert_eq!(kl_score(&same_h, &same_d).unwrap(), 0.0);

        assert_eq!(kl_score(&seq(&[&[1.0, 0.0]], PosteriorSource::Hmm), &d), Err(ContentError::NotSmoothed));
        assert!(matches!(kl_score(&d, &h), Err(ContentError::SourceMismatch { .. })));
    }

    fn random_rows(t: usize, seed_vals: &[f64]) -> Array2<f64> {
        let mut p = Array2::from_shape_fn((t, NUM_STATES), |(i, j)| seed_vals[(i * NUM_STATES + j) % seed_vals.len()]);
        for mut row in p.outer_iter_mut() {
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        p
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_order_free(h in prop::collection::vec(0.0f64..1.0, 40..80), d in prop::collection::vec(0.01f64..1.0, 40..80)) {
            let hp = random_rows(3, &h);
            let dp = random_rows(3, &d);
            let map = PhoneticClassMap::new(ClassLevel::State);
            let hs = smooth(&pool_state_matrix(&hp, PosteriorSource::Hmm, &map).unwrap(), 1e-5).unwrap();
            let ds = smooth(&pool_state_matrix(&dp, PosteriorSource::Dnn, &map).unwrap(), 1e-5).unwrap();
            let kl = kl_score(&hs, &ds).unwrap();
            prop_assert!(kl >= 0.0);
            let rev = |a: &Array2<f64>| Array2::from_shape_fn(a.dim(), |(i, j)| a[[a.nrows() - 1 - i, j]]);
            let hr = smooth(&pool_state_matrix(&rev(&hp), PosteriorSource::Hmm, &map).unwrap(), 1e-5).unwrap();
            let dr = smooth(&pool_state_matrix(&rev(&dp), PosteriorSource::Dnn, &map).unwrap(), 1e-5).unwrap();
            prop_assert!((kl_score(&hr, &dr).unwrap() - kl).abs() < 1e-12);
        }

        #[test]
        fn smoothing_keeps_argmax(row in prop::collection::vec(0.0f64..1.0, 5)) {
            let mut sorted = row.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted[4] - sorted[3] > 1e-5 * 5.0);
            let s = smooth(&seq(&[&row], PosteriorSource::Hmm), 1e-5).unwrap();
            let argmax = |r: &[f64]| (0..r.len()).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap();
            prop_assert_eq!(argmax(&row), argmax(s.values().row(0).as_slice().unwrap()));
            prop_assert!((s.values().sum() - 1.0).abs() < 1e-12);
        }
    }
}
