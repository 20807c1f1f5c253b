//! Phonetic GMMs, mixture posteriors and centered Baum-Welch statistics.
//!
//! A [`Pgmm`] is one diagonal GMM per phonetic state. The same structure
//! wraps the emission mixtures of an [`HmmSet`], so HMM- and DNN-aligned
//! systems share every downstream step. Mixtures are numbered state by
//! state in the order of [`Pgmm::state_ids`].

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::gmm::{train_em_with_floor, DiagGmm, GmmAccumulator, GmmError, GmmTrainConfig, VarianceFloor, EMPTY_COMPONENT};
use crate::hmm::{AlignmentMatrix, AlignmentSource, HmmSet};
use crate::{is_silence_state, NUM_DIGIT_STATES, NUM_STATES};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Mixture posteriors below this are dropped from the sparse lists.
pub const PRUNE_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PgmmError {
    #[error("state {state} received {frames} frames, fewer than {needed}")]
    StarvedState { state: usize, frames: usize, needed: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("alignment source {0:?} is not allowed here")]
    SourceMismatch(AlignmentSource),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

/// Which kind of alignment produced a set of mixture posteriors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosteriorSource {
    Hmm,
    Dnn,
    /// Plain component posteriors of an unsupervised mixture.
    Ubm,
}

impl From<AlignmentSource> for PosteriorSource {
    fn from(s: AlignmentSource) -> Self {
        if s.is_hmm() {
            PosteriorSource::Hmm
        } else {
            PosteriorSource::Dnn
        }
    }
}

/// One GMM per phonetic state.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgmm {
    state_ids: Vec<usize>,
    gmms: Vec<DiagGmm>,
    floor: VarianceFloor,
}

impl Pgmm {
    /// `state_ids` are global HMM state indices, strictly increasing.
    pub fn new(state_ids: Vec<usize>, gmms: Vec<DiagGmm>, floor: VarianceFloor) -> Result<Self, PgmmError> {
        if state_ids.is_empty() || state_ids.len() != gmms.len() {
            return Err(PgmmError::InvalidModel(format!("{} state ids for {} mixtures", state_ids.len(), gmms.len())));
        }
        if state_ids.windows(2).any(|w| w[0] >= w[1]) || state_ids.iter().any(|&s| s >= NUM_STATES) {
            return Err(PgmmError::InvalidModel("state ids must be increasing and below 33".into()));
        }
        let d = gmms[0].dim();
        if gmms.iter().any(|g| g.dim() != d) || floor.floor.len() != d {
            return Err(PgmmError::InvalidModel("state mixtures disagree on dimension".into()));
        }
        Ok(Self { state_ids, gmms, floor })
    }

    /// Wraps the emission mixtures of an HMM set. Silence states are kept
    /// only when `include_silence` is set.
    pub fn from_hmm(hmms: &HmmSet, include_silence: bool) -> Self {
        let state_ids: Vec<usize> = (0..NUM_STATES).filter(|&s| include_silence || !is_silence_state(s)).collect();
        let gmms = state_ids.iter().map(|&s| hmms.state(s).gmm.clone()).collect();
        // HMM variances are already floored; a zero floor leaves them as trained.
        let floor = VarianceFloor { floor: vec![0.0; hmms.dim()], global_var: vec![1.0; hmms.dim()] };
        Self { state_ids, gmms, floor }
    }

    pub fn state_ids(&self) -> &[usize] {
        &self.state_ids
    }

    pub fn gmms(&self) -> &[DiagGmm] {
        &self.gmms
    }

    pub fn variance_floor(&self) -> &VarianceFloor {
        &self.floor
    }

    pub fn dim(&self) -> usize {
        self.gmms[0].dim()
    }

    pub fn num_mixtures(&self) -> usize {
        self.gmms.iter().map(|g| g.num_components()).sum()
    }

    /// Local index of global state `s`, if modelled.
    pub fn local_index(&self, s: usize) -> Option<usize> {
        self.state_ids.binary_search(&s).ok()
    }

    /// First mixture index of every modelled state.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.gmms.len());
        let mut acc = 0;
        for g in &self.gmms {
            out.push(acc);
            acc += g.num_components();
        }
        out
    }
}

/// Sparse per-frame mixture posteriors `gamma[s,c,t]`, indexed by
/// flattened mixture number.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePosteriors {
    frames: Vec<Vec<(u32, f64)>>,
    num_mixtures: usize,
    source: PosteriorSource,
}

impl MixturePosteriors {
    pub fn new(frames: Vec<Vec<(u32, f64)>>, num_mixtures: usize, source: PosteriorSource) -> Result<Self, PgmmError> {
        for (t, row) in frames.iter().enumerate() {
            if row.iter().any(|&(m, g)| m as usize >= num_mixtures || !g.is_finite() || g < 0.0) {
                return Err(PgmmError::ShapeMismatch(format!("frame {t} has an out-of-range or invalid entry")));
            }
        }
        Ok(Self { frames, num_mixtures, source })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_mixtures(&self) -> usize {
        self.num_mixtures
    }

    pub fn source(&self) -> PosteriorSource {
        self.source
    }

    pub fn frame(&self, t: usize) -> &[(u32, f64)] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<(u32, f64)>] {
        &self.frames
    }

    /// Total mass kept for frame `t`.
    pub fn frame_mass(&self, t: usize) -> f64 {
        self.frames[t].iter().map(|e| e.1).sum()
    }

    /// Dense T x M copy, for tests and small problems.
    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.frames.len(), self.num_mixtures));
        for (t, row) in self.frames.iter().enumerate() {
            for &(m, g) in row {
                out[[t, m as usize]] += g;
            }
        }
        out
    }
}

fn check_shapes(dim: usize, align: &AlignmentMatrix, feats: &FeatureSequence) -> Result<(), PgmmError> {
    if feats.dim() != dim {
        return Err(PgmmError::ShapeMismatch(format!("model dim {dim}, features dim {}", feats.dim())));
    }
    if align.num_frames() != feats.num_frames() {
        return Err(PgmmError::ShapeMismatch(format!(
            "alignment has {} frames, features {}",
            align.num_frames(),
            feats.num_frames()
        )));
    }
    Ok(())
}

/// `gamma[s,c,t] = P(s|x_t) P(c|x_t, lambda_s)` over the states `model`
/// covers; mass on other states (silence, for a digit-only model) is
/// discarded.
pub fn mixture_posteriors(model: &Pgmm, align: &AlignmentMatrix, feats: &FeatureSequence) -> Result<MixturePosteriors, PgmmError> {
    check_shapes(model.dim(), align, feats)?;
    let offsets = model.offsets();
    let max_c = model.gmms.iter().map(|g| g.num_components()).max().unwrap_or(1);
    let post = align.posteriors();
    let frames: Vec<Vec<(u32, f64)>> = (0..feats.num_frames())
        .into_par_iter()
        .map_init(
            || vec![0.0; max_c],
            |scratch, t| {
                let x = feats.frame(t);
                let mut row = Vec::new();
                for (k, &s) in model.state_ids.iter().enumerate() {
                    let ps = post[[t, s]];
                    if ps < PRUNE_THRESHOLD {
                        continue;
                    }
                    let gmm = &model.gmms[k];
                    let buf = &mut scratch[..gmm.num_components()];
                    gmm.posteriors_into(x, buf);
                    for (c, &r) in buf.iter().enumerate() {
                        let g = ps * r;
                        if g >= PRUNE_THRESHOLD {
                            row.push(((offsets[k] + c) as u32, g));
                        }
                    }
                }
                row
            },
        )
        .collect();
    MixturePosteriors::new(frames, model.num_mixtures(), align.source().into())
}

/// Mixture posteriors from an HMM alignment over all 33 emission
/// mixtures of `hmms`, silence included.
pub fn hmm_mixture_posteriors(hmms: &HmmSet, align: &AlignmentMatrix, feats: &FeatureSequence) -> Result<MixturePosteriors, PgmmError> {
    if !align.source().is_hmm() {
        return Err(PgmmError::SourceMismatch(align.source()));
    }
    mixture_posteriors(&Pgmm::from_hmm(hmms, true), align, feats)
}

/// Component posteriors of an unsupervised mixture; every frame keeps
/// mass 1 (up to pruning).
pub fn ubm_posteriors(ubm: &DiagGmm, feats: &FeatureSequence) -> Result<MixturePosteriors, PgmmError> {
    if feats.dim() != ubm.dim() {
        return Err(PgmmError::ShapeMismatch(format!("model dim {}, features dim {}", ubm.dim(), feats.dim())));
    }
    let c = ubm.num_components();
    let frames = (0..feats.num_frames())
        .into_par_iter()
        .map_init(
            || vec![0.0; c],
            |buf, t| {
                ubm.posteriors_into(feats.frame(t), buf);
                buf.iter()
                    .enumerate()
                    .filter(|(_, &r)| r >= PRUNE_THRESHOLD)
                    .map(|(m, &r)| (m as u32, r))
                    .collect()
            },
        )
        .collect();
    MixturePosteriors::new(frames, c, PosteriorSource::Ubm)
}

/// Flattened means and variances of a background mixture set, the prior
/// for MAP adaptation and the anchor of total-variability modelling.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    means: Array2<f64>,
    variances: Array2<f64>,
    inv_var: Array2<f64>,
    /// `-0.5 (D log 2pi + sum log var)` per mixture.
    log_norm: Array1<f64>,
    id: String,
}

impl Background {
    pub fn new(means: Array2<f64>, variances: Array2<f64>) -> Result<Self, PgmmError> {
        if means.dim() != variances.dim() || means.nrows() == 0 || means.ncols() == 0 {
            return Err(PgmmError::ShapeMismatch(format!("means {:?}, variances {:?}", means.dim(), variances.dim())));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) || means.iter().any(|m| !m.is_finite()) {
            return Err(PgmmError::InvalidModel("background parameters must be finite with positive variances".into()));
        }
        let d = means.ncols() as f64;
        let inv_var = variances.mapv(|v| 1.0 / v);
        let log_norm = Array1::from_iter(variances.outer_iter().map(|row| -0.5 * (d * LN_2PI + row.iter().map(|v| v.ln()).sum::<f64>())));
        let mut hasher = Sha256::new();
        for v in means.iter().chain(variances.iter()) {
            hasher.update(v.to_le_bytes());
        }
        let id = hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect();
        Ok(Self { means, variances, inv_var, log_norm, id })
    }

    pub fn from_gmm(gmm: &DiagGmm) -> Self {
        Self::new(gmm.means().clone(), gmm.variances().clone()).expect("a valid mixture is a valid background")
    }

    pub fn from_pgmm(pgmm: &Pgmm) -> Self {
        let (m, d) = (pgmm.num_mixtures(), pgmm.dim());
        let mut means = Array2::zeros((m, d));
        let mut vars = Array2::zeros((m, d));
        let mut row = 0;
        for g in &pgmm.gmms {
            for c in 0..g.num_components() {
                means.row_mut(row).assign(&g.means().row(c));
                vars.row_mut(row).assign(&g.variances().row(c));
                row += 1;
            }
        }
        Self::new(means, vars).expect("a valid PGMM is a valid background")
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    pub fn num_mixtures(&self) -> usize {
        self.means.nrows()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Short content hash identifying these parameters.
    pub fn id(&self) -> &str {
        &self.id
    }

    /// `log N(x; mean, Sigma_m)` using mixture `m`'s variances.
    pub fn log_density(&self, m: usize, mean: &[f64], x: &[f64]) -> f64 {
        let iv = self.inv_var.row(m);
        let mut q = 0.0;
        for j in 0..x.len() {
            let diff = x[j] - mean[j];
            q += diff * diff * iv[j];
        }
        self.log_norm[m] - 0.5 * q
    }
}

/// Centered zeroth, first and diagonal second order statistics per mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: Array1<f64>,
    pub f: Array2<f64>,
    pub s: Array2<f64>,
    pub background_id: String,
}

impl SuffStats {
    pub fn zeros(num_mixtures: usize, dim: usize, background_id: &str) -> Self {
        Self {
            n: Array1::zeros(num_mixtures),
            f: Array2::zeros((num_mixtures, dim)),
            s: Array2::zeros((num_mixtures, dim)),
            background_id: background_id.to_string(),
        }
    }

    pub fn num_mixtures(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    pub fn merge(&mut self, other: &SuffStats) -> Result<(), PgmmError> {
        if self.n.len() != other.n.len() || self.f.dim() != other.f.dim() {
            return Err(PgmmError::ShapeMismatch("statistics shapes differ".into()));
        }
        if self.background_id != other.background_id {
            return Err(PgmmError::ShapeMismatch("statistics come from different backgrounds".into()));
        }
        self.n += &other.n;
        self.f += &other.f;
        self.s += &other.s;
        Ok(())
    }
}

/// Baum-Welch statistics centered on the background means.
pub fn accumulate_stats(gammas: &MixturePosteriors, feats: &FeatureSequence, background: &Background) -> Result<SuffStats, PgmmError> {
    if gammas.num_mixtures() != background.num_mixtures() || feats.dim() != background.dim() || gammas.num_frames() != feats.num_frames() {
        return Err(PgmmError::ShapeMismatch(format!(
            "{} frames x {} mixtures of posteriors, {} x {} features, background {} x {}",
            gammas.num_frames(),
            gammas.num_mixtures(),
            feats.num_frames(),
            feats.dim(),
            background.num_mixtures(),
            background.dim()
        )));
    }
    let d = feats.dim();
    let mut stats = SuffStats::zeros(background.num_mixtures(), d, background.id());
    for (t, row) in gammas.frames().iter().enumerate() {
        let x = feats.frame(t);
        for &(m, g) in row {
            let m = m as usize;
            stats.n[m] += g;
            let mu = background.means.row(m);
            for j in 0..d {
                let diff = x[j] - mu[j];
                stats.f[[m, j]] += g * diff;
                stats.s[[m, j]] += g * diff * diff;
            }
        }
    }
    Ok(stats)
}

/// Hard-assigns every frame to its most probable state and trains one GMM
/// per digit state on the frames it receives. Frames whose best state is
/// silence are not used.
pub fn init_pgmm(data: &[(&AlignmentMatrix, &FeatureSequence)], cfg: &GmmTrainConfig) -> Result<Pgmm, PgmmError> {
    let d = data.first().map(|(_, f)| f.dim()).ok_or_else(|| PgmmError::ShapeMismatch("no utterances".into()))?;
    let mut per_state: Vec<Vec<f64>> = vec![Vec::new(); NUM_DIGIT_STATES];
    let mut all = Vec::new();
    for (align, feats) in data {
        check_shapes(d, align, feats)?;
        for (t, s) in align.hard_states().into_iter().enumerate() {
            all.extend_from_slice(feats.frame(t));
            if s < NUM_DIGIT_STATES {
                per_state[s].extend_from_slice(feats.frame(t));
            }
        }
    }
    for (s, frames) in per_state.iter().enumerate() {
        let n = frames.len() / d;
        if n < cfg.target_components {
            return Err(PgmmError::StarvedState { state: s, frames: n, needed: cfg.target_components });
        }
    }
    let all = Array2::from_shape_vec((all.len() / d, d), all).expect("whole frames");
    let floor = VarianceFloor::from_data(&all, cfg.variance_floor)?;
    let gmms: Vec<Result<DiagGmm, GmmError>> = per_state
        .into_par_iter()
        .map(|frames| {
            let data = Array2::from_shape_vec((frames.len() / d, d), frames).expect("whole frames");
            train_em_with_floor(&data, cfg, &floor).map(|(g, _)| g)
        })
        .collect();
    let gmms = gmms.into_iter().collect::<Result<Vec<_>, _>>()?;
    Pgmm::new((0..NUM_DIGIT_STATES).collect(), gmms, floor)
}

/// E-step sums for one PGMM EM iteration.
#[derive(Debug, Clone)]
pub struct PgmmAccumulator {
    states: Vec<GmmAccumulator>,
}

impl PgmmAccumulator {
    pub fn new(pgmm: &Pgmm) -> Self {
        Self { states: pgmm.gmms.iter().map(|g| g.accumulator()).collect() }
    }

    /// Adds one utterance; every frame enters state `s` with weight
    /// `P(s|x_t)`. Mass on unmodelled states is dropped.
    pub fn add_utterance(&mut self, pgmm: &Pgmm, align: &AlignmentMatrix, feats: &FeatureSequence) -> Result<(), PgmmError> {
        check_shapes(pgmm.dim(), align, feats)?;
        let post = align.posteriors();
        let max_c = pgmm.gmms.iter().map(|g| g.num_components()).max().unwrap_or(1);
        let mut scratch = vec![0.0; max_c];
        for t in 0..feats.num_frames() {
            let x = feats.frame(t);
            for (k, &s) in pgmm.state_ids.iter().enumerate() {
                let w = post[[t, s]];
                if w < PRUNE_THRESHOLD {
                    continue;
                }
                let gmm = &pgmm.gmms[k];
                self.states[k].add_frame(gmm, x, w, &mut scratch[..gmm.num_components()]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: PgmmAccumulator) {
        for (a, b) in self.states.iter_mut().zip(other.states) {
            a.merge(b);
        }
    }

    /// Alignment-weighted log-likelihood `sum_t sum_s P(s|x_t) log p(x_t|lambda_s)`
    /// under the model that produced the E-step.
    pub fn objective(&self) -> f64 {
        self.states.iter().map(|a| a.log_likelihood).sum()
    }
}

/// Result of one PGMM EM iteration.
#[derive(Debug, Clone)]
pub struct PgmmEmStep {
    pub pgmm: Pgmm,
    /// Objective of the input model.
    pub objective: f64,
    /// Global indices of states whose soft count was below 1e-8; these
    /// keep their previous parameters.
    pub empty_states: Vec<usize>,
}

/// Weighted M-step: weights `N_sc / sum_c N_sc`, means and floored
/// variances from the alignment-weighted component posteriors.
pub fn pgmm_m_step(pgmm: &Pgmm, acc: &PgmmAccumulator) -> PgmmEmStep {
    let mut gmms = Vec::with_capacity(pgmm.gmms.len());
    let mut empty_states = Vec::new();
    for (k, a) in acc.states.iter().enumerate() {
        let n: f64 = a.n.iter().sum();
        if n < EMPTY_COMPONENT {
            log::warn!("PGMM state {} has no aligned mass; keeping its parameters", pgmm.state_ids[k]);
            empty_states.push(pgmm.state_ids[k]);
            gmms.push(pgmm.gmms[k].clone());
            continue;
        }
        gmms.push(pgmm.gmms[k].m_step(a, &pgmm.floor).0);
    }
    PgmmEmStep {
        pgmm: Pgmm { state_ids: pgmm.state_ids.clone(), gmms, floor: pgmm.floor.clone() },
        objective: acc.objective(),
        empty_states,
    }
}

/// One EM iteration over a set of aligned utterances.
pub fn pgmm_em_step(pgmm: &Pgmm, data: &[(&AlignmentMatrix, &FeatureSequence)]) -> Result<PgmmEmStep, PgmmError> {
    const UTTS_PER_CHUNK: usize = 16;
    let starts: Vec<usize> = (0..data.len()).step_by(UTTS_PER_CHUNK).collect();
    let partials: Vec<Result<PgmmAccumulator, PgmmError>> = starts
        .par_iter()
        .map(|&lo| {
            let mut acc = PgmmAccumulator::new(pgmm);
            for (align, feats) in &data[lo..(lo + UTTS_PER_CHUNK).min(data.len())] {
                acc.add_utterance(pgmm, align, feats)?;
            }
            Ok(acc)
        })
        .collect();
    let mut acc = PgmmAccumulator::new(pgmm);
    for p in partials {
        acc.merge(p?);
    }
    Ok(pgmm_m_step(pgmm, &acc))
}

/// Alignment-weighted log-likelihood of `data` under `pgmm`.
pub fn pgmm_objective(pgmm: &Pgmm, data: &[(&AlignmentMatrix, &FeatureSequence)]) -> Result<f64, PgmmError> {
    let mut acc = PgmmAccumulator::new(pgmm);
    for (align, feats) in data {
        acc.add_utterance(pgmm, align, feats)?;
    }
    Ok(acc.objective())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::gmm::normal_pdf;

    fn feats1(xs: &[f64]) -> FeatureSequence {
        FeatureSequence::new(Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap(), FeatureKind::Raw { dim: 1 }).unwrap()
    }

    fn gmm1(w: &[f64], m: &[f64], v: &[f64]) -> DiagGmm {
        let c = w.len();
        DiagGmm::new(
            Array1::from(w.to_vec()),
            Array2::from_shape_vec((c, 1), m.to_vec()).unwrap(),
            Array2::from_shape_vec((c, 1), v.to_vec()).unwrap(),
        )
        .unwrap()
    }

    fn floor1() -> VarianceFloor {
        VarianceFloor { floor: vec![1e-6], global_var: vec![1.0] }
    }

    fn align(rows: &[(usize, f64)], t_len: usize) -> AlignmentMatrix {
        let mut p = Array2::zeros((t_len, NUM_STATES));
        for t in 0..t_len {
            for &(s, v) in rows {
                p[[t, s]] = v;
            }
        }
        AlignmentMatrix::new(p, AlignmentSource::Dnn).unwrap()
    }

    #[test]
    fn product_of_posteriors() {
        let pg = Pgmm::new(vec![0, 1], vec![gmm1(&[0.3, 0.7], &[0.0, 2.0], &[1.0, 0.5]), gmm1(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 2.0])], floor1()).unwrap();
        let x = 0.4;
        let f = feats1(&[x]);
        let a = align(&[(0, 0.25), (1, 0.75)], 1);
        let g = mixture_posteriors(&pg, &a, &f).unwrap().to_dense();
        let within = |w: &[f64], m: &[f64], v: &[f64]| {
            let d: Vec<f64> = (0..2).map(|c| w[c] * normal_pdf(x, m[c], v[c])).collect();
            let z = d[0] + d[1];
            [d[0] / z, d[1] / z]
        };
        let a0 = within(&[0.3, 0.7], &[0.0, 2.0], &[1.0, 0.5]);
        let a1 = within(&[0.5, 0.5], &[-1.0, 1.0], &[1.0, 2.0]);
        let expect = [0.25 * a0[0], 0.25 * a0[1], 0.75 * a1[0], 0.75 * a1[1]];
        for m in 0..4 {
            assert!((g[[0, m]] - expect[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_components_split_evenly() {
        let pg = Pgmm::new(vec![4], vec![gmm1(&[0.5, 0.5], &[1.0, 1.0], &[1.0, 1.0])], floor1()).unwrap();
        let g = mixture_posteriors(&pg, &align(&[(4, 1.0)], 3), &feats1(&[0.0, 5.0, -2.0])).unwrap();
        for t in 0..3 {
            assert_eq!(g.frame(t), &[(0, 0.5), (1, 0.5)]);
        }
    }

    #[test]
    fn silence_mass_is_dropped() {
        let pg = Pgmm::new(vec![0], vec![gmm1(&[1.0], &[0.0], &[1.0])], floor1()).unwrap();
        let g = mixture_posteriors(&pg, &align(&[(0, 0.4), (31, 0.6)], 2), &feats1(&[0.0, 1.0])).unwrap();
        assert!((g.frame_mass(0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn stats_and_merge() {
        let bg = Background::new(Array2::from_elem((1, 1), 2.0), Array2::from_elem((1, 1), 1.0)).unwrap();
        let pg = Pgmm::new(vec![0], vec![gmm1(&[1.0], &[2.0], &[1.0])], floor1()).unwrap();
        let xs = [0.5, 3.0, 1.0, 4.5];
        let whole = mixture_posteriors(&pg, &align(&[(0, 1.0)], 4), &feats1(&xs)).unwrap();
        let st = accumulate_stats(&whole, &feats1(&xs), &bg).unwrap();
        assert_eq!(st.n[0], 4.0);
        assert!((st.f[[0, 0]] - xs.iter().map(|x| x - 2.0).sum::<f64>()).abs() < 1e-12);
        assert!((st.s[[0, 0]] - xs.iter().map(|x| (x - 2.0) * (x - 2.0)).sum::<f64>()).abs() < 1e-12);

        let mut a = accumulate_stats(&mixture_posteriors(&pg, &align(&[(0, 1.0)], 2), &feats1(&xs[..2])).unwrap(), &feats1(&xs[..2]), &bg).unwrap();
        let b = accumulate_stats(&mixture_posteriors(&pg, &align(&[(0, 1.0)], 2), &feats1(&xs[2..])).unwrap(), &feats1(&xs[2..]), &bg).unwrap();
        a.merge(&b).unwrap();
        assert!((a.f[[0, 0]] - st.f[[0, 0]]).abs() < 1e-10);
        assert!((a.s[[0, 0]] - st.s[[0, 0]]).abs() < 1e-10);
    }

    #[test]
    fn zero_gamma_zero_stats() {
        let bg = Background::new(Array2::zeros((3, 1)), Array2::ones((3, 1))).unwrap();
        let g = MixturePosteriors::new(vec![vec![]; 2], 3, PosteriorSource::Dnn).unwrap();
        let st = accumulate_stats(&g, &feats1(&[1.0, 2.0]), &bg).unwrap();
        assert!(st.n.iter().chain(st.f.iter()).chain(st.s.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn weighted_em_closed_form() {
        let pg = Pgmm::new(vec![2], vec![gmm1(&[1.0], &[0.0], &[1.0])], floor1()).unwrap();
        let xs = [1.0, 2.0, 6.0];
        let f = feats1(&xs);
        let a = align(&[(2, 1.0)], 3);
        let step = pgmm_em_step(&pg, &[(&a, &f)]).unwrap();
        let g = &step.pgmm.gmms()[0];
        assert!((g.means()[[0, 0]] - 3.0).abs() < 1e-12);
        assert!((g.variances()[[0, 0]] - 14.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn two_component_hand_update() {
        // two frames, one state of mass 0.5, two components
        let (w, m, v) = ([0.4, 0.6], [0.0, 3.0], [1.0, 2.0]);
        let pg = Pgmm::new(vec![0], vec![gmm1(&w, &m, &v)], floor1()).unwrap();
        let xs = [0.5, 2.5];
        let a = align(&[(0, 0.5), (30, 0.5)], 2);
        let step = pgmm_em_step(&pg, &[(&a, &feats1(&xs))]).unwrap();
        let mut gam = [[0.0; 2]; 2];
        for (t, &x) in xs.iter().enumerate() {
            let d: Vec<f64> = (0..2).map(|c| w[c] * normal_pdf(x, m[c], v[c])).collect();
            for c in 0..2 {
                gam[t][c] = 0.5 * d[c] / (d[0] + d[1]);
            }
        }
        let n: Vec<f64> = (0..2).map(|c| gam[0][c] + gam[1][c]).collect();
        let g = &step.pgmm.gmms()[0];
        for c in 0..2 {
            let mean = (gam[0][c] * xs[0] + gam[1][c] * xs[1]) / n[c];
            let var = (gam[0][c] * (xs[0] - mean).powi(2) + gam[1][c] * (xs[1] - mean).powi(2)) / n[c];
            assert!((g.weights()[c] - n[c] / (n[0] + n[1])).abs() < 1e-12);
            assert!((g.means()[[c, 0]] - mean).abs() < 1e-12);
            assert!((g.variances()[[c, 0]] - var).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_state_is_kept() {
        let pg = Pgmm::new(vec![0, 1], vec![gmm1(&[1.0], &[0.0], &[1.0]), gmm1(&[1.0], &[5.0], &[1.0])], floor1()).unwrap();
        let step = pgmm_em_step(&pg, &[(&align(&[(0, 1.0)], 2), &feats1(&[1.0, 2.0]))]).unwrap();
        assert_eq!(step.empty_states, vec![1]);
        assert_eq!(step.pgmm.gmms()[1], pg.gmms()[1]);
    }

    #[test]
    fn starved_state() {
        let f = feats1(&(0..40).map(|i| i as f64).collect::<Vec<_>>());
        let a = align(&[(5, 1.0)], 40);
        let cfg = GmmTrainConfig { target_components: 2, em_iterations: 2, variance_floor: 1e-3 };
        assert_eq!(init_pgmm(&[(&a, &f)], &cfg).unwrap_err(), PgmmError::StarvedState { state: 0, frames: 0, needed: 2 });
    }

    #[test]
    fn background_id_tracks_parameters() {
        let a = Background::new(Array2::zeros((2, 2)), Array2::ones((2, 2))).unwrap();
        let b = Background::new(Array2::ones((2, 2)), Array2::ones((2, 2))).unwrap();
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id().len(), 16);
    }
}
