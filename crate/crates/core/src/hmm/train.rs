//! GMM-HMM training: flat start, Viterbi realignment and mixture growth.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use super::graph::parse_digits;
use super::{compile_graph, viterbi_align_with_state_ll, HmmError, HmmSet, HmmState, SilencePolicy, StateGraph};
use crate::features::FeatureSequence;
use crate::gmm::{DiagGmm, GmmAccumulator, VarianceFloor};
use crate::{NUM_STATES, SILENCE_WORD};

/// Self-loop probabilities are kept inside this margin of 0 and 1.
const SELF_LOOP_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct HmmTrainConfig {
    /// Final Gaussians per state (a power of two).
    pub components: usize,
    /// Realignment passes with single-Gaussian states.
    pub initial_passes: usize,
    /// Realignment passes after every mixture split.
    pub passes_per_size: usize,
    pub silence_policy: SilencePolicy,
    pub variance_floor: f64,
    pub initial_self_loop: f64,
}

impl Default for HmmTrainConfig {
    fn default() -> Self {
        Self {
            components: 16,
            initial_passes: 4,
            passes_per_size: 2,
            silence_policy: SilencePolicy::OptionalBetween,
            variance_floor: 1e-3,
            initial_self_loop: 0.6,
        }
    }
}

/// One training utterance.
#[derive(Debug, Clone, Copy)]
pub struct TrainingUtterance<'a> {
    pub id: &'a str,
    pub feats: &'a FeatureSequence,
    pub transcription: &'a str,
}

/// Corpus Viterbi log-likelihood per realignment pass at one mixture size;
/// the last entry scores the model produced by the final pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmTrainStage {
    pub components: usize,
    pub log_likelihoods: Vec<f64>,
}

struct PassStats {
    gmm: Vec<GmmAccumulator>,
    self_count: Vec<f64>,
    exit_count: Vec<f64>,
    log_likelihood: f64,
}

impl PassStats {
    fn new(hmms: &HmmSet) -> Self {
        Self {
            gmm: hmms.states().iter().map(|s| s.gmm.accumulator()).collect(),
            self_count: vec![0.0; NUM_STATES],
            exit_count: vec![0.0; NUM_STATES],
            log_likelihood: 0.0,
        }
    }

    fn merge(&mut self, other: PassStats) {
        for (a, b) in self.gmm.iter_mut().zip(other.gmm) {
            a.merge(b);
        }
        for s in 0..NUM_STATES {
            self.self_count[s] += other.self_count[s];
            self.exit_count[s] += other.exit_count[s];
        }
        self.log_likelihood += other.log_likelihood;
    }
}

/// Trains the 33-state set on `(features, transcription)` pairs.
pub fn train_hmm_set(
    corpus: &[TrainingUtterance<'_>],
    cfg: &HmmTrainConfig,
) -> Result<(HmmSet, Vec<HmmTrainStage>), HmmError> {
    if cfg.components == 0 || !cfg.components.is_power_of_two() {
        return Err(HmmError::InvalidSet("components must be a power of two".into()));
    }
    let mut seen = [false; SILENCE_WORD];
    let mut graphs = Vec::with_capacity(corpus.len());
    for utt in corpus {
        for d in parse_digits(utt.transcription)? {
            seen[d] = true;
        }
        let graph = compile_graph(utt.transcription, cfg.silence_policy)?;
        if utt.feats.num_frames() < graph.min_length() {
            return Err(HmmError::UnalignableUtterance {
                id: utt.id.to_string(),
                frames: utt.feats.num_frames(),
                min: graph.min_length(),
            });
        }
        graphs.push(graph);
    }
    if let Some(d) = seen.iter().position(|s| !s) {
        return Err(HmmError::MissingDigitCoverage(d));
    }

    let floor = corpus_floor(corpus, cfg.variance_floor)?;
    let mut hmms = flat_start(corpus, &graphs, cfg, &floor)?;
    let mut stages = Vec::new();

    let mut lls = Vec::new();
    for _ in 0..cfg.initial_passes {
        let (next, ll) = realign_pass(&hmms, corpus, &graphs, &floor)?;
        lls.push(ll);
        hmms = next;
    }
    lls.push(realign_stats(&hmms, corpus, &graphs)?.log_likelihood);
    stages.push(HmmTrainStage { components: 1, log_likelihoods: lls });

    let mut c = 1;
    while c < cfg.components {
        c *= 2;
        let split = hmms
            .states()
            .iter()
            .map(|s| HmmState { gmm: s.gmm.split_components(), self_loop: s.self_loop })
            .collect();
        hmms = HmmSet::new(split)?;
        let mut lls = Vec::new();
        for _ in 0..cfg.passes_per_size {
            let (next, ll) = realign_pass(&hmms, corpus, &graphs, &floor)?;
            lls.push(ll);
            hmms = next;
        }
        lls.push(realign_stats(&hmms, corpus, &graphs)?.log_likelihood);
        stages.push(HmmTrainStage { components: c, log_likelihoods: lls });
        log::info!("hmm training: {c} components/state, corpus log-likelihood {:.3}", stages.last().unwrap().log_likelihoods.last().unwrap());
    }
    Ok((hmms, stages))
}

fn corpus_floor(corpus: &[TrainingUtterance<'_>], fraction: f64) -> Result<VarianceFloor, HmmError> {
    let d = corpus.first().map_or(0, |u| u.feats.dim());
    let mut n = 0.0;
    let mut sum = Array1::<f64>::zeros(d);
    let mut sumsq = Array1::<f64>::zeros(d);
    for utt in corpus {
        for row in utt.feats.frames().outer_iter() {
            n += 1.0;
            sum += &row;
            sumsq += &row.mapv(|v| v * v);
        }
    }
    let mean = &sum / n;
    let var: Vec<f64> = (0..d).map(|j| sumsq[j] / n - mean[j] * mean[j]).collect();
    if let Some(dim) = var.iter().position(|v| *v <= 0.0) {
        return Err(crate::gmm::GmmError::DegenerateData { dim }.into());
    }
    Ok(VarianceFloor::from_global(var, fraction))
}

/// Uniform segmentation over the mandatory states, single Gaussians.
fn flat_start(
    corpus: &[TrainingUtterance<'_>],
    graphs: &[StateGraph],
    cfg: &HmmTrainConfig,
    floor: &VarianceFloor,
) -> Result<HmmSet, HmmError> {
    let d = floor.floor.len();
    let mut n = vec![0.0; NUM_STATES];
    let mut sx = Array2::<f64>::zeros((NUM_STATES, d));
    let mut sxx = Array2::<f64>::zeros((NUM_STATES, d));
    let mut gsum = Array1::<f64>::zeros(d);
    let mut gcount = 0.0;
    for (utt, graph) in corpus.iter().zip(graphs) {
        let states = graph.mandatory_states();
        let t_len = utt.feats.num_frames();
        for (k, &s) in states.iter().enumerate() {
            let lo = k * t_len / states.len();
            let hi = (k + 1) * t_len / states.len();
            for t in lo..hi {
                let x = utt.feats.frame(t);
                n[s] += 1.0;
                for j in 0..d {
                    sx[[s, j]] += x[j];
                    sxx[[s, j]] += x[j] * x[j];
                    gsum[j] += x[j];
                }
                gcount += 1.0;
            }
        }
    }
    let gmean = gsum / gcount;
    let mut states = Vec::with_capacity(NUM_STATES);
    for s in 0..NUM_STATES {
        let (mean, var): (Vec<f64>, Vec<f64>) = if n[s] > 0.0 {
            (0..d)
                .map(|j| {
                    let m = sx[[s, j]] / n[s];
                    (m, (sxx[[s, j]] / n[s] - m * m).max(floor.floor[j]))
                })
                .unzip()
        } else {
            (gmean.to_vec(), floor.global_var.clone())
        };
        let gmm = DiagGmm::new(
            Array1::ones(1),
            Array2::from_shape_vec((1, d), mean).expect("1 x d"),
            Array2::from_shape_vec((1, d), var).expect("1 x d"),
        )?;
        states.push(HmmState { gmm, self_loop: cfg.initial_self_loop });
    }
    HmmSet::new(states)
}

/// Viterbi-aligns every utterance and accumulates per-state statistics.
fn realign_stats(hmms: &HmmSet, corpus: &[TrainingUtterance<'_>], graphs: &[StateGraph]) -> Result<PassStats, HmmError> {
    const UTTS_PER_CHUNK: usize = 8;
    let self_loops = hmms.self_loops();
    let starts: Vec<usize> = (0..corpus.len()).step_by(UTTS_PER_CHUNK).collect();
    let partials: Vec<Result<PassStats, HmmError>> = starts
        .par_iter()
        .map(|&lo| {
            let mut stats = PassStats::new(hmms);
            let max_c = hmms.states().iter().map(|s| s.gmm.num_components()).max().unwrap_or(1);
            let mut scratch = vec![0.0; max_c];
            for i in lo..(lo + UTTS_PER_CHUNK).min(corpus.len()) {
                let utt = &corpus[i];
                let graph = &graphs[i];
                let ll = hmms.state_log_likelihoods(utt.feats, &graph.states())?;
                let path = viterbi_align_with_state_ll(graph, &self_loops, &ll).map_err(|e| match e {
                    HmmError::TooShort { frames, min } => HmmError::UnalignableUtterance { id: utt.id.to_string(), frames, min },
                    other => other,
                })?;
                stats.log_likelihood += path.log_prob;
                for (t, &s) in path.states.iter().enumerate() {
                    let gmm = &hmms.state(s).gmm;
                    stats.gmm[s].add_frame(gmm, utt.feats.frame(t), 1.0, &mut scratch[..gmm.num_components()]);
                    if t + 1 < path.nodes.len() {
                        if path.nodes[t + 1] == path.nodes[t] {
                            stats.self_count[s] += 1.0;
                        } else {
                            stats.exit_count[s] += 1.0;
                        }
                    }
                }
            }
            Ok(stats)
        })
        .collect();
    let mut total = PassStats::new(hmms);
    for p in partials {
        total.merge(p?);
    }
    Ok(total)
}

fn realign_pass(
    hmms: &HmmSet,
    corpus: &[TrainingUtterance<'_>],
    graphs: &[StateGraph],
    floor: &VarianceFloor,
) -> Result<(HmmSet, f64), HmmError> {
    let stats = realign_stats(hmms, corpus, graphs)?;
    let mut states = Vec::with_capacity(NUM_STATES);
    for (s, acc) in stats.gmm.iter().enumerate() {
        let old = hmms.state(s);
        if acc.frames == 0 {
            states.push(old.clone());
            continue;
        }
        let (gmm, reseeded) = old.gmm.m_step(acc, floor);
        if reseeded > 0 {
            log::debug!("state {s}: re-seeded {reseeded} empty component(s)");
        }
        let moves = stats.self_count[s] + stats.exit_count[s];
        let self_loop = if moves > 0.0 && stats.exit_count[s] > 0.0 {
            (stats.self_count[s] / moves).clamp(SELF_LOOP_MARGIN, 1.0 - SELF_LOOP_MARGIN)
        } else {
            old.self_loop
        };
        states.push(HmmState { gmm, self_loop });
    }
    Ok((HmmSet::new(states)?, stats.log_likelihood))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, Role, SynthConfig};
    use crate::NUM_DIGIT_STATES;

    fn corpus() -> crate::synth::Corpus {
        let cfg = SynthConfig {
            n_speakers: 2,
            n_background_speakers: 6,
            mfcc_dim: 4,
            fbank_dim: 4,
            ..SynthConfig::default()
        };
        generate_corpus(&cfg).unwrap()
    }

    fn utterances(c: &crate::synth::Corpus) -> Vec<TrainingUtterance<'_>> {
        c.with_role(Role::Background).map(|u| TrainingUtterance { id: &u.id, feats: &u.mfcc, transcription: &u.transcript }).collect()
    }

    #[test]
    fn viterbi_likelihood_never_drops_within_a_size() {
        let c = corpus();
        let cfg = HmmTrainConfig { components: 4, ..Default::default() };
        let (_, stages) = train_hmm_set(&utterances(&c), &cfg).unwrap();
        assert_eq!(stages.iter().map(|s| s.components).collect::<Vec<_>>(), vec![1, 2, 4]);
        for s in &stages {
            for w in s.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} components: {:?}", s.components, s.log_likelihoods);
            }
        }
    }

    #[test]
    fn sixteen_components_give_480_plus_48() {
        let c = corpus();
        let (hmms, _) = train_hmm_set(&utterances(&c), &HmmTrainConfig { passes_per_size: 1, initial_passes: 1, ..Default::default() }).unwrap();
        assert_eq!(hmms.mixture_count(0..NUM_DIGIT_STATES), 480);
        assert_eq!(hmms.mixture_count(NUM_DIGIT_STATES..NUM_STATES), 48);
    }

    #[test]
    fn missing_digit_rejected() {
        let c = corpus();
        let utts: Vec<TrainingUtterance> = utterances(&c).into_iter().filter(|u| !u.transcription.contains('9')).collect();
        let err = train_hmm_set(&utts, &HmmTrainConfig::default()).unwrap_err();
        assert!(matches!(err, HmmError::MissingDigitCoverage(9)), "{err:?}");
    }
}
