//! Viterbi and forward-backward alignment over a [`Topology`], all in the
//! log domain.

use ndarray::Array2;

use super::{AlignmentMatrix, AlignmentSource, HmmError, HmmSet, StateGraph, Topology};
use crate::features::FeatureSequence;
use crate::util::{log_add, log_sum_exp};
use crate::NUM_STATES;

/// Best path through a topology.
#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    /// Graph node per frame.
    pub nodes: Vec<usize>,
    /// Global state per frame.
    pub states: Vec<usize>,
    /// Joint log-probability of the path and the frames.
    pub log_prob: f64,
}

/// Node posteriors and the total log-likelihood from forward-backward.
#[derive(Debug, Clone, PartialEq)]
pub struct FbResult {
    /// T x nodes.
    pub node_posteriors: Array2<f64>,
    pub log_likelihood: f64,
}

fn check_length(topo: &Topology, frames: usize) -> Result<(), HmmError> {
    if frames < topo.min_length() {
        return Err(HmmError::TooShort { frames, min: topo.min_length() });
    }
    Ok(())
}

/// Viterbi over node-level emission log-likelihoods (`T x nodes`). Ties
/// go to the lower-index predecessor.
pub fn viterbi_with_emissions(topo: &Topology, node_ll: &Array2<f64>) -> Result<ViterbiPath, HmmError> {
    let t_len = node_ll.nrows();
    let n = topo.num_nodes();
    if node_ll.ncols() != n {
        return Err(HmmError::InvalidTopology(format!("{} emission columns for {n} nodes", node_ll.ncols())));
    }
    check_length(topo, t_len)?;
    let mut delta = vec![f64::NEG_INFINITY; n];
    let mut back = vec![usize::MAX; t_len * n];
    for j in 0..n {
        delta[j] = topo.log_entry(j) + node_ll[[0, j]];
    }
    let mut next = vec![f64::NEG_INFINITY; n];
    for t in 1..t_len {
        for j in 0..n {
            let mut best = f64::NEG_INFINITY;
            let mut arg = usize::MAX;
            for &(i, lp) in topo.preds(j) {
                let cand = delta[i] + lp;
                if cand > best {
                    best = cand;
                    arg = i;
                }
            }
            let stay = delta[j] + topo.log_self(j);
            if stay > best {
                best = stay;
                arg = j;
            }
            next[j] = best + node_ll[[t, j]];
            back[t * n + j] = arg;
        }
        std::mem::swap(&mut delta, &mut next);
    }
    let mut end = usize::MAX;
    let mut best = f64::NEG_INFINITY;
    for j in 0..n {
        if topo.is_exit(j) && delta[j] > best {
            best = delta[j];
            end = j;
        }
    }
    if end == usize::MAX {
        return Err(HmmError::TooShort { frames: t_len, min: topo.min_length() });
    }
    let mut nodes = vec![0; t_len];
    nodes[t_len - 1] = end;
    for t in (1..t_len).rev() {
        nodes[t - 1] = back[t * n + nodes[t]];
    }
    let states = nodes.iter().map(|&j| topo.node_state()[j]).collect();
    Ok(ViterbiPath { nodes, states, log_prob: best })
}

/// Forward-backward node posteriors from node-level emissions.
pub fn forward_backward(topo: &Topology, node_ll: &Array2<f64>) -> Result<FbResult, HmmError> {
    let t_len = node_ll.nrows();
    let n = topo.num_nodes();
    if node_ll.ncols() != n {
        return Err(HmmError::InvalidTopology(format!("{} emission columns for {n} nodes", node_ll.ncols())));
    }
    check_length(topo, t_len)?;
    let mut alpha = Array2::from_elem((t_len, n), f64::NEG_INFINITY);
    for j in 0..n {
        alpha[[0, j]] = topo.log_entry(j) + node_ll[[0, j]];
    }
    for t in 1..t_len {
        for j in 0..n {
            let mut acc = alpha[[t - 1, j]] + topo.log_self(j);
            for &(i, lp) in topo.preds(j) {
                acc = log_add(acc, alpha[[t - 1, i]] + lp);
            }
            alpha[[t, j]] = acc + node_ll[[t, j]];
        }
    }
    let mut beta = Array2::from_elem((t_len, n), f64::NEG_INFINITY);
    for j in 0..n {
        if topo.is_exit(j) {
            beta[[t_len - 1, j]] = 0.0;
        }
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..n {
            let mut acc = topo.log_self(i) + node_ll[[t + 1, i]] + beta[[t + 1, i]];
            for &(j, lp) in topo.succs(i) {
                acc = log_add(acc, lp + node_ll[[t + 1, j]] + beta[[t + 1, j]]);
            }
            beta[[t, i]] = acc;
        }
    }
    let finals: Vec<f64> = (0..n).filter(|&j| topo.is_exit(j)).map(|j| alpha[[t_len - 1, j]]).collect();
    let log_likelihood = log_sum_exp(&finals);
    if log_likelihood == f64::NEG_INFINITY {
        return Err(HmmError::TooShort { frames: t_len, min: topo.min_length() });
    }
    let mut post = Array2::zeros((t_len, n));
    for t in 0..t_len {
        let mut sum = 0.0;
        for j in 0..n {
            let v = (alpha[[t, j]] + beta[[t, j]] - log_likelihood).exp();
            post[[t, j]] = v;
            sum += v;
        }
        for j in 0..n {
            post[[t, j]] /= sum;
        }
    }
    Ok(FbResult { node_posteriors: post, log_likelihood })
}

fn gather(topo: &Topology, state_ll: &Array2<f64>) -> Array2<f64> {
    let states = topo.node_state();
    Array2::from_shape_fn((state_ll.nrows(), states.len()), |(t, j)| state_ll[[t, states[j]]])
}

/// Viterbi forced alignment from a T x 33 state emission matrix.
pub fn viterbi_align_with_state_ll(
    graph: &StateGraph,
    self_loops: &[f64],
    state_ll: &Array2<f64>,
) -> Result<ViterbiPath, HmmError> {
    let topo = graph.topology(self_loops);
    viterbi_with_emissions(&topo, &gather(&topo, state_ll))
}

/// Soft forward-backward alignment from a T x 33 state emission matrix.
/// States outside the graph get exactly zero mass.
pub fn fb_align_with_state_ll(
    graph: &StateGraph,
    self_loops: &[f64],
    state_ll: &Array2<f64>,
) -> Result<(AlignmentMatrix, f64), HmmError> {
    let topo = graph.topology(self_loops);
    let fb = forward_backward(&topo, &gather(&topo, state_ll))?;
    let mut post = Array2::zeros((state_ll.nrows(), NUM_STATES));
    for (j, &s) in topo.node_state().iter().enumerate() {
        for t in 0..state_ll.nrows() {
            post[[t, s]] += fb.node_posteriors[[t, j]];
        }
    }
    Ok((AlignmentMatrix::new(post, AlignmentSource::HmmFb)?, fb.log_likelihood))
}

/// Viterbi forced alignment with the GMM-HMM emissions.
pub fn viterbi_align(graph: &StateGraph, hmms: &HmmSet, feats: &FeatureSequence) -> Result<ViterbiPath, HmmError> {
    let min = graph.min_length();
    if feats.num_frames() < min {
        return Err(HmmError::TooShort { frames: feats.num_frames(), min });
    }
    let ll = hmms.state_log_likelihoods(feats, &graph.states())?;
    viterbi_align_with_state_ll(graph, &hmms.self_loops(), &ll)
}

/// Forward-backward alignment with the GMM-HMM emissions.
pub fn fb_align(graph: &StateGraph, hmms: &HmmSet, feats: &FeatureSequence) -> Result<AlignmentMatrix, HmmError> {
    let min = graph.min_length();
    if feats.num_frames() < min {
        return Err(HmmError::TooShort { frames: feats.num_frames(), min });
    }
    let ll = hmms.state_log_likelihoods(feats, &graph.states())?;
    fb_align_with_state_ll(graph, &hmms.self_loops(), &ll).map(|(a, _)| a)
}

/// Scaled likelihoods for a hybrid (neural) HMM: `log P(s|x) - log P(s)`.
pub fn hybrid_state_log_likelihoods(dnn: &AlignmentMatrix, log_priors: &[f64]) -> Result<Array2<f64>, HmmError> {
    if dnn.source() != AlignmentSource::Dnn {
        return Err(HmmError::SourceMismatch(dnn.source()));
    }
    let post = dnn.posteriors();
    Ok(Array2::from_shape_fn(post.dim(), |(t, s)| post[[t, s]].max(1e-30).ln() - log_priors[s]))
}
