use std::fmt;
use std::str::FromStr;

use super::HmmError;
use crate::{SILENCE_WORD, STATES_PER_WORD};

/// Where silence may appear in a compiled transcription.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SilencePolicy {
    /// Mandatory silence at both ends only.
    EndsOnly,
    /// Mandatory silence at both ends plus an optional silence between words.
    #[default]
    OptionalBetween,
    /// Digits only.
    None,
}

impl FromStr for SilencePolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ends-only" | "ends_only" => Ok(Self::EndsOnly),
            "optional-between" | "optional_between" => Ok(Self::OptionalBetween),
            "none" => Ok(Self::None),
            other => Err(format!("unknown silence policy {other:?}")),
        }
    }
}

impl fmt::Display for SilencePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::EndsOnly => "ends-only",
            Self::OptionalBetween => "optional-between",
            Self::None => "none",
        })
    }
}

/// One word occurrence in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub word: usize,
    pub optional: bool,
}

/// A transcription compiled to a chain of word slots. Each slot expands to
/// its three states; an optional slot may be skipped entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateGraph {
    slots: Vec<Slot>,
}

/// Parses a digit string into word indices.
pub(crate) fn parse_digits(transcription: &str) -> Result<Vec<usize>, HmmError> {
    if transcription.is_empty() {
        return Err(HmmError::EmptyTranscription);
    }
    transcription
        .chars()
        .enumerate()
        .map(|(position, token)| token.to_digit(10).map(|d| d as usize).ok_or(HmmError::UnknownToken { token, position }))
        .collect()
}

/// Compiles a digit string into a state graph under `policy`.
pub fn compile_graph(transcription: &str, policy: SilencePolicy) -> Result<StateGraph, HmmError> {
    let digits = parse_digits(transcription)?;
    let mut slots = Vec::with_capacity(2 * digits.len() + 1);
    let edge_silence = policy != SilencePolicy::None;
    if edge_silence {
        slots.push(Slot { word: SILENCE_WORD, optional: false });
    }
    for (i, &d) in digits.iter().enumerate() {
        if i > 0 && policy == SilencePolicy::OptionalBetween {
            slots.push(Slot { word: SILENCE_WORD, optional: true });
        }
        slots.push(Slot { word: d, optional: false });
    }
    if edge_silence {
        slots.push(Slot { word: SILENCE_WORD, optional: false });
    }
    Ok(StateGraph { slots })
}

impl StateGraph {
    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    /// Global state index of every graph node, in graph order.
    pub fn states(&self) -> Vec<usize> {
        self.slots
            .iter()
            .flat_map(|slot| (0..STATES_PER_WORD).map(move |k| slot.word * STATES_PER_WORD + k))
            .collect()
    }

    /// States of the path that visits only mandatory slots.
    pub fn mandatory_states(&self) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| !s.optional)
            .flat_map(|slot| (0..STATES_PER_WORD).map(move |k| slot.word * STATES_PER_WORD + k))
            .collect()
    }

    /// Fewest frames that can traverse the graph.
    pub fn min_length(&self) -> usize {
        self.slots.iter().filter(|s| !s.optional).count() * STATES_PER_WORD
    }

    /// Expands the graph with per-state self-loop probabilities. A word's
    /// exit probability `1 - a` is shared equally among its successor slots
    /// (the next slot and, when that slot is optional, the one after it).
    pub fn topology(&self, self_loops: &[f64]) -> Topology {
        let node_state = self.states();
        let log_self: Vec<f64> = node_state.iter().map(|&s| self_loops[s].ln()).collect();
        let mut edges = Vec::new();
        let n_slots = self.slots.len();
        for (k, _) in self.slots.iter().enumerate() {
            let base = k * STATES_PER_WORD;
            for j in 0..STATES_PER_WORD - 1 {
                let node = base + j;
                edges.push((node, node + 1, (1.0 - self_loops[node_state[node]]).ln()));
            }
            let last = base + STATES_PER_WORD - 1;
            let mut succ = Vec::new();
            if k + 1 < n_slots {
                succ.push(k + 1);
                if self.slots[k + 1].optional && k + 2 < n_slots {
                    succ.push(k + 2);
                }
            }
            let exit = (1.0 - self_loops[node_state[last]]).ln() - (succ.len().max(1) as f64).ln();
            for next in succ {
                edges.push((last, next * STATES_PER_WORD, exit));
            }
        }
        let exit_node = node_state.len() - 1;
        Topology::new(node_state, log_self, edges, vec![(0, 0.0)], vec![exit_node])
            .expect("compiled graphs are left-to-right")
    }
}

/// A left-to-right graph of emitting nodes with log transition weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    node_state: Vec<usize>,
    log_self: Vec<f64>,
    /// Incoming non-self edges per node: `(from, log p)`, sorted by `from`.
    preds: Vec<Vec<(usize, f64)>>,
    /// Outgoing non-self edges per node: `(to, log p)`.
    succs: Vec<Vec<(usize, f64)>>,
    log_entry: Vec<f64>,
    is_exit: Vec<bool>,
    min_length: usize,
}

impl Topology {
    /// `edges` are `(from, to, log p)` with `from < to`; `entry` lists
    /// start nodes with their log initial probability; `exit` lists nodes
    /// a path may end in.
    pub fn new(
        node_state: Vec<usize>,
        log_self: Vec<f64>,
        edges: Vec<(usize, usize, f64)>,
        entry: Vec<(usize, f64)>,
        exit: Vec<usize>,
    ) -> Result<Self, HmmError> {
        let n = node_state.len();
        if n == 0 || log_self.len() != n {
            return Err(HmmError::InvalidTopology("node lists are empty or inconsistent".into()));
        }
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (from, to, lp) in edges {
            if from >= to || to >= n {
                return Err(HmmError::InvalidTopology(format!("edge {from}->{to} is not left-to-right")));
            }
            preds[to].push((from, lp));
            succs[from].push((to, lp));
        }
        for p in &mut preds {
            p.sort_by_key(|e| e.0);
        }
        let mut log_entry = vec![f64::NEG_INFINITY; n];
        for (node, lp) in entry {
            if node >= n {
                return Err(HmmError::InvalidTopology(format!("entry node {node} out of range")));
            }
            log_entry[node] = lp;
        }
        let mut is_exit = vec![false; n];
        for node in exit {
            if node >= n {
                return Err(HmmError::InvalidTopology(format!("exit node {node} out of range")));
            }
            is_exit[node] = true;
        }
        // shortest entry-to-exit path, counted in nodes
        let mut dist = vec![usize::MAX; n];
        for j in 0..n {
            if log_entry[j] > f64::NEG_INFINITY {
                dist[j] = 1;
            }
            for &(i, lp) in &preds[j] {
                if dist[i] != usize::MAX && lp > f64::NEG_INFINITY {
                    dist[j] = dist[j].min(dist[i] + 1);
                }
            }
        }
        let min_length = (0..n).filter(|&j| is_exit[j]).map(|j| dist[j]).min().unwrap_or(usize::MAX);
        if min_length == usize::MAX {
            return Err(HmmError::InvalidTopology("no exit node is reachable".into()));
        }
        Ok(Self { node_state, log_self, preds, succs, log_entry, is_exit, min_length })
    }

    /// A plain chain with the given self-loop probabilities, entering at
    /// the first node and leaving from the last. Node `i` emits state `i`.
    pub fn chain(self_loops: &[f64]) -> Self {
        let n = self_loops.len();
        let edges = (0..n.saturating_sub(1)).map(|i| (i, i + 1, (1.0 - self_loops[i]).ln())).collect();
        Self::new(
            (0..n).collect(),
            self_loops.iter().map(|a| a.ln()).collect(),
            edges,
            vec![(0, 0.0)],
            vec![n - 1],
        )
        .expect("chain is valid")
    }

    pub fn num_nodes(&self) -> usize {
        self.node_state.len()
    }

    pub fn node_state(&self) -> &[usize] {
        &self.node_state
    }

    pub fn log_self(&self, node: usize) -> f64 {
        self.log_self[node]
    }

    pub fn preds(&self, node: usize) -> &[(usize, f64)] {
        &self.preds[node]
    }

    pub fn succs(&self, node: usize) -> &[(usize, f64)] {
        &self.succs[node]
    }

    pub fn log_entry(&self, node: usize) -> f64 {
        self.log_entry[node]
    }

    pub fn is_exit(&self, node: usize) -> bool {
        self.is_exit[node]
    }

    pub fn min_length(&self) -> usize {
        self.min_length
    }

    /// Log weight of moving `from -> to` in one step, `-inf` if no edge.
    pub fn log_transition(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return self.log_self[from];
        }
        self.succs[from].iter().find(|e| e.0 == to).map_or(f64::NEG_INFINITY, |e| e.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::NUM_STATES;

    #[test]
    fn single_digit_indices() {
        let g = compile_graph("7", SilencePolicy::None).unwrap();
        assert_eq!(g.states(), vec![21, 22, 23]);
    }

    #[test]
    fn min_length_and_silence() {
        let g = compile_graph("12345", SilencePolicy::None).unwrap();
        assert_eq!(g.min_length(), 15);
        let g = compile_graph("12", SilencePolicy::OptionalBetween).unwrap();
        assert_eq!(g.states(), vec![30, 31, 32, 3, 4, 5, 30, 31, 32, 6, 7, 8, 30, 31, 32]);
        assert_eq!(g.min_length(), 12);
        assert_eq!(g.mandatory_states(), vec![30, 31, 32, 3, 4, 5, 6, 7, 8, 30, 31, 32]);
        let topo = g.topology(&[0.6; 33]);
        assert_eq!(topo.min_length(), 12);
        // the last state of "1" may enter the optional silence or skip it
        assert_eq!(topo.succs(5).len(), 2);
        assert!((topo.log_transition(5, 6) - (0.2f64).ln()).abs() < 1e-12);
        assert!((topo.log_transition(5, 9) - (0.2f64).ln()).abs() < 1e-12);
        assert!(topo.node_state().iter().all(|&s| s < NUM_STATES));
    }

    #[test]
    fn unknown_token() {
        assert_eq!(compile_graph("1a3", SilencePolicy::None), Err(HmmError::UnknownToken { token: 'a', position: 1 }));
        assert_eq!(compile_graph("", SilencePolicy::None), Err(HmmError::EmptyTranscription));
    }

    #[test]
    fn deterministic_compilation() {
        let a = compile_graph("90210", SilencePolicy::OptionalBetween).unwrap();
        let b = compile_graph("90210", SilencePolicy::OptionalBetween).unwrap();
        assert_eq!(a, b);
    }
}
