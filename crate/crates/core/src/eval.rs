//! Trial lists, EER and minDCF.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown condition {0:?} (expected TC-IC, TC-TW or TC-IW)")]
    UnknownCondition(String),
    #[error("unknown DCF parameter set {0:?} (expected sre08 or sre10)")]
    UnknownDcf(String),
    #[error("score set needs both target and non-target trials")]
    OneClassOnly,
    #[error("score set is empty or has mismatched lengths")]
    BadScoreSet,
    #[error("no score for trial {speaker} {utterance} {prompt}")]
    MissingScore { speaker: String, utterance: String, prompt: String },
    #[error("invalid DCF parameters")]
    BadDcfParams,
}

/// Target/imposter speaker crossed with correct/wrong content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Tc,
    Tw,
    Ic,
    Iw,
}

impl FromStr for Category {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "TC" => Ok(Self::Tc),
            "TW" => Ok(Self::Tw),
            "IC" => Ok(Self::Ic),
            "IW" => Ok(Self::Iw),
            other => Err(format!("unknown trial category {other:?}")),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tc => "TC",
            Self::Tw => "TW",
            Self::Ic => "IC",
            Self::Iw => "IW",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub speaker: String,
    pub utterance: String,
    pub prompt: String,
    pub category: Category,
}

impl fmt::Display for TrialRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {}", self.speaker, self.utterance, self.prompt, self.category)
    }
}

/// Parses `<speaker> <utterance> <digits> <category>` lines. Blank lines
/// and `#` comments are skipped; errors carry 1-based line numbers.
pub fn parse_trials(text: &str) -> Result<Vec<TrialRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        if fields[2].is_empty() || !fields[2].bytes().all(|b| b.is_ascii_digit()) {
            return Err(err(format!("prompt {:?} is not a digit string", fields[2])));
        }
        let category = fields[3].parse().map_err(err)?;
        out.push(TrialRecord {
            speaker: fields[0].to_string(),
            utterance: fields[1].to_string(),
            prompt: fields[2].to_string(),
            category,
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[TrialRecord]) -> String {
    trials.iter().map(|t| format!("{t}\n")).collect()
}

/// Target trials (TC) against one non-target category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    TcIc,
    TcTw,
    TcIw,
}

impl Condition {
    pub fn non_target(self) -> Category {
        match self {
            Self::TcIc => Category::Ic,
            Self::TcTw => Category::Tw,
            Self::TcIw => Category::Iw,
        }
    }
}

impl FromStr for Condition {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('_', "-").as_str() {
            "TC-IC" => Ok(Self::TcIc),
            "TC-TW" => Ok(Self::TcTw),
            "TC-IW" => Ok(Self::TcIw),
            _ => Err(EvalError::UnknownCondition(s.to_string())),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TC-{}", self.non_target())
    }
}

/// Keeps TC and the condition's non-target category; pairs each record
/// with its label (true for target).
pub fn partition_trials(trials: &[TrialRecord], condition: Condition) -> Vec<(TrialRecord, bool)> {
    trials
        .iter()
        .filter(|t| t.category == Category::Tc || t.category == condition.non_target())
        .map(|t| (t.clone(), t.category == Category::Tc))
        .collect()
}

/// Scores with target labels; higher scores mean more target-like.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self, EvalError> {
        if scores.is_empty() || scores.len() != labels.len() || scores.iter().any(|s| s.is_nan()) {
            return Err(EvalError::BadScoreSet);
        }
        Ok(Self { scores, labels })
    }

    pub fn from_parts(targets: &[f64], non_targets: &[f64]) -> Result<Self, EvalError> {
        let scores = targets.iter().chain(non_targets).copied().collect();
        let labels = targets.iter().map(|_| true).chain(non_targets.iter().map(|_| false)).collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `(P_miss, P_fa)` at every distinct score used as threshold (a trial
    /// is accepted when its score is at least the threshold), in ascending
    /// threshold order, followed by the reject-all point `(1, 0)`.
    pub fn roc(&self) -> Result<Vec<(f64, f64)>, EvalError> {
        let nt = self.labels.iter().filter(|&&l| l).count();
        let nn = self.labels.len() - nt;
        if nt == 0 || nn == 0 {
            return Err(EvalError::OneClassOnly);
        }
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        let mut points = Vec::with_capacity(order.len() + 1);
        // everything below index i is rejected
        let (mut miss, mut fa_rejected) = (0usize, 0usize);
        let mut i = 0;
        while i < order.len() {
            points.push((miss as f64 / nt as f64, (nn - fa_rejected) as f64 / nn as f64));
            let s = self.scores[order[i]];
            while i < order.len() && self.scores[order[i]] == s {
                if self.labels[order[i]] {
                    miss += 1;
                } else {
                    fa_rejected += 1;
                }
                i += 1;
            }
        }
        points.push((1.0, 0.0));
        Ok(points)
    }
}

/// Rate at which miss and false-alarm rates meet, interpolated linearly
/// between the two ROC points that straddle the crossing.
pub fn compute_eer(scores: &ScoreSet) -> Result<f64, EvalError> {
    let roc = scores.roc()?;
    for w in roc.windows(2) {
        let ((m1, f1), (m2, f2)) = (w[0], w[1]);
        if m1 <= f1 && m2 >= f2 {
            let denom = (m2 - m1) - (f2 - f1);
            if denom == 0.0 {
                return Ok(m1);
            }
            let alpha = (f1 - m1) / denom;
            return Ok(m1 + alpha * (m2 - m1));
        }
    }
    unreachable!("the ROC starts at (0, 1) and ends at (1, 0)")
}

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub c_miss: f64,
    pub c_fa: f64,
    pub p_target: f64,
}

impl DcfParams {
    pub const SRE08: DcfParams = DcfParams { c_miss: 10.0, c_fa: 1.0, p_target: 0.01 };
    pub const SRE10: DcfParams = DcfParams { c_miss: 1.0, c_fa: 1.0, p_target: 0.001 };

    pub fn new(c_miss: f64, c_fa: f64, p_target: f64) -> Result<Self, EvalError> {
        if !(c_miss > 0.0 && c_fa > 0.0 && p_target > 0.0 && p_target < 1.0) {
            return Err(EvalError::BadDcfParams);
        }
        Ok(Self { c_miss, c_fa, p_target })
    }

    /// Cost of the better trivial system (accept all or reject all).
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

impl FromStr for DcfParams {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sre08" => Ok(Self::SRE08),
            "sre10" => Ok(Self::SRE10),
            _ => Err(EvalError::UnknownDcf(s.to_string())),
        }
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn compute_min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<f64, EvalError> {
    let roc = scores.roc()?;
    let best = roc
        .iter()
        .map(|&(m, f)| params.c_miss * params.p_target * m + params.c_fa * (1.0 - params.p_target) * f)
        .fold(f64::INFINITY, f64::min);
    Ok(best / params.default_cost())
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub system: String,
    pub condition: Condition,
    pub eer: f64,
    pub min_dcf: Vec<(String, f64)>,
}

/// EER and the requested minDCF values for one condition.
pub fn evaluate(system: &str, condition: Condition, scores: &ScoreSet, dcfs: &[(String, DcfParams)]) -> Result<MetricsRow, EvalError> {
    let eer = compute_eer(scores)?;
    let min_dcf = dcfs
        .iter()
        .map(|(name, p)| Ok((name.clone(), compute_min_dcf(scores, p)?)))
        .collect::<Result<_, EvalError>>()?;
    Ok(MetricsRow { system: system.to_string(), condition, eer, min_dcf })
}

/// Aligned text table: system, condition, EER(%) and one column per DCF.
pub fn format_report(rows: &[MetricsRow]) -> String {
    let width = rows.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:<9}  {:>7}", "system", "condition", "EER(%)");
    if let Some(first) = rows.first() {
        for (name, _) in &first.min_dcf {
            out.push_str(&format!("  {:>10}", format!("minDCF{}", name.trim_start_matches("sre"))));
        }
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<width$}  {:<9}  {:>7.2}", r.system, r.condition.to_string(), 100.0 * r.eer));
        for (_, v) in &r.min_dcf {
            out.push_str(&format!("  {v:>10.4}"));
        }
        out.push('\n');
    }
    out
}

/// Scores are keyed by speaker, utterance and prompt: TC and TW trials
/// share the first two.
pub type ScoreKey = (String, String, String);

/// One `<speaker> <utterance> <prompt> <score>` line.
pub fn format_score(trial: &TrialRecord, score: f64) -> String {
    format!("{} {} {} {score:e}\n", trial.speaker, trial.utterance, trial.prompt)
}

/// Parses `<speaker> <utterance> <prompt> <score>` lines into a lookup table.
pub fn parse_scores(text: &str) -> Result<HashMap<ScoreKey, f64>, EvalError> {
    let mut out = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| EvalError::Parse { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let score: f64 = fields[3].parse().map_err(|_| err(format!("bad score {:?}", fields[3])))?;
        if score.is_nan() {
            return Err(err("score is NaN".into()));
        }
        out.insert((fields[0].to_string(), fields[1].to_string(), fields[2].to_string()), score);
    }
    Ok(out)
}

/// Joins a trial list with a score table under `condition`.
pub fn score_set_for(trials: &[TrialRecord], scores: &HashMap<ScoreKey, f64>, condition: Condition) -> Result<ScoreSet, EvalError> {
    let mut s = Vec::new();
    let mut l = Vec::new();
    for (t, label) in partition_trials(trials, condition) {
        let v = scores
            .get(&(t.speaker.clone(), t.utterance.clone(), t.prompt.clone()))
            .ok_or_else(|| EvalError::MissingScore { speaker: t.speaker.clone(), utterance: t.utterance.clone(), prompt: t.prompt.clone() })?;
        s.push(*v);
        l.push(label);
    }
    ScoreSet::new(s, l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_cases() {
        let perfect = ScoreSet::from_parts(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
        assert_eq!(compute_eer(&perfect).unwrap(), 0.0);
        assert_eq!(compute_min_dcf(&perfect, &DcfParams::SRE08).unwrap(), 0.0);
        let s = ScoreSet::from_parts(&[0.9, 0.6, 0.5], &[0.7, 0.3, 0.1]).unwrap();
        assert_eq!(compute_eer(&s).unwrap(), 1.0 / 3.0);
        let one = ScoreSet::new(vec![1.0, 2.0], vec![true, true]).unwrap();
        assert_eq!(compute_eer(&one), Err(EvalError::OneClassOnly));
    }

    #[test]
    fn trial_parsing() {
        let text = "spk1 u1 12345 TC\n\nspk2 u1 12345 IC\n";
        let t = parse_trials(text).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].category, Category::Ic);
        let bad = "spk1 u1 12345 TC\nspk1 u2 12345 XX\n";
        assert!(matches!(parse_trials(bad), Err(EvalError::Parse { line: 2, .. })));
        assert_eq!(parse_trials(&format_trials(&t)).unwrap(), t);
    }

    #[test]
    fn partitioning() {
        let mut trials = Vec::new();
        for (cat, n) in [(Category::Tc, 10), (Category::Ic, 10), (Category::Tw, 10)] {
            for i in 0..n {
                trials.push(TrialRecord { speaker: "s".into(), utterance: format!("{cat}{i}"), prompt: "1".into(), category: cat });
            }
        }
        assert_eq!(partition_trials(&trials, Condition::TcIc).len(), 20);
        let tw = partition_trials(&trials, Condition::TcTw);
        assert!(tw.iter().all(|(t, l)| *l == (t.category == Category::Tc)));
        assert_eq!("tc_tw".parse::<Condition>().unwrap(), Condition::TcTw);
        assert!("TC-XX".parse::<Condition>().is_err());
    }

    #[test]
    fn report_layout() {
        let s = ScoreSet::from_parts(&[0.9, 0.6, 0.5], &[0.7, 0.3, 0.1]).unwrap();
        let dcfs = vec![("sre08".to_string(), DcfParams::SRE08), ("sre10".to_string(), DcfParams::SRE10)];
        let row = evaluate("HMM/GMM-MAP", Condition::TcIc, &s, &dcfs).unwrap();
        let text = format_report(&[row]);
        assert!(text.contains("minDCF08") && text.contains("33.33"));
    }

    #[test]
    fn missing_score_named() {
        let t = TrialRecord { speaker: "a".into(), utterance: "a_t0".into(), prompt: "12".into(), category: Category::Tc };
        let err = score_set_for(&[t], &HashMap::new(), Condition::TcIc).unwrap_err();
        assert!(matches!(err, EvalError::MissingScore { .. }));
        assert!(matches!(parse_scores("a b c"), Err(EvalError::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn score_lines_round_trip(scores in prop::collection::vec(-1e6f64..1e6, 1..10)) {
            let trials: Vec<TrialRecord> = (0..scores.len())
                .map(|i| TrialRecord { speaker: format!("s{}", i % 3), utterance: format!("u{i}"), prompt: "123".into(), category: Category::Tc })
                .collect();
            let text: String = trials.iter().zip(&scores).map(|(t, s)| format_score(t, *s)).collect();
            let back = parse_scores(&text).unwrap();
            for (t, s) in trials.iter().zip(&scores) {
                prop_assert_eq!(back[&(t.speaker.clone(), t.utterance.clone(), t.prompt.clone())], *s);
            }
        }

        #[test]
        fn monotone_transform_invariance(t in prop::collection::vec(-5.0f64..5.0, 1..20), n in prop::collection::vec(-5.0f64..5.0, 1..20)) {
            let a = ScoreSet::from_parts(&t, &n).unwrap();
            let tt: Vec<f64> = t.iter().map(|x| (x * 0.7).exp()).collect();
            let nn: Vec<f64> = n.iter().map(|x| (x * 0.7).exp()).collect();
            let b = ScoreSet::from_parts(&tt, &nn).unwrap();
            prop_assert_eq!(compute_eer(&a).unwrap(), compute_eer(&b).unwrap());
            prop_assert_eq!(compute_min_dcf(&a, &DcfParams::SRE10).unwrap(), compute_min_dcf(&b, &DcfParams::SRE10).unwrap());
            let dcf = compute_min_dcf(&a, &DcfParams::SRE08).unwrap();
            prop_assert!((0.0..=1.0).contains(&dcf));
            let eer = compute_eer(&a).unwrap();
            prop_assert!((0.0..=1.0).contains(&eer));
        }
    }
}
