//! Mean-only MAP speaker adaptation and frame-level LLR scoring.

use ndarray::Array2;
use thiserror::Error;

use crate::features::FeatureSequence;
use crate::pgmm::{accumulate_stats, Background, MixturePosteriors, PgmmError, SuffStats};

/// Relevance factor used unless configured otherwise.
pub const DEFAULT_RELEVANCE: f64 = 5.0;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("relevance factor must be positive, got {0}")]
    BadRelevance(f64),
    #[error("no frame carries any retained posterior mass")]
    NoRetainedFrames,
    #[error("enrollment needs at least one utterance")]
    EmptyEnrollment,
    #[error("speaker model was adapted from background {model}, scoring against {background}")]
    BackgroundMismatch { model: String, background: String },
    #[error(transparent)]
    Stats(#[from] PgmmError),
}

/// Adapted means of one speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerModel {
    pub means: Array2<f64>,
    pub background_id: String,
    pub relevance: f64,
}

/// `mu_hat = F / (N + r) + mu` for every mixture.
pub fn map_adapt(background: &Background, stats: &SuffStats, r: f64) -> Result<SpeakerModel, MapError> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(MapError::BadRelevance(r));
    }
    if stats.num_mixtures() != background.num_mixtures() || stats.dim() != background.dim() {
        return Err(MapError::ShapeMismatch(format!(
            "statistics {} x {}, background {} x {}",
            stats.num_mixtures(),
            stats.dim(),
            background.num_mixtures(),
            background.dim()
        )));
    }
    if stats.background_id != background.id() {
        return Err(MapError::BackgroundMismatch { model: stats.background_id.clone(), background: background.id().into() });
    }
    let mut means = background.means().clone();
    for (m, mut row) in means.outer_iter_mut().enumerate() {
        let alpha = 1.0 / (stats.n[m] + r);
        for (j, v) in row.iter_mut().enumerate() {
            *v += alpha * stats.f[[m, j]];
        }
    }
    Ok(SpeakerModel { means, background_id: background.id().to_string(), relevance: r })
}

/// Merges the statistics of all enrollment utterances, then adapts once.
pub fn enroll(background: &Background, utterances: &[(&MixturePosteriors, &FeatureSequence)], r: f64) -> Result<SpeakerModel, MapError> {
    let Some(((g0, f0), rest)) = utterances.split_first() else {
        return Err(MapError::EmptyEnrollment);
    };
    let mut stats = accumulate_stats(g0, f0, background)?;
    for (g, f) in rest {
        stats.merge(&accumulate_stats(g, f, background)?)?;
    }
    map_adapt(background, &stats, r)
}

/// Posterior-weighted log-likelihood ratio of speaker model against
/// background, averaged over the frames that keep any mass.
pub fn llr_score(speaker: &SpeakerModel, background: &Background, gammas: &MixturePosteriors, feats: &FeatureSequence) -> Result<f64, MapError> {
    if speaker.means.dim() != background.means().dim() {
        return Err(MapError::ShapeMismatch(format!("speaker {:?}, background {:?}", speaker.means.dim(), background.means().dim())));
    }
    if speaker.background_id != background.id() {
        return Err(MapError::BackgroundMismatch { model: speaker.background_id.clone(), background: background.id().into() });
    }
    if gammas.num_mixtures() != background.num_mixtures() || gammas.num_frames() != feats.num_frames() || feats.dim() != background.dim() {
        return Err(MapError::ShapeMismatch(format!(
            "posteriors {} x {}, features {} x {}",
            gammas.num_frames(),
            gammas.num_mixtures(),
            feats.num_frames(),
            feats.dim()
        )));
    }
    let mut total = 0.0;
    let mut retained = 0usize;
    for (t, row) in gammas.frames().iter().enumerate() {
        if row.is_empty() {
            continue;
        }
        retained += 1;
        let x = feats.frame(t);
        for &(m, g) in row {
            let m = m as usize;
            let spk = speaker.means.row(m);
            let bg = background.means().row(m);
            let lr = background.log_density(m, spk.as_slice().expect("row-major"), x)
                - background.log_density(m, bg.as_slice().expect("row-major"), x);
            total += g * lr;
        }
    }
    if retained == 0 {
        return Err(MapError::NoRetainedFrames);
    }
    Ok(total / retained as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use crate::pgmm::PosteriorSource;
    use ndarray::Array1;

    fn bg() -> Background {
        Background::new(Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 2.0, -1.0]).unwrap(), Array2::from_elem((2, 2), 1.5)).unwrap()
    }

    fn stats(bg: &Background, n: [f64; 2], f: [[f64; 2]; 2]) -> SuffStats {
        let mut s = SuffStats::zeros(2, 2, bg.id());
        s.n = Array1::from(n.to_vec());
        s.f = Array2::from_shape_vec((2, 2), f.concat()).unwrap();
        s
    }

    #[test]
    fn zero_count_keeps_prior() {
        let b = bg();
        let m = map_adapt(&b, &SuffStats::zeros(2, 2, b.id()), DEFAULT_RELEVANCE).unwrap();
        assert_eq!(&m.means, b.means());
    }

    #[test]
    fn hand_case_halfway() {
        let b = bg();
        // N = 5, sample mean xbar = mu + (3, -2)
        let m = map_adapt(&b, &stats(&b, [5.0, 0.0], [[15.0, -10.0], [0.0, 0.0]]), 5.0).unwrap();
        assert!((m.means[[0, 0]] - 1.5).abs() < 1e-12);
        assert!((m.means[[0, 1]] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn large_count_reaches_sample_mean() {
        let b = bg();
        let n = 1e6;
        let m = map_adapt(&b, &stats(&b, [n, n], [[n * 0.7, n * -0.4], [n * 2.0, 0.0]]), 5.0).unwrap();
        assert!((m.means[[0, 0]] - 0.7).abs() < 1e-4);
        assert!((m.means[[1, 0]] - 4.0).abs() < 1e-4);
    }

    #[test]
    fn errors() {
        let b = bg();
        assert_eq!(map_adapt(&b, &SuffStats::zeros(3, 2, b.id()), 5.0).unwrap_err().to_string().contains("mismatch"), true);
        assert_eq!(map_adapt(&b, &SuffStats::zeros(2, 2, b.id()), 0.0), Err(MapError::BadRelevance(0.0)));
        assert_eq!(enroll(&b, &[], 5.0), Err(MapError::EmptyEnrollment));
    }

    #[test]
    fn identical_model_scores_zero() {
        let b = bg();
        let spk = map_adapt(&b, &SuffStats::zeros(2, 2, b.id()), 5.0).unwrap();
        let feats = FeatureSequence::new(Array2::from_shape_vec((2, 2), vec![0.3, 0.1, -2.0, 4.0]).unwrap(), FeatureKind::Raw { dim: 2 }).unwrap();
        let g = MixturePosteriors::new(vec![vec![(0, 0.6), (1, 0.4)], vec![(1, 1.0)]], 2, PosteriorSource::Dnn).unwrap();
        assert_eq!(llr_score(&spk, &b, &g, &feats).unwrap(), 0.0);
        let none = MixturePosteriors::new(vec![vec![], vec![]], 2, PosteriorSource::Dnn).unwrap();
        assert_eq!(llr_score(&spk, &b, &none, &feats), Err(MapError::NoRetainedFrames));
    }
}
