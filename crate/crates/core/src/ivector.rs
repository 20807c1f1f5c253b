//! Total-variability subspace training and i-vector extraction.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::pgmm::{Background, SuffStats};
use crate::util::chunked_reduce;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, PartialEq)]
pub enum IvectorError {
    #[error("rank {rank} needs at least as many utterances, got {utterances}")]
    RankTooLarge { rank: usize, utterances: usize },
    #[error("statistics were accumulated against a different background")]
    InconsistentBackground,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot length-normalize a zero vector")]
    ZeroVector,
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
    #[error("precision matrix is not positive definite")]
    NotPositiveDefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TvConfig {
    pub rank: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self { rank: 400, iterations: 5, seed: 0 }
    }
}

/// Total-variability matrix anchored to a background mixture set. Row
/// block `m` (rows `m*D..(m+1)*D`) belongs to mixture `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvModel {
    t: DMatrix<f64>,
    background: Background,
}

/// Per-mixture products reused by every utterance of one pass.
struct Precomputed {
    /// `T_m' Sigma_m^-1`, R x D per mixture.
    t_sinv: Vec<DMatrix<f64>>,
    /// `T_m' Sigma_m^-1 T_m`, R x R per mixture.
    p: Vec<DMatrix<f64>>,
}

impl TvModel {
    pub fn new(t: DMatrix<f64>, background: Background) -> Result<Self, IvectorError> {
        if t.nrows() != background.num_mixtures() * background.dim() || t.ncols() == 0 {
            return Err(IvectorError::ShapeMismatch(format!(
                "T is {} x {}, background has {} x {} supervector rows",
                t.nrows(),
                t.ncols(),
                background.num_mixtures(),
                background.dim()
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(IvectorError::ShapeMismatch("T has non-finite entries".into()));
        }
        Ok(Self { t, background })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.t
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    fn precompute(&self) -> Precomputed {
        let (m, d) = (self.background.num_mixtures(), self.background.dim());
        let vars = self.background.variances();
        let mut t_sinv = Vec::with_capacity(m);
        let mut p = Vec::with_capacity(m);
        for k in 0..m {
            let tm = self.t.rows(k * d, d);
            let mut ts = tm.transpose();
            for j in 0..d {
                ts.column_mut(j).scale_mut(1.0 / vars[[k, j]]);
            }
            p.push(&ts * tm);
            t_sinv.push(ts);
        }
        Precomputed { t_sinv, p }
    }

    fn check_stats(&self, stats: &SuffStats) -> Result<(), IvectorError> {
        if stats.background_id != self.background.id() {
            return Err(IvectorError::InconsistentBackground);
        }
        if stats.num_mixtures() != self.background.num_mixtures() || stats.dim() != self.background.dim() {
            return Err(IvectorError::ShapeMismatch(format!(
                "statistics {} x {}, model {} x {}",
                stats.num_mixtures(),
                stats.dim(),
                self.background.num_mixtures(),
                self.background.dim()
            )));
        }
        Ok(())
    }
}

/// Precision `L = I + sum_m N_m T_m' S_m^-1 T_m` and linear term
/// `b = sum_m T_m' S_m^-1 F_m` of one utterance's latent posterior.
fn posterior_terms(pre: &Precomputed, stats: &SuffStats, rank: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut l = DMatrix::identity(rank, rank);
    let mut b = DVector::zeros(rank);
    let d = stats.dim();
    for (m, &n) in stats.n.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        l += &pre.p[m] * n;
        let f = DVector::from_iterator(d, stats.f.row(m).iter().copied());
        b += &pre.t_sinv[m] * f;
    }
    (l, b)
}

/// Latent-factor posterior mean of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub values: DVector<f64>,
    pub normalized: bool,
}

impl IVector {
    pub fn new(values: DVector<f64>) -> Self {
        Self { values, normalized: false }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Solves `(I + T' S^-1 N T) w = T' S^-1 F` for one utterance.
pub fn extract_ivector(stats: &SuffStats, tv: &TvModel) -> Result<IVector, IvectorError> {
    tv.check_stats(stats)?;
    let pre = tv.precompute();
    extract_with(&pre, stats, tv.rank())
}

/// Extracts many utterances, sharing the per-mixture products.
pub fn extract_ivectors(stats: &[SuffStats], tv: &TvModel) -> Result<Vec<IVector>, IvectorError> {
    for s in stats {
        tv.check_stats(s)?;
    }
    let pre = tv.precompute();
    use rayon::prelude::*;
    stats.par_iter().map(|s| extract_with(&pre, s, tv.rank())).collect()
}

fn extract_with(pre: &Precomputed, stats: &SuffStats, rank: usize) -> Result<IVector, IvectorError> {
    let (l, b) = posterior_terms(pre, stats, rank);
    let chol = l.cholesky().ok_or(IvectorError::NotPositiveDefinite)?;
    Ok(IVector::new(chol.solve(&b)))
}

/// Scales `v` to unit Euclidean length.
pub fn length_normalize(v: &IVector) -> Result<IVector, IvectorError> {
    let norm = v.values.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(IvectorError::ZeroVector);
    }
    Ok(IVector { values: &v.values / norm, normalized: true })
}

struct TvAccumulator {
    /// `sum_u F_m E[w]'`, stacked (M*D) x R.
    c: DMatrix<f64>,
    /// `sum_u N_m E[ww']`, R x R per mixture.
    a: Vec<DMatrix<f64>>,
    objective: f64,
}

/// Marginal log-likelihood of every utterance given the current model plus
/// the sufficient sums for the next `T`.
fn tv_e_step(tv: &TvModel, pre: &Precomputed, stats: &[SuffStats]) -> Result<TvAccumulator, IvectorError> {
    let (m, d, r) = (tv.background.num_mixtures(), tv.background.dim(), tv.rank());
    let vars = tv.background.variances();
    let log_det_sigma: Vec<f64> = (0..m).map(|k| vars.row(k).iter().map(|v| v.ln()).sum()).collect();
    let empty = || TvAccumulator { c: DMatrix::zeros(m * d, r), a: vec![DMatrix::zeros(r, r); m], objective: 0.0 };
    let result = chunked_reduce(
        stats.len(),
        8,
        |range| -> Result<TvAccumulator, IvectorError> {
            let mut acc = empty();
            for u in range {
                let st = &stats[u];
                let (l, b) = posterior_terms(pre, st, r);
                let chol = l.cholesky().ok_or(IvectorError::NotPositiveDefinite)?;
                let w = chol.solve(&b);
                let l_inv = chol.inverse();
                let log_det_l: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let mut obj = -0.5 * log_det_l + 0.5 * b.dot(&w);
                let www = &l_inv + &w * w.transpose();
                for k in 0..m {
                    let n = st.n[k];
                    if n == 0.0 {
                        continue;
                    }
                    let quad: f64 = (0..d).map(|j| st.s[[k, j]] / vars[[k, j]]).sum();
                    obj += -0.5 * n * (d as f64 * LN_2PI + log_det_sigma[k]) - 0.5 * quad;
                    acc.a[k] += &www * n;
                    for j in 0..d {
                        let fj = st.f[[k, j]];
                        if fj != 0.0 {
                            for (r, wr) in w.iter().enumerate() {
                                acc.c[(k * d + j, r)] += fj * wr;
                            }
                        }
                    }
                }
                acc.objective += obj;
            }
            Ok(acc)
        },
        |a, b| {
            if let (Ok(a), Ok(b)) = (a.as_mut(), b.as_ref()) {
                a.c += &b.c;
                for (x, y) in a.a.iter_mut().zip(&b.a) {
                    *x += y;
                }
                a.objective += b.objective;
            } else if let Err(e) = b {
                if a.is_ok() {
                    *a = Err(e);
                }
            }
        },
    );
    result.unwrap_or_else(|| Ok(empty()))
}

/// Total marginal log-likelihood of `stats` under `tv`.
pub fn tv_objective(tv: &TvModel, stats: &[SuffStats]) -> Result<f64, IvectorError> {
    for s in stats {
        tv.check_stats(s)?;
    }
    Ok(tv_e_step(tv, &tv.precompute(), stats)?.objective)
}

/// EM training of `T`. Returns the model and the marginal log-likelihood
/// before each iteration plus after the last.
pub fn train_tv(stats: &[SuffStats], background: &Background, cfg: &TvConfig) -> Result<(TvModel, Vec<f64>), IvectorError> {
    if cfg.rank == 0 {
        return Err(IvectorError::BadConfig("rank must be at least 1"));
    }
    if stats.len() < cfg.rank {
        return Err(IvectorError::RankTooLarge { rank: cfg.rank, utterances: stats.len() });
    }
    let (m, d) = (background.num_mixtures(), background.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = DMatrix::from_fn(m * d, cfg.rank, |_, _| 0.1 * rng.sample::<f64, _>(StandardNormal));
    let mut tv = TvModel::new(t, background.clone())?;
    for s in stats {
        tv.check_stats(s)?;
    }
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    for it in 0..cfg.iterations {
        let acc = tv_e_step(&tv, &tv.precompute(), stats)?;
        trace.push(acc.objective);
        log::info!("tv iteration {it}: objective {:.4}", acc.objective);
        let mut next = DMatrix::zeros(m * d, cfg.rank);
        for k in 0..m {
            let a = &acc.a[k];
            if a.iter().all(|v| *v == 0.0) {
                // no utterance touched this mixture; keep its block
                next.rows_mut(k * d, d).copy_from(&tv.t.rows(k * d, d));
                continue;
            }
            let chol = a.clone().cholesky().ok_or(IvectorError::NotPositiveDefinite)?;
            // T_m = C_m A_m^-1  <=>  A_m T_m' = C_m'
            let sol = chol.solve(&acc.c.rows(k * d, d).transpose());
            next.rows_mut(k * d, d).copy_from(&sol.transpose());
        }
        tv = TvModel::new(next, background.clone())?;
    }
    trace.push(tv_objective(&tv, stats)?);
    Ok((tv, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2};

    fn tiny_background(m: usize, d: usize) -> Background {
        let means = Array2::from_shape_fn((m, d), |(i, j)| i as f64 - j as f64 * 0.5);
        let vars = Array2::from_shape_fn((m, d), |(i, j)| 0.5 + 0.25 * ((i + 2 * j) % 3) as f64);
        Background::new(means, vars).unwrap()
    }

    #[test]
    fn scalar_case() {
        let bg = Background::new(Array2::zeros((1, 1)), Array2::ones((1, 1))).unwrap();
        let tv = TvModel::new(DMatrix::from_element(1, 1, 2.0), bg.clone()).unwrap();
        let mut st = SuffStats::zeros(1, 1, bg.id());
        st.n[0] = 3.0;
        st.f[[0, 0]] = 6.0;
        let w = extract_ivector(&st, &tv).unwrap();
        assert!((w.values[0] - 12.0 / 13.0).abs() < 1e-12);
    }

    #[test]
    fn zero_stats_and_linearity() {
        let bg = tiny_background(3, 2);
        let t = DMatrix::from_fn(6, 2, |i, j| ((i * 3 + j * 7) % 5) as f64 * 0.3 - 0.4);
        let tv = TvModel::new(t, bg.clone()).unwrap();
        let zero = SuffStats::zeros(3, 2, bg.id());
        assert!(extract_ivector(&zero, &tv).unwrap().values.iter().all(|v| *v == 0.0));
        let mut st = zero.clone();
        st.n = Array1::from(vec![2.0, 0.5, 4.0]);
        st.f = Array2::from_shape_fn((3, 2), |(i, j)| i as f64 - j as f64 + 0.3);
        let w1 = extract_ivector(&st, &tv).unwrap();
        st.f *= 2.0;
        let w2 = extract_ivector(&st, &tv).unwrap();
        assert!((&w2.values - &w1.values * 2.0).norm() < 1e-12);
    }

    #[test]
    fn length_norm() {
        let v = length_normalize(&IVector::new(DVector::from_vec(vec![3.0, 4.0]))).unwrap();
        assert_eq!(v.values.as_slice(), &[0.6, 0.8]);
        assert!(v.normalized);
        let again = length_normalize(&v).unwrap();
        assert_eq!(again.values, v.values);
        assert_eq!(length_normalize(&IVector::new(DVector::zeros(2))), Err(IvectorError::ZeroVector));
    }

    #[test]
    fn rank_and_background_checks() {
        let bg = tiny_background(2, 2);
        let stats: Vec<SuffStats> = (0..10).map(|_| SuffStats::zeros(2, 2, bg.id())).collect();
        let cfg = TvConfig { rank: 20, iterations: 1, seed: 1 };
        assert_eq!(train_tv(&stats, &bg, &cfg).unwrap_err(), IvectorError::RankTooLarge { rank: 20, utterances: 10 });
        let mut mixed = stats.clone();
        mixed[3].background_id = "other".into();
        let cfg = TvConfig { rank: 2, iterations: 1, seed: 1 };
        assert_eq!(train_tv(&mixed, &bg, &cfg).unwrap_err(), IvectorError::InconsistentBackground);
    }
}
