//! Diagonal-covariance Gaussian mixtures.
//!
//! Training grows the mixture from a single closed-form Gaussian by
//! repeated splitting, running a fixed number of EM iterations at every
//! size. E-step accumulators are plain sums and merge across data shards.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::util::{chunked_reduce, CHUNK};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
/// Soft count below which a component is considered empty.
pub const EMPTY_COMPONENT: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("{samples} samples cannot train {components} components")]
    TooFewSamples { samples: usize, components: usize },
    #[error("data has zero variance in dimension {dim}")]
    DegenerateData { dim: usize },
    #[error("dimension mismatch: model has {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("invalid mixture parameters: {0}")]
    InvalidParameters(String),
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
}

#[derive(Debug, Clone)]
pub struct DiagGmm {
    weights: Array1<f64>,
    means: Array2<f64>,
    variances: Array2<f64>,
    inv_var: Array2<f64>,
    /// `log w_c - 0.5 (D log 2pi + sum_d log var_cd)`
    log_norm: Array1<f64>,
}

impl PartialEq for DiagGmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.variances == other.variances
    }
}

impl DiagGmm {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self, GmmError> {
        let c = weights.len();
        if c == 0 || means.nrows() != c || variances.nrows() != c || means.ncols() != variances.ncols() || means.ncols() == 0 {
            return Err(GmmError::InvalidParameters(format!(
                "shape mismatch: {} weights, means {:?}, variances {:?}",
                c,
                means.dim(),
                variances.dim()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(GmmError::InvalidParameters("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidParameters(format!("weights sum to {total}")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(GmmError::InvalidParameters("non-finite mean".into()));
        }
        if variances.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(GmmError::InvalidParameters("variances must be finite and positive".into()));
        }
        let means = means.as_standard_layout().to_owned();
        let variances = variances.as_standard_layout().to_owned();
        let inv_var = variances.mapv(|v| 1.0 / v);
        let d = means.ncols() as f64;
        let log_norm = Array1::from_iter(
            variances
                .outer_iter()
                .zip(weights.iter())
                .map(|(v, &w)| w.ln() - 0.5 * (d * LN_2PI + v.iter().map(|x| x.ln()).sum::<f64>())),
        );
        Ok(Self { weights, means, variances, inv_var, log_norm })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GmmError> {
        if x.len() != self.dim() {
            return Err(GmmError::DimMismatch { expected: self.dim(), actual: x.len() });
        }
        Ok(())
    }

    /// `log w_c + log N(x; mu_c, Sigma_c)` for every component.
    pub(crate) fn weighted_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        let means = self.means.as_slice().expect("standard layout");
        let inv_var = self.inv_var.as_slice().expect("standard layout");
        for (c, o) in out.iter_mut().enumerate() {
            let mu = &means[c * d..(c + 1) * d];
            let iv = &inv_var[c * d..(c + 1) * d];
            let mut q = 0.0;
            for k in 0..d {
                let diff = x[k] - mu[k];
                q += diff * diff * iv[k];
            }
            *o = self.log_norm[c] - 0.5 * q;
        }
    }

    /// Writes component posteriors into `out` and returns `log p(x)`.
    pub(crate) fn posteriors_into(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.weighted_log_densities(x, out);
        let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for o in out.iter_mut() {
            *o = (*o - max).exp();
            sum += *o;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
        max + sum.ln()
    }

    pub(crate) fn log_likelihood_unchecked(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.weighted_log_densities(x, scratch);
        crate::util::log_sum_exp(scratch)
    }

    /// `log sum_c w_c N(x; mu_c, Sigma_c)`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64, GmmError> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.num_components()];
        Ok(self.log_likelihood_unchecked(x, &mut scratch))
    }

    /// `P(c | x)`, computed in the log domain with max subtraction.
    pub fn component_posteriors(&self, x: &[f64]) -> Result<Vec<f64>, GmmError> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.num_components()];
        self.posteriors_into(x, &mut out);
        Ok(out)
    }

    /// Unweighted `log N(x; mean, Sigma_c)` using component `c`'s variances.
    pub fn log_gaussian_with_mean(&self, c: usize, mean: &[f64], x: &[f64]) -> f64 {
        let d = self.dim();
        let var = self.variances.row(c);
        let mut acc = -0.5 * d as f64 * LN_2PI;
        for k in 0..d {
            let diff = x[k] - mean[k];
            acc -= 0.5 * (var[k].ln() + diff * diff / var[k]);
        }
        acc
    }

    /// Doubles the component count: each component becomes a pair with
    /// means shifted by +/-0.2 standard deviations and halved weights.
    pub fn split_components(&self) -> DiagGmm {
        let (c, d) = self.means.dim();
        let mut weights = Array1::zeros(2 * c);
        let mut means = Array2::zeros((2 * c, d));
        let mut variances = Array2::zeros((2 * c, d));
        for k in 0..c {
            let sd = self.variances.row(k).mapv(f64::sqrt);
            for (j, sign) in [1.0, -1.0].into_iter().enumerate() {
                let idx = 2 * k + j;
                weights[idx] = self.weights[k] / 2.0;
                means.row_mut(idx).assign(&(&self.means.row(k) + &(&sd * (0.2 * sign))));
                variances.row_mut(idx).assign(&self.variances.row(k));
            }
        }
        let total = weights.sum();
        weights.mapv_inplace(|w| w / total);
        DiagGmm::new(weights, means, variances).expect("split of a valid model is valid")
    }

    /// Fresh accumulator sized for this model.
    pub fn accumulator(&self) -> GmmAccumulator {
        GmmAccumulator::new(self.num_components(), self.dim())
    }

    /// M-step from accumulated statistics. Variances are floored; empty
    /// components are re-seeded at the worst-explained frame so the
    /// component count stays fixed. Returns the model and the number of
    /// re-seeded components.
    pub fn m_step(&self, acc: &GmmAccumulator, floor: &VarianceFloor) -> (DiagGmm, usize) {
        let (c, d) = self.means.dim();
        let total: f64 = acc.n.iter().sum();
        if total <= 0.0 {
            return (self.clone(), 0);
        }
        let mut weights = Array1::zeros(c);
        let mut means = Array2::zeros((c, d));
        let mut variances = Array2::zeros((c, d));
        let mut reseeded = 0;
        for k in 0..c {
            let n = acc.n[k];
            if n < EMPTY_COMPONENT {
                let anchor = acc.worst.as_ref().map(|(_, x)| x.clone()).unwrap_or_else(|| self.means.row(k).to_vec());
                for j in 0..d {
                    let sd = floor.global_var[j].sqrt();
                    means[[k, j]] = anchor[j] + 0.2 * sd * reseeded as f64;
                    variances[[k, j]] = floor.global_var[j].max(floor.floor[j]);
                }
                // one frame's worth of mass
                weights[k] = 1.0 / acc.frames.max(1) as f64;
                reseeded += 1;
                continue;
            }
            weights[k] = n / total;
            for j in 0..d {
                let mean = acc.sx[[k, j]] / n;
                let var = (acc.sxx[[k, j]] / n - mean * mean).max(floor.floor[j]);
                means[[k, j]] = mean;
                variances[[k, j]] = var;
            }
        }
        let wsum = weights.sum();
        weights.mapv_inplace(|w| w / wsum);
        (DiagGmm::new(weights, means, variances).expect("m-step yields valid parameters"), reseeded)
    }
}

/// Per-dimension variance floor plus the global variance it derives from.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceFloor {
    pub floor: Vec<f64>,
    pub global_var: Vec<f64>,
}

impl VarianceFloor {
    /// `fraction` times the population variance of `data`, per dimension.
    pub fn from_data(data: &Array2<f64>, fraction: f64) -> Result<Self, GmmError> {
        let (_, global_var) = mean_and_variance(data);
        if let Some(dim) = global_var.iter().position(|&v| v <= 0.0) {
            return Err(GmmError::DegenerateData { dim });
        }
        Ok(Self::from_global(global_var.to_vec(), fraction))
    }

    pub fn from_global(global_var: Vec<f64>, fraction: f64) -> Self {
        Self { floor: global_var.iter().map(|v| v * fraction).collect(), global_var }
    }
}

pub(crate) fn mean_and_variance(data: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = data.nrows() as f64;
    let mean = data.sum_axis(ndarray::Axis(0)) / n;
    let mut var = Array1::zeros(data.ncols());
    for row in data.outer_iter() {
        for (j, x) in row.iter().enumerate() {
            let diff = x - mean[j];
            var[j] += diff * diff;
        }
    }
    var /= n;
    (mean, var)
}

/// Zeroth, first and second order sums for one EM pass.
#[derive(Debug, Clone)]
pub struct GmmAccumulator {
    pub n: Vec<f64>,
    pub sx: Array2<f64>,
    pub sxx: Array2<f64>,
    /// Weighted data log-likelihood under the model used for the E-step.
    pub log_likelihood: f64,
    pub frames: usize,
    worst: Option<(f64, Vec<f64>)>,
}

impl GmmAccumulator {
    pub fn new(components: usize, dim: usize) -> Self {
        Self {
            n: vec![0.0; components],
            sx: Array2::zeros((components, dim)),
            sxx: Array2::zeros((components, dim)),
            log_likelihood: 0.0,
            frames: 0,
            worst: None,
        }
    }

    /// Adds frame `x` with occupation `weight`; returns `log p(x)`.
    pub fn add_frame(&mut self, gmm: &DiagGmm, x: &[f64], weight: f64, scratch: &mut [f64]) -> f64 {
        let ll = gmm.posteriors_into(x, scratch);
        self.frames += 1;
        self.log_likelihood += weight * ll;
        if self.worst.as_ref().map_or(true, |(w, _)| ll < *w) {
            self.worst = Some((ll, x.to_vec()));
        }
        let d = x.len();
        let sx = self.sx.as_slice_mut().expect("standard layout");
        let sxx = self.sxx.as_slice_mut().expect("standard layout");
        for (c, &r) in scratch.iter().enumerate() {
            let g = weight * r;
            if g == 0.0 {
                continue;
            }
            self.n[c] += g;
            let row = c * d;
            for k in 0..d {
                sx[row + k] += g * x[k];
                sxx[row + k] += g * x[k] * x[k];
            }
        }
        ll
    }

    pub fn merge(&mut self, other: GmmAccumulator) {
        for (a, b) in self.n.iter_mut().zip(other.n) {
            *a += b;
        }
        self.sx += &other.sx;
        self.sxx += &other.sxx;
        self.log_likelihood += other.log_likelihood;
        self.frames += other.frames;
        if let Some((w, x)) = other.worst {
            if self.worst.as_ref().map_or(true, |(cur, _)| w < *cur) {
                self.worst = Some((w, x));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmTrainConfig {
    pub target_components: usize,
    /// EM iterations at every mixture size.
    pub em_iterations: usize,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub variance_floor: f64,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self { target_components: 512, em_iterations: 10, variance_floor: 1e-3 }
    }
}

/// Log-likelihood history of one mixture size.
#[derive(Debug, Clone, PartialEq)]
pub struct EmStage {
    pub components: usize,
    /// Total data log-likelihood before each iteration plus after the last.
    pub log_likelihoods: Vec<f64>,
}

/// One E-step over all rows of `data` with unit frame weights.
pub fn accumulate(gmm: &DiagGmm, data: &Array2<f64>) -> GmmAccumulator {
    let d = data.ncols();
    let rows = data.as_slice().expect("standard layout");
    chunked_reduce(
        data.nrows(),
        CHUNK * 4,
        |range| {
            let mut acc = gmm.accumulator();
            let mut scratch = vec![0.0; gmm.num_components()];
            for t in range {
                acc.add_frame(gmm, &rows[t * d..(t + 1) * d], 1.0, &mut scratch);
            }
            acc
        },
        |a, b| a.merge(b),
    )
    .unwrap_or_else(|| gmm.accumulator())
}

/// Total log-likelihood of `data`.
pub fn total_log_likelihood(gmm: &DiagGmm, data: &Array2<f64>) -> f64 {
    accumulate(gmm, data).log_likelihood
}

/// Grows a mixture to `cfg.target_components` by split/EM.
pub fn train_em(data: &Array2<f64>, cfg: &GmmTrainConfig) -> Result<DiagGmm, GmmError> {
    train_em_traced(data, cfg).map(|(g, _)| g)
}

/// [`train_em`] that also returns the per-iteration log-likelihoods.
pub fn train_em_traced(data: &Array2<f64>, cfg: &GmmTrainConfig) -> Result<(DiagGmm, Vec<EmStage>), GmmError> {
    if data.ncols() == 0 {
        return Err(GmmError::BadConfig("data has no dimensions"));
    }
    let floor = VarianceFloor::from_data(data, cfg.variance_floor)?;
    train_em_with_floor(data, cfg, &floor)
}

/// [`train_em_traced`] with an externally supplied variance floor (used
/// when many per-state mixtures share one corpus-level floor).
pub fn train_em_with_floor(
    data: &Array2<f64>,
    cfg: &GmmTrainConfig,
    floor: &VarianceFloor,
) -> Result<(DiagGmm, Vec<EmStage>), GmmError> {
    let target = cfg.target_components;
    if target == 0 || !target.is_power_of_two() {
        return Err(GmmError::BadConfig("target_components must be a power of two"));
    }
    if data.nrows() < target {
        return Err(GmmError::TooFewSamples { samples: data.nrows(), components: target });
    }
    if data.ncols() != floor.floor.len() {
        return Err(GmmError::DimMismatch { expected: floor.floor.len(), actual: data.ncols() });
    }
    let data = data.as_standard_layout().to_owned();
    let (mean, var) = mean_and_variance(&data);
    let var = Array1::from_iter(var.iter().zip(&floor.floor).map(|(v, f)| v.max(*f)));
    let d = data.ncols();
    let mut gmm = DiagGmm::new(
        Array1::ones(1),
        mean.into_shape_with_order((1, d)).expect("one row"),
        var.into_shape_with_order((1, d)).expect("one row"),
    )?;
    let mut stages = vec![EmStage { components: 1, log_likelihoods: vec![total_log_likelihood(&gmm, &data)] }];
    while gmm.num_components() < target {
        gmm = gmm.split_components();
        let mut lls = Vec::with_capacity(cfg.em_iterations + 1);
        for _ in 0..cfg.em_iterations {
            let acc = accumulate(&gmm, &data);
            lls.push(acc.log_likelihood);
            let (next, reseeded) = gmm.m_step(&acc, floor);
            if reseeded > 0 {
                log::debug!("re-seeded {reseeded} empty component(s) at size {}", gmm.num_components());
            }
            gmm = next;
        }
        lls.push(total_log_likelihood(&gmm, &data));
        stages.push(EmStage { components: gmm.num_components(), log_likelihoods: lls });
    }
    Ok((gmm, stages))
}

/// Density of a 1-D normal, used by tests and small oracles.
#[doc(hidden)]
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn bimodal(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let data = Array2::from_shape_fn((n, 1), |(i, _)| {
            let center = if labels[i] == 0 { -5.0 } else { 5.0 };
            center + noise.sample(&mut rng)
        });
        (data, labels)
    }

    #[test]
    fn standard_normal_log_likelihood() {
        let g = DiagGmm::new(array![1.0], array![[0.0]], array![[1.0]]).unwrap();
        assert!((g.log_likelihood(&[0.0]).unwrap() - (-0.918_938_533_204_672_7)).abs() < 1e-12);
        assert!((g.log_likelihood(&[1.0]).unwrap() - (-1.418_938_533_204_672_7)).abs() < 1e-12);
        assert_eq!(g.log_likelihood(&[0.0, 1.0]), Err(GmmError::DimMismatch { expected: 1, actual: 2 }));
    }

    #[test]
    fn three_component_density_sum() {
        let g = DiagGmm::new(array![0.2, 0.5, 0.3], array![[-1.0], [0.5], [3.0]], array![[0.5], [2.0], [1.5]]).unwrap();
        for x in [-2.0, 0.0, 1.3, 4.0] {
            let direct = 0.2 * normal_pdf(x, -1.0, 0.5) + 0.5 * normal_pdf(x, 0.5, 2.0) + 0.3 * normal_pdf(x, 3.0, 1.5);
            assert!((g.log_likelihood(&[x]).unwrap() - direct.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_single_symmetric_and_oracle() {
        let one = DiagGmm::new(array![1.0], array![[2.0, 1.0]], array![[1.0, 3.0]]).unwrap();
        assert_eq!(one.component_posteriors(&[7.0, -3.0]).unwrap(), vec![1.0]);

        let twin = DiagGmm::new(array![0.5, 0.5], array![[1.0], [1.0]], array![[2.0], [2.0]]).unwrap();
        assert_eq!(twin.component_posteriors(&[0.3]).unwrap(), vec![0.5, 0.5]);

        let g = DiagGmm::new(array![0.3, 0.7], array![[0.0], [2.0]], array![[1.0], [0.5]]).unwrap();
        let x = 0.8;
        let a = 0.3 * normal_pdf(x, 0.0, 1.0);
        let b = 0.7 * normal_pdf(x, 2.0, 0.5);
        let post = g.component_posteriors(&[x]).unwrap();
        assert!((post[0] - a / (a + b)).abs() < 1e-12);
        assert!((post[1] - b / (a + b)).abs() < 1e-12);
    }

    #[test]
    fn single_component_is_closed_form() {
        let (data, _) = bimodal(101, 7);
        let cfg = GmmTrainConfig { target_components: 1, ..Default::default() };
        let g = train_em(&data, &cfg).unwrap();
        let n = data.nrows() as f64;
        let mean = data.sum() / n;
        let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((g.means()[[0, 0]] - mean).abs() < 1e-12);
        assert!((g.variances()[[0, 0]] - var).abs() < 1e-12);
    }

    #[test]
    fn recovers_two_clusters() {
        let (data, labels) = bimodal(400, 11);
        // a split of one broad Gaussian leaves a near-symmetric start that EM escapes slowly
        let cfg = GmmTrainConfig { target_components: 2, em_iterations: 100, ..Default::default() };
        let g = train_em(&data, &cfg).unwrap();
        let true_means: Vec<f64> = (0..2)
            .map(|k| {
                let xs: Vec<f64> = data.column(0).iter().zip(&labels).filter(|(_, &l)| l == k).map(|(x, _)| *x).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect();
        for m in g.means().column(0) {
            assert!(true_means.iter().any(|t| (m - t).abs() < 0.3), "mean {m} vs {true_means:?}");
        }
    }

    #[test]
    fn split_halves_weights_and_one_em_pass_improves() {
        let g = DiagGmm::new(array![1.0], array![[0.0]], array![[26.0]]).unwrap();
        let s = g.split_components();
        assert_eq!(s.weights().to_vec(), vec![0.5, 0.5]);
        assert!((s.weights().sum() - 1.0).abs() < 1e-15);

        let (data, _) = bimodal(400, 3);
        let floor = VarianceFloor::from_data(&data, 1e-3).unwrap();
        let (fit, _) = train_em_with_floor(&data, &GmmTrainConfig { target_components: 1, ..Default::default() }, &floor).unwrap();
        let split = fit.split_components();
        let before = total_log_likelihood(&split, &data);
        let (after_model, _) = split.m_step(&accumulate(&split, &data), &floor);
        assert!(total_log_likelihood(&after_model, &data) > before);
    }

    #[test]
    fn errors() {
        let (data, _) = bimodal(4, 1);
        let cfg = GmmTrainConfig { target_components: 8, ..Default::default() };
        assert_eq!(train_em(&data, &cfg), Err(GmmError::TooFewSamples { samples: 4, components: 8 }));
        let flat = Array2::from_elem((10, 2), 3.0);
        assert_eq!(train_em(&flat, &GmmTrainConfig { target_components: 2, ..Default::default() }), Err(GmmError::DegenerateData { dim: 0 }));
    }

    #[test]
    fn em_monotone_floor_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let data = Array2::from_shape_fn((600, 3), |(i, j)| (i % 3) as f64 * 2.0 * (j as f64 + 1.0) + noise.sample(&mut rng));
        let cfg = GmmTrainConfig { target_components: 8, em_iterations: 6, variance_floor: 1e-3 };
        let (g, stages) = train_em_traced(&data, &cfg).unwrap();
        for stage in &stages {
            for w in stage.log_likelihoods.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{stage:?}");
            }
        }
        let floor = VarianceFloor::from_data(&data, 1e-3).unwrap();
        for row in g.variances().outer_iter() {
            for (v, f) in row.iter().zip(&floor.floor) {
                assert!(v >= f);
            }
        }
        let (g2, _) = train_em_traced(&data, &cfg).unwrap();
        assert_eq!(g, g2);
    }

    proptest! {
        #[test]
        fn posteriors_normalized(x in proptest::collection::vec(-20.0f64..20.0, 2), w in 0.05f64..0.95) {
            let g = DiagGmm::new(array![w, 1.0 - w], array![[0.0, 1.0], [3.0, -2.0]], array![[0.5, 2.0], [1.0, 0.1]]).unwrap();
            let p = g.component_posteriors(&x).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 0.0));
        }
    }
}
