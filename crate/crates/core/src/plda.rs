//! LDA, length normalization and two-covariance PLDA scoring.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

use crate::ivector::{length_normalize, IVector, IvectorError};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, PartialEq)]
pub enum PldaError {
    #[error("need at least 2 speakers with at least 2 vectors each, got {speakers} usable speakers")]
    InsufficientSpeakers { speakers: usize },
    #[error("LDA dimension {dim} must be in 1..={max}")]
    BadLdaDim { dim: usize, max: usize },
    #[error("enrollment needs at least one vector")]
    EmptyEnrollment,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Ivector(#[from] IvectorError),
}

/// Projection, normalization and PLDA parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PldaBackend {
    /// Mean subtracted before projection (input space).
    pub center: DVector<f64>,
    /// R' x R projection.
    pub lda: DMatrix<f64>,
    /// PLDA global mean (projected, normalized space).
    pub mean: DVector<f64>,
    pub between: DMatrix<f64>,
    pub within: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub lda_dim: usize,
    pub plda_iterations: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { lda_dim: 150, plda_iterations: 10 }
    }
}

fn group_by_speaker<'a>(data: &'a [(String, IVector)]) -> Vec<Vec<&'a DVector<f64>>> {
    let mut labels: Vec<&str> = data.iter().map(|(s, _)| s.as_str()).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut groups = vec![Vec::new(); labels.len()];
    for (s, v) in data {
        let k = labels.binary_search(&s.as_str()).expect("label present");
        groups[k].push(&v.values);
    }
    groups
}

/// Leading generalized eigenvectors of between- vs within-speaker scatter,
/// as rows of the returned projection.
pub fn train_lda(groups: &[Vec<&DVector<f64>>], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>), PldaError> {
    let r = groups[0][0].len();
    let n: usize = groups.iter().map(|g| g.len()).sum();
    let mut mean = DVector::zeros(r);
    for v in groups.iter().flatten() {
        mean += *v;
    }
    mean /= n as f64;
    let mut sw = DMatrix::zeros(r, r);
    let mut sb = DMatrix::zeros(r, r);
    for g in groups {
        let mut gm = DVector::zeros(r);
        for v in g {
            gm += *v;
        }
        gm /= g.len() as f64;
        for v in g {
            let d = *v - &gm;
            sw += &d * d.transpose();
        }
        let d = &gm - &mean;
        sb += (&d * d.transpose()) * g.len() as f64;
    }
    sw /= n as f64;
    sb /= n as f64;
    // small ridge keeps the within scatter invertible when R exceeds the data
    let ridge = 1e-6 * (sw.trace() / r as f64).max(1e-12);
    for i in 0..r {
        sw[(i, i)] += ridge;
    }
    let chol = Cholesky::new(sw).ok_or(PldaError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l.clone().try_inverse().ok_or(PldaError::NotPositiveDefinite)?;
    let m = &l_inv * sb * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut proj = DMatrix::zeros(dim, r);
    for (row, &k) in order.iter().take(dim).enumerate() {
        let mut v: DVector<f64> = l_inv.transpose() * eig.eigenvectors.column(k);
        // fix the sign so the largest-magnitude entry is positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        proj.row_mut(row).copy_from(&v.transpose());
    }
    Ok((mean, proj))
}

/// Per-speaker posterior of the speaker variable under the current model.
struct SpeakerPosterior {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

fn chol(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, PldaError> {
    Cholesky::new(m.clone()).ok_or(PldaError::NotPositiveDefinite)
}

fn log_gauss(x: &DVector<f64>, mean: &DVector<f64>, c: &Cholesky<f64, Dyn>) -> f64 {
    let d = x - mean;
    let sol = c.solve(&d);
    let log_det = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (x.len() as f64 * LN_2PI + log_det + d.dot(&sol))
}

/// E-step for all speakers; returns posteriors and the data log-likelihood.
fn plda_e_step(
    groups: &[Vec<DVector<f64>>],
    mean: &DVector<f64>,
    between: &DMatrix<f64>,
    within: &DMatrix<f64>,
) -> Result<(Vec<SpeakerPosterior>, f64), PldaError> {
    let b_chol = chol(between)?;
    let w_chol = chol(within)?;
    let b_inv = b_chol.inverse();
    let w_inv = w_chol.inverse();
    let b_inv_mu = &b_inv * mean;
    let mut out = Vec::with_capacity(groups.len());
    let mut ll = 0.0;
    for g in groups {
        let mut sum = DVector::zeros(mean.len());
        for x in g {
            sum += x;
        }
        let prec = &b_inv + &w_inv * g.len() as f64;
        let p_chol = chol(&prec)?;
        let cov = p_chol.inverse();
        let post_mean = p_chol.solve(&(&b_inv_mu + &w_inv * sum));
        // log p(X) = sum_j log N(x_j; y, W) + log N(y; mu, B) - log N(y; y, P^-1), any y
        for x in g {
            ll += log_gauss(x, &post_mean, &w_chol);
        }
        ll += log_gauss(&post_mean, mean, &b_chol);
        let cov_chol = chol(&cov)?;
        ll -= log_gauss(&post_mean, &post_mean, &cov_chol);
        out.push(SpeakerPosterior { mean: post_mean, cov });
    }
    Ok((out, ll))
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Fits LDA on centered i-vectors, length-normalizes the projections and
/// trains a two-covariance PLDA by EM. Returns the backend and the PLDA
/// log-likelihood before each EM iteration plus after the last.
pub fn train_backend(data: &[(String, IVector)], cfg: &BackendConfig) -> Result<(PldaBackend, Vec<f64>), PldaError> {
    let groups: Vec<Vec<&DVector<f64>>> = group_by_speaker(data).into_iter().filter(|g| g.len() >= 2).collect();
    if groups.len() < 2 {
        return Err(PldaError::InsufficientSpeakers { speakers: groups.len() });
    }
    let r = groups[0][0].len();
    if groups.iter().flatten().any(|v| v.len() != r) {
        return Err(PldaError::ShapeMismatch("i-vectors differ in dimension".into()));
    }
    let max = r.min(groups.len() - 1);
    if cfg.lda_dim == 0 || cfg.lda_dim > max {
        return Err(PldaError::BadLdaDim { dim: cfg.lda_dim, max });
    }
    let (center, lda) = train_lda(&groups, cfg.lda_dim)?;
    let projected: Vec<Vec<DVector<f64>>> = groups
        .iter()
        .map(|g| g.iter().map(|v| project(&center, &lda, v)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<_, _>>()?;

    let dim = cfg.lda_dim;
    let n: usize = projected.iter().map(|g| g.len()).sum();
    let mut mean = DVector::zeros(dim);
    for x in projected.iter().flatten() {
        mean += x;
    }
    mean /= n as f64;
    let mut within = DMatrix::zeros(dim, dim);
    let mut between = DMatrix::zeros(dim, dim);
    for g in &projected {
        let mut gm = DVector::zeros(dim);
        for x in g {
            gm += x;
        }
        gm /= g.len() as f64;
        for x in g {
            let d = x - &gm;
            within += &d * d.transpose();
        }
        let d = &gm - &mean;
        between += &d * d.transpose();
    }
    within /= n as f64;
    between /= projected.len() as f64;
    let floor = 1e-6 * (within.trace() / dim as f64).max(1e-12);
    for i in 0..dim {
        within[(i, i)] += floor;
        between[(i, i)] += floor;
    }

    let mut trace = Vec::with_capacity(cfg.plda_iterations + 1);
    for _ in 0..cfg.plda_iterations {
        let (post, ll) = plda_e_step(&projected, &mean, &between, &within)?;
        trace.push(ll);
        let k = post.len() as f64;
        let mut new_mean = DVector::zeros(dim);
        for p in &post {
            new_mean += &p.mean;
        }
        new_mean /= k;
        let mut new_b = DMatrix::zeros(dim, dim);
        let mut new_w = DMatrix::zeros(dim, dim);
        for (p, g) in post.iter().zip(&projected) {
            let d = &p.mean - &new_mean;
            new_b += &p.cov + &d * d.transpose();
            for x in g {
                let e = x - &p.mean;
                new_w += &p.cov + &e * e.transpose();
            }
        }
        mean = new_mean;
        between = symmetrize(new_b / k);
        within = symmetrize(new_w / n as f64);
    }
    trace.push(plda_e_step(&projected, &mean, &between, &within)?.1);
    Ok((PldaBackend { center, lda, mean, between, within }, trace))
}

fn project(center: &DVector<f64>, lda: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>, PldaError> {
    if v.len() != center.len() {
        return Err(PldaError::ShapeMismatch(format!("vector has {} entries, backend expects {}", v.len(), center.len())));
    }
    let y = lda * (v - center);
    Ok(length_normalize(&IVector::new(y))?.values)
}

impl PldaBackend {
    /// Centers, projects and length-normalizes a raw i-vector.
    pub fn transform(&self, v: &IVector) -> Result<IVector, PldaError> {
        Ok(IVector { values: project(&self.center, &self.lda, &v.values)?, normalized: true })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio. `enroll`
/// and `test` are backend-transformed vectors; enrollment vectors are
/// averaged and re-normalized before scoring.
pub fn plda_score(backend: &PldaBackend, enroll: &[IVector], test: &IVector) -> Result<f64, PldaError> {
    if enroll.is_empty() {
        return Err(PldaError::EmptyEnrollment);
    }
    let dim = backend.dim();
    if test.dim() != dim || enroll.iter().any(|e| e.dim() != dim) {
        return Err(PldaError::ShapeMismatch(format!("backend works in {dim} dimensions")));
    }
    let mut avg = DVector::zeros(dim);
    for e in enroll {
        avg += &e.values;
    }
    avg /= enroll.len() as f64;
    let e = length_normalize(&IVector::new(avg))?.values;
    let t = &test.values;
    let total = &backend.between + &backend.within;
    let mut joint = DMatrix::zeros(2 * dim, 2 * dim);
    joint.view_mut((0, 0), (dim, dim)).copy_from(&total);
    joint.view_mut((dim, dim), (dim, dim)).copy_from(&total);
    joint.view_mut((0, dim), (dim, dim)).copy_from(&backend.between);
    joint.view_mut((dim, 0), (dim, dim)).copy_from(&backend.between);
    let mut stacked = DVector::zeros(2 * dim);
    stacked.rows_mut(0, dim).copy_from(&e);
    stacked.rows_mut(dim, dim).copy_from(t);
    let mut mean2 = DVector::zeros(2 * dim);
    mean2.rows_mut(0, dim).copy_from(&backend.mean);
    mean2.rows_mut(dim, dim).copy_from(&backend.mean);
    let total_chol = chol(&total)?;
    let joint_chol = chol(&joint)?;
    Ok(log_gauss(&stacked, &mean2, &joint_chol) - log_gauss(&e, &backend.mean, &total_chol) - log_gauss(t, &backend.mean, &total_chol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn clusters(speakers: usize, per: usize, dim: usize, spread: f64, seed: u64) -> Vec<(String, IVector)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let mut out = Vec::new();
        for s in 0..speakers {
            let centre: Vec<f64> = (0..dim).map(|_| spread * n.sample(&mut rng)).collect();
            for _ in 0..per {
                let v: Vec<f64> = centre.iter().map(|c| c + 0.3 * n.sample(&mut rng)).collect();
                out.push((format!("spk{s:02}"), IVector::new(DVector::from_vec(v))));
            }
        }
        out
    }

    #[test]
    fn lda_finds_separation_axis() {
        // speakers differ only along (1, 1, 0); noise is isotropic
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Normal::new(0.0, 0.2).unwrap();
        let axis = DVector::from_vec(vec![1.0, 1.0, 0.0]).normalize();
        let mut groups: Vec<Vec<DVector<f64>>> = Vec::new();
        for s in 0..2 {
            let c = &axis * (if s == 0 { -2.0 } else { 2.0 });
            groups.push((0..50).map(|_| &c + DVector::from_fn(3, |_, _| n.sample(&mut rng))).collect());
        }
        let refs: Vec<Vec<&DVector<f64>>> = groups.iter().map(|g| g.iter().collect()).collect();
        let (_, proj) = train_lda(&refs, 1).unwrap();
        let dir = proj.row(0).transpose().normalize();
        assert!(dir.dot(&axis).abs() > 0.95);
        // two classes: the Fisher direction is Sw^-1 (m1 - m0)
        let means: Vec<DVector<f64>> = groups.iter().map(|g| g.iter().fold(DVector::zeros(3), |a, x| a + x) / g.len() as f64).collect();
        let mut sw = DMatrix::zeros(3, 3);
        for (g, m) in groups.iter().zip(&means) {
            for x in g {
                sw += (x - m) * (x - m).transpose();
            }
        }
        let fisher = (sw.try_inverse().unwrap() * (&means[1] - &means[0])).normalize();
        assert!((dir.dot(&fisher).abs() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn em_likelihood_nondecreasing() {
        let data = clusters(12, 6, 8, 1.0, 9);
        let (_, trace) = train_backend(&data, &BackendConfig { lda_dim: 6, plda_iterations: 8 }).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{trace:?}");
        }
    }

    #[test]
    fn bad_dims_and_speakers() {
        let data = clusters(4, 3, 5, 1.0, 1);
        assert_eq!(train_backend(&data, &BackendConfig { lda_dim: 4, plda_iterations: 1 }).unwrap_err(), PldaError::BadLdaDim { dim: 4, max: 3 });
        let one = clusters(1, 5, 5, 1.0, 1);
        assert!(matches!(train_backend(&one, &BackendConfig { lda_dim: 1, plda_iterations: 1 }), Err(PldaError::InsufficientSpeakers { .. })));
    }

    #[test]
    fn scoring_orders_and_symmetry() {
        let data = clusters(15, 5, 6, 2.0, 4);
        let (be, _) = train_backend(&data, &BackendConfig { lda_dim: 5, plda_iterations: 5 }).unwrap();
        let enroll: Vec<IVector> = data[0..3].iter().map(|(_, v)| be.transform(v).unwrap()).collect();
        let same = be.transform(&data[3].1).unwrap();
        let other = be.transform(&data[40].1).unwrap();
        let s_same = plda_score(&be, &enroll, &same).unwrap();
        let s_other = plda_score(&be, &enroll, &other).unwrap();
        assert!(s_same > s_other);
        let swapped = vec![enroll[1].clone(), enroll[0].clone(), enroll[2].clone()];
        assert!((plda_score(&be, &swapped, &same).unwrap() - s_same).abs() < 1e-12);
        assert_eq!(plda_score(&be, &[], &same), Err(PldaError::EmptyEnrollment));
    }

    #[test]
    fn no_between_variance_gives_constant_score() {
        let dim = 3;
        let be = PldaBackend {
            center: DVector::zeros(dim),
            lda: DMatrix::identity(dim, dim),
            mean: DVector::zeros(dim),
            between: DMatrix::identity(dim, dim) * 1e-300,
            within: DMatrix::identity(dim, dim),
        };
        let a = IVector::new(DVector::from_vec(vec![1.0, 0.0, 0.0]));
        let b = IVector::new(DVector::from_vec(vec![0.0, 0.6, 0.8]));
        let s1 = plda_score(&be, &[a.clone()], &a).unwrap();
        let s2 = plda_score(&be, &[a], &b).unwrap();
        assert!(s1.abs() < 1e-12 && s2.abs() < 1e-12);
    }
}
