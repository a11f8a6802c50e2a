//! Acquisition functions and the truncated Gaussian Regression covariance.
//!
//! `CovarianceState` keeps `Sigma = (Lambda + (1/gamma^2) sum_j v_j v_j^T)^{-1}`
//! where `v_j` is row `j` of the retained eigenvectors, together with the
//! product `Sigma V^T` so that every per-node quantity the acquisitions need
//! (`Sigma v_i` and `v_i^T Sigma v_i`) is a column lookup and one dot product.
//! A label update touches only the m x m matrix; its rank-one correction to the
//! m x n product is queued and applied on the next read.

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::SpectralData;
use crate::ssl::{argmax, LabelState, NodeFunction};

pub const DEFAULT_GAMMA: f64 = crate::ssl::DEFAULT_GAMMA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Random,
    Uncertainty,
    Vopt,
    Mc,
    Mcvopt,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 5] = [Self::Random, Self::Uncertainty, Self::Vopt, Self::Mc, Self::Mcvopt];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Uncertainty => "uncertainty",
            Self::Vopt => "vopt",
            Self::Mc => "mc",
            Self::Mcvopt => "mcvopt",
        }
    }

    /// Whether the acquisition reads the GR covariance.
    pub fn needs_covariance(self) -> bool {
        matches!(self, Self::Vopt | Self::Mc | Self::Mcvopt)
    }

    /// Whether the acquisition reads the current classifier output.
    pub fn needs_solution(self) -> bool {
        matches!(self, Self::Uncertainty | Self::Mc | Self::Mcvopt)
    }
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::InvalidParameter(format!(
                    "unknown acquisition '{s}' (expected one of random, uncertainty, vopt, mc, mcvopt)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub step: usize,
    pub chosen: usize,
    pub acquisition_value: f64,
    pub label_assigned: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy_after: Option<f64>,
}

#[derive(Debug)]
pub struct CovarianceState {
    sigma: DMatrix<f64>,
    gamma: f64,
    spectral: Arc<SpectralData>,
    /// `V^T`, m x n; column `i` is `v_i`.
    vt: Arc<DMatrix<f64>>,
    /// Downdates `(s, c)` not yet folded into the product: `Sigma V^T -= s (V s)^T / c`.
    pending: Vec<(DVector<f64>, f64)>,
    product: Mutex<Product>,
    applied: Vec<bool>,
    applied_order: Vec<usize>,
}

/// `Sigma V^T` (m x n, column `i` is `Sigma v_i`) as of the first `folded` pending downdates.
#[derive(Debug, Clone)]
struct Product {
    sigma_vt: Arc<DMatrix<f64>>,
    folded: usize,
}

impl Clone for CovarianceState {
    fn clone(&self) -> Self {
        Self {
            sigma: self.sigma.clone(),
            gamma: self.gamma,
            spectral: self.spectral.clone(),
            vt: self.vt.clone(),
            pending: self.pending.clone(),
            product: Mutex::new(self.lock_product().clone()),
            applied: self.applied.clone(),
            applied_order: self.applied_order.clone(),
        }
    }
}

/// Build `Sigma_GR` for the labels in `state`.
pub fn init_covariance(spectral: Arc<SpectralData>, state: &LabelState, gamma: f64) -> Result<CovarianceState> {
    let vt = Arc::new(spectral.vectors().transpose());
    init_with_vt(spectral, vt, state.labeled(), gamma)
}

fn init_with_vt(
    spectral: Arc<SpectralData>,
    vt: Arc<DMatrix<f64>>,
    labeled: &[usize],
    gamma: f64,
) -> Result<CovarianceState> {
    let m = spectral.m();
    let n = spectral.n();
    if m == 0 {
        return Err(Error::InvalidParameter("covariance needs at least one eigenpair".into()));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
    }
    let mut applied = vec![false; n];
    for &j in labeled {
        if j >= n {
            return Err(Error::NodeOutOfRange { node: j, n });
        }
        if applied[j] {
            return Err(Error::AlreadyLabeled { node: j });
        }
        applied[j] = true;
    }
    let lambda = spectral.eigenvalues();
    let scale = lambda.iter().fold(1.0f64, |a, &l| a.max(l.abs()));
    if labeled.is_empty() && lambda.iter().any(|&l| l <= 1e-12 * scale) {
        return Err(Error::Singular(
            "covariance is singular: label at least one node or use a spectrum with strictly positive eigenvalues"
                .into(),
        ));
    }

    let mut precision = DMatrix::from_diagonal(&DVector::from_iterator(m, lambda.iter().map(|&l| l.max(0.0))));
    let inv_g2 = 1.0 / (gamma * gamma);
    for &j in labeled {
        let v = vt.column(j);
        precision.ger(inv_g2, &v, &v, 1.0);
    }
    let sigma = invert_spd(precision)?;
    let sigma_vt = Arc::new(&sigma * &*vt);
    Ok(CovarianceState {
        sigma,
        gamma,
        spectral,
        vt,
        pending: Vec::new(),
        product: Mutex::new(Product { sigma_vt, folded: 0 }),
        applied,
        applied_order: labeled.to_vec(),
    })
}

fn invert_spd(a: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance precision matrix is not positive definite".into()))?;
    let mut inv = chol.inverse();
    for i in 0..m {
        for j in 0..i {
            let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = avg;
            inv[(j, i)] = avg;
        }
    }
    Ok(inv)
}

impl CovarianceState {
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn spectral(&self) -> &Arc<SpectralData> {
        &self.spectral
    }

    pub fn m(&self) -> usize {
        self.sigma.nrows()
    }

    pub fn n(&self) -> usize {
        self.vt.ncols()
    }

    pub fn is_applied(&self, i: usize) -> bool {
        self.applied.get(i).copied().unwrap_or(false)
    }

    pub fn applied(&self) -> &[usize] {
        &self.applied_order
    }

    pub fn trace(&self) -> f64 {
        self.sigma.trace()
    }

    fn lock_product(&self) -> MutexGuard<'_, Product> {
        // the product is only ever replaced whole, so a poisoned lock still holds a valid value
        self.product.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// `Sigma V^T` with every queued downdate applied. O(nm) per downdate folded.
    pub fn sigma_vt(&self) -> Arc<DMatrix<f64>> {
        let mut product = self.lock_product();
        if product.folded < self.pending.len() {
            let mut next = Arc::unwrap_or_clone(std::mem::take(&mut product.sigma_vt));
            for (s, c) in &self.pending[product.folded..] {
                let w = self.vt.tr_mul(s);
                next.ger(-1.0 / c, s, &w, 1.0);
            }
            product.sigma_vt = Arc::new(next);
            product.folded = self.pending.len();
        }
        product.sigma_vt.clone()
    }

    /// `(||Sigma v_i||^2, v_i^T Sigma v_i)` from a current `sigma_vt`.
    fn node_terms(&self, sigma_vt: &DMatrix<f64>, i: usize) -> (f64, f64) {
        let s = sigma_vt.column(i);
        (s.norm_squared(), self.vt.column(i).dot(&s))
    }

    /// Fold the label at `i` into `Sigma` by a rank-one Woodbury downdate.
    pub fn update(&mut self, i: usize) -> Result<()> {
        let n = self.n();
        if i >= n {
            return Err(Error::NodeOutOfRange { node: i, n });
        }
        if self.applied[i] {
            return Err(Error::AlreadyLabeled { node: i });
        }
        self.applied[i] = true;
        self.applied_order.push(i);

        let v = self.vt.column(i).clone_owned();
        if v.iter().all(|&x| x == 0.0) {
            return Ok(());
        }
        let s = &self.sigma * &v;
        let c = self.gamma * self.gamma + v.dot(&s);
        self.sigma.ger(-1.0 / c, &s, &s, 1.0);
        // keep the stored matrix exactly symmetric
        let m = self.m();
        for a in 0..m {
            for b in 0..a {
                let avg = 0.5 * (self.sigma[(a, b)] + self.sigma[(b, a)]);
                self.sigma[(a, b)] = avg;
                self.sigma[(b, a)] = avg;
            }
        }
        let product = self.product.get_mut().unwrap_or_else(|e| e.into_inner());
        if product.folded == self.pending.len() {
            self.pending.clear();
            product.folded = 0;
        }
        self.pending.push((s, c));
        Ok(())
    }

    /// Rebuild from scratch on the applied set; clears accumulated rounding.
    pub fn refresh(&mut self) -> Result<()> {
        let order = self.applied_order.clone();
        *self = init_with_vt(self.spectral.clone(), self.vt.clone(), &order, self.gamma)?;
        Ok(())
    }
}

/// Functional form of [`CovarianceState::update`].
pub fn covariance_update(mut cov: CovarianceState, i: usize) -> Result<CovarianceState> {
    cov.update(i)?;
    Ok(cov)
}

/// `1 - (largest - second largest)` per pool node.
pub fn acquire_uncertainty(u: &NodeFunction, pool: &[usize]) -> Result<Vec<f64>> {
    if u.classes() < 2 {
        return Err(Error::InvalidParameter("uncertainty sampling needs at least two classes".into()));
    }
    Ok(pool
        .par_iter()
        .map(|&i| {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &v in u.row(i) {
                if v > first {
                    second = first;
                    first = v;
                } else if v > second {
                    second = v;
                }
            }
            1.0 - (first - second)
        })
        .collect())
}

pub fn acquire_vopt(cov: &CovarianceState, pool: &[usize]) -> Vec<f64> {
    let g2 = cov.gamma * cov.gamma;
    let sigma_vt = cov.sigma_vt();
    pool.par_iter()
        .map(|&i| {
            let (s2, q) = cov.node_terms(&sigma_vt, i);
            s2 / (g2 + q)
        })
        .collect()
}

fn model_change(u: &NodeFunction, cov: &CovarianceState, pool: &[usize], squared: bool) -> Vec<f64> {
    let g2 = cov.gamma * cov.gamma;
    let sigma_vt = cov.sigma_vt();
    pool.par_iter()
        .map(|&i| {
            let row = u.row(i);
            let (y, _) = argmax(row);
            let dist = row
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let t = if k == y { v - 1.0 } else { v };
                    t * t
                })
                .sum::<f64>()
                .sqrt();
            let (s2, q) = cov.node_terms(&sigma_vt, i);
            let spread = if squared { s2 } else { s2.sqrt() };
            dist * spread / (g2 + q)
        })
        .collect()
}

pub fn acquire_mc(u: &NodeFunction, cov: &CovarianceState, pool: &[usize]) -> Vec<f64> {
    model_change(u, cov, pool, false)
}

pub fn acquire_mcvopt(u: &NodeFunction, cov: &CovarianceState, pool: &[usize]) -> Vec<f64> {
    model_change(u, cov, pool, true)
}

/// Uniform `[0, 1)` values; `stream` separates draws for different steps under one seed.
pub fn acquire_random(pool: &[usize], seed: u64, stream: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    pool.iter().map(|_| rng.random::<f64>()).collect()
}

/// Values of `kind` over `pool`. Inputs a kind does not read may be `None`.
pub fn acquisition_values(
    kind: AcquisitionKind,
    u: Option<&NodeFunction>,
    cov: Option<&CovarianceState>,
    pool: &[usize],
    seed: u64,
    step: u64,
) -> Result<Vec<f64>> {
    let need_u = || u.ok_or_else(|| Error::InvalidParameter(format!("{kind} needs a classifier solution")));
    let need_cov = || cov.ok_or_else(|| Error::InvalidParameter(format!("{kind} needs a covariance state")));
    match kind {
        AcquisitionKind::Random => Ok(acquire_random(pool, seed, step)),
        AcquisitionKind::Uncertainty => acquire_uncertainty(need_u()?, pool),
        AcquisitionKind::Vopt => Ok(acquire_vopt(need_cov()?, pool)),
        AcquisitionKind::Mc => Ok(acquire_mc(need_u()?, need_cov()?, pool)),
        AcquisitionKind::Mcvopt => Ok(acquire_mcvopt(need_u()?, need_cov()?, pool)),
    }
}

/// Argmax over the pool; ties go to the lowest node index and NaN never wins.
pub fn select_query(values: &[f64], pool: &[usize]) -> Result<(usize, f64)> {
    assert_eq!(values.len(), pool.len());
    let mut best: Option<(usize, f64)> = None;
    for (&i, &v) in pool.iter().zip(values) {
        let v = if v.is_nan() { f64::NEG_INFINITY } else { v };
        best = match best {
            Some((bi, bv)) if bv > v || (bv == v && bi < i) => Some((bi, bv)),
            _ => Some((i, v)),
        };
    }
    best.ok_or(Error::PoolExhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LaplacianKind;

    fn scalar_spectrum(n: usize) -> Arc<SpectralData> {
        let v = DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt());
        Arc::new(SpectralData::new(LaplacianKind::Unnormalized, vec![0.0], v).unwrap())
    }

    #[test]
    fn parse_kinds() {
        for k in AcquisitionKind::ALL {
            assert_eq!(k.name().parse::<AcquisitionKind>().unwrap(), k);
        }
        let err = "eer".parse::<AcquisitionKind>().unwrap_err().to_string();
        assert!(err.contains("mcvopt"));
    }

    #[test]
    fn scalar_init_and_update() {
        let n = 8;
        let spec = scalar_spectrum(n);
        let state = LabelState::from_pairs(n, 2, &[(3, 0)]).unwrap();
        let mut cov = init_covariance(spec, &state, 1.0).unwrap();
        assert!((cov.sigma()[(0, 0)] - n as f64).abs() < 1e-12);
        cov.update(5).unwrap();
        assert!((cov.sigma()[(0, 0)] - n as f64 / 2.0).abs() < 1e-12);
        assert!(matches!(cov.update(5), Err(Error::AlreadyLabeled { node: 5 })));
        assert!(matches!(cov.update(3), Err(Error::AlreadyLabeled { node: 3 })));
    }

    #[test]
    fn queued_downdates_match_fresh_product() {
        let (n, m) = (12, 4);
        let v = DMatrix::from_fn(n, m, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0 + 0.1 * j as f64);
        let spec = Arc::new(SpectralData::new(LaplacianKind::Unnormalized, vec![0.5, 1.0, 1.5, 2.0], v).unwrap());
        let state = LabelState::from_pairs(n, 2, &[(0, 0)]).unwrap();
        let mut cov = init_covariance(spec.clone(), &state, 0.7).unwrap();
        cov.update(3).unwrap();
        cov.update(4).unwrap();
        let before = cov.clone();
        let _ = cov.sigma_vt();
        cov.update(9).unwrap();
        let reads = cov.clone().sigma_vt();
        cov.update(10).unwrap();

        let expect = |labels: &[(usize, usize)]| {
            let s = LabelState::from_pairs(n, 2, labels).unwrap();
            let fresh = init_covariance(spec.clone(), &s, 0.7).unwrap();
            fresh.sigma() * spec.vectors().transpose()
        };
        let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() < 1e-12;
        assert!(close(&before.sigma_vt(), &expect(&[(0, 0), (3, 0), (4, 0)])));
        assert!(close(&reads, &expect(&[(0, 0), (3, 0), (4, 0), (9, 0)])));
        assert!(close(&cov.sigma_vt(), &expect(&[(0, 0), (3, 0), (4, 0), (9, 0), (10, 0)])));
    }

    #[test]
    fn singular_without_labels() {
        let state = LabelState::new(4, 2).unwrap();
        assert!(matches!(init_covariance(scalar_spectrum(4), &state, 1.0), Err(Error::Singular(_))));
        let pos = SpectralData::new(LaplacianKind::SymmetricNormalized, vec![0.5, 2.0], DMatrix::identity(4, 2)).unwrap();
        let cov = init_covariance(Arc::new(pos), &state, 0.5).unwrap();
        assert!((cov.sigma()[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((cov.sigma()[(1, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_node_leaves_sigma_unchanged() {
        let mut v = DMatrix::zeros(4, 2);
        v[(0, 0)] = 1.0;
        v[(1, 1)] = 1.0;
        let spec = Arc::new(SpectralData::new(LaplacianKind::Unnormalized, vec![1.0, 2.0], v).unwrap());
        let state = LabelState::new(4, 2).unwrap();
        let mut cov = init_covariance(spec, &state, 0.5).unwrap();
        let before = cov.sigma().clone();
        cov.update(3).unwrap();
        assert_eq!(cov.sigma(), &before);
        assert!(cov.is_applied(3));
        assert_eq!(acquire_vopt(&cov, &[2]), vec![0.0]);
    }

    #[test]
    fn scalar_vopt() {
        let n = 4;
        let spec = scalar_spectrum(n);
        let state = LabelState::from_pairs(n, 2, &[(0, 0)]).unwrap();
        let gamma = 0.5;
        let cov = init_covariance(spec, &state, gamma).unwrap();
        let s = cov.sigma()[(0, 0)];
        let c = 1.0 / (n as f64).sqrt();
        let expected = s * s * c * c / (gamma * gamma + c * c * s);
        assert!((acquire_vopt(&cov, &[2])[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn uncertainty_examples() {
        let u = NodeFunction::new(3, 3, vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.6, 0.3, 0.1]).unwrap();
        let a = acquire_uncertainty(&u, &[0, 1, 2]).unwrap();
        assert_eq!(a[0], 0.0);
        assert_eq!(a[1], 1.0);
        assert!((a[2] - 0.7).abs() < 1e-12);
        let one = NodeFunction::new(1, 1, vec![1.0]).unwrap();
        assert!(acquire_uncertainty(&one, &[0]).is_err());
    }

    #[test]
    fn mc_vanishes_on_one_hot_rows() {
        let spec = scalar_spectrum(3);
        let state = LabelState::from_pairs(3, 2, &[(0, 0)]).unwrap();
        let cov = init_covariance(spec, &state, 0.5).unwrap();
        let u = NodeFunction::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.4, 0.6]).unwrap();
        let mc = acquire_mc(&u, &cov, &[1, 2]);
        let mcv = acquire_mcvopt(&u, &cov, &[1, 2]);
        assert_eq!(mc[0], 0.0);
        assert_eq!(mcv[0], 0.0);
        assert!(mc[1] > 0.0);
    }

    #[test]
    fn select_query_rules() {
        assert_eq!(select_query(&[0.1, 0.9, 0.9], &[3, 7, 2]).unwrap().0, 2);
        assert_eq!(select_query(&[0.4], &[11]).unwrap(), (11, 0.4));
        assert_eq!(select_query(&[1.0, 1.0, 1.0], &[5, 4, 9]).unwrap().0, 4);
        assert_eq!(select_query(&[f64::NAN, 0.0], &[0, 1]).unwrap().0, 1);
        assert!(matches!(select_query(&[], &[]), Err(Error::PoolExhausted)));
    }

    #[test]
    fn random_is_seeded() {
        let pool: Vec<usize> = (0..20).collect();
        assert_eq!(acquire_random(&pool, 7, 3), acquire_random(&pool, 7, 3));
        assert_ne!(acquire_random(&pool, 7, 3), acquire_random(&pool, 7, 4));
        assert!(acquire_random(&[], 7, 0).is_empty());
    }

    #[test]
    fn random_is_uniform() {
        let pool: Vec<usize> = (0..10).collect();
        let mut counts = [0usize; 10];
        for step in 0..10_000 {
            let values = acquire_random(&pool, 42, step);
            counts[select_query(&values, &pool).unwrap().0] += 1;
        }
        assert!(counts.iter().all(|&c| (850..=1150).contains(&c)), "{counts:?}");
    }
}
