//! CMA-ES with the published default parameterization: rank-based
//! recombination of the top μ = ⌊λ/2⌋ candidates with log-linear weights,
//! cumulative step-size adaptation, and rank-1 plus rank-μ covariance
//! updates. The eigendecomposition of C is cached and refreshed lazily.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{standard_normal_vector, Algorithm, EsError, Optimizer};

#[derive(Debug, Clone, Copy)]
pub struct CmaParams {
    /// Initial global step size.
    pub sigma0: f64,
    /// Population size (λ).
    pub lambda: usize,
}

impl Default for CmaParams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            lambda: 25,
        }
    }
}

impl CmaParams {
    fn validate(&self) -> Result<(), EsError> {
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(EsError::InvalidParameter {
                name: "sigma0".into(),
                reason: format!("must be a positive real, got {}", self.sigma0),
            });
        }
        if self.lambda < 2 {
            return Err(EsError::InvalidParameter {
                name: "lambda".into(),
                reason: "must be at least 2".into(),
            });
        }
        Ok(())
    }
}

/// Candidate indices sorted by fitness descending; non-finite fitnesses
/// rank strictly last (ties keep candidate order).
pub(crate) fn rank_descending(fitnesses: &[f64]) -> Vec<usize> {
    let mut indices: Vec<usize> = (0..fitnesses.len()).collect();
    let key = |i: usize| {
        let f = fitnesses[i];
        if f.is_finite() {
            f
        } else {
            f64::NEG_INFINITY
        }
    };
    indices.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).expect("keys are comparable"));
    indices
}

pub struct CmaEs {
    dimension: usize,
    lambda: usize,
    mu: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    eigen_cadence: u64,

    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    path_sigma: DVector<f64>,
    path_c: DVector<f64>,

    // Eigen cache: C = basis · diag(sqrt_eigenvalues²) · basisᵀ.
    basis: DMatrix<f64>,
    sqrt_eigenvalues: DVector<f64>,
    basis_is_identity: bool,
    staleness: u64,

    generations: u64,
    rng: ChaCha8Rng,
    pending: Option<Vec<DVector<f64>>>,
}

impl CmaEs {
    /// Initial mean drawn N(0, 1) per coordinate from `seed`; C₀ = I.
    pub fn new(dimension: usize, seed: u64, params: CmaParams) -> Result<Self, EsError> {
        if dimension == 0 {
            return Err(EsError::ZeroDimension);
        }
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = DVector::from_vec(standard_normal_vector(&mut rng, dimension));
        Ok(Self::from_parts(dimension, mean, params, rng))
    }

    /// Starts from an explicit mean instead of the N(0, 1) draw.
    pub fn with_initial(
        dimension: usize,
        seed: u64,
        params: CmaParams,
        mean: Vec<f64>,
    ) -> Result<Self, EsError> {
        if dimension == 0 {
            return Err(EsError::ZeroDimension);
        }
        params.validate()?;
        if mean.len() != dimension {
            return Err(EsError::InitialPointLength {
                expected: dimension,
                actual: mean.len(),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_parts(dimension, DVector::from_vec(mean), params, rng))
    }

    fn from_parts(
        dimension: usize,
        mean: DVector<f64>,
        params: CmaParams,
        rng: ChaCha8Rng,
    ) -> Self {
        let n = dimension as f64;
        let lambda = params.lambda;
        let mu = lambda / 2;

        // w'_i = ln((λ+1)/2) − ln(i), kept for the top μ and normalized.
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let raw_sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / raw_sum).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu =
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff)).min(1.0 - c_1);
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));
        let eigen_cadence = (1.0 / (10.0 * n * (c_1 + c_mu))).floor().max(1.0) as u64;

        Self {
            dimension,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            eigen_cadence,
            mean,
            sigma: params.sigma0,
            cov: DMatrix::identity(dimension, dimension),
            path_sigma: DVector::zeros(dimension),
            path_c: DVector::zeros(dimension),
            basis: DMatrix::identity(dimension, dimension),
            sqrt_eigenvalues: DVector::from_element(dimension, 1.0),
            basis_is_identity: true,
            staleness: 0,
            generations: 0,
            rng,
            pending: None,
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mu(&self) -> usize {
        self.mu
    }

    pub fn mu_eff(&self) -> f64 {
        self.mu_eff
    }

    /// Recombination weights, non-increasing and summing to 1.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Generations between lazy eigendecomposition refreshes.
    pub fn eigen_cadence(&self) -> u64 {
        self.eigen_cadence
    }

    /// y = B·D·z in the cached eigenbasis.
    fn transform(&self, z: &DVector<f64>) -> DVector<f64> {
        if self.basis_is_identity {
            return z.clone();
        }
        let scaled = z.component_mul(&self.sqrt_eigenvalues);
        &self.basis * scaled
    }

    /// C^{−1/2}·v via the cached eigenbasis.
    fn inverse_sqrt_apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.basis_is_identity {
            return v.clone();
        }
        let mut w = self.basis.transpose() * v;
        w.component_div_assign(&self.sqrt_eigenvalues);
        &self.basis * w
    }

    fn refresh_eigen(&mut self) -> Result<(), EsError> {
        if let Some(bad) = self.cov.iter().find(|v| !v.is_finite()) {
            return Err(EsError::Eigen(format!(
                "covariance contains non-finite entry {bad} (n = {}, sigma = {}, generation = {})",
                self.dimension, self.sigma, self.generations
            )));
        }
        let eigen = self
            .cov
            .clone()
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or_else(|| {
                EsError::Eigen(format!(
                    "symmetric eigendecomposition did not converge (n = {}, trace = {}, generation = {})",
                    self.dimension,
                    self.cov.trace(),
                    self.generations
                ))
            })?;

        let max_ev = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max_ev.is_finite() && max_ev > 0.0) {
            return Err(EsError::Eigen(format!(
                "covariance is not positive definite (max eigenvalue {max_ev}, n = {}, trace = {}, generation = {})",
                self.dimension,
                self.cov.trace(),
                self.generations
            )));
        }

        // Floor near-zero eigenvalues and reconstitute C when any were hit.
        let floor = 1e-14 * max_ev;
        let mut floored = false;
        let eigenvalues = eigen.eigenvalues.map(|ev| {
            if ev < floor {
                floored = true;
                floor
            } else {
                ev
            }
        });
        if floored {
            let scaled = DMatrix::from_fn(self.dimension, self.dimension, |r, c| {
                eigen.eigenvectors[(r, c)] * eigenvalues[c]
            });
            self.cov = scaled * eigen.eigenvectors.transpose();
            symmetrize(&mut self.cov);
        }

        self.sqrt_eigenvalues = eigenvalues.map(f64::sqrt);
        self.basis = eigen.eigenvectors;
        self.basis_is_identity = false;
        self.staleness = 0;
        Ok(())
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

impl Optimizer for CmaEs {
    fn algorithm(&self) -> Algorithm {
        Algorithm::CmaEs
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn population_size(&self) -> usize {
        self.lambda
    }

    fn generation(&self) -> u64 {
        self.generations
    }

    fn ask(&mut self) -> Result<Vec<Vec<f64>>, EsError> {
        if self.pending.is_some() {
            return Err(EsError::Protocol("ask called twice without tell"));
        }
        if self.staleness >= self.eigen_cadence {
            self.refresh_eigen()?;
        }
        let mut candidates = Vec::with_capacity(self.lambda);
        let mut out = Vec::with_capacity(self.lambda);
        for _ in 0..self.lambda {
            let z = DVector::from_vec(standard_normal_vector(&mut self.rng, self.dimension));
            let y = self.transform(&z);
            let x = &self.mean + self.sigma * y;
            out.push(x.iter().copied().collect());
            candidates.push(x);
        }
        self.pending = Some(candidates);
        Ok(out)
    }

    fn tell(&mut self, fitnesses: &[f64]) -> Result<(), EsError> {
        let candidates = self
            .pending
            .take()
            .ok_or(EsError::Protocol("tell called without a preceding ask"))?;
        if fitnesses.len() != candidates.len() {
            let expected = candidates.len();
            self.pending = Some(candidates);
            return Err(EsError::FitnessCountMismatch {
                expected,
                actual: fitnesses.len(),
            });
        }

        let ranked = rank_descending(fitnesses);
        let selected: Vec<&DVector<f64>> = ranked[..self.mu].iter().map(|&i| &candidates[i]).collect();

        // Weighted recombination of the selected points.
        let old_mean = std::mem::replace(&mut self.mean, DVector::zeros(self.dimension));
        for (&w, x) in self.weights.iter().zip(&selected) {
            self.mean.axpy(w, x, 1.0);
        }

        let y_w = (&self.mean - &old_mean) / self.sigma;

        // Step-size path (uses the cached, possibly stale, eigenbasis).
        let c_sigma = self.c_sigma;
        let whitened = self.inverse_sqrt_apply(&y_w);
        self.path_sigma *= 1.0 - c_sigma;
        self.path_sigma
            .axpy((c_sigma * (2.0 - c_sigma) * self.mu_eff).sqrt(), &whitened, 1.0);

        self.generations += 1;
        let ps_norm = self.path_sigma.norm();
        let decay = 1.0 - (1.0 - c_sigma).powi(2 * self.generations as i32);
        let h_sigma = ps_norm / decay.sqrt()
            < (1.4 + 2.0 / (self.dimension as f64 + 1.0)) * self.chi_n;

        // Covariance path.
        let c_c = self.c_c;
        self.path_c *= 1.0 - c_c;
        if h_sigma {
            self.path_c
                .axpy((c_c * (2.0 - c_c) * self.mu_eff).sqrt(), &y_w, 1.0);
        }

        // Rank-1 + rank-μ covariance update.
        let delta_h = if h_sigma { 0.0 } else { c_c * (2.0 - c_c) };
        let decay_factor = 1.0 - self.c_1 - self.c_mu + self.c_1 * delta_h;
        self.cov *= decay_factor;
        self.cov.ger(self.c_1, &self.path_c, &self.path_c, 1.0);
        for (&w, x) in self.weights.iter().zip(&selected) {
            let y = (*x - &old_mean) / self.sigma;
            self.cov.ger(self.c_mu * w, &y, &y, 1.0);
        }
        symmetrize(&mut self.cov);

        // Path-length control of the global step size.
        self.sigma *= ((c_sigma / self.d_sigma) * (ps_norm / self.chi_n - 1.0)).exp();

        self.staleness += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sphere(x: &[f64]) -> f64 {
        -x.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn default_population_is_25() {
        let cma = CmaEs::new(4, 0, CmaParams::default()).unwrap();
        assert_eq!(cma.population_size(), 25);
        assert_eq!(cma.mu(), 12);
        let mut cma = cma;
        assert_eq!(cma.ask().unwrap().len(), 25);
    }

    #[test]
    fn weights_non_increasing_positive_sum_one() {
        for lambda in [2, 3, 5, 10, 25, 40] {
            let cma = CmaEs::new(6, 0, CmaParams { sigma0: 1.0, lambda }).unwrap();
            let w = cma.weights();
            assert_eq!(w.len(), lambda / 2);
            assert!(w.iter().all(|&x| x > 0.0));
            assert!(w.windows(2).all(|p| p[0] >= p[1]));
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "lambda={lambda}: sum={sum}");
        }
    }

    #[test]
    fn identity_sampling_matches_raw_draws() {
        // Independent oracle: with C = I, m = 0, sigma = 1, candidates are
        // exactly the generator's normal draws in order.
        let seed = 77;
        let n = 4;
        let params = CmaParams {
            sigma0: 1.0,
            lambda: 3,
        };
        let mut cma = CmaEs::with_initial(n, seed, params, vec![0.0; n]).unwrap();
        let batch = cma.ask().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for candidate in &batch {
            let expected = standard_normal_vector(&mut rng, n);
            assert_eq!(candidate, &expected);
        }
    }

    #[test]
    fn vanishing_sigma_keeps_candidates_at_mean() {
        let params = CmaParams {
            sigma0: 1e-300,
            lambda: 4,
        };
        let mean = vec![2.0, -3.0];
        let mut cma = CmaEs::with_initial(2, 5, params, mean.clone()).unwrap();
        let batch = cma.ask().unwrap();
        for candidate in &batch {
            assert_eq!(candidate, &mean);
        }
        // identical candidates: recombination leaves the mean unchanged
        cma.tell(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cma.mean().as_slice(), mean.as_slice());
    }

    #[test]
    fn mean_norm_decreases_on_sphere() {
        let mut cma =
            CmaEs::with_initial(2, 11, CmaParams::default(), vec![3.0, 4.0]).unwrap();
        let mut last = cma.mean().norm();
        for _ in 0..2 {
            let batch = cma.ask().unwrap();
            let fits: Vec<f64> = batch.iter().map(|c| sphere(c)).collect();
            cma.tell(&fits).unwrap();
            let norm = cma.mean().norm();
            assert!(norm < last, "norm {norm} did not decrease from {last}");
            last = norm;
        }
    }

    #[test]
    fn covariance_stays_spd() {
        let mut cma = CmaEs::new(5, 3, CmaParams { sigma0: 1.0, lambda: 8 }).unwrap();
        for _ in 0..60 {
            let batch = cma.ask().unwrap();
            let fits: Vec<f64> = batch.iter().map(|c| sphere(c)).collect();
            cma.tell(&fits).unwrap();

            let eigen = cma.covariance().clone().symmetric_eigen();
            let min = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(min > 0.0, "covariance lost positive definiteness: {min}");
            for i in 0..5 {
                for j in 0..5 {
                    let d = (cma.covariance()[(i, j)] - cma.covariance()[(j, i)]).abs();
                    assert!(d < 1e-9);
                }
            }
            assert!(cma.sigma() > 0.0 && cma.sigma().is_finite());
        }
    }

    #[test]
    fn non_finite_fitness_ranks_last() {
        assert_eq!(rank_descending(&[1.0, f64::NAN, 2.0]), vec![2, 0, 1]);
        assert_eq!(
            rank_descending(&[f64::INFINITY, 0.5, f64::NEG_INFINITY]),
            vec![1, 0, 2]
        );
        // ties keep candidate order
        assert_eq!(rank_descending(&[1.0, 1.0, 0.0]), vec![0, 1, 2]);
    }

    #[test]
    fn nan_fitness_does_not_poison_state() {
        let mut cma = CmaEs::new(3, 9, CmaParams { sigma0: 1.0, lambda: 6 }).unwrap();
        for _ in 0..10 {
            let batch = cma.ask().unwrap();
            let mut fits: Vec<f64> = batch.iter().map(|c| sphere(c)).collect();
            fits[0] = f64::NAN;
            fits[3] = f64::INFINITY;
            cma.tell(&fits).unwrap();
            assert!(cma.mean().iter().all(|v| v.is_finite()));
            assert!(cma.sigma().is_finite());
        }
    }

    #[test]
    fn protocol_enforced() {
        let mut cma = CmaEs::new(2, 0, CmaParams { sigma0: 1.0, lambda: 4 }).unwrap();
        assert!(matches!(cma.tell(&[0.0; 4]), Err(EsError::Protocol(_))));
        cma.ask().unwrap();
        assert!(matches!(cma.ask(), Err(EsError::Protocol(_))));
        assert!(matches!(
            cma.tell(&[0.0; 3]),
            Err(EsError::FitnessCountMismatch { .. })
        ));
        cma.tell(&[0.0; 4]).unwrap();
        assert_eq!(cma.generation(), 1);
    }

    #[test]
    fn rejects_degenerate_params() {
        assert!(CmaEs::new(3, 0, CmaParams { sigma0: 0.0, lambda: 25 }).is_err());
        assert!(CmaEs::new(3, 0, CmaParams { sigma0: 1.0, lambda: 1 }).is_err());
        assert!(CmaEs::new(0, 0, CmaParams::default()).is_err());
    }
}
