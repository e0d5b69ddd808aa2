//! Natural evolution strategies reduced to the plain score-function
//! gradient: candidates x_i = m + σ·z_i, update
//! m ← m + η · (1/(λσ)) · Σ_i (f_i − b) · z_i with baseline b = 0 for
//! λ = 1 and the batch mean otherwise. σ and η stay fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{standard_normal_vector, Algorithm, EsError, Optimizer};

#[derive(Debug, Clone, Copy)]
pub struct NesParams {
    /// Sampling step size (σ).
    pub sigma: f64,
    /// Learning rate (η).
    pub eta: f64,
    /// Population size (λ).
    pub lambda: usize,
}

impl Default for NesParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            eta: 0.05,
            lambda: 1,
        }
    }
}

impl NesParams {
    fn validate(&self) -> Result<(), EsError> {
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(EsError::InvalidParameter {
                name: "sigma".into(),
                reason: format!("must be a positive real, got {}", self.sigma),
            });
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(EsError::InvalidParameter {
                name: "eta".into(),
                reason: format!("must be a positive real, got {}", self.eta),
            });
        }
        if self.lambda == 0 {
            return Err(EsError::InvalidParameter {
                name: "lambda".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

pub struct Nes {
    dimension: usize,
    mean: Vec<f64>,
    params: NesParams,
    generations: u64,
    rng: ChaCha8Rng,
    pending: Option<Vec<Vec<f64>>>,
}

impl Nes {
    /// Initial mean drawn N(0, 1) per coordinate from `seed`.
    pub fn new(dimension: usize, seed: u64, params: NesParams) -> Result<Self, EsError> {
        if dimension == 0 {
            return Err(EsError::ZeroDimension);
        }
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = standard_normal_vector(&mut rng, dimension);
        Ok(Self {
            dimension,
            mean,
            params,
            generations: 0,
            rng,
            pending: None,
        })
    }

    /// Starts from an explicit mean instead of the N(0, 1) draw.
    pub fn with_initial(
        dimension: usize,
        seed: u64,
        params: NesParams,
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
        Ok(Self {
            dimension,
            mean,
            params,
            generations: 0,
            rng,
            pending: None,
        })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn sigma(&self) -> f64 {
        self.params.sigma
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }
}

impl Optimizer for Nes {
    fn algorithm(&self) -> Algorithm {
        Algorithm::Nes
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn population_size(&self) -> usize {
        self.params.lambda
    }

    fn generation(&self) -> u64 {
        self.generations
    }

    fn ask(&mut self) -> Result<Vec<Vec<f64>>, EsError> {
        if self.pending.is_some() {
            return Err(EsError::Protocol("ask called twice without tell"));
        }
        let mut noises = Vec::with_capacity(self.params.lambda);
        let mut candidates = Vec::with_capacity(self.params.lambda);
        for _ in 0..self.params.lambda {
            let z = standard_normal_vector(&mut self.rng, self.dimension);
            let candidate = self
                .mean
                .iter()
                .zip(&z)
                .map(|(&m, &zi)| m + self.params.sigma * zi)
                .collect();
            noises.push(z);
            candidates.push(candidate);
        }
        self.pending = Some(noises);
        Ok(candidates)
    }

    fn tell(&mut self, fitnesses: &[f64]) -> Result<(), EsError> {
        let noises = self
            .pending
            .take()
            .ok_or(EsError::Protocol("tell called without a preceding ask"))?;
        if fitnesses.len() != noises.len() {
            let expected = noises.len();
            self.pending = Some(noises);
            return Err(EsError::FitnessCountMismatch {
                expected,
                actual: fitnesses.len(),
            });
        }

        let lambda = self.params.lambda;
        let baseline = if lambda == 1 {
            0.0
        } else {
            let finite: Vec<f64> = fitnesses.iter().copied().filter(|f| f.is_finite()).collect();
            if finite.is_empty() {
                0.0
            } else {
                finite.iter().sum::<f64>() / finite.len() as f64
            }
        };
        let step = self.params.eta / (lambda as f64 * self.params.sigma);
        for (z, &f) in noises.iter().zip(fitnesses) {
            // Non-finite fitness contributes nothing, keeping the mean
            // finite through oracle hiccups.
            if !f.is_finite() {
                continue;
            }
            let coeff = step * (f - baseline);
            for (m, &zi) in self.mean.iter_mut().zip(z) {
                *m += coeff * zi;
            }
        }
        self.generations += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_update_rule() {
        // lambda=1, f=2.0, z=e_1, sigma=1, eta=0.05, mean=0 -> mean = 0.1*e_1.
        let mut nes = Nes::with_initial(3, 0, NesParams::default(), vec![0.0; 3]).unwrap();
        let batch = nes.ask().unwrap();
        let z: Vec<f64> = batch[0].clone(); // mean 0, sigma 1 => candidate == z
        nes.tell(&[2.0]).unwrap();
        for (m, zi) in nes.mean().iter().zip(&z) {
            assert!((m - 0.05 * 2.0 * zi).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_fitness_leaves_mean_unchanged() {
        let mut nes = Nes::with_initial(4, 1, NesParams::default(), vec![0.5; 4]).unwrap();
        nes.ask().unwrap();
        nes.tell(&[0.0]).unwrap();
        assert_eq!(nes.mean(), &[0.5; 4]);
    }

    #[test]
    fn equal_fitnesses_cancel_with_baseline() {
        let params = NesParams {
            lambda: 6,
            ..Default::default()
        };
        let mut nes = Nes::with_initial(3, 2, params, vec![0.25; 3]).unwrap();
        nes.ask().unwrap();
        nes.tell(&[3.3; 6]).unwrap();
        for &m in nes.mean() {
            assert!((m - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let mut nes = Nes::new(3, 0, NesParams::default()).unwrap();
        nes.ask().unwrap();
        assert!(matches!(
            nes.tell(&[1.0, 2.0]),
            Err(EsError::FitnessCountMismatch {
                expected: 1,
                actual: 2
            })
        ));
    }

    #[test]
    fn non_finite_fitness_is_skipped() {
        let mut nes = Nes::with_initial(2, 5, NesParams::default(), vec![1.0, -1.0]).unwrap();
        nes.ask().unwrap();
        nes.tell(&[f64::NAN]).unwrap();
        assert_eq!(nes.mean(), &[1.0, -1.0]);
        assert!(nes.mean().iter().all(|m| m.is_finite()));
    }

    #[test]
    fn noise_is_zero_mean() {
        // 10^5 sampled z vectors: per-coordinate empirical mean within
        // 4/sqrt(10^5) of zero. Fitness 0 keeps the mean pinned so the
        // noise can be read back off the candidates.
        let n = 5;
        let mut nes = Nes::with_initial(n, 123, NesParams::default(), vec![0.0; n]).unwrap();
        let draws = 100_000usize;
        let mut sums = vec![0.0; n];
        for _ in 0..draws {
            let batch = nes.ask().unwrap();
            for (s, &v) in sums.iter_mut().zip(&batch[0]) {
                *s += v;
            }
            nes.tell(&[0.0]).unwrap();
        }
        let bound = 4.0 / (draws as f64).sqrt();
        for s in &sums {
            let mean = s / draws as f64;
            assert!(mean.abs() < bound, "per-coordinate mean {mean} exceeds {bound}");
        }
    }
}
