//! (1+1)-ES: single parent, single offspring, elitist selection, with the
//! 1/5 success rule for step-size adaptation (period G = 10, factor
//! a = 0.85 by default).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{standard_normal_vector, Algorithm, EsError, Optimizer};

#[derive(Debug, Clone, Copy)]
pub struct OnePlusOneParams {
    /// Initial mutation step size.
    pub sigma0: f64,
    /// Generations between step-size adaptations (G).
    pub adapt_period: u64,
    /// Multiplicative adaptation factor (a); sigma ← sigma/a on a success
    /// ratio above 1/5, sigma ← sigma·a below it.
    pub adapt_factor: f64,
}

impl Default for OnePlusOneParams {
    fn default() -> Self {
        Self {
            sigma0: 1.0,
            adapt_period: 10,
            adapt_factor: 0.85,
        }
    }
}

impl OnePlusOneParams {
    fn validate(&self) -> Result<(), EsError> {
        if !(self.sigma0.is_finite() && self.sigma0 >= 0.0) {
            return Err(EsError::InvalidParameter {
                name: "sigma0".into(),
                reason: format!("must be a non-negative real, got {}", self.sigma0),
            });
        }
        if self.adapt_period == 0 {
            return Err(EsError::InvalidParameter {
                name: "adapt_period".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.adapt_factor.is_finite() && self.adapt_factor > 0.0 && self.adapt_factor < 1.0) {
            return Err(EsError::InvalidParameter {
                name: "adapt_factor".into(),
                reason: format!("must lie in (0, 1), got {}", self.adapt_factor),
            });
        }
        Ok(())
    }
}

pub struct OnePlusOne {
    dimension: usize,
    current: Vec<f64>,
    current_fitness: f64,
    sigma: f64,
    params: OnePlusOneParams,
    success_window: Vec<bool>,
    generations: u64,
    rng: ChaCha8Rng,
    pending: Option<Vec<f64>>,
}

impl OnePlusOne {
    /// Initial point drawn N(0, 1) per coordinate from `seed`.
    pub fn new(dimension: usize, seed: u64, params: OnePlusOneParams) -> Result<Self, EsError> {
        if dimension == 0 {
            return Err(EsError::ZeroDimension);
        }
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let current = standard_normal_vector(&mut rng, dimension);
        Ok(Self::from_parts(dimension, current, params, rng))
    }

    /// Starts from an explicit point instead of the N(0, 1) draw.
    pub fn with_initial(
        dimension: usize,
        seed: u64,
        params: OnePlusOneParams,
        initial: Vec<f64>,
    ) -> Result<Self, EsError> {
        if dimension == 0 {
            return Err(EsError::ZeroDimension);
        }
        params.validate()?;
        if initial.len() != dimension {
            return Err(EsError::InitialPointLength {
                expected: dimension,
                actual: initial.len(),
            });
        }
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self::from_parts(dimension, initial, params, rng))
    }

    fn from_parts(
        dimension: usize,
        current: Vec<f64>,
        params: OnePlusOneParams,
        rng: ChaCha8Rng,
    ) -> Self {
        Self {
            dimension,
            current,
            // The parent is never evaluated directly (ask always mutates),
            // so the first offspring is accepted unconditionally.
            current_fitness: f64::NEG_INFINITY,
            sigma: params.sigma0,
            params,
            success_window: Vec::with_capacity(params.adapt_period as usize),
            generations: 0,
            rng,
            pending: None,
        }
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    pub fn current_fitness(&self) -> f64 {
        self.current_fitness
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

impl Optimizer for OnePlusOne {
    fn algorithm(&self) -> Algorithm {
        Algorithm::OnePlusOne
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn population_size(&self) -> usize {
        1
    }

    fn generation(&self) -> u64 {
        self.generations
    }

    fn ask(&mut self) -> Result<Vec<Vec<f64>>, EsError> {
        if self.pending.is_some() {
            return Err(EsError::Protocol("ask called twice without tell"));
        }
        let z = standard_normal_vector(&mut self.rng, self.dimension);
        let candidate: Vec<f64> = self
            .current
            .iter()
            .zip(&z)
            .map(|(&c, &zi)| c + self.sigma * zi)
            .collect();
        self.pending = Some(candidate.clone());
        Ok(vec![candidate])
    }

    fn tell(&mut self, fitnesses: &[f64]) -> Result<(), EsError> {
        let candidate = self
            .pending
            .take()
            .ok_or(EsError::Protocol("tell called without a preceding ask"))?;
        if fitnesses.len() != 1 {
            self.pending = Some(candidate);
            return Err(EsError::FitnessCountMismatch {
                expected: 1,
                actual: fitnesses.len(),
            });
        }
        // Strict improvement: equal fitness counts as failure, which keeps
        // sigma from inflating on plateaus. NaN compares false, so a
        // non-finite fitness is rejected too.
        let fitness = fitnesses[0];
        let success = fitness > self.current_fitness;
        if success {
            self.current = candidate;
            self.current_fitness = fitness;
        }
        self.success_window.push(success);
        self.generations += 1;

        if self.success_window.len() as u64 >= self.params.adapt_period {
            let successes = self.success_window.iter().filter(|&&s| s).count() as u64;
            // p_s vs 1/5 compared in integers: 5·successes vs G, exact.
            let period = self.params.adapt_period;
            if 5 * successes > period {
                self.sigma /= self.params.adapt_factor;
            } else if 5 * successes < period {
                self.sigma *= self.params.adapt_factor;
            }
            self.success_window.clear();
        }
        Ok(())
    }
}
