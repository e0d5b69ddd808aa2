//! The three evolution strategies behind a single ask/tell interface over
//! flat real vectors. All of them maximize a caller-supplied fitness and
//! draw every random number from one seeded generator, so a fixed
//! (algorithm, dimension, seed, params) tuple yields an identical
//! candidate stream across runs.

mod cma;
mod nes;
mod one_plus_one;

pub use cma::{CmaEs, CmaParams};
pub use nes::{Nes, NesParams};
pub use one_plus_one::{OnePlusOne, OnePlusOneParams};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EsError {
    #[error("optimizer protocol violation: {0}")]
    Protocol(&'static str),
    #[error("expected {expected} fitness values, got {actual}")]
    FitnessCountMismatch { expected: usize, actual: usize },
    #[error("invalid optimizer parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },
    #[error("unknown optimizer parameter `{0}` for this algorithm")]
    UnknownParameter(String),
    #[error("optimizer dimension must be at least 1")]
    ZeroDimension,
    #[error("initial point has length {actual}, expected {expected}")]
    InitialPointLength { expected: usize, actual: usize },
    #[error("covariance eigendecomposition failed: {0}")]
    Eigen(String),
}

/// The three strategies compared by the attack engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "1p1")]
    OnePlusOne,
    #[serde(rename = "nes")]
    Nes,
    #[serde(rename = "cmaes")]
    CmaEs,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::OnePlusOne, Algorithm::Nes, Algorithm::CmaEs];

    /// Short token used in CLI flags, results files and reports.
    pub fn token(self) -> &'static str {
        match self {
            Algorithm::OnePlusOne => "1p1",
            Algorithm::Nes => "nes",
            Algorithm::CmaEs => "cmaes",
        }
    }

    /// Hard per-run generation cap, independent of the query budget.
    pub fn generation_cap(self) -> u64 {
        match self {
            Algorithm::OnePlusOne | Algorithm::Nes => 10_000,
            Algorithm::CmaEs => 400,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1p1" | "one_plus_one" => Ok(Algorithm::OnePlusOne),
            "nes" => Ok(Algorithm::Nes),
            "cmaes" | "cma_es" => Ok(Algorithm::CmaEs),
            other => Err(format!(
                "unknown algorithm `{other}` (expected 1p1, nes or cmaes)"
            )),
        }
    }
}

/// Ask/tell optimizer over flat real vectors, maximizing fitness.
///
/// Calls must alternate strictly ask → tell → ask → …; `ask` returns a
/// batch of `population_size` candidates and the following `tell` must
/// supply exactly one fitness per candidate, in candidate order.
pub trait Optimizer: Send {
    fn algorithm(&self) -> Algorithm;
    fn dimension(&self) -> usize;
    fn population_size(&self) -> usize;
    /// Completed ask/tell cycles.
    fn generation(&self) -> u64;
    fn ask(&mut self) -> Result<Vec<Vec<f64>>, EsError>;
    fn tell(&mut self, fitnesses: &[f64]) -> Result<(), EsError>;
}

/// Optional overrides for [`make_optimizer`], keyed by parameter name.
///
/// Recognized keys: `sigma0`, `adapt_period`, `adapt_factor` for (1+1)-ES;
/// `sigma`, `eta`, `lambda` for NES; `sigma0`, `lambda` for CMA-ES.
pub type ParamOverrides = BTreeMap<String, f64>;

struct OverrideReader<'a> {
    map: &'a ParamOverrides,
    seen: Vec<&'a str>,
}

impl<'a> OverrideReader<'a> {
    fn new(map: &'a ParamOverrides) -> Self {
        Self {
            map,
            seen: Vec::new(),
        }
    }

    fn real(&mut self, name: &'a str, default: f64) -> f64 {
        match self.map.get_key_value(name) {
            Some((key, &v)) => {
                self.seen.push(key);
                v
            }
            None => {
                let _ = name;
                default
            }
        }
    }

    fn count(&mut self, name: &'a str, default: usize) -> Result<usize, EsError> {
        match self.map.get_key_value(name) {
            Some((key, &v)) => {
                self.seen.push(key);
                if v.is_finite() && v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(EsError::InvalidParameter {
                        name: name.to_string(),
                        reason: format!("must be a positive integer, got {v}"),
                    })
                }
            }
            None => Ok(default),
        }
    }

    fn finish(self) -> Result<(), EsError> {
        for key in self.map.keys() {
            if !self.seen.iter().any(|s| *s == key) {
                return Err(EsError::UnknownParameter(key.clone()));
            }
        }
        Ok(())
    }
}

/// Builds an optimizer with the paper's defaults unless overridden:
/// (1+1)-ES σ₀ = 1; NES σ = 1, η = 0.05, λ = 1; CMA-ES λ = 25, σ₀ = 1,
/// C₀ = I. The initial search point / mean is drawn once from the
/// standard normal per coordinate, from the supplied seed.
pub fn make_optimizer(
    algorithm: Algorithm,
    dimension: usize,
    seed: u64,
    overrides: &ParamOverrides,
) -> Result<Box<dyn Optimizer>, EsError> {
    if dimension == 0 {
        return Err(EsError::ZeroDimension);
    }
    match algorithm {
        Algorithm::OnePlusOne => {
            let mut reader = OverrideReader::new(overrides);
            let params = OnePlusOneParams {
                sigma0: reader.real("sigma0", 1.0),
                adapt_period: reader.count("adapt_period", 10)? as u64,
                adapt_factor: reader.real("adapt_factor", 0.85),
            };
            reader.finish()?;
            Ok(Box::new(OnePlusOne::new(dimension, seed, params)?))
        }
        Algorithm::Nes => {
            let mut reader = OverrideReader::new(overrides);
            let params = NesParams {
                sigma: reader.real("sigma", 1.0),
                eta: reader.real("eta", 0.05),
                lambda: reader.count("lambda", 1)?,
            };
            reader.finish()?;
            Ok(Box::new(Nes::new(dimension, seed, params)?))
        }
        Algorithm::CmaEs => {
            let mut reader = OverrideReader::new(overrides);
            let params = CmaParams {
                sigma0: reader.real("sigma0", 1.0),
                lambda: reader.count("lambda", 25)?,
            };
            reader.finish()?;
            Ok(Box::new(CmaEs::new(dimension, seed, params)?))
        }
    }
}

/// One standard-normal draw per coordinate.
pub(crate) fn standard_normal_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_defaults() {
        let none = ParamOverrides::new();
        let cma = make_optimizer(Algorithm::CmaEs, 4, 0, &none).unwrap();
        assert_eq!(cma.population_size(), 25);
        let nes = make_optimizer(Algorithm::Nes, 4, 0, &none).unwrap();
        assert_eq!(nes.population_size(), 1);
        let opo = make_optimizer(Algorithm::OnePlusOne, 4, 0, &none).unwrap();
        assert_eq!(opo.population_size(), 1);
    }

    #[test]
    fn rejects_zero_dimension_and_unknown_params() {
        let none = ParamOverrides::new();
        assert!(matches!(
            make_optimizer(Algorithm::Nes, 0, 0, &none),
            Err(EsError::ZeroDimension)
        ));
        let mut bad = ParamOverrides::new();
        bad.insert("learning_rate".into(), 0.1);
        assert!(matches!(
            make_optimizer(Algorithm::Nes, 3, 0, &bad),
            Err(EsError::UnknownParameter(_))
        ));
    }

    #[test]
    fn overrides_apply() {
        let mut ov = ParamOverrides::new();
        ov.insert("lambda".into(), 5.0);
        let cma = make_optimizer(Algorithm::CmaEs, 4, 0, &ov).unwrap();
        assert_eq!(cma.population_size(), 5);
        assert!(matches!(
            make_optimizer(Algorithm::Nes, 4, 0, &ov),
            Ok(o) if o.population_size() == 5
        ));
    }

    #[test]
    fn algorithm_tokens_round_trip() {
        for algo in Algorithm::ALL {
            assert_eq!(algo.token().parse::<Algorithm>().unwrap(), algo);
        }
        assert!("pso".parse::<Algorithm>().is_err());
    }

    #[test]
    fn same_seed_identical_streams() {
        for algo in Algorithm::ALL {
            let none = ParamOverrides::new();
            let mut a = make_optimizer(algo, 7, 42, &none).unwrap();
            let mut b = make_optimizer(algo, 7, 42, &none).unwrap();
            for _ in 0..3 {
                let ba = a.ask().unwrap();
                let bb = b.ask().unwrap();
                assert_eq!(ba, bb);
                let fits: Vec<f64> = ba.iter().map(|c| -c.iter().map(|v| v * v).sum::<f64>()).collect();
                a.tell(&fits).unwrap();
                b.tell(&fits).unwrap();
            }
        }
    }
}
