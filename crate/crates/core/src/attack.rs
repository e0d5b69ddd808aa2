//! The attack loop: evaluate the fitness of clipped, upsampled
//! perturbations against the oracle, stop on the first success or on
//! budget exhaustion, and report the outcome.
//!
//! Pipeline order is fixed: clamp to [−ε, ε] → nearest-neighbor upsample
//! → add to the image with [0, 1] projection → one counted oracle query
//! → fitness and success test. The genome lives unconstrained in
//! optimizer space; projection happens only here, so the ε bound holds
//! on every query regardless of optimizer state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::es::{make_optimizer, Algorithm, EsError};
use crate::oracle::{
    classify_counted, ClassifierOracle, CountedClassification, OracleError, QueryLedger,
};
use crate::tensor::{ImageTensor, PerturbationGenome, ProbabilityVector, TensorError};

/// Probabilities are floored here before taking logs, bounding fitness
/// magnitudes without reordering comparisons above the floor.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Es(#[from] EsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMode {
    /// Success: the oracle's top class differs from the true class.
    Untargeted,
    /// Success: the oracle's top class equals the target.
    Targeted { target_class: usize },
}

/// Full specification of one attack run.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub true_class: usize,
    pub epsilon: f64,
    /// Genome dimensions (h, w, c); h·scale and w·scale must equal the
    /// image dimensions exactly, and c must match.
    pub genome_shape: (usize, usize, usize),
    pub scale: usize,
    pub budget: u64,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub overrides: BTreeMap<String, f64>,
}

impl AttackConfig {
    pub fn new(
        mode: AttackMode,
        true_class: usize,
        epsilon: f64,
        genome_shape: (usize, usize, usize),
        scale: usize,
        algorithm: Algorithm,
        seed: u64,
    ) -> Self {
        Self {
            mode,
            true_class,
            epsilon,
            genome_shape,
            scale,
            budget: 10_000,
            algorithm,
            seed,
            overrides: BTreeMap::new(),
        }
    }

    /// Checks every config invariant against the image and oracle. Runs
    /// before any query.
    pub fn validate(
        &self,
        image: &ImageTensor,
        oracle: &dyn ClassifierOracle,
    ) -> Result<(), AttackError> {
        let fail = |msg: String| Err(AttackError::Config(msg));
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.scale == 0 {
            return fail("scale must be at least 1".into());
        }
        if self.budget == 0 {
            return fail("query budget must be at least 1".into());
        }
        let (gh, gw, gc) = self.genome_shape;
        if gh == 0 || gw == 0 || gc == 0 {
            return fail(format!("genome shape must be positive, got {:?}", self.genome_shape));
        }
        let (ih, iw, ic) = image.shape();
        if gh * self.scale != ih || gw * self.scale != iw || gc != ic {
            return fail(format!(
                "genome {gh}x{gw}x{gc} at scale {} does not tile the {ih}x{iw}x{ic} image exactly",
                self.scale
            ));
        }
        if image.shape() != oracle.input_shape() {
            return fail(format!(
                "image shape {:?} does not match oracle input shape {:?}",
                image.shape(),
                oracle.input_shape()
            ));
        }
        let classes = oracle.num_classes();
        if self.true_class >= classes {
            return fail(format!(
                "true class {} out of range for {classes} classes",
                self.true_class
            ));
        }
        if let AttackMode::Targeted { target_class } = self.mode {
            if target_class >= classes {
                return fail(format!(
                    "target class {target_class} out of range for {classes} classes"
                ));
            }
            if target_class == self.true_class {
                return fail("target equals true label".into());
            }
        }
        Ok(())
    }
}

/// Result of one attack run.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub success: bool,
    pub queries_used: u64,
    /// Best-so-far genome (clamped); the successful genome on success.
    pub final_genome: PerturbationGenome,
    /// Present iff the attack succeeded.
    pub adversarial_image: Option<ImageTensor>,
    pub best_fitness: f64,
    /// The oracle's class for the final genome's image.
    pub predicted_class_at_end: usize,
}

/// Untargeted fitness: F_u(x') = −log f^(i)(x'), maximized to push
/// probability mass off the true class. Always ≥ 0.
pub fn fitness_untargeted(probs: &ProbabilityVector, true_class: usize) -> f64 {
    -probs.prob(true_class).max(PROBABILITY_FLOOR).ln()
}

/// Targeted fitness: F_t(x') = log f^(t)(x'), maximized to pull mass onto
/// the target class. Always ≤ 0.
pub fn fitness_targeted(probs: &ProbabilityVector, target_class: usize) -> f64 {
    probs.prob(target_class).max(PROBABILITY_FLOOR).ln()
}

/// The termination test: argmax flip (untargeted) or argmax capture
/// (targeted), on the oracle's probability vector.
pub fn success_predicate(probs: &ProbabilityVector, mode: AttackMode, true_class: usize) -> bool {
    match mode {
        AttackMode::Untargeted => probs.top_class() != true_class,
        AttackMode::Targeted { target_class } => probs.top_class() == target_class,
    }
}

fn fitness_for(probs: &ProbabilityVector, mode: AttackMode, true_class: usize) -> f64 {
    match mode {
        AttackMode::Untargeted => fitness_untargeted(probs, true_class),
        AttackMode::Targeted { target_class } => fitness_targeted(probs, target_class),
    }
}

/// One completed fitness evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub fitness: f64,
    pub success: bool,
    pub probs: ProbabilityVector,
    pub adversarial: ImageTensor,
}

#[derive(Debug, Clone)]
pub enum GenomeEvaluation {
    Evaluated(Evaluation),
    BudgetExhausted,
}

/// Runs one genome through the fixed pipeline, consuming exactly one
/// query unless the budget is already exhausted.
pub fn evaluate_genome(
    genome: &PerturbationGenome,
    image: &ImageTensor,
    config: &AttackConfig,
    oracle: &mut dyn ClassifierOracle,
    ledger: &mut QueryLedger,
) -> Result<GenomeEvaluation, AttackError> {
    let adversarial = image.perturbed(&genome.clamped().upsampled(config.scale))?;
    match classify_counted(oracle, ledger, &adversarial)? {
        CountedClassification::BudgetExhausted => Ok(GenomeEvaluation::BudgetExhausted),
        CountedClassification::Answered(probs) => {
            let fitness = fitness_for(&probs, config.mode, config.true_class);
            let success = success_predicate(&probs, config.mode, config.true_class);
            Ok(GenomeEvaluation::Evaluated(Evaluation {
                fitness,
                success,
                probs,
                adversarial,
            }))
        }
    }
}

struct BestSoFar {
    fitness: f64,
    genome: PerturbationGenome,
    predicted_class: usize,
}

/// Runs the full attack loop: ask → evaluate each candidate → stop
/// immediately on the first success (mid-batch stop included) → tell →
/// repeat until success, budget exhaustion, or the algorithm's
/// generation cap. Every oracle call is counted, including the first.
pub fn run_attack(
    image: &ImageTensor,
    config: &AttackConfig,
    oracle: &mut dyn ClassifierOracle,
) -> Result<AttackOutcome, AttackError> {
    config.validate(image, oracle)?;

    let (gh, gw, gc) = config.genome_shape;
    let dimension = gh * gw * gc;
    let mut optimizer = make_optimizer(config.algorithm, dimension, config.seed, &config.overrides)?;
    let mut ledger = QueryLedger::new(config.budget);
    let generation_cap = config.algorithm.generation_cap();

    let mut best: Option<BestSoFar> = None;

    'generations: while optimizer.generation() < generation_cap {
        let batch = optimizer.ask()?;
        let mut fitnesses = Vec::with_capacity(batch.len());
        for candidate in batch {
            // A diverged optimizer could emit non-finite coordinates;
            // such a candidate is ranked last without spending a query.
            if !candidate.iter().all(|v| v.is_finite()) {
                fitnesses.push(f64::NEG_INFINITY);
                continue;
            }
            let genome = PerturbationGenome::new(gh, gw, gc, config.epsilon, candidate)?;
            match evaluate_genome(&genome, image, config, oracle, &mut ledger)? {
                GenomeEvaluation::BudgetExhausted => break 'generations,
                GenomeEvaluation::Evaluated(eval) => {
                    let improved = best.as_ref().map_or(true, |b| eval.fitness > b.fitness);
                    if improved {
                        best = Some(BestSoFar {
                            fitness: eval.fitness,
                            genome: genome.clamped(),
                            predicted_class: eval.probs.top_class(),
                        });
                    }
                    if eval.success {
                        let best = best.expect("a successful evaluation was recorded");
                        return Ok(AttackOutcome {
                            success: true,
                            queries_used: ledger.count(),
                            final_genome: genome.clamped(),
                            adversarial_image: Some(eval.adversarial),
                            best_fitness: best.fitness,
                            predicted_class_at_end: eval.probs.top_class(),
                        });
                    }
                    fitnesses.push(eval.fitness);
                }
            }
        }
        optimizer.tell(&fitnesses)?;
    }

    // No success: the budget stopped the run (count == budget) or the
    // generation cap did (count < budget); queries_used records the
    // exact count either way.
    let best = best.ok_or_else(|| {
        AttackError::Config("attack ended before any candidate was evaluated".into())
    })?;
    Ok(AttackOutcome {
        success: false,
        queries_used: ledger.count(),
        final_genome: best.genome,
        adversarial_image: None,
        best_fitness: best.fitness,
        predicted_class_at_end: best.predicted_class,
    })
}
