//! The black-box boundary: the classifier is reachable only through
//! [`ClassifierOracle::classify`], which returns class probabilities and
//! nothing else — no gradients, no parameters. [`QueryLedger`] meters
//! every classification an attack is charged for.

mod external;
mod model;

pub use external::{protocol, spawn_external_oracle, ExternalOracle};
pub use model::{forward, load_model, parse_model, DenseLayer, FeedForwardModel, Layer};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{ImageTensor, ProbabilityVector, TensorError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("failed to read model file {path}: {source}")]
    ModelRead {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("model file {path}: {detail}")]
    ModelSchema { path: PathBuf, detail: String },
    #[error("model file {path}: parse error at line {line}, column {column}: {detail}")]
    ModelParse {
        path: PathBuf,
        line: usize,
        column: usize,
        detail: String,
    },
    #[error("image shape {got:?} does not match oracle input shape {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("failed to spawn oracle process `{command}`: {source}")]
    Spawn {
        command: String,
        #[source]
        source: std::io::Error,
    },
    #[error("oracle handshake failed: {0}")]
    Handshake(String),
    #[error("oracle declared {declared} classes, expected {expected}")]
    HandshakeClassMismatch { expected: usize, declared: usize },
    #[error("oracle process exited mid-stream during {stage}")]
    ChildExited { stage: &'static str },
    #[error("failed to write oracle request: {0}")]
    RequestWrite(#[source] std::io::Error),
    #[error("failed to read oracle response: {0}")]
    ResponseRead(#[source] std::io::Error),
    #[error("malformed oracle response line: {0}")]
    MalformedResponse(String),
    #[error("oracle response id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("oracle response has {got} probabilities, expected {expected}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("oracle returned invalid probabilities: {0}")]
    InvalidProbabilities(#[from] TensorError),
    #[error("oracle failure at query {count}: {source}")]
    AtQuery {
        count: u64,
        #[source]
        source: Box<OracleError>,
    },
}

/// Query interface to the attacked classifier. Implementations must be
/// observationally pure: the same image yields the same probabilities.
pub trait ClassifierOracle {
    fn num_classes(&self) -> usize;
    fn input_shape(&self) -> (usize, usize, usize);
    fn classify(&mut self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError>;
}

/// Exact query accounting for one attack run: `count` increments by one
/// per classification routed through [`classify_counted`] and never
/// exceeds `budget`.
#[derive(Debug, Clone)]
pub struct QueryLedger {
    count: u64,
    budget: u64,
}

impl QueryLedger {
    pub fn new(budget: u64) -> Self {
        assert!(budget >= 1, "query budget must be positive");
        Self { count: 0, budget }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn exhausted(&self) -> bool {
        self.count >= self.budget
    }
}

/// Result of a metered classification.
#[derive(Debug, Clone)]
pub enum CountedClassification {
    Answered(ProbabilityVector),
    BudgetExhausted,
}

/// Routes one classification through the ledger: consumes exactly one
/// query if the budget allows, otherwise returns `BudgetExhausted`
/// without touching the oracle. Oracle failures carry the current count.
pub fn classify_counted(
    oracle: &mut dyn ClassifierOracle,
    ledger: &mut QueryLedger,
    image: &ImageTensor,
) -> Result<CountedClassification, OracleError> {
    if ledger.exhausted() {
        return Ok(CountedClassification::BudgetExhausted);
    }
    ledger.count += 1;
    match oracle.classify(image) {
        Ok(probs) => Ok(CountedClassification::Answered(probs)),
        Err(source) => Err(OracleError::AtQuery {
            count: ledger.count,
            source: Box::new(source),
        }),
    }
}

/// Adapter exposing a shared [`FeedForwardModel`] as a `ClassifierOracle`.
/// The model is immutable, so any number of adapters may coexist.
#[derive(Debug, Clone, Copy)]
pub struct InProcessOracle<'a> {
    model: &'a FeedForwardModel,
}

impl<'a> InProcessOracle<'a> {
    pub fn new(model: &'a FeedForwardModel) -> Self {
        Self { model }
    }
}

impl ClassifierOracle for InProcessOracle<'_> {
    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.model.input_shape()
    }

    fn classify(&mut self, image: &ImageTensor) -> Result<ProbabilityVector, OracleError> {
        forward(self.model, image)
    }
}
