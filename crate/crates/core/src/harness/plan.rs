//! Experiment orchestration: the (image × algorithm × ε × repetition)
//! grid, with per-cell deterministic seeds, an append-only line-record
//! results file, and interrupt-and-resume support.
//!
//! Workers may run in parallel, but records are flushed strictly in cell
//! order, so the results file of any run — parallel, sequential,
//! interrupted and resumed — is byte-identical for the same plan.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackMode};
use crate::es::Algorithm;
use crate::oracle::{ClassifierOracle, OracleError};
use crate::tensor::PerturbationGenome;

use super::dataset::Dataset;
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub dataset: Dataset,
    pub algorithms: Vec<Algorithm>,
    pub epsilons: Vec<f64>,
    pub targeted: bool,
    pub budget: u64,
    pub scale: usize,
    pub genome_shape: (usize, usize, usize),
    pub base_seed: u64,
    pub repetitions: u32,
}

impl ExperimentPlan {
    pub fn total_cells(&self) -> u64 {
        self.dataset.len() as u64
            * self.algorithms.len() as u64
            * self.epsilons.len() as u64
            * u64::from(self.repetitions)
    }

    /// Descriptor of cell `id` under the fixed nesting order
    /// image → algorithm → epsilon → repetition.
    fn descriptor(&self, id: u64) -> RunDescriptor {
        let reps = u64::from(self.repetitions);
        let eps_count = self.epsilons.len() as u64;
        let algo_count = self.algorithms.len() as u64;

        let repetition = (id % reps) as u32;
        let rest = id / reps;
        let epsilon = self.epsilons[(rest % eps_count) as usize];
        let rest = rest / eps_count;
        let algorithm = self.algorithms[(rest % algo_count) as usize];
        let image_index = (rest / algo_count) as usize;

        RunDescriptor {
            cell: id,
            image: self.dataset.entries[image_index].filename.clone(),
            image_index,
            algorithm,
            epsilon,
            seed: derive_cell_seed(self.base_seed, image_index, algorithm, epsilon, repetition),
            repetition,
        }
    }

    pub fn validate(&self, oracle: &dyn ClassifierOracle) -> Result<(), HarnessError> {
        let plan_err = |msg: String| Err(HarnessError::Plan(msg));
        if self.algorithms.is_empty() {
            return plan_err("no algorithms selected".into());
        }
        if self.epsilons.is_empty() {
            return plan_err("no epsilon values selected".into());
        }
        if self.epsilons.iter().any(|&e| !(e.is_finite() && e > 0.0)) {
            return plan_err(format!("epsilons must be positive reals, got {:?}", self.epsilons));
        }
        if self.repetitions == 0 {
            return plan_err("repetitions must be at least 1".into());
        }
        if self.budget == 0 {
            return plan_err("query budget must be at least 1".into());
        }
        if self.dataset.is_empty() {
            return Err(HarnessError::EmptyDataset);
        }
        let classes = oracle.num_classes();
        if self.dataset.class_count > classes {
            return plan_err(format!(
                "dataset labels imply {} classes but the oracle has {classes}",
                self.dataset.class_count
            ));
        }
        let shape = oracle.input_shape();
        let (gh, gw, gc) = self.genome_shape;
        for entry in &self.dataset.entries {
            if entry.image.shape() != shape {
                return plan_err(format!(
                    "image {} has shape {:?} but the oracle expects {:?}",
                    entry.filename,
                    entry.image.shape(),
                    shape
                ));
            }
            if self.targeted && entry.target_class.is_none() {
                return plan_err(format!(
                    "targeted plan but image {} has no target class",
                    entry.filename
                ));
            }
        }
        let (ih, iw, ic) = shape;
        if gh * self.scale != ih || gw * self.scale != iw || gc != ic {
            return plan_err(format!(
                "genome {gh}x{gw}x{gc} at scale {} does not tile the {ih}x{iw}x{ic} images exactly",
                self.scale
            ));
        }
        Ok(())
    }
}

/// Identifies one grid cell and the seed its attack runs with.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDescriptor {
    pub cell: u64,
    pub image: String,
    pub image_index: usize,
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub seed: u64,
    pub repetition: u32,
}

/// One line of the results file: the run descriptor plus either the
/// outcome fields (tensors excluded; the genome lives in a sidecar file)
/// or a diagnostic for a failed cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell: u64,
    pub image: String,
    pub image_index: usize,
    pub algorithm: Algorithm,
    pub epsilon: f64,
    pub seed: u64,
    pub repetition: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub success: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queries: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub genome_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellRecord {
    fn matches(&self, descriptor: &RunDescriptor) -> bool {
        self.cell == descriptor.cell
            && self.image == descriptor.image
            && self.image_index == descriptor.image_index
            && self.algorithm == descriptor.algorithm
            && self.epsilon == descriptor.epsilon
            && self.seed == descriptor.seed
            && self.repetition == descriptor.repetition
    }
}

/// Sidecar serialization of a perturbation genome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenomeFile {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub epsilon: f64,
    pub data: Vec<f64>,
}

impl GenomeFile {
    pub fn from_genome(genome: &PerturbationGenome) -> Self {
        let (height, width, channels) = genome.shape();
        Self {
            height,
            width,
            channels,
            epsilon: genome.epsilon(),
            data: genome.data().to_vec(),
        }
    }

    pub fn into_genome(self) -> Result<PerturbationGenome, crate::tensor::TensorError> {
        PerturbationGenome::new(self.height, self.width, self.channels, self.epsilon, self.data)
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic per-cell seed from the plan's base seed and the cell's
/// coordinates. Stable across platforms.
pub fn derive_cell_seed(
    base_seed: u64,
    image_index: usize,
    algorithm: Algorithm,
    epsilon: f64,
    repetition: u32,
) -> u64 {
    let algo_tag = match algorithm {
        Algorithm::OnePlusOne => 1u64,
        Algorithm::Nes => 2,
        Algorithm::CmaEs => 3,
    };
    let mut state = base_seed;
    for component in [
        image_index as u64,
        algo_tag,
        epsilon.to_bits(),
        u64::from(repetition),
    ] {
        state = mix(state ^ component);
    }
    state
}

/// Where a plan writes its outputs.
#[derive(Debug, Clone)]
pub struct PlanOutputs {
    pub results_path: PathBuf,
    pub genome_dir: PathBuf,
}

fn genome_file_name(cell: u64) -> String {
    format!("cell{cell:05}.genome.json")
}

fn run_cell<O: ClassifierOracle>(
    plan: &ExperimentPlan,
    descriptor: RunDescriptor,
    oracle: Result<O, OracleError>,
    genome_dir: &Path,
) -> CellRecord {
    let mut record = CellRecord {
        cell: descriptor.cell,
        image: descriptor.image.clone(),
        image_index: descriptor.image_index,
        algorithm: descriptor.algorithm,
        epsilon: descriptor.epsilon,
        seed: descriptor.seed,
        repetition: descriptor.repetition,
        success: None,
        queries: None,
        best_fitness: None,
        predicted_class: None,
        genome_file: None,
        error: None,
    };
    let entry = &plan.dataset.entries[descriptor.image_index];
    let mode = if plan.targeted {
        AttackMode::Targeted {
            target_class: entry.target_class.expect("validated by the plan"),
        }
    } else {
        AttackMode::Untargeted
    };
    let config = AttackConfig {
        mode,
        true_class: entry.true_class,
        epsilon: descriptor.epsilon,
        genome_shape: plan.genome_shape,
        scale: plan.scale,
        budget: plan.budget,
        algorithm: descriptor.algorithm,
        seed: descriptor.seed,
        overrides: BTreeMap::new(),
    };

    let attempt = oracle
        .map_err(|e| e.to_string())
        .and_then(|mut oracle| {
            run_attack(&entry.image, &config, &mut oracle).map_err(|e| e.to_string())
        })
        .and_then(|outcome| {
            let genome_file = if outcome.success {
                let name = genome_file_name(descriptor.cell);
                let sidecar = GenomeFile::from_genome(&outcome.final_genome);
                let text = serde_json::to_string(&sidecar).expect("genome serializes");
                std::fs::write(genome_dir.join(&name), text + "\n").map_err(|e| e.to_string())?;
                Some(name)
            } else {
                None
            };
            Ok((outcome, genome_file))
        });

    match attempt {
        Ok((outcome, genome_file)) => {
            record.success = Some(outcome.success);
            record.queries = Some(outcome.queries_used);
            record.best_fitness = Some(outcome.best_fitness);
            record.predicted_class = Some(outcome.predicted_class_at_end);
            record.genome_file = genome_file;
        }
        // One failing attack never aborts a grid; the diagnostic rides
        // along in the results file.
        Err(detail) => record.error = Some(detail),
    }
    record
}

/// Reads a results file back, tolerating a partial trailing line (the
/// footprint of an interrupted run). Returns the valid records.
pub fn load_results(path: &Path) -> Result<Vec<CellRecord>, HarnessError> {
    let text = match std::fs::read_to_string(path) {
        Ok(text) => text,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(HarnessError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut records = Vec::new();
    let mut offset = 0usize;
    for (idx, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        match serde_json::from_str::<CellRecord>(line.trim_end()) {
            Ok(record) if complete => records.push(record),
            Ok(_) | Err(_) if !complete => break, // partial trailing line
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(HarnessError::Results {
                    path: path.to_path_buf(),
                    line: idx + 1,
                    detail: e.to_string(),
                })
            }
        }
        offset += line.len();
    }
    let _ = offset;
    Ok(records)
}

/// Executes every cell of the plan, streaming records to the results
/// file as they complete. With `resume`, cells already present in the
/// file are skipped; the final file is byte-identical to an
/// uninterrupted run either way.
pub fn run_plan<O, F>(
    plan: &ExperimentPlan,
    oracle_factory: F,
    outputs: &PlanOutputs,
    parallelism: usize,
    resume: bool,
) -> Result<Vec<CellRecord>, HarnessError>
where
    O: ClassifierOracle,
    F: Fn() -> Result<O, OracleError> + Sync,
{
    let probe = oracle_factory()?;
    plan.validate(&probe)?;
    drop(probe);

    let total = plan.total_cells();
    let mut completed: Vec<CellRecord> = if resume {
        load_results(&outputs.results_path)?
    } else {
        Vec::new()
    };
    if completed.len() as u64 > total {
        completed.truncate(total as usize);
    }
    for (idx, record) in completed.iter().enumerate() {
        let descriptor = plan.descriptor(idx as u64);
        if !record.matches(&descriptor) {
            return Err(HarnessError::Results {
                path: outputs.results_path.clone(),
                line: idx + 1,
                detail: format!(
                    "existing record does not match this plan (cell {}, image {})",
                    record.cell, descriptor.image
                ),
            });
        }
    }

    std::fs::create_dir_all(&outputs.genome_dir).map_err(|source| HarnessError::Io {
        path: outputs.genome_dir.clone(),
        source,
    })?;

    // Rewrite the valid prefix (drops any partial trailing line), then
    // append new records in cell order.
    let io_err = |source| HarnessError::Io {
        path: outputs.results_path.clone(),
        source,
    };
    let file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(&outputs.results_path)
        .map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for record in &completed {
        serde_json::to_writer(&mut writer, record).map_err(|e| HarnessError::Results {
            path: outputs.results_path.clone(),
            line: 0,
            detail: e.to_string(),
        })?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;

    let start = completed.len() as u64;
    if start == total {
        return Ok(completed);
    }

    let next_cell = AtomicU64::new(start);
    let workers = parallelism.clamp(1, (total - start) as usize);
    let (sender, receiver) = mpsc::channel::<CellRecord>();

    let mut new_records: Vec<CellRecord> = Vec::with_capacity((total - start) as usize);
    let mut write_error: Option<HarnessError> = None;
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let sender = sender.clone();
            let next_cell = &next_cell;
            let oracle_factory = &oracle_factory;
            let genome_dir = outputs.genome_dir.clone();
            scope.spawn(move || loop {
                let id = next_cell.fetch_add(1, Ordering::SeqCst);
                if id >= total {
                    break;
                }
                let descriptor = plan.descriptor(id);
                let record = run_cell(plan, descriptor, oracle_factory(), &genome_dir);
                if sender.send(record).is_err() {
                    break;
                }
            });
        }
        drop(sender);

        // Flush strictly in cell order; out-of-order completions wait in
        // the reorder buffer.
        let mut buffer: BTreeMap<u64, CellRecord> = BTreeMap::new();
        let mut next_write = start;
        for record in receiver {
            buffer.insert(record.cell, record);
            while let Some(record) = buffer.remove(&next_write) {
                let result = serde_json::to_writer(&mut writer, &record)
                    .map_err(std::io::Error::other)
                    .and_then(|_| writer.write_all(b"\n"))
                    .and_then(|_| writer.flush());
                if let Err(source) = result {
                    write_error.get_or_insert(HarnessError::Io {
                        path: outputs.results_path.clone(),
                        source,
                    });
                }
                new_records.push(record);
                next_write += 1;
            }
        }
    });
    if let Some(err) = write_error {
        return Err(err);
    }

    completed.extend(new_records);
    Ok(completed)
}
