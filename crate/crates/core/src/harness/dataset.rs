//! Dataset ingestion: a directory of binary PPM images indexed by a
//! `labels.csv` with header `filename,label[,target]`.

use std::path::{Path, PathBuf};

use crate::oracle::{ClassifierOracle, OracleError};
use crate::tensor::ImageTensor;

use super::ppm::read_ppm;
use super::HarnessError;

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub filename: String,
    pub image: ImageTensor,
    pub true_class: usize,
    pub target_class: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
    /// Implied by the labels: max(label, target) + 1. Checked against the
    /// oracle's class count at plan validation.
    pub class_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Loads `root/labels.csv` and every referenced PPM file.
pub fn load_dataset(root: &Path) -> Result<Dataset, HarnessError> {
    let labels_path = root.join("labels.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(&labels_path)
        .map_err(|e| HarnessError::Labels {
            path: labels_path.clone(),
            line: 1,
            detail: e.to_string(),
        })?;

    let labels_err = |line: u64, detail: String| HarnessError::Labels {
        path: labels_path.clone(),
        line: line as usize,
        detail,
    };

    {
        let headers = reader
            .headers()
            .map_err(|e| labels_err(1, e.to_string()))?;
        let fields: Vec<&str> = headers.iter().collect();
        let valid = fields.as_slice() == ["filename", "label"]
            || fields.as_slice() == ["filename", "label", "target"];
        if !valid {
            return Err(labels_err(
                1,
                format!("header must be `filename,label[,target]`, got {fields:?}"),
            ));
        }
    }

    let mut entries = Vec::new();
    let mut class_count = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, csv::Position::line);
            labels_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, csv::Position::line);
        if record.len() < 2 || record.len() > 3 {
            return Err(labels_err(
                line,
                format!("expected 2 or 3 fields, got {}", record.len()),
            ));
        }
        let filename = record[0].to_string();
        let true_class: usize = record[1]
            .trim()
            .parse()
            .map_err(|_| labels_err(line, format!("label `{}` is not an integer", &record[1])))?;
        let target_class = match record.get(2).map(str::trim) {
            None | Some("") => None,
            Some(raw) => {
                let target: usize = raw
                    .parse()
                    .map_err(|_| labels_err(line, format!("target `{raw}` is not an integer")))?;
                if target == true_class {
                    return Err(labels_err(
                        line,
                        format!("target {target} equals the true label"),
                    ));
                }
                Some(target)
            }
        };
        class_count = class_count
            .max(true_class + 1)
            .max(target_class.map_or(0, |t| t + 1));

        let image = read_ppm(&root.join(&filename))?;
        entries.push(DatasetEntry {
            filename,
            image,
            true_class,
            target_class,
        });
    }

    Ok(Dataset {
        root: root.to_path_buf(),
        entries,
        class_count,
    })
}

/// Keeps the entries the oracle classifies correctly, order preserved.
/// These classifications are not charged to any attack ledger.
pub fn filter_correctly_classified(
    dataset: &Dataset,
    oracle: &mut dyn ClassifierOracle,
) -> Result<Dataset, OracleError> {
    let mut entries = Vec::with_capacity(dataset.entries.len());
    for entry in &dataset.entries {
        let probs = oracle.classify(&entry.image)?;
        if probs.top_class() == entry.true_class {
            entries.push(entry.clone());
        }
    }
    Ok(Dataset {
        root: dataset.root.clone(),
        entries,
        class_count: dataset.class_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{DenseLayer, FeedForwardModel, InProcessOracle, Layer};
    use crate::harness::ppm::write_ppm;

    fn write_dataset(dir: &Path, labels: &str, images: &[(&str, [f64; 3])]) {
        std::fs::write(dir.join("labels.csv"), labels).unwrap();
        for (name, rgb) in images {
            let image = ImageTensor::new(1, 1, 3, rgb.to_vec()).unwrap();
            write_ppm(&dir.join(name), &image).unwrap();
        }
    }

    #[test]
    fn loads_labels_and_images() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "filename,label,target\na.ppm,0,2\nb.ppm,1,\n",
            &[("a.ppm", [0.0, 0.0, 0.0]), ("b.ppm", [1.0, 1.0, 1.0])],
        );
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.entries[0].target_class, Some(2));
        assert_eq!(ds.entries[1].target_class, None);
        assert_eq!(ds.class_count, 3);
        assert_eq!(ds.entries[1].image.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn rejects_target_equal_to_label() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "filename,label,target\na.ppm,1,1\n",
            &[("a.ppm", [0.5, 0.5, 0.5])],
        );
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("equals the true label"), "{err}");
    }

    #[test]
    fn missing_image_file_aborts_with_context() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "filename,label\nghost.ppm,0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("ghost.ppm"), "{err}");
    }

    #[test]
    fn bad_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("labels.csv"), "file,class\nx.ppm,0\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    fn two_class_model() -> FeedForwardModel {
        // classifies by whether the red channel beats 0.5
        FeedForwardModel::new(
            (1, 1, 3),
            vec![
                Layer::Dense(DenseLayer {
                    inputs: 3,
                    outputs: 2,
                    weights: vec![-10.0, 0.0, 0.0, 10.0, 0.0, 0.0],
                    bias: vec![5.0, -5.0],
                }),
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn filter_keeps_the_correct_subset_in_order() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            "filename,label\na.ppm,0\nb.ppm,0\nc.ppm,1\n",
            &[
                ("a.ppm", [0.0, 0.0, 0.0]), // class 0: kept
                ("b.ppm", [1.0, 0.0, 0.0]), // class 1 but labeled 0: dropped
                ("c.ppm", [1.0, 0.5, 0.5]), // class 1: kept
            ],
        );
        let ds = load_dataset(dir.path()).unwrap();
        let model = two_class_model();
        let mut oracle = InProcessOracle::new(&model);
        let filtered = filter_correctly_classified(&ds, &mut oracle).unwrap();
        let names: Vec<&str> = filtered.entries.iter().map(|e| e.filename.as_str()).collect();
        assert_eq!(names, ["a.ppm", "c.ppm"]);
    }
}
