//! Fixture generation: a seeded random feed-forward victim plus a dataset
//! of images the victim classifies correctly by construction (labels are
//! assigned round-robin and images rejection-sampled until the model
//! agrees). Deterministic for a fixed seed.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::oracle::{forward, DenseLayer, FeedForwardModel, Layer};
use crate::tensor::ImageTensor;

use super::ppm::write_ppm;
use super::HarnessError;

const MAX_REJECTION_DRAWS: u32 = 100_000;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub input_shape: (usize, usize, usize),
    pub classes: usize,
    /// Hidden dense widths; each is followed by a relu.
    pub hidden_layers: Vec<usize>,
    pub image_count: usize,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            input_shape: (16, 16, 3),
            classes: 4,
            hidden_layers: vec![16],
            image_count: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub model: PathBuf,
    pub dataset_dir: PathBuf,
}

/// Emits `out_dir/model.json` and `out_dir/dataset/{labels.csv, *.ppm}`.
/// Every image carries a random target class distinct from its label, so
/// the same fixture serves targeted runs.
pub fn generate_fixtures(
    seed: u64,
    spec: &FixtureSpec,
    out_dir: &Path,
) -> Result<FixturePaths, HarnessError> {
    let (h, w, c) = spec.input_shape;
    if h == 0 || w == 0 || c == 0 {
        return Err(HarnessError::Fixture(format!(
            "input shape must be positive, got {:?}",
            spec.input_shape
        )));
    }
    if spec.classes < 2 {
        return Err(HarnessError::Fixture(format!(
            "need at least 2 classes for a classification fixture, got {}",
            spec.classes
        )));
    }
    if spec.image_count == 0 {
        return Err(HarnessError::Fixture("image count must be positive".into()));
    }
    if spec.hidden_layers.iter().any(|&width| width == 0) {
        return Err(HarnessError::Fixture("hidden layer widths must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_model(&mut rng, spec).map_err(HarnessError::Fixture)?;

    let dataset_dir = out_dir.join("dataset");
    std::fs::create_dir_all(&dataset_dir).map_err(|source| HarnessError::Io {
        path: dataset_dir.clone(),
        source,
    })?;
    let model_path = out_dir.join("model.json");
    std::fs::write(&model_path, model.to_json() + "\n").map_err(|source| HarnessError::Io {
        path: model_path.clone(),
        source,
    })?;

    let mut labels = String::from("filename,label,target\n");
    for index in 0..spec.image_count {
        let label = index % spec.classes;
        let image = sample_image(&mut rng, &model, label, index)?;
        let offset = rng.random_range(1..spec.classes);
        let target = (label + offset) % spec.classes;

        let filename = format!("img{index:03}.ppm");
        write_ppm(&dataset_dir.join(&filename), &image)?;
        labels.push_str(&format!("{filename},{label},{target}\n"));
    }
    let labels_path = dataset_dir.join("labels.csv");
    std::fs::write(&labels_path, labels).map_err(|source| HarnessError::Io {
        path: labels_path,
        source,
    })?;

    Ok(FixturePaths {
        model: model_path,
        dataset_dir,
    })
}

/// Dense weights drawn N(0, 1/√fan_in), zero biases, relu between dense
/// layers, softmax head.
fn random_model(rng: &mut ChaCha8Rng, spec: &FixtureSpec) -> Result<FeedForwardModel, String> {
    let (h, w, c) = spec.input_shape;
    let mut widths = vec![h * w * c];
    widths.extend(&spec.hidden_layers);
    widths.push(spec.classes);

    let mut layers = Vec::new();
    for (pos, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        layers.push(Layer::Dense(DenseLayer {
            inputs: fan_in,
            outputs: fan_out,
            weights,
            bias: vec![0.0; fan_out],
        }));
        if pos + 2 < widths.len() {
            layers.push(Layer::Relu);
        }
    }
    layers.push(Layer::Softmax);
    FeedForwardModel::new(spec.input_shape, layers)
}

/// Rejection-samples byte images until the model's argmax matches the
/// assigned label. Bytes are drawn directly so the written PPM is exactly
/// the image the model saw.
fn sample_image(
    rng: &mut ChaCha8Rng,
    model: &FeedForwardModel,
    label: usize,
    index: usize,
) -> Result<ImageTensor, HarnessError> {
    let (h, w, c) = model.input_shape();
    let len = h * w * c;
    for _ in 0..MAX_REJECTION_DRAWS {
        let data: Vec<f64> = (0..len)
            .map(|_| f64::from(rng.random::<u8>()) / 255.0)
            .collect();
        let image = ImageTensor::new(h, w, c, data).expect("bytes are in range");
        let probs = forward(model, &image).map_err(|e| HarnessError::Fixture(e.to_string()))?;
        if probs.top_class() == label {
            return Ok(image);
        }
    }
    Err(HarnessError::Fixture(format!(
        "rejection sampling exceeded {MAX_REJECTION_DRAWS} draws for image {index} \
         (class {label}); try a different seed"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{filter_correctly_classified, load_dataset};
    use crate::oracle::{load_model, InProcessOracle};

    fn tiny_spec() -> FixtureSpec {
        FixtureSpec {
            input_shape: (4, 4, 3),
            classes: 3,
            hidden_layers: vec![8],
            image_count: 6,
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let paths_a = generate_fixtures(42, &tiny_spec(), dir_a.path()).unwrap();
        let paths_b = generate_fixtures(42, &tiny_spec(), dir_b.path()).unwrap();

        let model_a = std::fs::read(&paths_a.model).unwrap();
        let model_b = std::fs::read(&paths_b.model).unwrap();
        assert_eq!(model_a, model_b);

        for name in ["labels.csv", "img000.ppm", "img005.ppm"] {
            let a = std::fs::read(paths_a.dataset_dir.join(name)).unwrap();
            let b = std::fs::read(paths_b.dataset_dir.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
    }

    #[test]
    fn labels_cover_requested_classes() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_fixtures(7, &tiny_spec(), dir.path()).unwrap();
        let ds = load_dataset(&paths.dataset_dir).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.class_count, 3);
        for (i, entry) in ds.entries.iter().enumerate() {
            assert_eq!(entry.true_class, i % 3);
            let target = entry.target_class.expect("fixtures carry targets");
            assert_ne!(target, entry.true_class);
            assert!(target < 3);
        }
        let model = load_model(&paths.model).unwrap();
        assert_eq!(model.num_classes(), 3);
    }

    #[test]
    fn generated_dataset_is_correct_by_construction() {
        let dir = tempfile::tempdir().unwrap();
        let paths = generate_fixtures(11, &tiny_spec(), dir.path()).unwrap();
        let ds = load_dataset(&paths.dataset_dir).unwrap();
        let model = load_model(&paths.model).unwrap();
        let mut oracle = InProcessOracle::new(&model);
        let filtered = filter_correctly_classified(&ds, &mut oracle).unwrap();
        assert_eq!(filtered.len(), ds.len());
    }

    #[test]
    fn degenerate_specs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec();
        spec.classes = 1;
        assert!(generate_fixtures(0, &spec, dir.path()).is_err());
        let mut spec = tiny_spec();
        spec.image_count = 0;
        assert!(generate_fixtures(0, &spec, dir.path()).is_err());
    }
}
