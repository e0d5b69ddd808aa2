//! In-process feed-forward inference engine loaded from a structured-text
//! weight file. The schema is strict: unknown fields are errors, because
//! silent drift in a victim definition would corrupt benchmark
//! comparability.

use std::path::Path;

use serde_json::Value;

use crate::tensor::{softmax, ImageTensor, ProbabilityVector};

use super::OracleError;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major, out-major: `weights[o * inputs + i]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Relu,
    Softmax,
}

/// A validated inference network: dense layers whose dimensions chain,
/// ending in a softmax head. Immutable after construction and safe to
/// share across concurrent attacks.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardModel {
    input_shape: (usize, usize, usize),
    layers: Vec<Layer>,
    num_classes: usize,
}

impl FeedForwardModel {
    pub fn new(
        input_shape: (usize, usize, usize),
        layers: Vec<Layer>,
    ) -> Result<Self, String> {
        let (h, w, c) = input_shape;
        if h == 0 || w == 0 || c == 0 {
            return Err(format!("input_shape must be positive, got [{h}, {w}, {c}]"));
        }
        let mut width = h * w * c;
        let mut width_source = "the input".to_string();
        let mut num_classes = None;
        for (pos, layer) in layers.iter().enumerate() {
            let pos = pos + 1;
            if let Layer::Dense(dense) = layer {
                if dense.inputs != width {
                    return Err(format!(
                        "dense layer {pos} expects {} inputs but {width_source} provides {width}",
                        dense.inputs
                    ));
                }
                if dense.weights.len() != dense.inputs * dense.outputs {
                    return Err(format!(
                        "dense layer {pos} has {} weights, expected {}x{} = {}",
                        dense.weights.len(),
                        dense.outputs,
                        dense.inputs,
                        dense.inputs * dense.outputs
                    ));
                }
                if dense.bias.len() != dense.outputs {
                    return Err(format!(
                        "dense layer {pos} has {} bias values, expected {}",
                        dense.bias.len(),
                        dense.outputs
                    ));
                }
                if dense.outputs == 0 {
                    return Err(format!("dense layer {pos} has zero outputs"));
                }
                if let Some(bad) = dense
                    .weights
                    .iter()
                    .chain(&dense.bias)
                    .find(|v| !v.is_finite())
                {
                    return Err(format!("dense layer {pos} contains non-finite value {bad}"));
                }
                width = dense.outputs;
                width_source = format!("layer {pos}");
                num_classes = Some(dense.outputs);
            }
        }
        let num_classes = num_classes.ok_or("model has no dense layer")?;
        if !matches!(layers.last(), Some(Layer::Softmax)) {
            return Err("model is missing its softmax head".to_string());
        }
        Ok(Self {
            input_shape,
            layers,
            num_classes,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Serializes to the weight-file schema (one line of JSON).
    pub fn to_json(&self) -> String {
        let layers: Vec<Value> = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Dense(d) => serde_json::json!({
                    "type": "dense",
                    "in": d.inputs,
                    "out": d.outputs,
                    "weights": d.weights,
                    "bias": d.bias,
                }),
                Layer::Relu => serde_json::json!({"type": "relu"}),
                Layer::Softmax => serde_json::json!({"type": "softmax"}),
            })
            .collect();
        serde_json::json!({
            "input_shape": [self.input_shape.0, self.input_shape.1, self.input_shape.2],
            "layers": layers,
        })
        .to_string()
    }
}

/// Parses and validates a weight file against the strict schema.
pub fn load_model(path: &Path) -> Result<FeedForwardModel, OracleError> {
    let text = std::fs::read_to_string(path).map_err(|source| OracleError::ModelRead {
        path: path.to_path_buf(),
        source,
    })?;
    parse_model(&text).map_err(|err| match err {
        ModelTextError::Syntax {
            line,
            column,
            detail,
        } => OracleError::ModelParse {
            path: path.to_path_buf(),
            line,
            column,
            detail,
        },
        ModelTextError::Schema(detail) => OracleError::ModelSchema {
            path: path.to_path_buf(),
            detail,
        },
    })
}

#[derive(Debug)]
pub enum ModelTextError {
    Syntax {
        line: usize,
        column: usize,
        detail: String,
    },
    Schema(String),
}

/// Parses weight-file text. Unknown fields anywhere are errors.
pub fn parse_model(text: &str) -> Result<FeedForwardModel, ModelTextError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ModelTextError::Syntax {
        line: e.line(),
        column: e.column(),
        detail: e.to_string(),
    })?;
    build_model(&value).map_err(ModelTextError::Schema)
}

fn build_model(value: &Value) -> Result<FeedForwardModel, String> {
    let object = value.as_object().ok_or("top level must be an object")?;
    for key in object.keys() {
        if key != "input_shape" && key != "layers" {
            return Err(format!("unknown field `{key}` at top level"));
        }
    }
    let shape = object
        .get("input_shape")
        .ok_or("missing field `input_shape`")?
        .as_array()
        .ok_or("`input_shape` must be an array")?;
    if shape.len() != 3 {
        return Err(format!(
            "`input_shape` must have 3 entries [H, W, C], got {}",
            shape.len()
        ));
    }
    let dim = |i: usize| -> Result<usize, String> {
        shape[i]
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| format!("`input_shape[{i}]` must be a non-negative integer"))
    };
    let input_shape = (dim(0)?, dim(1)?, dim(2)?);

    let entries = object
        .get("layers")
        .ok_or("missing field `layers`")?
        .as_array()
        .ok_or("`layers` must be an array")?;
    let mut layers = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        layers.push(build_layer(entry, idx + 1)?);
    }
    FeedForwardModel::new(input_shape, layers)
}

fn build_layer(entry: &Value, pos: usize) -> Result<Layer, String> {
    let object = entry
        .as_object()
        .ok_or_else(|| format!("layers[{pos}] must be an object"))?;
    let kind = object
        .get("type")
        .and_then(Value::as_str)
        .ok_or_else(|| format!("layers[{pos}] is missing a string `type` field"))?;
    match kind {
        "relu" | "softmax" => {
            for key in object.keys() {
                if key != "type" {
                    return Err(format!("unknown field `{key}` in {kind} layer {pos}"));
                }
            }
            Ok(if kind == "relu" {
                Layer::Relu
            } else {
                Layer::Softmax
            })
        }
        "dense" => {
            for key in object.keys() {
                if !matches!(key.as_str(), "type" | "in" | "out" | "weights" | "bias") {
                    return Err(format!("unknown field `{key}` in dense layer {pos}"));
                }
            }
            let count = |name: &str| -> Result<usize, String> {
                object
                    .get(name)
                    .and_then(Value::as_u64)
                    .map(|v| v as usize)
                    .ok_or_else(|| {
                        format!("dense layer {pos} is missing a non-negative integer `{name}`")
                    })
            };
            let reals = |name: &str| -> Result<Vec<f64>, String> {
                object
                    .get(name)
                    .and_then(Value::as_array)
                    .ok_or_else(|| format!("dense layer {pos} is missing an array `{name}`"))?
                    .iter()
                    .enumerate()
                    .map(|(i, v)| {
                        v.as_f64()
                            .ok_or_else(|| format!("dense layer {pos} `{name}[{i}]` is not a number"))
                    })
                    .collect()
            };
            Ok(Layer::Dense(DenseLayer {
                inputs: count("in")?,
                outputs: count("out")?,
                weights: reals("weights")?,
                bias: reals("bias")?,
            }))
        }
        other => Err(format!("layers[{pos}] has unknown type `{other}`")),
    }
}

/// Runs the network on an image: flatten (row-major, channel-last),
/// dense layers compute W·x + b, relu is element-wise max(0, ·), softmax
/// is the stable tensor-core op. Bit-identical across repeated calls.
pub fn forward(
    model: &FeedForwardModel,
    image: &ImageTensor,
) -> Result<ProbabilityVector, OracleError> {
    if image.shape() != model.input_shape() {
        return Err(OracleError::ShapeMismatch {
            expected: model.input_shape(),
            got: image.shape(),
        });
    }
    let mut activations: Vec<f64> = image.data().to_vec();
    for layer in model.layers() {
        match layer {
            Layer::Dense(dense) => {
                activations = (0..dense.outputs)
                    .map(|o| {
                        let row = &dense.weights[o * dense.inputs..(o + 1) * dense.inputs];
                        row.iter()
                            .zip(&activations)
                            .map(|(w, x)| w * x)
                            .sum::<f64>()
                            + dense.bias[o]
                    })
                    .collect();
            }
            Layer::Relu => {
                for v in &mut activations {
                    *v = v.max(0.0);
                }
            }
            Layer::Softmax => {
                activations = softmax(&activations)?.probs().to_vec();
            }
        }
    }
    Ok(ProbabilityVector::new(activations)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Layer {
        Layer::Dense(DenseLayer {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    #[test]
    fn minimal_model_parses() {
        let text = r#"{"input_shape":[1,1,3],"layers":[
            {"type":"dense","in":3,"out":2,"weights":[1,0,0,0,1,0],"bias":[0,0]},
            {"type":"softmax"}]}"#;
        let model = parse_model(text).unwrap();
        assert_eq!(model.num_classes(), 2);
        assert_eq!(model.input_shape(), (1, 1, 3));
    }

    #[test]
    fn dimension_chain_mismatch_names_both_layers() {
        let layers = vec![
            dense(12, 8, vec![0.0; 96], vec![0.0; 8]),
            dense(8, 8, vec![0.0; 64], vec![0.0; 8]),
            dense(9, 4, vec![0.0; 36], vec![0.0; 4]),
            Layer::Softmax,
        ];
        let err = FeedForwardModel::new((2, 2, 3), layers).unwrap_err();
        assert!(err.contains("layer 3") && err.contains("layer 2"), "{err}");
        assert!(err.contains("9") && err.contains("8"), "{err}");
    }

    #[test]
    fn unknown_fields_are_errors() {
        let text = r#"{"input_shape":[1,1,1],"layers":[
            {"type":"dense","in":1,"out":1,"weights":[1],"bias":[0],"name":"x"},
            {"type":"softmax"}]}"#;
        match parse_model(text).unwrap_err() {
            ModelTextError::Schema(detail) => assert!(detail.contains("unknown field `name`")),
            other => panic!("expected schema error, got {other:?}"),
        }
        let text = r#"{"input_shape":[1,1,1],"layers":[],"comment":"hi"}"#;
        assert!(matches!(
            parse_model(text).unwrap_err(),
            ModelTextError::Schema(d) if d.contains("unknown field `comment`")
        ));
    }

    #[test]
    fn missing_softmax_head_is_an_error() {
        let err =
            FeedForwardModel::new((1, 1, 1), vec![dense(1, 2, vec![0.0; 2], vec![0.0; 2])])
                .unwrap_err();
        assert!(err.contains("softmax"), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_and_column() {
        match parse_model("{\n  \"input_shape\": [1,1,1\n}").unwrap_err() {
            ModelTextError::Syntax { line, .. } => assert!(line >= 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn zero_weight_head_is_uniform() {
        let model = FeedForwardModel::new(
            (1, 1, 2),
            vec![dense(2, 2, vec![0.0; 4], vec![0.0; 2]), Layer::Softmax],
        )
        .unwrap();
        let image = ImageTensor::new(1, 1, 2, vec![0.3, 0.9]).unwrap();
        let probs = forward(&model, &image).unwrap();
        assert_eq!(probs.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn single_class_softmax_is_one() {
        let model = FeedForwardModel::new(
            (1, 1, 1),
            vec![dense(1, 1, vec![1.0], vec![0.0]), Layer::Softmax],
        )
        .unwrap();
        let image = ImageTensor::new(1, 1, 1, vec![0.3]).unwrap();
        let probs = forward(&model, &image).unwrap();
        assert_eq!(probs.probs(), &[1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let model = FeedForwardModel::new(
            (1, 2, 1),
            vec![
                dense(2, 3, vec![0.4, -0.2, 0.1, 0.9, -0.7, 0.3], vec![0.05, 0.0, -0.1]),
                Layer::Relu,
                dense(3, 2, vec![1.0, -1.0, 0.5, -0.5, 1.5, 1.0], vec![0.0, 0.1]),
                Layer::Softmax,
            ],
        )
        .unwrap();
        let image = ImageTensor::new(1, 2, 1, vec![0.25, 0.75]).unwrap();
        let a = forward(&model, &image).unwrap();
        let b = forward(&model, &image).unwrap();
        assert_eq!(a.probs(), b.probs());
        let sum: f64 = a.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = FeedForwardModel::new(
            (1, 1, 1),
            vec![dense(1, 1, vec![1.0], vec![0.0]), Layer::Softmax],
        )
        .unwrap();
        let image = ImageTensor::new(1, 2, 1, vec![0.3, 0.4]).unwrap();
        assert!(matches!(
            forward(&model, &image),
            Err(OracleError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn to_json_round_trips() {
        let model = FeedForwardModel::new(
            (2, 2, 1),
            vec![
                dense(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect(), vec![0.1, 0.0, -0.1]),
                Layer::Relu,
                dense(3, 2, vec![1.0, -1.0, 0.5, -0.5, 1.5, 1.0], vec![0.0, 0.1]),
                Layer::Softmax,
            ],
        )
        .unwrap();
        let parsed = parse_model(&model.to_json()).unwrap();
        assert_eq!(parsed, model);
    }
}
