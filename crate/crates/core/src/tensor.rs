//! Image and perturbation value types plus the deterministic tensor
//! operations the attack pipeline needs: nearest-neighbor upsampling,
//! L∞ clipping, addition with pixel-range projection, argmax and softmax.
//!
//! All data is stored row-major, channel-last:
//! `index = row * width * channels + col * channels + chan`.
//! Everything in this module is a pure function on immutable inputs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("data length {actual} does not match {height}x{width}x{channels} = {expected}")]
    LengthMismatch {
        height: usize,
        width: usize,
        channels: usize,
        expected: usize,
        actual: usize,
    },
    #[error("pixel value {value} at index {index} is outside [0, 1]")]
    PixelOutOfRange { index: usize, value: f64 },
    #[error("non-finite value {value} at index {index}")]
    NonFiniteValue { index: usize, value: f64 },
    #[error("dimensions must be positive, got {height}x{width}x{channels}")]
    ZeroDimension {
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("epsilon must be a positive real, got {0}")]
    InvalidEpsilon(f64),
    #[error("shape mismatch: image is {image:?}, perturbation is {perturbation:?}")]
    ShapeMismatch {
        image: (usize, usize, usize),
        perturbation: (usize, usize, usize),
    },
    #[error("input must be non-empty")]
    EmptyInput,
    #[error("probability {value} at index {index} is outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("probabilities not normalized (sum {sum})")]
    NotNormalized { sum: f64 },
}

/// Tolerance on the sum of a probability vector.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

fn check_dims(height: usize, width: usize, channels: usize) -> Result<(), TensorError> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(TensorError::ZeroDimension {
            height,
            width,
            channels,
        });
    }
    Ok(())
}

/// An H×W×C image with every pixel in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        check_dims(height, width, channels)?;
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                height,
                width,
                channels,
                expected,
                actual: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(TensorError::PixelOutOfRange { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, chan: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + chan]
    }

    /// x' = clamp(x + δ, 0, 1), element-wise. The perturbation must already
    /// be upsampled to the image's exact shape.
    pub fn perturbed(&self, upsampled: &PerturbationGenome) -> Result<ImageTensor, TensorError> {
        if self.shape() != upsampled.shape() {
            return Err(TensorError::ShapeMismatch {
                image: self.shape(),
                perturbation: upsampled.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(upsampled.data())
            .map(|(&x, &d)| (x + d).clamp(0.0, 1.0))
            .collect();
        Ok(ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        })
    }
}

/// The evolved perturbation δ: an h×w×C tensor bounded (after clamping)
/// by ε in L∞. Values are unconstrained until [`clamped`](Self::clamped)
/// is applied; the attack pipeline clamps at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationGenome {
    height: usize,
    width: usize,
    channels: usize,
    epsilon: f64,
    data: Vec<f64>,
}

impl PerturbationGenome {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        epsilon: f64,
        data: Vec<f64>,
    ) -> Result<Self, TensorError> {
        check_dims(height, width, channels)?;
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(TensorError::InvalidEpsilon(epsilon));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                height,
                width,
                channels,
                expected,
                actual: data.len(),
            });
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(TensorError::NonFiniteValue { index, value });
            }
        }
        Ok(Self {
            height,
            width,
            channels,
            epsilon,
            data,
        })
    }

    pub fn zeros(
        height: usize,
        width: usize,
        channels: usize,
        epsilon: f64,
    ) -> Result<Self, TensorError> {
        let len = height * width * channels;
        Self::new(height, width, channels, epsilon, vec![0.0; len])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, chan: usize) -> f64 {
        self.data[(row * self.width + col) * self.channels + chan]
    }

    /// Clips every element to [−ε, +ε]. Idempotent.
    pub fn clamped(&self) -> PerturbationGenome {
        let eps = self.epsilon;
        PerturbationGenome {
            height: self.height,
            width: self.width,
            channels: self.channels,
            epsilon: eps,
            data: self.data.iter().map(|v| v.clamp(-eps, eps)).collect(),
        }
    }

    /// Nearest-neighbor upsampling by an integer factor `scale`:
    /// `out[j*s + k, i*s + l, c] = in[j, i, c]` for all `k, l` in `[0, s)`.
    /// Epsilon is preserved.
    pub fn upsampled(&self, scale: usize) -> PerturbationGenome {
        assert!(scale >= 1, "scale must be at least 1");
        if scale == 1 {
            return self.clone();
        }
        let (h, w, c) = self.shape();
        let (oh, ow) = (h * scale, w * scale);
        let mut data = vec![0.0; oh * ow * c];
        for j in 0..h {
            for i in 0..w {
                for chan in 0..c {
                    let v = self.get(j, i, chan);
                    for k in 0..scale {
                        for l in 0..scale {
                            data[((j * scale + k) * ow + (i * scale + l)) * c + chan] = v;
                        }
                    }
                }
            }
        }
        PerturbationGenome {
            height: oh,
            width: ow,
            channels: c,
            epsilon: self.epsilon,
            data,
        }
    }
}

/// Output distribution of a classifier over `num_classes` classes.
/// Elements lie in [0, 1] and sum to 1 within [`PROB_SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
}

impl ProbabilityVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, TensorError> {
        if probs.is_empty() {
            return Err(TensorError::EmptyInput);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(TensorError::ProbabilityOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
            return Err(TensorError::NotNormalized { sum });
        }
        Ok(Self { probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Index of the most probable class; ties break toward the smaller index.
    pub fn top_class(&self) -> usize {
        argmax(&self.probs).expect("probability vector is non-empty")
    }
}

/// Smallest index attaining the maximum value, `None` for an empty slice.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Numerically stable softmax: subtracts the maximum before exponentiating.
pub fn softmax(logits: &[f64]) -> Result<ProbabilityVector, TensorError> {
    if logits.is_empty() {
        return Err(TensorError::EmptyInput);
    }
    for (index, &value) in logits.iter().enumerate() {
        if !value.is_finite() {
            return Err(TensorError::NonFiniteValue { index, value });
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(ProbabilityVector {
        probs: exps.iter().map(|&e| e / sum).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_replicates_constant() {
        let g = PerturbationGenome::new(1, 1, 1, 0.5, vec![0.5]).unwrap();
        let up = g.upsampled(3);
        assert_eq!(up.shape(), (3, 3, 1));
        assert!(up.data().iter().all(|&v| v == 0.5));
        assert_eq!(up.epsilon(), 0.5);
    }

    #[test]
    fn upsample_block_replication() {
        let (a, b, c, d) = (0.1, -0.2, 0.3, -0.4);
        let g = PerturbationGenome::new(2, 2, 1, 1.0, vec![a, b, c, d]).unwrap();
        let up = g.upsampled(2);
        assert_eq!(up.shape(), (4, 4, 1));
        let expected = [
            a, a, b, b, //
            a, a, b, b, //
            c, c, d, d, //
            c, c, d, d,
        ];
        assert_eq!(up.data(), &expected);
    }

    #[test]
    fn upsample_scale_one_is_identity() {
        let g = PerturbationGenome::new(2, 3, 2, 0.05, (0..12).map(|i| i as f64 * 0.01).collect())
            .unwrap();
        assert_eq!(g.upsampled(1), g);
    }

    #[test]
    fn clamp_examples() {
        let g = PerturbationGenome::new(1, 3, 1, 0.05, vec![0.07, -0.2, 0.03]).unwrap();
        let c = g.clamped();
        assert_eq!(c.data(), &[0.05, -0.05, 0.03]);
        assert_eq!(c.clamped().data(), c.data());
    }

    #[test]
    fn perturbed_projects_to_pixel_range() {
        let img = ImageTensor::new(1, 3, 1, vec![0.98, 0.50, 0.02]).unwrap();
        let d = PerturbationGenome::new(1, 3, 1, 0.05, vec![0.05, -0.05, -0.05]).unwrap();
        let out = img.perturbed(&d).unwrap();
        assert_eq!(out.data(), &[1.0, 0.45, 0.0]);
        // input unmodified
        assert_eq!(img.data(), &[0.98, 0.50, 0.02]);
    }

    #[test]
    fn perturbed_zero_delta_is_identity() {
        let img = ImageTensor::new(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let d = PerturbationGenome::zeros(2, 2, 1, 0.05).unwrap();
        assert_eq!(img.perturbed(&d).unwrap(), img);
    }

    #[test]
    fn perturbed_rejects_shape_mismatch() {
        let img = ImageTensor::new(2, 2, 1, vec![0.1; 4]).unwrap();
        let d = PerturbationGenome::zeros(1, 2, 1, 0.05).unwrap();
        let err = img.perturbed(&d).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        let msg = err.to_string();
        assert!(msg.contains("(2, 2, 1)") && msg.contains("(1, 2, 1)"), "{msg}");
    }

    #[test]
    fn argmax_tie_breaks_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), Some(1));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax(&[1.0]), Some(0));
        assert_eq!(argmax(&[]), None);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);

        let p = softmax(&[3.7, 3.7, 3.7]).unwrap();
        for &v in p.probs() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.prob(0) > 1.0 - 1e-12);
        assert!(p.prob(1) < 1e-12);
        assert!(p.probs().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[f64::NAN, 0.0]),
            Err(TensorError::NonFiniteValue { .. })
        ));
        assert!(matches!(
            softmax(&[f64::INFINITY]),
            Err(TensorError::NonFiniteValue { .. })
        ));
        assert!(matches!(softmax(&[]), Err(TensorError::EmptyInput)));
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(matches!(
            ImageTensor::new(1, 1, 1, vec![1.2]),
            Err(TensorError::PixelOutOfRange { .. })
        ));
        assert!(matches!(
            ImageTensor::new(2, 2, 1, vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            ImageTensor::new(0, 1, 1, vec![]),
            Err(TensorError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn genome_invariants_enforced() {
        assert!(matches!(
            PerturbationGenome::new(1, 1, 1, 0.0, vec![0.0]),
            Err(TensorError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            PerturbationGenome::new(1, 1, 1, -0.5, vec![0.0]),
            Err(TensorError::InvalidEpsilon(_))
        ));
        assert!(matches!(
            PerturbationGenome::new(1, 1, 1, 0.05, vec![f64::NAN]),
            Err(TensorError::NonFiniteValue { .. })
        ));
    }

    #[test]
    fn probability_vector_validation() {
        assert!(ProbabilityVector::new(vec![0.25; 4]).is_ok());
        assert!(matches!(
            ProbabilityVector::new(vec![0.7, 0.1]),
            Err(TensorError::NotNormalized { .. })
        ));
        assert!(matches!(
            ProbabilityVector::new(vec![1.2, -0.2]),
            Err(TensorError::ProbabilityOutOfRange { .. })
        ));
        assert!(matches!(
            ProbabilityVector::new(vec![]),
            Err(TensorError::EmptyInput)
        ));
    }
}
