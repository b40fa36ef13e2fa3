//! In-memory datasets, evaluation and the synthetic face generator.

mod disk;
mod synthetic;

pub use disk::{read_dataset, write_dataset, DatasetManifest, LabelRange, Splits};
pub use synthetic::{generate_synthetic, generate_with_noise, GeometricDecoder, Subject, SyntheticConfig, GENERATOR_VERSION};

use crate::gaze::{mean_angular_error, GazeDirection};
use crate::models::GazeModel;
use crate::tensor::{Result, Tensor, TensorError};

/// Images (`f32`, sample-major `[C, H, W]`), gaze labels and subject ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<GazeDirection>,
    subjects: Vec<u32>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], images: Vec<f32>, labels: Vec<GazeDirection>, subjects: Vec<u32>) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() || subjects.len() != labels.len() {
            return Err(TensorError::DataLength {
                shape: vec![labels.len(), image_shape[0], image_shape[1], image_shape[2]],
                expected: per * labels.len(),
                actual: images.len(),
            });
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            subjects,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn labels(&self) -> &[GazeDirection] {
        &self.labels
    }

    pub fn subjects(&self) -> &[u32] {
        &self.subjects
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            image_shape: self.image_shape,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i]).collect(),
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Samples whose subject satisfies `keep`.
    pub fn filter_subjects(&self, keep: impl Fn(u32) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.subjects[i])).collect();
        self.subset(&idx)
    }

    /// `[n, C, H, W]` images and `[n, 2]` (yaw, pitch) targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let per = self.image_len();
        let mut x = Vec::with_capacity(indices.len() * per);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            x.extend(self.image(i).iter().map(|&v| v as f64));
            y.extend([self.labels[i].yaw, self.labels[i].pitch]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::new([indices.len(), c, h, w], x)?, Tensor::new([indices.len(), 2], y)?))
    }
}

/// Anything that maps a dataset to one gaze prediction per sample.
pub trait Predictor {
    fn predict(&self, data: &Dataset) -> Result<Vec<GazeDirection>>;
}

/// Always predicts the same direction.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPredictor(pub GazeDirection);

impl Predictor for ConstantPredictor {
    fn predict(&self, data: &Dataset) -> Result<Vec<GazeDirection>> {
        Ok(vec![self.0; data.len()])
    }
}

/// Returns the dataset's own labels.
#[derive(Clone, Copy, Debug)]
pub struct LabelOracle;

impl Predictor for LabelOracle {
    fn predict(&self, data: &Dataset) -> Result<Vec<GazeDirection>> {
        Ok(data.labels().to_vec())
    }
}

const EVAL_BATCH: usize = 64;

impl Predictor for GazeModel {
    fn predict(&self, data: &Dataset) -> Result<Vec<GazeDirection>> {
        let mut out = Vec::with_capacity(data.len());
        let idx: Vec<usize> = (0..data.len()).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, _) = data.batch(chunk)?;
            let y = self.predict_batch(x)?;
            out.extend(y.data().chunks(2).map(|r| GazeDirection::new(r[0], r[1])));
        }
        Ok(out)
    }
}

/// Mean angular error in degrees of `predictor` over `data`.
pub fn evaluate(predictor: &dyn Predictor, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(TensorError::Config("cannot evaluate on an empty dataset".into()));
    }
    mean_angular_error(&predictor.predict(data)?, data.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaze::angular_error;
    use crate::models::{build_variant, ModelVariant, VariantTag};

    fn grid_dataset() -> Dataset {
        let mut labels = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                labels.push(GazeDirection::new(-0.3 + 0.1 * i as f64, -0.3 + 0.1 * j as f64));
            }
        }
        let n = labels.len();
        Dataset::new([1, 1, 1], vec![0.0; n], labels, vec![0; n]).unwrap()
    }

    #[test]
    fn oracle_has_zero_error() {
        assert_eq!(evaluate(&LabelOracle, &grid_dataset()).unwrap(), 0.0);
    }

    #[test]
    fn constant_predictor_matches_grid_enumeration() {
        let d = grid_dataset();
        let mut total = 0.0;
        for i in 0..7 {
            for j in 0..7 {
                let (y, p) = (-0.3 + 0.1 * i as f64, -0.3 + 0.1 * j as f64);
                // angle to the forward axis is acos of the z component
                total += (p.cos() * y.cos()).acos().to_degrees();
            }
        }
        let got = evaluate(&ConstantPredictor(GazeDirection::default()), &d).unwrap();
        assert!((got - total / 49.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn single_sample_mean_is_its_error() {
        let d = grid_dataset().take(1);
        let p = GazeDirection::new(0.05, 0.02);
        assert_eq!(evaluate(&ConstantPredictor(p), &d).unwrap(), angular_error(p, d.labels()[0]));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let d = grid_dataset().take(0);
        assert!(evaluate(&LabelOracle, &d).is_err());
    }

    #[test]
    fn mismatched_buffer_is_rejected() {
        assert!(Dataset::new([3, 2, 2], vec![0.0; 11], vec![GazeDirection::default()], vec![0]).is_err());
    }

    #[test]
    fn batch_layout() {
        let d = Dataset::new(
            [1, 1, 2],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![GazeDirection::new(0.1, 0.2), GazeDirection::new(0.3, 0.4)],
            vec![0, 1],
        )
        .unwrap();
        let (x, y) = d.batch(&[1, 0]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 1, 2]);
        assert_eq!(x.data(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(y.data(), &[0.3, 0.4, 0.1, 0.2]);
    }

    #[test]
    fn model_evaluation_is_deterministic() {
        let cfg = SyntheticConfig {
            samples: 10,
            subjects: 2,
            test_subjects: 1,
            image_size: 32,
            ..SyntheticConfig::scaled_to(32)
        };
        let d = generate_synthetic(&cfg).unwrap();
        let m = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 0).unwrap();
        assert_eq!(evaluate(&m, &d).unwrap(), evaluate(&m, &d).unwrap());
    }

    #[test]
    fn decoder_beats_constant_prediction() {
        let cfg = SyntheticConfig {
            samples: 100,
            ..SyntheticConfig::default()
        };
        let d = generate_with_noise(&cfg, false).unwrap();
        let dec = evaluate(&GeometricDecoder::new(cfg), &d).unwrap();
        let constant = evaluate(&ConstantPredictor(GazeDirection::default()), &d).unwrap();
        assert!(dec < 0.05 * constant, "{dec} vs {constant}");
    }
}
