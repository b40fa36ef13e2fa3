//! Gaze angles, unit gaze vectors and the angular-error metric.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, TensorError};

/// Yaw and pitch in radians. `(0, 0)` looks along the camera axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GazeDirection {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeDirection {
    pub fn new(yaw: f64, pitch: f64) -> Self {
        Self { yaw, pitch }
    }

    pub fn to_vector(self) -> [f64; 3] {
        gaze_to_vector(self)
    }
}

/// `(cos p · sin y, sin p, cos p · cos y)`.
pub fn gaze_to_vector(g: GazeDirection) -> [f64; 3] {
    let (sy, cy) = g.yaw.sin_cos();
    let (sp, cp) = g.pitch.sin_cos();
    [cp * sy, sp, cp * cy]
}

/// Angle between the two gaze vectors, in degrees.
///
/// Equal to `acos(clamp(a·b, -1, 1))`, evaluated as `atan2(|a×b|, a·b)` so
/// nearly parallel vectors keep full precision.
pub fn angular_error(pred: GazeDirection, truth: GazeDirection) -> f64 {
    let (a, b) = (gaze_to_vector(pred), gaze_to_vector(truth));
    let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

/// Mean angular error over paired predictions and labels.
pub fn mean_angular_error(preds: &[GazeDirection], truth: &[GazeDirection]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(TensorError::ShapeMismatch {
            op: "mean_angular_error",
            lhs: vec![preds.len()],
            rhs: vec![truth.len()],
        });
    }
    Ok(preds.iter().zip(truth).map(|(&p, &t)| angular_error(p, t)).sum::<f64>() / preds.len() as f64)
}

/// Componentwise mean of `labels`.
pub fn mean_predictor_baseline(labels: &[GazeDirection]) -> Result<GazeDirection> {
    if labels.is_empty() {
        return Err(TensorError::Config("mean predictor needs at least one label".into()));
    }
    let n = labels.len() as f64;
    Ok(GazeDirection {
        yaw: labels.iter().map(|g| g.yaw).sum::<f64>() / n,
        pitch: labels.iter().map(|g| g.pitch).sum::<f64>() / n,
    })
}
