//! Parameter estimation: recovering pose, shape and expression
//! coefficients from a depth observation.
//!
//! Every estimator implements [`Estimator`]. Three are provided:
//! [`Passthrough`] returns known parameters, [`LandmarkFitter`] solves an
//! alternating ridge least-squares problem on landmark observations, and
//! [`ExternalEstimator`] hands the input to an outside program through a
//! file exchange directory.

mod external;
mod landmark;

pub use external::{ExternalEstimator, DEFAULT_TIMEOUT, PARAMS_FILE};
pub use landmark::{landmark_fit, LandmarkFitConfig, LandmarkFitter};

use std::fmt;

use thiserror::Error;

use crate::hha::HhaImage;
use crate::model::{FaceParams, MorphableModel};
use crate::render::DepthImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Degenerate,
    NonFinite,
    CommandFailed,
    Timeout,
    Malformed,
    Io,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Degenerate => "degenerate configuration",
            Self::NonFinite => "non-finite intermediate",
            Self::CommandFailed => "command failed",
            Self::Timeout => "timed out",
            Self::Malformed => "malformed output",
            Self::Io => "i/o",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("estimation failed ({estimator}, {kind}): {message}")]
    Failed {
        estimator: String,
        kind: FailureKind,
        message: String,
    },
}

impl EstimateError {
    pub(crate) fn failed(estimator: &str, kind: FailureKind, message: impl Into<String>) -> Self {
        Self::Failed {
            estimator: estimator.to_string(),
            kind,
            message: message.into(),
        }
    }

    pub fn kind(&self) -> Option<FailureKind> {
        match self {
            Self::Failed { kind, .. } => Some(*kind),
            Self::InvalidInput(_) => None,
        }
    }
}

/// What an estimator sees. At least one of `hha` or `landmarks` is present.
#[derive(Debug, Clone)]
pub struct EstimatorInput {
    pub depth: DepthImage,
    pub hha: Option<HhaImage>,
    /// `(u, v, depth)` observations ordered like the model's landmarks.
    pub landmarks: Option<Vec<[f64; 3]>>,
}

impl EstimatorInput {
    pub fn new(
        depth: DepthImage,
        hha: Option<HhaImage>,
        landmarks: Option<Vec<[f64; 3]>>,
    ) -> Result<Self, EstimateError> {
        let input = Self {
            depth,
            hha,
            landmarks,
        };
        input.check_shape()?;
        Ok(input)
    }

    fn check_shape(&self) -> Result<(), EstimateError> {
        if self.hha.is_none() && self.landmarks.is_none() {
            return Err(EstimateError::InvalidInput(
                "estimator input needs an HHA image or landmarks".into(),
            ));
        }
        if let Some(h) = &self.hha {
            if (h.width(), h.height()) != (self.depth.width(), self.depth.height()) {
                return Err(EstimateError::InvalidInput(format!(
                    "HHA image {}x{} does not match depth {}x{}",
                    h.width(),
                    h.height(),
                    self.depth.width(),
                    self.depth.height()
                )));
            }
        }
        Ok(())
    }

    /// Checks invariants that depend on the model.
    pub fn validate(&self, model: &MorphableModel) -> Result<(), EstimateError> {
        self.check_shape()?;
        if let Some(lms) = &self.landmarks {
            if lms.len() != model.landmark_indices().len() {
                return Err(EstimateError::InvalidInput(format!(
                    "{} landmarks given, model defines {}",
                    lms.len(),
                    model.landmark_indices().len()
                )));
            }
            if lms.iter().flatten().any(|v| !v.is_finite()) {
                return Err(EstimateError::InvalidInput("non-finite landmark".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub params: FaceParams,
    pub converged: bool,
    pub iterations: usize,
    /// RMS landmark error in raster units, when landmarks were used.
    pub final_residual: Option<f64>,
    /// Objective after every half-step (iterative estimators only).
    pub objective_log: Vec<f64>,
}

/// The estimator contract. Implementations must be deterministic for a
/// fixed input and safe to call from several threads.
pub trait Estimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(
        &self,
        input: &EstimatorInput,
        model: &MorphableModel,
    ) -> Result<EstimatorOutput, EstimateError>;
}

/// Returns stored parameters unchanged.
#[derive(Debug, Clone)]
pub struct Passthrough {
    params: FaceParams,
}

impl Passthrough {
    pub fn new(params: FaceParams) -> Self {
        Self { params }
    }
}

impl Estimator for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn estimate(
        &self,
        input: &EstimatorInput,
        model: &MorphableModel,
    ) -> Result<EstimatorOutput, EstimateError> {
        input.validate(model)?;
        self.params
            .validate(model)
            .map_err(|e| EstimateError::InvalidInput(e.to_string()))?;
        Ok(EstimatorOutput {
            params: self.params.clone(),
            converged: true,
            iterations: 0,
            final_residual: None,
            objective_log: Vec::new(),
        })
    }
}

/// Mean squared difference over all pose, shape and expression values.
pub fn param_l2_loss(est: &FaceParams, gt: &FaceParams) -> Result<f64, EstimateError> {
    if est.shape.len() != gt.shape.len() || est.expression.len() != gt.expression.len() {
        return Err(EstimateError::InvalidInput(format!(
            "parameter dimensions differ: {}+{} vs {}+{}",
            est.shape.len(),
            est.expression.len(),
            gt.shape.len(),
            gt.expression.len()
        )));
    }
    let (a, b) = (est.to_vec(), gt.to_vec());
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_toy_model, Pose};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(rng: &mut ChaCha8Rng, k: usize, l: usize) -> FaceParams {
        FaceParams {
            pose: Pose([
                rng.random_range(0.5..1.0),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(50.0..70.0),
                rng.random_range(50.0..70.0),
                rng.random_range(550.0..650.0),
            ]),
            shape: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            expression: (0..l).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn passthrough_returns_ground_truth() {
        let model = make_toy_model(1, 60, 4, 2).unwrap();
        let gt = params(&mut ChaCha8Rng::seed_from_u64(1), 4, 2);
        let lms = vec![[0.0; 3]; model.landmark_indices().len()];
        let input = EstimatorInput::new(DepthImage::empty(8, 8).unwrap(), None, Some(lms)).unwrap();
        let out = Passthrough::new(gt.clone()).estimate(&input, &model).unwrap();
        assert_eq!(out.params, gt);
        assert!(out.converged);
    }

    #[test]
    fn input_needs_hha_or_landmarks() {
        let err = EstimatorInput::new(DepthImage::empty(8, 8).unwrap(), None, None);
        assert!(matches!(err, Err(EstimateError::InvalidInput(_))));
    }

    #[test]
    fn l2_loss_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = params(&mut rng, 199, 29);
        assert_eq!(param_l2_loss(&a, &a).unwrap(), 0.0);

        let mut shifted = a.clone();
        for v in shifted.pose.0.iter_mut() {
            *v += 1.0;
        }
        shifted.shape.iter_mut().for_each(|v| *v += 1.0);
        shifted.expression.iter_mut().for_each(|v| *v += 1.0);
        assert!((param_l2_loss(&shifted, &a).unwrap() - 1.0).abs() < 1e-12);

        for _ in 0..20 {
            let b = params(&mut rng, 199, 29);
            let (x, y) = (a.to_vec(), b.to_vec());
            let mut brute = 0.0;
            for i in 0..235 {
                brute += (x[i] - y[i]) * (x[i] - y[i]);
            }
            brute /= 235.0;
            let got = param_l2_loss(&a, &b).unwrap();
            assert!((got - brute).abs() <= 1e-12 * brute.max(1.0));
            assert_eq!(got, param_l2_loss(&b, &a).unwrap());
            assert!(got > 0.0);
        }
        let short = params(&mut rng, 198, 29);
        assert!(param_l2_loss(&a, &short).is_err());
    }
}
