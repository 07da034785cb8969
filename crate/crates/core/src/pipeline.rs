//! Depth image in, pose-and-expression-normalized (PEN) depth image out.
//!
//! The steps are: HHA encoding, parameter estimation, re-synthesis with the
//! estimated shape coefficients and zero expression, then rendering with a
//! fixed canonical camera. Pose and expression estimates only reach the
//! audit record, never the pixels.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimate::{EstimateError, Estimator, EstimatorInput, EstimatorOutput};
use crate::hha::{depth_to_hha, HhaConfig, HhaError, Intrinsics};
use crate::model::{FaceParams, ModelError, MorphableModel};
use crate::projection::{fit_weak_perspective, mean_projection, ProjectionError, WeakPerspective};
use crate::render::{rasterize_depth, DepthImage, RenderError, DEFAULT_OUT_SIZE};

/// Depth of the nearest mean-face vertex under the default camera, in mm.
pub const DEFAULT_NOSE_DEPTH: f64 = 600.0;
/// Fraction of the raster covered by the mean face under the default camera.
pub const DEFAULT_FILL: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("input: {0}")]
    Input(String),
    #[error("hha: {0}")]
    Hha(#[from] HhaError),
    #[error("estimate: {0}")]
    Estimate(#[from] EstimateError),
    #[error("synthesize: {0}")]
    Synthesize(#[from] ModelError),
    #[error("render: {0}")]
    Render(#[from] RenderError),
    #[error("batch: {0}")]
    Batch(String),
}

impl PipelineError {
    /// Name of the stage that failed.
    pub fn stage(&self) -> &'static str {
        match self {
            Self::Input(_) => "input",
            Self::Hha(_) => "hha",
            Self::Estimate(_) => "estimate",
            Self::Synthesize(_) => "synthesize",
            Self::Render(_) => "render",
            Self::Batch(_) => "batch",
        }
    }
}

#[derive(Debug, Clone)]
pub struct PenConfig {
    pub canonical_pose: WeakPerspective,
    pub out_size: usize,
    /// Camera intrinsics for HHA. `None` derives the weak-perspective
    /// surrogate from the canonical scale and the input size.
    pub intrinsics: Option<Intrinsics>,
    pub hha: HhaConfig,
}

impl PenConfig {
    pub fn new(canonical_pose: WeakPerspective, out_size: usize) -> Result<Self, PipelineError> {
        let cfg = Self {
            canonical_pose,
            out_size,
            intrinsics: None,
            hha: HhaConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default canonical camera at the default output size.
    pub fn for_model(model: &MorphableModel) -> Self {
        Self::new(default_canonical_camera(model, DEFAULT_OUT_SIZE), DEFAULT_OUT_SIZE)
            .expect("default camera is valid")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.out_size < 8 {
            return Err(PipelineError::Input(format!(
                "output size {} is below the minimum of 8",
                self.out_size
            )));
        }
        let c = &self.canonical_pose;
        WeakPerspective::new(c.scale, c.rotation, c.translation)
            .map_err(|e| PipelineError::Input(format!("canonical camera: {e}")))?;
        self.hha.validate()?;
        Ok(())
    }

    fn intrinsics_for(&self, img: &DepthImage) -> Result<Intrinsics, PipelineError> {
        match self.intrinsics {
            Some(k) => Ok(k),
            None => Ok(Intrinsics::weak_perspective_surrogate(
                self.canonical_pose.scale,
                img.width(),
                img.height(),
            )?),
        }
    }
}

/// Frontal camera for an `out_size` square raster: identity rotation, the
/// mean face's x/y bounding box scaled to 90% of the raster and centered,
/// and its nearest vertex placed at 600 mm depth.
pub fn default_canonical_camera(model: &MorphableModel, out_size: usize) -> WeakPerspective {
    let mean = model.mean_shape();
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in mean.as_slice().chunks_exact(3) {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let extent = (hi.x - lo.x).max(hi.y - lo.y).max(f64::EPSILON);
    let scale = DEFAULT_FILL * out_size as f64 / extent;
    let half = out_size as f64 / 2.0;
    let translation = Vector3::new(
        half - scale * (lo.x + hi.x) / 2.0,
        half - scale * (lo.y + hi.y) / 2.0,
        DEFAULT_NOSE_DEPTH - lo.z,
    );
    WeakPerspective::new(scale, Matrix3::identity(), translation).expect("finite positive scale")
}

/// Canonical camera from frontal landmark observations: one weak-perspective
/// fit per observation set against the mean-face landmarks, then averaged.
pub fn canonical_from_landmarks(
    model: &MorphableModel,
    observations: &[Vec<[f64; 3]>],
) -> Result<WeakPerspective, ProjectionError> {
    let mean = model.synthesize(&model.neutral_params([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
        .map_err(|e| ProjectionError::InvalidInput(e.to_string()))?;
    let points = model.landmark_points(&mean);
    let cams = observations
        .iter()
        .map(|obs| fit_weak_perspective(&points, obs))
        .collect::<Result<Vec<_>, _>>()?;
    mean_projection(&cams)
}

#[derive(Debug, Clone)]
pub struct PenResult {
    pub pen: DepthImage,
    pub estimate: EstimatorOutput,
}

/// Normalizes one depth image. Errors carry the failing stage.
pub fn normalize_depth_image(
    depth: &DepthImage,
    model: &MorphableModel,
    estimator: &dyn Estimator,
    cfg: &PenConfig,
    landmarks: Option<Vec<[f64; 3]>>,
) -> Result<PenResult, PipelineError> {
    cfg.validate()?;
    if depth.valid_count() == 0 {
        return Err(PipelineError::Input("depth image has no valid pixels".into()));
    }
    let k = cfg.intrinsics_for(depth)?;
    let hha = depth_to_hha(depth, &k, &cfg.hha)?.image;
    let input = EstimatorInput::new(depth.clone(), Some(hha), landmarks)?;
    let estimate = estimator.estimate(&input, model)?;
    let pen = render_pen(model, &estimate.params, cfg)?;
    Ok(PenResult { pen, estimate })
}

/// Renders `(α, 0, canonical)` for the shape coefficients of `params`.
pub fn render_pen(
    model: &MorphableModel,
    params: &FaceParams,
    cfg: &PenConfig,
) -> Result<DepthImage, PipelineError> {
    let zero = vec![0.0; model.expression_dim()];
    let shape = model.synthesize_coefficients(&params.shape, &zero)?;
    Ok(rasterize_depth(
        &shape,
        model.triangles(),
        &cfg.canonical_pose,
        cfg.out_size,
        cfg.out_size,
    )?)
}

pub struct NormalizeJob {
    pub id: String,
    pub depth: DepthImage,
    pub landmarks: Option<Vec<[f64; 3]>>,
    pub estimator: Arc<dyn Estimator>,
}

/// Runs every job on a pool of `threads` workers. Results keep job order;
/// a failing job does not affect the others.
pub fn batch_normalize(
    jobs: &[NormalizeJob],
    model: &MorphableModel,
    cfg: &PenConfig,
    threads: usize,
) -> Result<Vec<Result<PenResult, PipelineError>>, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| PipelineError::Batch(e.to_string()))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                normalize_depth_image(
                    &job.depth,
                    model,
                    job.estimator.as_ref(),
                    cfg,
                    job.landmarks.clone(),
                )
            })
            .collect()
    }))
}

/// Pose summary used in audit records: scale, angles in degrees, translation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoseSummary {
    pub scale: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
    pub roll_deg: f64,
    pub translation: [f64; 3],
}

impl From<&FaceParams> for PoseSummary {
    fn from(p: &FaceParams) -> Self {
        let [pitch, yaw, roll] = p.pose.angles();
        Self {
            scale: p.pose.scale(),
            pitch_deg: pitch.to_degrees(),
            yaw_deg: yaw.to_degrees(),
            roll_deg: roll.to_degrees(),
            translation: p.pose.translation(),
        }
    }
}
