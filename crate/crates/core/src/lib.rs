//! Pose-and-expression normalization of facial depth images.
//!
//! A depth image of a face in any pose and expression is mapped to a frontal,
//! neutral-expression depth image of the same person. The person is described
//! by the shape coefficients of a linear morphable model; pose and expression
//! are estimated, then discarded, and the face is re-rendered from a fixed
//! canonical camera.
//!
//! ```
//! use pendepth::model::make_toy_model;
//! use pendepth::pipeline::{normalize_depth_image, PenConfig};
//! use pendepth::estimate::Passthrough;
//! use pendepth::render::rasterize_depth;
//!
//! let model = make_toy_model(7, 300, 8, 3).unwrap();
//! let cfg = PenConfig::for_model(&model);
//! let mut params = model.neutral_params(cfg.canonical_pose.to_pose().0);
//! params.shape[0] = 1.5;
//! let face = model.synthesize(&params).unwrap();
//! let depth = rasterize_depth(&face, model.triangles(), &cfg.canonical_pose, 128, 128).unwrap();
//!
//! let out = normalize_depth_image(&depth, &model, &Passthrough::new(params), &cfg, None).unwrap();
//! assert_eq!(out.pen, depth);
//! ```

pub mod datagen;
pub mod estimate;
pub mod eval;
pub mod hha;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod render;
pub mod textio;

pub use estimate::{Estimator, EstimatorInput, EstimatorOutput};
pub use model::{FaceParams, FaceShape, MorphableModel, Pose};
pub use projection::WeakPerspective;
pub use render::DepthImage;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/camera.md")]
    mod camera {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/hha.md")]
    mod hha {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
