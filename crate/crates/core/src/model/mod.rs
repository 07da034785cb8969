//! The linear morphable face model: mean shape plus shape and expression
//! bases, and the parameter types that drive it.
//!
//! Coordinates are millimeters in a camera-aligned frame: `x` to the right,
//! `y` downward, `z` away from the viewer. A frontal face therefore bulges
//! toward negative `z`.

mod io;
mod toy;

pub use io::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use toy::make_toy_model;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::projection::WeakPerspective;

/// Number of pose values: scale, pitch, yaw, roll, tx, ty, tz.
pub const POSE_DIM: usize = 7;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("model header: {0}")]
    Header(String),
    #[error("model file truncated while reading {field}")]
    Truncated { field: &'static str },
    #[error("model topology: {0}")]
    Topology(String),
    #[error("model invariant violated in {field}: {reason}")]
    Invariant { field: &'static str, reason: String },
    #[error("{0} trailing bytes after model payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A linear 3D morphable model.
///
/// Bases are stored as `3n × K` and `3n × L` column-major matrices, the same
/// layout as the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    shape_basis: DMatrix<f64>,
    expression_basis: DMatrix<f64>,
    shape_scales: DVector<f64>,
    expression_scales: DVector<f64>,
    triangles: Vec<[u32; 3]>,
    landmark_indices: Vec<u32>,
}

/// Minimum number of landmarks a model must carry.
pub const MIN_LANDMARKS: usize = 7;

impl MorphableModel {
    /// Assembles a model and checks every structural invariant.
    pub fn new(
        mean_shape: DVector<f64>,
        shape_basis: DMatrix<f64>,
        expression_basis: DMatrix<f64>,
        shape_scales: DVector<f64>,
        expression_scales: DVector<f64>,
        triangles: Vec<[u32; 3]>,
        landmark_indices: Vec<u32>,
    ) -> Result<Self, ModelError> {
        let model = Self {
            mean_shape,
            shape_basis,
            expression_basis,
            shape_scales,
            expression_scales,
            triangles,
            landmark_indices,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let len = self.mean_shape.len();
        if len == 0 || !len.is_multiple_of(3) {
            return Err(ModelError::Invariant {
                field: "mean_shape",
                reason: format!("length {len} is not a positive multiple of 3"),
            });
        }
        let n = len / 3;
        if self.shape_basis.nrows() != len {
            return Err(ModelError::Invariant {
                field: "shape_basis",
                reason: format!("rows {} != 3n = {len}", self.shape_basis.nrows()),
            });
        }
        if self.expression_basis.nrows() != len {
            return Err(ModelError::Invariant {
                field: "expression_basis",
                reason: format!("rows {} != 3n = {len}", self.expression_basis.nrows()),
            });
        }
        if self.shape_scales.len() != self.shape_basis.ncols() {
            return Err(ModelError::Invariant {
                field: "shape_scales",
                reason: format!(
                    "{} scales for {} basis vectors",
                    self.shape_scales.len(),
                    self.shape_basis.ncols()
                ),
            });
        }
        if self.expression_scales.len() != self.expression_basis.ncols() {
            return Err(ModelError::Invariant {
                field: "expression_scales",
                reason: format!(
                    "{} scales for {} basis vectors",
                    self.expression_scales.len(),
                    self.expression_basis.ncols()
                ),
            });
        }
        for (field, values) in [
            ("mean_shape", self.mean_shape.as_slice()),
            ("shape_basis", self.shape_basis.as_slice()),
            ("expression_basis", self.expression_basis.as_slice()),
        ] {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invariant {
                    field,
                    reason: "non-finite value".into(),
                });
            }
        }
        for (field, scales) in [
            ("shape_scales", &self.shape_scales),
            ("expression_scales", &self.expression_scales),
        ] {
            if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
                return Err(ModelError::Invariant {
                    field,
                    reason: format!("scale {bad} is not strictly positive"),
                });
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(idx) = tri.iter().find(|&&i| i as usize >= n) {
                return Err(ModelError::Topology(format!(
                    "triangle {t} references vertex {idx} but the model has {n} vertices"
                )));
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(ModelError::Topology(format!(
                    "triangle {t} is degenerate: {tri:?}"
                )));
            }
        }
        if self.landmark_indices.len() < MIN_LANDMARKS {
            return Err(ModelError::Invariant {
                field: "landmark_indices",
                reason: format!(
                    "{} landmarks, need at least {MIN_LANDMARKS}",
                    self.landmark_indices.len()
                ),
            });
        }
        if let Some(idx) = self.landmark_indices.iter().find(|&&i| i as usize >= n) {
            return Err(ModelError::Invariant {
                field: "landmark_indices",
                reason: format!("landmark vertex {idx} out of range for {n} vertices"),
            });
        }
        Ok(())
    }

    pub fn n_vertices(&self) -> usize {
        self.mean_shape.len() / 3
    }

    /// Number of shape basis vectors (K).
    pub fn shape_dim(&self) -> usize {
        self.shape_basis.ncols()
    }

    /// Number of expression basis vectors (L).
    pub fn expression_dim(&self) -> usize {
        self.expression_basis.ncols()
    }

    /// Length of the flat parameter vector: pose, shape, expression.
    pub fn param_len(&self) -> usize {
        POSE_DIM + self.shape_dim() + self.expression_dim()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn shape_basis(&self) -> &DMatrix<f64> {
        &self.shape_basis
    }

    pub fn expression_basis(&self) -> &DMatrix<f64> {
        &self.expression_basis
    }

    pub fn shape_scales(&self) -> &DVector<f64> {
        &self.shape_scales
    }

    pub fn expression_scales(&self) -> &DVector<f64> {
        &self.expression_scales
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn landmark_indices(&self) -> &[u32] {
        &self.landmark_indices
    }

    /// Zero shape and expression coefficients with the given pose.
    pub fn neutral_params(&self, pose: [f64; POSE_DIM]) -> FaceParams {
        FaceParams {
            shape: vec![0.0; self.shape_dim()],
            expression: vec![0.0; self.expression_dim()],
            pose: Pose(pose),
        }
    }

    fn check_dims(&self, shape: usize, expression: usize) -> Result<(), ModelError> {
        if shape != self.shape_dim() || expression != self.expression_dim() {
            return Err(ModelError::InvalidInput(format!(
                "coefficient dimensions {shape}+{expression} do not match model {}+{}",
                self.shape_dim(),
                self.expression_dim()
            )));
        }
        Ok(())
    }

    /// Builds a face from normalized coefficients: the mean shape plus the
    /// de-normalized linear combinations of both bases. Pose is ignored.
    pub fn synthesize(&self, params: &FaceParams) -> Result<FaceShape, ModelError> {
        self.synthesize_coefficients(&params.shape, &params.expression)
    }

    pub fn synthesize_coefficients(
        &self,
        shape: &[f64],
        expression: &[f64],
    ) -> Result<FaceShape, ModelError> {
        self.check_dims(shape.len(), expression.len())?;
        let alpha = DVector::from_iterator(
            shape.len(),
            shape.iter().zip(self.shape_scales.iter()).map(|(a, s)| a * s),
        );
        let beta = DVector::from_iterator(
            expression.len(),
            expression
                .iter()
                .zip(self.expression_scales.iter())
                .map(|(b, s)| b * s),
        );
        let mut coords = self.mean_shape.clone();
        coords.gemv(1.0, &self.shape_basis, &alpha, 1.0);
        coords.gemv(1.0, &self.expression_basis, &beta, 1.0);
        FaceShape::new(coords.data.into())
    }

    /// Divides raw coefficients by their per-axis scales.
    pub fn normalize_params(
        &self,
        raw_shape: &[f64],
        raw_expression: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_dims(raw_shape.len(), raw_expression.len())?;
        Ok((
            divide(raw_shape, self.shape_scales.as_slice()),
            divide(raw_expression, self.expression_scales.as_slice()),
        ))
    }

    /// Exact inverse of [`normalize_params`](Self::normalize_params).
    pub fn denormalize_params(
        &self,
        shape: &[f64],
        expression: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        self.check_dims(shape.len(), expression.len())?;
        Ok((
            multiply(shape, self.shape_scales.as_slice()),
            multiply(expression, self.expression_scales.as_slice()),
        ))
    }

    /// Mean-shape positions of the landmark vertices.
    pub fn landmark_points(&self, shape: &FaceShape) -> Vec<[f64; 3]> {
        self.landmark_indices
            .iter()
            .map(|&i| shape.vertex(i as usize))
            .collect()
    }
}

fn divide(values: &[f64], scales: &[f64]) -> Vec<f64> {
    values.iter().zip(scales).map(|(v, s)| v / s).collect()
}

fn multiply(values: &[f64], scales: &[f64]) -> Vec<f64> {
    values.iter().zip(scales).map(|(v, s)| v * s).collect()
}

/// The seven pose values in fixed order: scale, pitch, yaw, roll, tx, ty, tz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose(pub [f64; POSE_DIM]);

impl Pose {
    pub fn scale(&self) -> f64 {
        self.0[0]
    }

    pub fn angles(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.0[4], self.0[5], self.0[6]]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput("pose has non-finite values".into()));
        }
        if self.scale() <= 0.0 {
            return Err(ModelError::InvalidInput(format!(
                "pose scale {} must be positive",
                self.scale()
            )));
        }
        for angle in self.angles() {
            if !(angle > -std::f64::consts::PI && angle <= std::f64::consts::PI) {
                return Err(ModelError::InvalidInput(format!(
                    "pose angle {angle} outside (-pi, pi]"
                )));
            }
        }
        Ok(())
    }
}

impl From<&WeakPerspective> for Pose {
    fn from(cam: &WeakPerspective) -> Self {
        cam.to_pose()
    }
}

/// Shape coefficients, expression coefficients (both in normalized units)
/// and pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceParams {
    pub shape: Vec<f64>,
    pub expression: Vec<f64>,
    pub pose: Pose,
}

impl FaceParams {
    /// Flattens to pose, shape, expression order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(POSE_DIM + self.shape.len() + self.expression.len());
        out.extend_from_slice(&self.pose.0);
        out.extend_from_slice(&self.shape);
        out.extend_from_slice(&self.expression);
        out
    }

    /// Splits a flat pose/shape/expression vector according to the model's
    /// dimensions.
    pub fn from_slice(values: &[f64], model: &MorphableModel) -> Result<Self, ModelError> {
        if values.len() != model.param_len() {
            return Err(ModelError::InvalidInput(format!(
                "expected {} parameter values, got {}",
                model.param_len(),
                values.len()
            )));
        }
        let mut pose = [0.0; POSE_DIM];
        pose.copy_from_slice(&values[..POSE_DIM]);
        let k = model.shape_dim();
        let params = Self {
            pose: Pose(pose),
            shape: values[POSE_DIM..POSE_DIM + k].to_vec(),
            expression: values[POSE_DIM + k..].to_vec(),
        };
        params.validate(model)?;
        Ok(params)
    }

    pub fn validate(&self, model: &MorphableModel) -> Result<(), ModelError> {
        model.check_dims(self.shape.len(), self.expression.len())?;
        if self
            .shape
            .iter()
            .chain(&self.expression)
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::InvalidInput("non-finite coefficient".into()));
        }
        self.pose.validate()
    }

    pub fn camera(&self) -> Result<WeakPerspective, crate::projection::ProjectionError> {
        WeakPerspective::from_pose(&self.pose)
    }
}

/// A flat `x₁,y₁,z₁,…` vertex coordinate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceShape {
    coords: Vec<f64>,
}

impl FaceShape {
    pub fn new(coords: Vec<f64>) -> Result<Self, ModelError> {
        if coords.is_empty() || !coords.len().is_multiple_of(3) {
            return Err(ModelError::InvalidInput(format!(
                "coordinate count {} is not a positive multiple of 3",
                coords.len()
            )));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidInput("non-finite coordinate".into()));
        }
        Ok(Self { coords })
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / 3
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [self.coords[3 * i], self.coords[3 * i + 1], self.coords[3 * i + 2]]
    }

    pub fn vertices(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_coeffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Independent term-by-term evaluation of the linear model.
    fn brute_force(model: &MorphableModel, alpha: &[f64], beta: &[f64]) -> Vec<f64> {
        let len = 3 * model.n_vertices();
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = model.mean_shape()[i];
            for (k, a) in alpha.iter().enumerate() {
                acc += a * model.shape_scales()[k] * model.shape_basis()[(i, k)];
            }
            for (l, b) in beta.iter().enumerate() {
                acc += b * model.expression_scales()[l] * model.expression_basis()[(i, l)];
            }
            *o = acc;
        }
        out
    }

    #[test]
    fn zero_coefficients_give_mean_exactly() {
        let model = make_toy_model(3, 60, 4, 2).unwrap();
        let shape = model.synthesize_coefficients(&[0.0; 4], &[0.0; 2]).unwrap();
        assert_eq!(shape.coords(), model.mean_shape().as_slice());
    }

    #[test]
    fn synthesis_matches_term_by_term_sum() {
        let model = make_toy_model(7, 50, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let a = random_coeffs(&mut rng, 4);
            let b = random_coeffs(&mut rng, 2);
            let got = model.synthesize_coefficients(&a, &b).unwrap();
            let want = brute_force(&model, &a, &b);
            for (g, w) in got.coords().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{g} vs {w}");
            }
        }
    }

    #[test]
    fn full_size_dimensions_are_enforced() {
        let model = make_toy_model(1, 100, 199, 29).unwrap();
        assert_eq!(model.param_len(), 235);
        assert!(model.synthesize_coefficients(&[0.1; 199], &[0.0; 29]).is_ok());
        let err = model.synthesize_coefficients(&[0.1; 198], &[0.0; 29]);
        assert!(matches!(err, Err(ModelError::InvalidInput(_))));
    }

    #[test]
    fn normalization_definition_and_inverse() {
        let model = make_toy_model(2, 40, 3, 2).unwrap();
        let (zs, ze) = model.normalize_params(&[0.0; 3], &[0.0; 2]).unwrap();
        assert!(zs.iter().chain(&ze).all(|v| *v == 0.0));

        let raw_shape: Vec<f64> = model.shape_scales().iter().copied().collect();
        let raw_expr: Vec<f64> = model.expression_scales().iter().copied().collect();
        let (s, e) = model.normalize_params(&raw_shape, &raw_expr).unwrap();
        assert!(s.iter().chain(&e).all(|v| *v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = random_coeffs(&mut rng, 3);
            let b = random_coeffs(&mut rng, 2);
            let (na, nb) = model.normalize_params(&a, &b).unwrap();
            let (ra, rb) = model.denormalize_params(&na, &nb).unwrap();
            for (x, y) in a.iter().chain(&b).zip(ra.iter().chain(&rb)) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
        assert!(model.normalize_params(&[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn params_flatten_in_pose_shape_expression_order() {
        let model = make_toy_model(2, 40, 3, 2).unwrap();
        let params = FaceParams {
            pose: Pose([1.0, 0.1, 0.2, 0.3, 4.0, 5.0, 6.0]),
            shape: vec![7.0, 8.0, 9.0],
            expression: vec![10.0, 11.0],
        };
        let flat = params.to_vec();
        assert_eq!(flat, vec![1.0, 0.1, 0.2, 0.3, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        assert_eq!(FaceParams::from_slice(&flat, &model).unwrap(), params);
        assert!(FaceParams::from_slice(&flat[1..], &model).is_err());
    }

    #[test]
    fn pose_invariants() {
        assert!(Pose([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).validate().is_err());
        assert!(Pose([1.0, -std::f64::consts::PI, 0.0, 0.0, 0.0, 0.0, 0.0]).validate().is_err());
        assert!(Pose([1.0, std::f64::consts::PI, 0.0, 0.0, 0.0, 0.0, 0.0]).validate().is_ok());
    }

    #[test]
    fn invariant_violations_are_rejected() {
        let model = make_toy_model(4, 30, 2, 1).unwrap();
        let build = |tris: Vec<[u32; 3]>, lms: Vec<u32>, scale: f64| {
            MorphableModel::new(
                model.mean_shape().clone(),
                model.shape_basis().clone(),
                model.expression_basis().clone(),
                DVector::from_element(2, scale),
                model.expression_scales().clone(),
                tris,
                lms,
            )
        };
        let lms = model.landmark_indices().to_vec();
        assert!(matches!(
            build(vec![[0, 1, 30]], lms.clone(), 1.0),
            Err(ModelError::Topology(_))
        ));
        assert!(matches!(
            build(vec![[0, 1, 1]], lms.clone(), 1.0),
            Err(ModelError::Topology(_))
        ));
        assert!(build(vec![[0, 1, 2]], lms.clone(), 0.0).is_err());
        assert!(build(vec![[0, 1, 2]], lms[..6].to_vec(), 1.0).is_err());
        assert!(build(vec![[0, 1, 2]], lms, 1.0).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn synthesis_is_affine_in_coefficients(
            a in proptest::collection::vec(-3.0f64..3.0, 6),
            b in proptest::collection::vec(-3.0f64..3.0, 6),
            wa in -2.0f64..2.0,
            wb in -2.0f64..2.0,
        ) {
            let model = make_toy_model(9, 40, 4, 2).unwrap();
            let mean = model.mean_shape();
            let s1 = model.synthesize_coefficients(&a[..4], &a[4..]).unwrap();
            let s2 = model.synthesize_coefficients(&b[..4], &b[4..]).unwrap();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| wa * x + wb * y).collect();
            let s3 = model.synthesize_coefficients(&mix[..4], &mix[4..]).unwrap();
            for i in 0..mean.len() {
                let want = wa * (s1.coords()[i] - mean[i]) + wb * (s2.coords()[i] - mean[i]) + mean[i];
                let got = s3.coords()[i];
                proptest::prop_assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0));
            }
        }
    }
}
