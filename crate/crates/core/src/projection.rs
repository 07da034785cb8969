//! Weak perspective (scaled orthographic) camera.
//!
//! A vertex `p` maps to `(u, v) = s·(R p)ₓᵧ + (tx, ty)` in raster units and
//! `depth = (R p)_z + tz` in millimeters. Depth is deliberately left
//! unscaled so rendered depth values stay metric.
//!
//! Rotations use the intrinsic X-Y-Z convention
//! `R = Rx(pitch) · Ry(yaw) · Rz(roll)` with right-handed elementary
//! rotations. Gimbal lock therefore occurs at `yaw = ±π/2`; there the roll
//! is fixed to zero and the pitch absorbs the remaining rotation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3, SVD};
use thiserror::Error;

use crate::model::{FaceShape, Pose, POSE_DIM};

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("camera text: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakPerspective {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    /// `(tx, ty)` in raster units, `tz` in millimeters.
    pub translation: Vector3<f64>,
}

/// Tolerance used to validate rotation matrices.
const ORTHONORMAL_TOL: f64 = 1e-6;

impl WeakPerspective {
    pub fn new(
        scale: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, ProjectionError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(ProjectionError::InvalidInput(format!(
                "scale {scale} must be positive"
            )));
        }
        check_rotation(&rotation)?;
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(ProjectionError::InvalidInput("non-finite translation".into()));
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub fn from_pose(pose: &Pose) -> Result<Self, ProjectionError> {
        let [pitch, yaw, roll] = pose.angles();
        let [tx, ty, tz] = pose.translation();
        Self::new(
            pose.scale(),
            euler_to_rotation(pitch, yaw, roll),
            Vector3::new(tx, ty, tz),
        )
    }

    pub fn to_pose(&self) -> Pose {
        let [pitch, yaw, roll] =
            rotation_to_euler(&self.rotation).expect("camera rotation is orthonormal");
        Pose([
            self.scale,
            pitch,
            yaw,
            roll,
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ])
    }

    pub fn project_point(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]);
        [
            self.scale * q.x + self.translation.x,
            self.scale * q.y + self.translation.y,
            q.z + self.translation.z,
        ]
    }

    /// Projects every vertex to `(u, v, depth)`.
    pub fn project(&self, shape: &FaceShape) -> Vec<[f64; 3]> {
        shape.vertices().map(|p| self.project_point(p)).collect()
    }
}

/// Camera text format: `s pitch yaw roll tx ty tz`.
impl fmt::Display for WeakPerspective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pose = self.to_pose();
        let parts: Vec<String> = pose.0.iter().map(|v| format!("{v}")).collect();
        write!(f, "{}", parts.join(" "))
    }
}

impl FromStr for WeakPerspective {
    type Err = ProjectionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let values = s
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| ProjectionError::Parse(format!("not a number: {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != POSE_DIM {
            return Err(ProjectionError::Parse(format!(
                "expected {POSE_DIM} values, found {}",
                values.len()
            )));
        }
        let mut pose = [0.0; POSE_DIM];
        pose.copy_from_slice(&values);
        let pose = Pose(pose);
        pose.validate()
            .map_err(|e| ProjectionError::Parse(e.to_string()))?;
        Self::from_pose(&pose)
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), ProjectionError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(ProjectionError::InvalidInput("non-finite rotation".into()));
    }
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if err > ORTHONORMAL_TOL || (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(ProjectionError::InvalidInput(format!(
            "matrix is not a rotation (orthonormality error {err:.3e}, det {det})"
        )));
    }
    Ok(())
}

pub fn euler_to_rotation(pitch: f64, yaw: f64, roll: f64) -> Matrix3<f64> {
    let (sp, cp) = pitch.sin_cos();
    let (sy, cy) = yaw.sin_cos();
    let (sr, cr) = roll.sin_cos();
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cp, -sp, 0.0, sp, cp);
    let ry = Matrix3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let rz = Matrix3::new(cr, -sr, 0.0, sr, cr, 0.0, 0.0, 0.0, 1.0);
    rx * ry * rz
}

/// Maps `-π` to `π` so angles live in `(-π, π]`.
fn wrap(angle: f64) -> f64 {
    if angle <= -PI {
        angle + 2.0 * PI
    } else {
        angle
    }
}

/// Inverse of [`euler_to_rotation`], returning `[pitch, yaw, roll]`.
pub fn rotation_to_euler(r: &Matrix3<f64>) -> Result<[f64; 3], ProjectionError> {
    check_rotation(r)?;
    let yaw = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let cos_yaw = r[(0, 0)].hypot(r[(0, 1)]);
    if cos_yaw < 1e-12 {
        let pitch = r[(2, 1)].atan2(r[(1, 1)]);
        return Ok([wrap(pitch), yaw, 0.0]);
    }
    let pitch = (-r[(1, 2)]).atan2(r[(2, 2)]);
    let roll = (-r[(0, 1)]).atan2(r[(0, 0)]);
    Ok([wrap(pitch), yaw, wrap(roll)])
}

/// Nearest rotation in the Frobenius sense (orthogonal polar factor with
/// the determinant forced to +1).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fix = u;
        u_fix.column_mut(2).neg_mut();
        r = u_fix * v_t;
    }
    r
}

fn skew(p: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -p.z, p.y, p.z, 0.0, -p.x, -p.y, p.x, 0.0)
}

fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    if theta < 1e-300 {
        return Matrix3::identity();
    }
    let k = skew(&(w / theta));
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Sum of squared residuals of a camera on a set of correspondences.
pub fn fit_residual(cam: &WeakPerspective, points: &[[f64; 3]], observed: &[[f64; 3]]) -> f64 {
    points
        .iter()
        .zip(observed)
        .map(|(p, o)| {
            let q = cam.project_point(*p);
            (q[0] - o[0]).powi(2) + (q[1] - o[1]).powi(2) + (q[2] - o[2]).powi(2)
        })
        .sum()
}

/// Least-squares weak perspective camera from 3D–(u, v, depth)
/// correspondences.
///
/// The translation is eliminated by centering both point sets. A 3×3
/// linear map is solved in closed form, its scale read from the image rows
/// and its rotation taken as the polar factor; Levenberg–Marquardt steps on
/// `(log s, rotation)` then polish the estimate against the exact
/// objective, where the image rows are scaled but the depth row is not.
pub fn fit_weak_perspective(
    points: &[[f64; 3]],
    observed: &[[f64; 3]],
) -> Result<WeakPerspective, ProjectionError> {
    if points.len() != observed.len() {
        return Err(ProjectionError::InvalidInput(format!(
            "{} points but {} observations",
            points.len(),
            observed.len()
        )));
    }
    if points.len() < 4 {
        return Err(ProjectionError::Degenerate(format!(
            "need at least 4 correspondences, got {}",
            points.len()
        )));
    }
    if points.iter().chain(observed).flatten().any(|v| !v.is_finite()) {
        return Err(ProjectionError::InvalidInput("non-finite correspondence".into()));
    }
    let n = points.len() as f64;
    let to_v = |p: &[f64; 3]| Vector3::new(p[0], p[1], p[2]);
    let p_bar = points.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let q_bar = observed.iter().map(to_v).sum::<Vector3<f64>>() / n;
    let ps: Vec<Vector3<f64>> = points.iter().map(|p| to_v(p) - p_bar).collect();
    let qs: Vec<Vector3<f64>> = observed.iter().map(|q| to_v(q) - q_bar).collect();

    let mut spp = Matrix3::zeros();
    let mut sqp = Matrix3::zeros();
    for (p, q) in ps.iter().zip(&qs) {
        spp += p * p.transpose();
        sqp += q * p.transpose();
    }
    let eig = spp.symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    if !(hi > 0.0) || lo <= 1e-10 * hi {
        return Err(ProjectionError::Degenerate(
            "points are coplanar or collinear".into(),
        ));
    }
    let spp_inv = spp
        .try_inverse()
        .ok_or_else(|| ProjectionError::Degenerate("singular point scatter".into()))?;
    let linear = sqp * spp_inv;
    let row_scale = 0.5 * (linear.row(0).norm() + linear.row(1).norm());
    if !(row_scale > 0.0 && row_scale.is_finite()) {
        return Err(ProjectionError::Degenerate(
            "observations carry no image-plane extent".into(),
        ));
    }
    let unscale = Matrix3::from_diagonal(&Vector3::new(1.0 / row_scale, 1.0 / row_scale, 1.0));
    let mut rotation = nearest_rotation(&(unscale * linear));
    let mut log_s = row_scale.ln();

    let cost = |log_s: f64, r: &Matrix3<f64>| -> f64 {
        let s = log_s.exp();
        ps.iter()
            .zip(&qs)
            .map(|(p, q)| {
                let rp = r * p;
                (q.x - s * rp.x).powi(2) + (q.y - s * rp.y).powi(2) + (q.z - rp.z).powi(2)
            })
            .sum()
    };

    let mut current = cost(log_s, &rotation);
    let mut lambda = 1e-6;
    for _ in 0..100 {
        let s = log_s.exp();
        let mut jtj = nalgebra::Matrix4::<f64>::zeros();
        let mut jte = nalgebra::Vector4::<f64>::zeros();
        for (p, q) in ps.iter().zip(&qs) {
            let rp = rotation * p;
            let e = Vector3::new(q.x - s * rp.x, q.y - s * rp.y, q.z - rp.z);
            // Model m = D R exp([w]x) p; dm/dw = -D R [p]x, dm/dlog_s = s (R p)_xy.
            let d = Matrix3::from_diagonal(&Vector3::new(s, s, 1.0));
            let dm_dw = -(d * rotation * skew(p));
            let mut j = nalgebra::Matrix3x4::<f64>::zeros();
            j.set_column(0, &Vector3::new(s * rp.x, s * rp.y, 0.0));
            j.fixed_columns_mut::<3>(1).copy_from(&dm_dw);
            jtj += j.transpose() * j;
            jte += j.transpose() * e;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut damped = jtj;
            for i in 0..4 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&jte) else {
                lambda *= 10.0;
                continue;
            };
            let new_log_s = log_s + step[0];
            let new_rot = rotation * rodrigues(&Vector3::new(step[1], step[2], step[3]));
            let new_cost = cost(new_log_s, &new_rot);
            if new_cost <= current {
                let gain = current - new_cost;
                log_s = new_log_s;
                rotation = nearest_rotation(&new_rot);
                current = cost(log_s, &rotation);
                lambda = (lambda * 0.1).max(1e-12);
                improved = gain > 1e-15 * current.max(1e-300) && step.norm() > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }

    let scale = log_s.exp();
    let rp = rotation * p_bar;
    let translation = Vector3::new(
        q_bar.x - scale * rp.x,
        q_bar.y - scale * rp.y,
        q_bar.z - rp.z,
    );
    WeakPerspective::new(scale, rotation, translation)
}

/// Average camera: arithmetic mean of scales and translations, chordal L2
/// mean of rotations.
pub fn mean_projection(cams: &[WeakPerspective]) -> Result<WeakPerspective, ProjectionError> {
    match cams {
        [] => Err(ProjectionError::InvalidInput(
            "cannot average an empty camera list".into(),
        )),
        [only] => Ok(*only),
        _ => {
            let n = cams.len() as f64;
            let scale = cams.iter().map(|c| c.scale).sum::<f64>() / n;
            let translation = cams.iter().map(|c| c.translation).sum::<Vector3<f64>>() / n;
            let mean_r = cams.iter().map(|c| c.rotation).sum::<Matrix3<f64>>() / n;
            WeakPerspective::new(scale, nearest_rotation(&mean_r), translation)
        }
    }
}
