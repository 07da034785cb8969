//! Three-channel geocentric encoding of a depth image: horizontal
//! disparity, height above the lowest surface point, and the angle between
//! the local surface normal and the estimated up direction.
//!
//! All maps from metric quantities to bytes are linear with clamping, so
//! the output is bit-reproducible for a fixed [`HhaConfig`].

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::render::{DepthImage, SENTINEL};

#[derive(Debug, Error)]
pub enum HhaError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error("gravity estimation: {0}")]
    Gravity(String),
}

/// Pinhole intrinsics used to back-project pixels to metric 3D points.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, HhaError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(HhaError::InvalidInput(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(HhaError::InvalidInput("non-finite principal point".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pinhole stand-in for a weak perspective render: `f = 1000·scale`,
    /// principal point at the raster center.
    pub fn weak_perspective_surrogate(scale: f64, width: usize, height: usize) -> Result<Self, HhaError> {
        Self::new(1000.0 * scale, 1000.0 * scale, width as f64 / 2.0, height as f64 / 2.0)
    }

    /// Back-projects the center of pixel `(x, y)` at `depth_m` meters.
    pub fn back_project(&self, x: usize, y: usize, depth_m: f64) -> Vector3<f64> {
        Vector3::new(
            (x as f64 + 0.5 - self.cx) * depth_m / self.fx,
            (y as f64 + 0.5 - self.cy) * depth_m / self.fy,
            depth_m,
        )
    }
}

/// Encoding constants. Distances in meters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HhaConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub h_max: f64,
    /// Normals are fit over a `(2r+1)²` window.
    pub window_radius: usize,
}

impl Default for HhaConfig {
    fn default() -> Self {
        Self {
            d_min: 0.3,
            d_max: 10.0,
            h_max: 2.5,
            window_radius: 2,
        }
    }
}

impl HhaConfig {
    pub fn validate(&self) -> Result<(), HhaError> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(HhaError::InvalidInput(format!(
                "need 0 < d_min < d_max, got {} and {}",
                self.d_min, self.d_max
            )));
        }
        if !(self.h_max > 0.0 && self.h_max.is_finite()) {
            return Err(HhaError::InvalidInput(format!("h_max {} must be positive", self.h_max)));
        }
        Ok(())
    }

    pub fn disparity_byte(&self, depth_m: f64) -> u8 {
        let t = (1.0 / depth_m - 1.0 / self.d_max) / (1.0 / self.d_min - 1.0 / self.d_max);
        to_byte(t)
    }

    pub fn height_byte(&self, height_m: f64) -> u8 {
        to_byte(height_m / self.h_max)
    }
}

fn to_byte(t: f64) -> u8 {
    (255.0 * t).round().clamp(0.0, 255.0) as u8
}

/// Angle between two unit vectors mapped from `[0°, 180°]` to `[0, 255]`.
pub fn angle_byte(normal: &Vector3<f64>, up: &Vector3<f64>) -> u8 {
    let deg = normal.dot(up).clamp(-1.0, 1.0).acos().to_degrees();
    to_byte(deg / 180.0)
}

/// Per-pixel unit normals; `None` where no plane could be fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    pub normals: Vec<Option<Vector3<f64>>>,
}

impl NormalMap {
    pub fn get(&self, x: usize, y: usize) -> Option<Vector3<f64>> {
        self.normals[y * self.width + x]
    }

    pub fn valid(&self) -> impl Iterator<Item = Vector3<f64>> + '_ {
        self.normals.iter().flatten().copied()
    }
}

/// Least-squares plane normals over a square window of back-projected
/// points, oriented toward the camera (negative `z`).
pub fn compute_normals(img: &DepthImage, k: &Intrinsics, window_radius: usize) -> NormalMap {
    let (w, h) = (img.width(), img.height());
    let points: Vec<Option<Vector3<f64>>> = (0..w * h)
        .map(|i| {
            let d = img.data()[i];
            (d != SENTINEL).then(|| k.back_project(i % w, i / w, d / 1000.0))
        })
        .collect();
    let r = window_radius as isize;
    let mut normals = vec![None; w * h];
    let mut window = Vec::with_capacity((2 * window_radius + 1).pow(2));
    for y in 0..h {
        for x in 0..w {
            let Some(center) = points[y * w + x] else {
                continue;
            };
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    if let Some(p) = points[ny as usize * w + nx as usize] {
                        window.push(p);
                    }
                }
            }
            normals[y * w + x] = plane_normal(&window, &center);
        }
    }
    NormalMap {
        width: w,
        height: h,
        normals,
    }
}

fn plane_normal(points: &[Vector3<f64>], center: &Vector3<f64>) -> Option<Vector3<f64>> {
    if points.len() < 3 {
        return None;
    }
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    // Collinear windows do not define a plane.
    if !(hi > 0.0) || mid <= 1e-12 * hi || !lo.is_finite() {
        return None;
    }
    let mut n: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    n.normalize_mut();
    if n.z > 0.0 || (n.z == 0.0 && n.dot(center) > 0.0) {
        n = -n;
    }
    Some(n)
}

/// Initial up direction in camera coordinates (y points down).
pub const INITIAL_UP: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);
const GRAVITY_ITERATIONS: usize = 5;

/// Estimates the up direction from surface normals.
///
/// Starting from [`INITIAL_UP`], each of 5 rounds splits normals into those
/// within 45° of `±g` and the rest (within 45° of the plane orthogonal to
/// `g`), and replaces `g` with the dominant eigenvector of
/// `Σ_aligned n nᵀ − Σ_orthogonal n nᵀ`, i.e. the direction most aligned
/// with the first set and most orthogonal to the second. A tiny multiple of
/// the previous `g` is added so exact eigenvalue ties resolve toward it.
pub fn estimate_gravity(normals: &NormalMap) -> Result<Vector3<f64>, HhaError> {
    let all: Vec<Vector3<f64>> = normals.valid().collect();
    if all.is_empty() {
        return Err(HhaError::Gravity("no valid surface normals".into()));
    }
    estimate_gravity_from(&all)
}

pub fn estimate_gravity_from(normals: &[Vector3<f64>]) -> Result<Vector3<f64>, HhaError> {
    if normals.is_empty() {
        return Err(HhaError::Gravity("no valid surface normals".into()));
    }
    let cos45 = std::f64::consts::FRAC_1_SQRT_2;
    let tie_weight = 1e-6 * normals.len() as f64;
    let mut g = INITIAL_UP;
    for _ in 0..GRAVITY_ITERATIONS {
        let mut m = g * g.transpose() * tie_weight;
        for n in normals {
            let outer = n * n.transpose();
            if n.dot(&g).abs() >= cos45 {
                m += outer;
            } else {
                m -= outer;
            }
        }
        let eig = SymmetricEigen::new(m);
        let top = eig.eigenvalues.imax();
        let mut next: Vector3<f64> = eig.eigenvectors.column(top).into_owned();
        next.normalize_mut();
        if next.dot(&INITIAL_UP) < 0.0 {
            next = -next;
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(HhaError::Gravity("non-finite estimate".into()));
        }
        g = next;
    }
    Ok(g)
}

/// Three 8-bit channels: disparity, height, angle.
#[derive(Debug, Clone, PartialEq)]
pub struct HhaImage {
    width: usize,
    height: usize,
    disparity: Vec<u8>,
    height_above: Vec<u8>,
    angle: Vec<u8>,
}

impl HhaImage {
    pub fn new(
        width: usize,
        height: usize,
        disparity: Vec<u8>,
        height_above: Vec<u8>,
        angle: Vec<u8>,
    ) -> Result<Self, HhaError> {
        let n = width * height;
        if n == 0 || disparity.len() != n || height_above.len() != n || angle.len() != n {
            return Err(HhaError::InvalidInput(format!(
                "channel lengths {}/{}/{} do not match {width}x{height}",
                disparity.len(),
                height_above.len(),
                angle.len()
            )));
        }
        Ok(Self {
            width,
            height,
            disparity,
            height_above,
            angle,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn disparity(&self) -> &[u8] {
        &self.disparity
    }

    pub fn height_above(&self) -> &[u8] {
        &self.height_above
    }

    pub fn angle(&self) -> &[u8] {
        &self.angle
    }

    /// Channel `c` (0 disparity, 1 height, 2 angle) as reals in `[0, 1]`.
    pub fn channel_unit(&self, c: usize) -> Vec<f64> {
        let src = match c {
            0 => &self.disparity,
            1 => &self.height_above,
            _ => &self.angle,
        };
        src.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

/// Result of an encoding, with the up vector that was used.
#[derive(Debug, Clone)]
pub struct HhaEncoding {
    pub image: HhaImage,
    pub up: Vector3<f64>,
    /// Height reference (meters along `up`) of the 1st-percentile point.
    pub ground: f64,
}

impl HhaEncoding {
    /// Sidecar metadata echoing every constant of the encoding.
    pub fn metadata(&self, cfg: &HhaConfig, k: &Intrinsics) -> String {
        format!(
            "channels = disparity,height,angle\n\
             d_min_m = {}\nd_max_m = {}\nh_max_m = {}\nwindow_radius = {}\n\
             fx = {}\nfy = {}\ncx = {}\ncy = {}\n\
             up = {} {} {}\nground_m = {}\n",
            cfg.d_min,
            cfg.d_max,
            cfg.h_max,
            cfg.window_radius,
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            self.up.x,
            self.up.y,
            self.up.z,
            self.ground
        )
    }
}

pub fn depth_to_hha(img: &DepthImage, k: &Intrinsics, cfg: &HhaConfig) -> Result<HhaEncoding, HhaError> {
    cfg.validate()?;
    let normals = compute_normals(img, k, cfg.window_radius);
    let up = estimate_gravity(&normals)?;
    Ok(encode(img, k, cfg, &normals, up))
}

/// Encoding with a caller-supplied up direction (normalized internally).
pub fn depth_to_hha_with_up(
    img: &DepthImage,
    k: &Intrinsics,
    cfg: &HhaConfig,
    up: Vector3<f64>,
) -> Result<HhaEncoding, HhaError> {
    cfg.validate()?;
    let norm = up.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(HhaError::InvalidInput("up vector must be non-zero".into()));
    }
    let normals = compute_normals(img, k, cfg.window_radius);
    Ok(encode(img, k, cfg, &normals, up / norm))
}

fn encode(
    img: &DepthImage,
    k: &Intrinsics,
    cfg: &HhaConfig,
    normals: &NormalMap,
    up: Vector3<f64>,
) -> HhaEncoding {
    let (w, h) = (img.width(), img.height());
    let mut heights: Vec<Option<f64>> = vec![None; w * h];
    let mut sorted = Vec::new();
    for (i, &d) in img.data().iter().enumerate() {
        if d != SENTINEL {
            let hgt = k.back_project(i % w, i / w, d / 1000.0).dot(&up);
            heights[i] = Some(hgt);
            sorted.push(hgt);
        }
    }
    sorted.sort_by(f64::total_cmp);
    let ground = if sorted.is_empty() {
        0.0
    } else {
        sorted[(0.01 * (sorted.len() - 1) as f64).floor() as usize]
    };

    let mut disparity = vec![0u8; w * h];
    let mut height_above = vec![0u8; w * h];
    let mut angle = vec![0u8; w * h];
    for (i, &d) in img.data().iter().enumerate() {
        if d == SENTINEL {
            continue;
        }
        disparity[i] = cfg.disparity_byte(d / 1000.0);
        height_above[i] = cfg.height_byte(heights[i].unwrap() - ground);
        if let Some(n) = normals.normals[i] {
            angle[i] = angle_byte(&n, &up);
        }
    }
    HhaEncoding {
        image: HhaImage::new(w, h, disparity, height_above, angle).expect("channel sizes match"),
        up,
        ground,
    }
}
