//! Deterministic synthetic morphable model for tests and demos.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ModelError, MorphableModel};

/// Half-extents of the mean face in millimeters.
const HALF_WIDTH: f64 = 70.0;
const HALF_HEIGHT: f64 = 90.0;
const DEPTH: f64 = 55.0;
/// Fraction of the ellipsoid radius covered by the mesh rim.
const RIM: f64 = 0.95;

/// Per-vertex RMS displacement (mm) of the first shape and expression
/// components at one normalized unit.
const SHAPE_RMS_MM: f64 = 6.0;
const EXPRESSION_RMS_MM: f64 = 4.0;

const MAX_LANDMARKS: usize = 68;

/// Scales are powers of two so that normalizing and de-normalizing
/// coefficients are exact inverses in floating point.
fn nearest_power_of_two(v: f64) -> f64 {
    v.log2().round().exp2()
}

/// Builds a face-like half-ellipsoid model with `n_vertices` vertices,
/// `k` shape and `l` expression components.
///
/// The mesh is a set of concentric rings around the nose tip (vertex 0),
/// triangulated with outward-facing winding. Basis vectors are smooth
/// cosine displacement fields mixed with seeded Gaussian weights and then
/// orthogonalized; column `k` has Euclidean norm equal to its stored scale.
pub fn make_toy_model(
    seed: u64,
    n_vertices: usize,
    k: usize,
    l: usize,
) -> Result<MorphableModel, ModelError> {
    if n_vertices < 12 {
        return Err(ModelError::InvalidInput(format!(
            "toy model needs at least 12 vertices, got {n_vertices}"
        )));
    }
    if k < 1 || l < 1 {
        return Err(ModelError::InvalidInput(format!(
            "toy model needs K >= 1 and L >= 1, got K={k}, L={l}"
        )));
    }
    if k + l > 3 * n_vertices {
        return Err(ModelError::InvalidInput(format!(
            "K + L = {} exceeds the 3n = {} available dimensions",
            k + l,
            3 * n_vertices
        )));
    }

    let rings = ring_sizes(n_vertices);
    let (planar, mean) = mean_mesh(&rings);
    let triangles = triangulate(&rings, &mean);
    let landmarks = farthest_point_landmarks(&planar, MAX_LANDMARKS.min(n_vertices));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units = orthonormal_fields(&planar, k, l, &mut rng)?;

    let len = 3 * n_vertices;
    let root_n = (n_vertices as f64).sqrt();
    let mut shape_basis = DMatrix::zeros(len, k);
    let mut shape_scales = DVector::zeros(k);
    for (c, unit) in units[..k].iter().enumerate() {
        let sigma = nearest_power_of_two((SHAPE_RMS_MM / (1.0 + c as f64).sqrt() * root_n).sqrt());
        shape_scales[c] = sigma;
        shape_basis.set_column(c, &(unit * sigma));
    }
    let mut expression_basis = DMatrix::zeros(len, l);
    let mut expression_scales = DVector::zeros(l);
    for (c, unit) in units[k..].iter().enumerate() {
        let sigma = nearest_power_of_two((EXPRESSION_RMS_MM / (1.0 + c as f64).sqrt() * root_n).sqrt());
        expression_scales[c] = sigma;
        expression_basis.set_column(c, &(unit * sigma));
    }

    MorphableModel::new(
        DVector::from_vec(mean),
        shape_basis,
        expression_basis,
        shape_scales,
        expression_scales,
        triangles,
        landmarks,
    )
}

/// Vertex counts per ring, innermost first; the center vertex is ring 0.
fn ring_sizes(n: usize) -> Vec<usize> {
    let mut sizes = vec![1];
    let mut left = n - 1;
    let mut ring = 1;
    while left > 0 {
        let want = 6 * ring;
        if left >= want + 3 || left == want {
            sizes.push(want);
            left -= want;
        } else if left >= 3 {
            sizes.push(left);
            left = 0;
        } else {
            *sizes.last_mut().unwrap() += left;
            left = 0;
        }
        ring += 1;
    }
    sizes
}

fn ring_angle(j: usize, count: usize) -> f64 {
    2.0 * PI * j as f64 / count as f64
}

/// Returns normalized planar coordinates (x/W, y/H) and the flat 3D mean shape.
fn mean_mesh(rings: &[usize]) -> (Vec<[f64; 2]>, Vec<f64>) {
    let outer = (rings.len() - 1) as f64;
    let mut planar = Vec::new();
    let mut coords = Vec::new();
    for (r, &count) in rings.iter().enumerate() {
        let rho = r as f64 / outer;
        for j in 0..count {
            let phi = ring_angle(j, count);
            let (px, py) = (RIM * rho * phi.cos(), RIM * rho * phi.sin());
            planar.push([px, py]);
            let z = -DEPTH * (1.0 - px * px - py * py).max(0.0).sqrt();
            coords.extend_from_slice(&[HALF_WIDTH * px, HALF_HEIGHT * py, z]);
        }
    }
    (planar, coords)
}

fn triangulate(rings: &[usize], coords: &[f64]) -> Vec<[u32; 3]> {
    let mut tris = Vec::new();
    let mut starts = Vec::with_capacity(rings.len());
    let mut acc = 0usize;
    for &count in rings {
        starts.push(acc);
        acc += count;
    }
    let first = rings[1];
    for j in 0..first {
        tris.push([0, (starts[1] + j) as u32, (starts[1] + (j + 1) % first) as u32]);
    }
    for r in 1..rings.len() - 1 {
        let (a, b) = (rings[r], rings[r + 1]);
        let (sa, sb) = (starts[r], starts[r + 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < a || j < b {
            let next_a = ring_angle(i + 1, a);
            let next_b = ring_angle(j + 1, b);
            let advance_a = j == b || (i < a && next_a <= next_b);
            let ai = (sa + i % a) as u32;
            let bj = (sb + j % b) as u32;
            if advance_a {
                tris.push([ai, (sa + (i + 1) % a) as u32, bj]);
                i += 1;
            } else {
                tris.push([ai, (sb + (j + 1) % b) as u32, bj]);
                j += 1;
            }
        }
    }
    // Orient every triangle away from the ellipsoid center at the origin.
    for tri in &mut tris {
        let p = |i: u32| {
            let i = 3 * i as usize;
            nalgebra::Vector3::new(coords[i], coords[i + 1], coords[i + 2])
        };
        let (p0, p1, p2) = (p(tri[0]), p(tri[1]), p(tri[2]));
        let normal = (p1 - p0).cross(&(p2 - p0));
        let centroid = (p0 + p1 + p2) / 3.0;
        if normal.dot(&centroid) < 0.0 {
            tri.swap(1, 2);
        }
    }
    tris
}

fn farthest_point_landmarks(planar: &[[f64; 2]], count: usize) -> Vec<u32> {
    let dist2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let mut chosen = vec![0u32];
    let mut nearest: Vec<f64> = planar.iter().map(|&p| dist2(p, planar[0])).collect();
    while chosen.len() < count {
        let (best, _) = nearest
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
        chosen.push(best as u32);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(planar[i], planar[best]));
        }
    }
    chosen
}

/// Smooth scalar cosine field with frequencies `(a, b)` on the normalized
/// face plane.
fn cosine_field(p: [f64; 2], a: usize, b: usize) -> f64 {
    let x = (p[0] / RIM + 1.0) * 0.5;
    let y = (p[1] / RIM + 1.0) * 0.5;
    (a as f64 * PI * x).cos() * (b as f64 * PI * y).cos()
}

/// The `m`-th elementary displacement field: frequency pairs ordered by
/// total frequency, each used once per axis. Constant fields are skipped
/// since they duplicate the pose translation.
fn elementary_field(planar: &[[f64; 2]], m: usize) -> DVector<f64> {
    let (pair, axis) = (m / 3 + 1, m % 3);
    let (mut a, mut b, mut idx) = (0usize, 0usize, 0usize);
    'outer: for total in 1.. {
        for fa in (0..=total).rev() {
            if idx == pair - 1 {
                a = fa;
                b = total - fa;
                break 'outer;
            }
            idx += 1;
        }
    }
    let weight = if axis == 2 { 1.0 } else { 0.5 };
    let mut v = DVector::zeros(3 * planar.len());
    for (i, &p) in planar.iter().enumerate() {
        v[3 * i + axis] = weight * cosine_field(p, a, b);
    }
    v
}

fn orthonormal_fields(
    planar: &[[f64; 2]],
    k: usize,
    l: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DVector<f64>>, ModelError> {
    const MIX: usize = 3;
    let budget = 3 * planar.len() + 256;
    let mut accepted: Vec<DVector<f64>> = Vec::with_capacity(k + l);
    let mut m = 0usize;
    while accepted.len() < k + l {
        if m >= budget {
            return Err(ModelError::InvalidInput(format!(
                "could not build {} independent basis fields on {} vertices",
                k + l,
                planar.len()
            )));
        }
        let mut candidate = elementary_field(planar, m);
        for t in 1..=MIX {
            let w: f64 = StandardNormal.sample(rng);
            candidate += elementary_field(planar, m + t) * (0.5 * w);
        }
        m += 1;
        if accepted.len() >= k {
            // Expression fields concentrate on the lower face (y points down).
            for (i, p) in planar.iter().enumerate() {
                let mask = 0.1 + 0.5 * (1.0 + p[1] / RIM);
                for axis in 0..3 {
                    candidate[3 * i + axis] *= mask;
                }
            }
        }
        let norm0 = candidate.norm();
        for _ in 0..2 {
            for q in &accepted {
                let proj = q.dot(&candidate);
                candidate.axpy(-proj, q, 1.0);
            }
        }
        let norm = candidate.norm();
        if norm > 1e-6 * norm0 {
            accepted.push(candidate / norm);
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::save_model;

    #[test]
    fn ring_sizes_sum_to_vertex_count() {
        for n in 12..400 {
            let sizes = ring_sizes(n);
            assert_eq!(sizes.iter().sum::<usize>(), n);
            assert!(sizes[1..].iter().all(|&s| s >= 3), "n={n}: {sizes:?}");
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = make_toy_model(42, 150, 5, 3).unwrap();
        let b = make_toy_model(42, 150, 5, 3).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.penm"), dir.path().join("b.penm"));
        save_model(&a, &pa).unwrap();
        save_model(&b, &pb).unwrap();
        assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        assert_ne!(a, make_toy_model(43, 150, 5, 3).unwrap());
    }

    #[test]
    fn basis_gram_matrix_is_diagonal() {
        let model = make_toy_model(1, 200, 4, 2).unwrap();
        let all = {
            let mut m = DMatrix::zeros(600, 6);
            m.columns_mut(0, 4).copy_from(model.shape_basis());
            m.columns_mut(4, 2).copy_from(model.expression_basis());
            m
        };
        let gram = all.transpose() * &all;
        let scales: Vec<f64> = model
            .shape_scales()
            .iter()
            .chain(model.expression_scales().iter())
            .copied()
            .collect();
        for i in 0..6 {
            for j in 0..6 {
                if i == j {
                    assert!((gram[(i, i)] - scales[i] * scales[i]).abs() < 1e-9);
                } else {
                    assert!(gram[(i, j)].abs() < 1e-9, "gram[{i},{j}] = {}", gram[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn mesh_is_outward_and_uses_every_vertex() {
        for n in [12, 13, 50, 200] {
            let model = make_toy_model(1, n, 2, 1).unwrap();
            let mean = model.mean_shape();
            let mut used = vec![false; n];
            for tri in model.triangles() {
                let p = |i: u32| mean.fixed_rows::<3>(3 * i as usize).into_owned();
                let (p0, p1, p2) = (p(tri[0]), p(tri[1]), p(tri[2]));
                let normal = (p1 - p0).cross(&(p2 - p0));
                assert!(normal.dot(&((p0 + p1 + p2) / 3.0)) > 0.0);
                for &i in tri {
                    used[i as usize] = true;
                }
            }
            assert!(used.iter().all(|&u| u));
            let lms = model.landmark_indices();
            assert!(lms.len() >= 7);
            let mut sorted = lms.to_vec();
            sorted.sort();
            sorted.dedup();
            assert_eq!(sorted.len(), lms.len());
        }
    }

    #[test]
    fn nose_tip_is_closest_vertex() {
        let model = make_toy_model(1, 200, 2, 1).unwrap();
        let z: Vec<f64> = model.mean_shape().iter().skip(2).step_by(3).copied().collect();
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(z[0], min);
    }

    #[test]
    fn rejects_undersized_requests() {
        assert!(make_toy_model(1, 11, 2, 1).is_err());
        assert!(make_toy_model(1, 12, 0, 1).is_err());
        assert!(make_toy_model(1, 12, 1, 0).is_err());
        assert!(make_toy_model(1, 12, 30, 7).is_err());
        assert!(make_toy_model(1, 12, 1, 1).is_ok());
    }
}
