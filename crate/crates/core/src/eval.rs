//! Reconstruction error, a block-mean depth descriptor, cosine matching and
//! rank-1 identification.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::FaceShape;
use crate::render::{DepthImage, SENTINEL};

pub const DEFAULT_GRID: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rmse: Option<f64>,
    pub n_samples: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_sample: Vec<SampleError>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank1: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_probe_rank: Vec<usize>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub probe_ids: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Plain-text summary followed by one row per sample or probe.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if let Some(rmse) = self.rmse {
            let _ = writeln!(out, "samples  {}", self.n_samples);
            let _ = writeln!(out, "rmse     {rmse:.6}");
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<24} {:>14}", "id", "error");
            for s in &self.per_sample {
                let _ = writeln!(out, "{:<24} {:>14.6}", s.id, s.error);
            }
        }
        if let Some(rank1) = self.rank1 {
            let _ = writeln!(out, "probes   {}", self.per_probe_rank.len());
            let _ = writeln!(out, "rank-1   {rank1:.4}");
            let _ = writeln!(out);
            let _ = writeln!(out, "{:<24} {:>6}", "probe", "rank");
            for (i, r) in self.per_probe_rank.iter().enumerate() {
                let id = self.probe_ids.get(i).map(String::as_str).unwrap_or("");
                let _ = writeln!(out, "{id:<24} {r:>6}");
            }
        }
        out
    }
}

/// Mean over samples of `‖S* − Ŝ‖ / n`, where the norm runs over all `3n`
/// coordinates. Dividing by `n` rather than `√n` means the value shrinks as
/// the vertex count grows. Samples are labeled by their index.
pub fn reconstruction_rmse(gt: &[FaceShape], est: &[FaceShape]) -> Result<EvalReport, EvalError> {
    if gt.len() != est.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} ground-truth shapes but {} estimates",
            gt.len(),
            est.len()
        )));
    }
    if gt.is_empty() {
        return Err(EvalError::InvalidInput("no samples".into()));
    }
    let mut per_sample = Vec::with_capacity(gt.len());
    for (i, (a, b)) in gt.iter().zip(est).enumerate() {
        if a.n_vertices() != b.n_vertices() {
            return Err(EvalError::InvalidInput(format!(
                "sample {i}: {} vs {} vertices",
                a.n_vertices(),
                b.n_vertices()
            )));
        }
        let sq: f64 = a.coords().iter().zip(b.coords()).map(|(x, y)| (x - y).powi(2)).sum();
        per_sample.push(SampleError {
            id: i.to_string(),
            error: sq.sqrt() / a.n_vertices() as f64,
        });
    }
    let rmse = per_sample.iter().map(|s| s.error).sum::<f64>() / gt.len() as f64;
    Ok(EvalReport {
        rmse: Some(rmse),
        n_samples: gt.len(),
        per_sample,
        ..Default::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub values: Vec<f64>,
    /// Set when centering left nothing (constant or empty image); `values`
    /// is then all zeros.
    pub degenerate: bool,
}

/// Block-mean descriptor of a square depth image.
///
/// The image is cut into `grid × grid` blocks. Each block contributes the
/// mean of its valid depths. Valid blocks are centered by their common mean,
/// blocks without valid pixels are set to 0, and the result is scaled to
/// unit length. Centering over valid blocks only makes the feature
/// insensitive to a constant depth offset.
pub fn extract_feature(pen: &DepthImage, grid: usize) -> Result<Feature, EvalError> {
    let size = pen.width();
    if pen.height() != size {
        return Err(EvalError::InvalidInput(format!(
            "feature needs a square image, got {}x{}",
            pen.width(),
            pen.height()
        )));
    }
    if grid == 0 || grid > size {
        return Err(EvalError::InvalidInput(format!(
            "grid {grid} does not fit a {size}x{size} image"
        )));
    }
    let mut blocks: Vec<Option<f64>> = Vec::with_capacity(grid * grid);
    for by in 0..grid {
        let (y0, y1) = (by * size / grid, (by + 1) * size / grid);
        for bx in 0..grid {
            let (x0, x1) = (bx * size / grid, (bx + 1) * size / grid);
            let (mut sum, mut count) = (0.0, 0usize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = pen.get(x, y);
                    if d != SENTINEL {
                        sum += d;
                        count += 1;
                    }
                }
            }
            blocks.push((count > 0).then(|| sum / count as f64));
        }
    }
    let valid: Vec<f64> = blocks.iter().flatten().copied().collect();
    let zero = Feature {
        values: vec![0.0; grid * grid],
        degenerate: true,
    };
    if valid.is_empty() {
        return Ok(zero);
    }
    let mean = valid.iter().sum::<f64>() / valid.len() as f64;
    let values: Vec<f64> = blocks.iter().map(|b| b.map_or(0.0, |v| v - mean)).collect();
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let magnitude = valid.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(norm > 1e-9 * magnitude) {
        return Ok(zero);
    }
    Ok(Feature {
        values: values.into_iter().map(|v| v / norm).collect(),
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// At least one input was the zero vector; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Cosine, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::InvalidInput(format!(
            "feature lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Ranks each probe's true identity among the gallery by descending cosine
/// similarity. Equal similarities are ordered by gallery position, so an
/// earlier gallery entry wins a tie.
pub fn rank1_identify(
    gallery: &[(String, Vec<f64>)],
    probes: &[(String, Vec<f64>)],
) -> Result<EvalReport, EvalError> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(EvalError::InvalidInput("gallery and probes must be non-empty".into()));
    }
    let mut index = HashMap::with_capacity(gallery.len());
    for (i, (id, _)) in gallery.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(EvalError::InvalidInput(format!(
                "identity {id} appears twice in the gallery"
            )));
        }
    }
    let mut ranks = Vec::with_capacity(probes.len());
    for (id, feature) in probes {
        let &truth = index.get(id.as_str()).ok_or_else(|| {
            EvalError::InvalidInput(format!("probe identity {id} is not in the gallery"))
        })?;
        let sims = gallery
            .iter()
            .map(|(_, g)| cosine_similarity(feature, g).map(|c| c.value))
            .collect::<Result<Vec<_>, _>>()?;
        let target = sims[truth];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < truth))
            .count();
        ranks.push(ahead + 1);
    }
    let hits = ranks.iter().filter(|&&r| r == 1).count();
    Ok(EvalReport {
        n_samples: probes.len(),
        rank1: Some(hits as f64 / probes.len() as f64),
        per_probe_rank: ranks,
        probe_ids: probes.iter().map(|(id, _)| id.clone()).collect(),
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(rng: &mut ChaCha8Rng, n: usize) -> FaceShape {
        FaceShape::new((0..3 * n).map(|_| rng.random_range(-100.0..100.0)).collect()).unwrap()
    }

    fn eq2(gt: &[FaceShape], est: &[FaceShape]) -> f64 {
        let mut total = 0.0;
        for j in 0..gt.len() {
            let n = gt[j].n_vertices();
            let mut acc = 0.0;
            for i in 0..n {
                let (a, b) = (gt[j].vertex(i), est[j].vertex(i));
                acc += (a[0] - b[0]) * (a[0] - b[0])
                    + (a[1] - b[1]) * (a[1] - b[1])
                    + (a[2] - b[2]) * (a[2] - b[2]);
            }
            total += acc.sqrt() / n as f64;
        }
        total / gt.len() as f64
    }

    #[test]
    fn rmse_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<_> = (0..10).map(|_| shape(&mut rng, 50)).collect();
        let est: Vec<_> = (0..10).map(|_| shape(&mut rng, 50)).collect();
        let r = reconstruction_rmse(&gt, &est).unwrap();
        let oracle = eq2(&gt, &est);
        assert!((r.rmse.unwrap() - oracle).abs() <= 1e-12 * oracle.max(1.0));
        assert_eq!(reconstruction_rmse(&gt, &gt).unwrap().rmse, Some(0.0));
    }

    #[test]
    fn rmse_uniform_offset() {
        let n = 37;
        let eps = 0.25;
        let a = FaceShape::new(vec![1.0; 3 * n]).unwrap();
        let b = FaceShape::new(vec![1.0 + eps; 3 * n]).unwrap();
        let r = reconstruction_rmse(&[a], &[b]).unwrap().rmse.unwrap();
        let expect = eps * ((3 * n) as f64).sqrt() / n as f64;
        assert!((r - expect).abs() < 1e-15);
    }

    #[test]
    fn rmse_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b) = (shape(&mut rng, 10), shape(&mut rng, 11));
        assert!(reconstruction_rmse(&[a.clone()], &[b]).is_err());
        assert!(reconstruction_rmse(&[a.clone()], &[a.clone(), a]).is_err());
    }

    fn plane(size: usize, f: impl Fn(usize, usize) -> f64) -> DepthImage {
        let data = (0..size * size).map(|i| f(i % size, i / size)).collect();
        DepthImage::new(size, size, data).unwrap()
    }

    #[test]
    fn feature_cases() {
        let img = plane(64, |x, y| if x < 4 { 0.0 } else { 500.0 + x as f64 + 0.5 * y as f64 });
        let f = extract_feature(&img, 8).unwrap();
        assert!(!f.degenerate);
        assert!((f.values.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let c = cosine_similarity(&f.values, &extract_feature(&img.clone(), 8).unwrap().values).unwrap();
        assert_eq!(c.value, 1.0);

        let shifted = img.map_valid(|d| d + 37.5);
        let g = extract_feature(&shifted, 8).unwrap();
        for (a, b) in f.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-12);
        }

        let flat = extract_feature(&plane(64, |_, _| 0.3), 8).unwrap();
        assert!(flat.degenerate && flat.values.iter().all(|v| *v == 0.0));
        assert!(extract_feature(&DepthImage::empty(16, 16).unwrap(), 8).unwrap().degenerate);
        assert!(extract_feature(&DepthImage::empty(16, 8).unwrap(), 8).is_err());
    }

    #[test]
    fn feature_blocks_hand_computed() {
        // 4x4 image, 2x2 grid: block means 1, 2, 3 and an empty block.
        let data = vec![
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 0.0, 0.0, //
            3.0, 3.0, 0.0, 0.0,
        ];
        let f = extract_feature(&DepthImage::new(4, 4, data).unwrap(), 2).unwrap();
        let s = 2f64.sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s, 0.0];
        for (a, b) in f.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15, "{:?}", f.values);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap().value, 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        let z = cosine_similarity(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(z.degenerate && z.value == 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let a: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dot = 0.0;
            let (mut na, mut nb) = (0.0, 0.0);
            for i in 0..64 {
                dot += a[i] * b[i];
                na += a[i] * a[i];
                nb += b[i] * b[i];
            }
            let oracle = dot / (na.sqrt() * nb.sqrt());
            assert!((cosine_similarity(&a, &b).unwrap().value - oracle).abs() < 1e-12);
        }
    }

    fn entry(id: &str, v: &[f64]) -> (String, Vec<f64>) {
        (id.to_string(), v.to_vec())
    }

    #[test]
    fn identification_hand_table() {
        // Similarities (probe rows, gallery columns a, b, c):
        //   pa: 1, 0.6, 0        -> a is first
        //   pb: 0.8, 0.6, 0      -> b is second
        //   pc: 0.6, 1, 0.8      -> c is second
        let gallery = vec![entry("a", &[1.0, 0.0]), entry("b", &[0.6, 0.8]), entry("c", &[0.0, 1.0])];
        let probes = vec![
            entry("a", &[1.0, 0.0]),
            entry("b", &[0.8, 0.0]),
            entry("c", &[0.6, 0.8]),
        ];
        let r = rank1_identify(&gallery, &probes).unwrap();
        assert_eq!(r.per_probe_rank, vec![1, 2, 2]);
        assert!((r.rank1.unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn identification_ties_and_errors() {
        let gallery = vec![entry("a", &[1.0, 0.0]), entry("b", &[1.0, 0.0])];
        let r = rank1_identify(&gallery, &[entry("a", &[1.0, 0.0]), entry("b", &[1.0, 0.0])]).unwrap();
        assert_eq!(r.per_probe_rank, vec![1, 2]);

        let err = rank1_identify(&gallery, &[entry("zed", &[1.0, 0.0])]).unwrap_err();
        assert!(err.to_string().contains("zed"));
        let dup = vec![entry("a", &[1.0, 0.0]), entry("a", &[0.0, 1.0])];
        assert!(rank1_identify(&dup, &[entry("a", &[1.0, 0.0])]).is_err());

        let self_match = rank1_identify(&gallery[..1], &gallery[..1]).unwrap();
        assert_eq!(self_match.rank1, Some(1.0));
    }

    proptest! {
        #[test]
        fn ranks_invariant_to_common_scaling(
            seed in any::<u64>(),
            k in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gallery: Vec<_> = (0..6)
                .map(|i| (format!("g{i}"), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
                .collect();
            let probes: Vec<_> = (0..10)
                .map(|i| (format!("g{}", i % 6), (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()))
                .collect();
            let scale = |v: &[(String, Vec<f64>)]| -> Vec<(String, Vec<f64>)> {
                v.iter().map(|(id, f)| (id.clone(), f.iter().map(|x| x * k).collect())).collect()
            };
            let a = rank1_identify(&gallery, &probes).unwrap();
            let b = rank1_identify(&scale(&gallery), &scale(&probes)).unwrap();
            prop_assert_eq!(a.rank1, b.rank1);
        }

        #[test]
        fn rmse_triangle_bound(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (shape(&mut rng, 20), shape(&mut rng, 20), shape(&mut rng, 20));
            let r = |x: &FaceShape, y: &FaceShape| {
                reconstruction_rmse(std::slice::from_ref(x), std::slice::from_ref(y))
                    .unwrap()
                    .rmse
                    .unwrap()
            };
            prop_assert!(r(&a, &c) <= r(&a, &b) + r(&b, &c) + 1e-12);
        }
    }
}
