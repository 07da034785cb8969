//! Synthetic depth data: faces sampled from a morphable model, rendered
//! under random poses and degraded by subsampling, noise and occlusion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FaceParams, ModelError, MorphableModel, Pose};
use crate::pipeline::{default_canonical_camera, PoseSummary};
use crate::projection::{euler_to_rotation, ProjectionError, WeakPerspective};
use crate::render::{rasterize_depth, BBox, DepthImage, RenderError, DEFAULT_OUT_SIZE, SENTINEL};
use crate::textio::{encode_depth_pgm, format_landmarks, format_params, write_file, FormatError};

/// Smallest depth noise can push a valid pixel to, in mm.
pub const MIN_NOISY_DEPTH: f64 = 0.1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("rejected input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcclusionConfig {
    pub count: usize,
    /// Rectangle area as a fraction of the image, drawn uniformly.
    pub min_frac: f64,
    pub max_frac: f64,
}

/// Degradations applied in a fixed order: subsample, noise, occlusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub downsample_factor: usize,
    /// Standard deviation of additive Gaussian depth noise, in mm.
    pub noise_sigma: f64,
    pub occlusion: OcclusionConfig,
    pub seed: u64,
}

impl Default for AugmentConfig {
    /// Conventions, not measured values: subsample by 2, 3 mm noise, one
    /// occluder covering 5 to 15% of the image.
    fn default() -> Self {
        Self {
            downsample_factor: 2,
            noise_sigma: 3.0,
            occlusion: OcclusionConfig {
                count: 1,
                min_frac: 0.05,
                max_frac: 0.15,
            },
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves images untouched.
    pub fn identity() -> Self {
        Self {
            downsample_factor: 1,
            noise_sigma: 0.0,
            occlusion: OcclusionConfig {
                count: 0,
                min_frac: 0.05,
                max_frac: 0.15,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let o = &self.occlusion;
        if self.downsample_factor == 0 {
            return Err(DataError::InvalidInput("downsample factor must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidInput(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        let open_unit = |f: f64| f > 0.0 && f < 1.0;
        if !(open_unit(o.min_frac) && open_unit(o.max_frac) && o.min_frac <= o.max_frac) {
            return Err(DataError::InvalidInput(format!(
                "occlusion fractions {}..{} must satisfy 0 < min <= max < 1",
                o.min_frac, o.max_frac
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: DepthImage,
    /// Rectangles set to the sentinel, in drawing order.
    pub occlusions: Vec<BBox>,
}

/// Applies subsampling, then noise, then occlusion.
///
/// Subsampling keeps every `factor`-th pixel and expands it back to the
/// original size by nearest neighbor; pixels that were missing before stay
/// missing. Noise only touches valid pixels and is clamped to stay positive.
pub fn augment(img: &DepthImage, cfg: &AugmentConfig) -> Result<Augmented, DataError> {
    cfg.validate()?;
    let (w, h) = (img.width(), img.height());
    let src = img.data();
    let f = cfg.downsample_factor;
    let mut data: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            if src[i] == SENTINEL {
                SENTINEL
            } else {
                src[(y / f) * f * w + (x / f) * f]
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        for d in data.iter_mut().filter(|d| **d != SENTINEL) {
            *d = (*d + normal.sample(&mut rng)).max(MIN_NOISY_DEPTH);
        }
    }

    let mut occlusions = Vec::with_capacity(cfg.occlusion.count);
    for _ in 0..cfg.occlusion.count {
        let o = &cfg.occlusion;
        let frac = if o.min_frac < o.max_frac {
            rng.random_range(o.min_frac..=o.max_frac)
        } else {
            o.min_frac
        };
        let aspect: f64 = rng.random_range(0.5..=2.0);
        let area = frac * (w * h) as f64;
        let rw = ((area * aspect).sqrt().round() as usize).clamp(1, w);
        let rh = ((area / rw as f64).round() as usize).clamp(1, h);
        let x = rng.random_range(0..=w - rw);
        let y = rng.random_range(0..=h - rh);
        for yy in y..y + rh {
            data[yy * w + x..yy * w + x + rw].fill(SENTINEL);
        }
        occlusions.push(BBox {
            x,
            y,
            width: rw,
            height: rh,
        });
    }
    Ok(Augmented {
        image: DepthImage::new(w, h, data)?,
        occlusions,
    })
}

/// Half-widths of the uniform pose distribution, in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRange {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        Self {
            yaw_deg: 60.0,
            pitch_deg: 30.0,
            roll_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    pub images_per_subject: usize,
    pub pose_range: PoseRange,
    /// Expression coefficients are uniform in `±expr_range` (normalized units).
    pub expr_range: f64,
    /// Shape coefficients are standard normal, clipped to `±shape_clip`.
    pub shape_clip: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub out_size: usize,
    /// Make image 0 of every subject a frontal, neutral gallery image.
    pub gallery: bool,
    /// Standard deviation of noise added to landmark depths, in mm.
    pub landmark_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            images_per_subject: 40,
            pose_range: PoseRange::default(),
            expr_range: 1.0,
            shape_clip: 3.0,
            augment: AugmentConfig::default(),
            seed: 0,
            out_size: DEFAULT_OUT_SIZE,
            gallery: true,
            landmark_sigma: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        self.augment.validate()?;
        let r = &self.pose_range;
        let angle_ok = |a: f64, max: f64| (0.0..=max).contains(&a);
        if !(angle_ok(r.yaw_deg, 89.0) && angle_ok(r.pitch_deg, 89.0) && angle_ok(r.roll_deg, 180.0)) {
            return Err(DataError::InvalidInput(format!("pose range {r:?} out of bounds")));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        if !(nonneg(self.expr_range) && self.shape_clip > 0.0 && self.shape_clip.is_finite()) {
            return Err(DataError::InvalidInput("coefficient ranges must be finite".into()));
        }
        if !nonneg(self.landmark_sigma) {
            return Err(DataError::InvalidInput("landmark sigma must be non-negative".into()));
        }
        if self.out_size < 8 {
            return Err(DataError::InvalidInput("output size must be at least 8".into()));
        }
        if self.n_subjects == 0 || self.images_per_subject == 0 {
            return Err(DataError::InvalidInput("empty dataset requested".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub subject: String,
    pub image: usize,
    /// `gallery` or `probe`.
    pub role: String,
    pub depth: String,
    pub landmarks: String,
    pub params: String,
    pub pose: PoseSummary,
}

/// One rendered sample before it is written.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: ManifestRecord,
    pub params: FaceParams,
    pub depth: DepthImage,
    pub landmarks: Vec<[f64; 3]>,
}

pub fn subject_name(index: usize) -> String {
    format!("s{index:04}")
}

/// Generates every sample of one subject. The subject's random stream is
/// seeded with `seed ^ index`, so subjects are independent of each other.
pub fn generate_subject(
    model: &MorphableModel,
    cfg: &DatasetConfig,
    index: usize,
) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    let shape: Vec<f64> = (0..model.shape_dim())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z.clamp(-cfg.shape_clip, cfg.shape_clip)
        })
        .collect();
    let base = default_canonical_camera(model, cfg.out_size);
    let mean = model.synthesize(&model.neutral_params([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))?;
    let centroid = mean
        .vertices()
        .fold(nalgebra::Vector3::zeros(), |acc, v| acc + nalgebra::Vector3::from(v))
        / mean.n_vertices() as f64;
    let subject = subject_name(index);
    let mut out = Vec::with_capacity(cfg.images_per_subject);
    for image in 0..cfg.images_per_subject {
        let gallery = cfg.gallery && image == 0;
        let mut uniform = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
        let r = &cfg.pose_range;
        let (yaw, pitch, roll) = (uniform(r.yaw_deg), uniform(r.pitch_deg), uniform(r.roll_deg));
        let expression: Vec<f64> = (0..model.expression_dim()).map(|_| uniform(cfg.expr_range)).collect();
        let jitter_scale = 1.0 + uniform(0.05);
        let jitter = [uniform(2.0), uniform(2.0)];
        let aug_seed: u64 = rng.random();
        let lm_seed: u64 = rng.random();

        let (rotation, expression, scale, jitter) = if gallery {
            (euler_to_rotation(0.0, 0.0, 0.0), vec![0.0; model.expression_dim()], 1.0, [0.0, 0.0])
        } else {
            (
                euler_to_rotation(pitch.to_radians(), yaw.to_radians(), roll.to_radians()),
                expression,
                jitter_scale,
                jitter,
            )
        };
        // Keep the rotated mean-face centroid where the canonical camera puts it.
        let s = base.scale * scale;
        let target = base.scale * centroid + base.translation;
        let rc = rotation * centroid;
        let translation = nalgebra::Vector3::new(
            target.x - s * rc.x + jitter[0],
            target.y - s * rc.y + jitter[1],
            target.z - rc.z,
        );
        let params = FaceParams {
            shape: shape.clone(),
            expression,
            pose: Pose::from(&WeakPerspective::new(s, rotation, translation)?),
        };
        // Render through the stored pose so the parameter file reproduces the image.
        let cam = params.camera()?;
        let face = model.synthesize(&params)?;
        let clean = rasterize_depth(&face, model.triangles(), &cam, cfg.out_size, cfg.out_size)?;
        let depth = augment(
            &clean,
            &AugmentConfig {
                seed: cfg.augment.seed ^ aug_seed,
                ..cfg.augment
            },
        )?
        .image;

        let mut lm_rng = ChaCha8Rng::seed_from_u64(lm_seed);
        let lm_noise = Normal::new(0.0, cfg.landmark_sigma).expect("validated sigma");
        let landmarks = model
            .landmark_points(&face)
            .into_iter()
            .map(|p| {
                let mut q = cam.project_point(p);
                if cfg.landmark_sigma > 0.0 {
                    q[2] += lm_noise.sample(&mut lm_rng);
                }
                q
            })
            .collect();

        let id = format!("{subject}_{image:03}");
        out.push(Sample {
            record: ManifestRecord {
                depth: format!("{id}.pgm"),
                landmarks: format!("{id}.lmk.txt"),
                params: format!("{id}.params.txt"),
                id,
                subject: subject.clone(),
                image,
                role: if gallery { "gallery" } else { "probe" }.to_string(),
                pose: PoseSummary::from(&params),
            },
            params,
            depth,
            landmarks,
        });
    }
    Ok(out)
}

/// Renders the whole dataset into `out_dir` and writes `manifest.jsonl`.
/// On failure every file written so far is removed.
pub fn generate_dataset(
    model: &MorphableModel,
    cfg: &DatasetConfig,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>, DataError> {
    cfg.validate()?;
    let subjects = (0..cfg.n_subjects)
        .into_par_iter()
        .map(|i| generate_subject(model, cfg, i))
        .collect::<Result<Vec<_>, _>>()?;

    fs::create_dir_all(out_dir).map_err(|e| FormatError::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let mut written: Vec<PathBuf> = Vec::new();
    let result = write_samples(subjects.iter().flatten(), out_dir, &mut written);
    if result.is_err() {
        for path in &written {
            let _ = fs::remove_file(path);
        }
    }
    result
}

/// [`generate_dataset`] on a dedicated pool of `threads` workers. The
/// output does not depend on the thread count.
pub fn generate_dataset_with_threads(
    model: &MorphableModel,
    cfg: &DatasetConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<Vec<ManifestRecord>, DataError> {
    if threads == 0 {
        return Err(DataError::InvalidInput("thread count must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| DataError::InvalidInput(e.to_string()))?;
    pool.install(|| generate_dataset(model, cfg, out_dir))
}

fn write_samples<'a>(
    samples: impl Iterator<Item = &'a Sample>,
    out_dir: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<Vec<ManifestRecord>, DataError> {
    let mut put = |name: &str, bytes: &[u8]| -> Result<(), DataError> {
        let path = out_dir.join(name);
        write_file(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    let mut records = Vec::new();
    let mut manifest = String::new();
    for s in samples {
        let r = &s.record;
        put(&r.depth, &encode_depth_pgm(&s.depth)?)?;
        put(&r.landmarks, format_landmarks(&s.landmarks).as_bytes())?;
        put(&r.params, format_params(&s.params).as_bytes())?;
        manifest.push_str(&serde_json::to_string(r).expect("record serializes"));
        manifest.push('\n');
        records.push(r.clone());
    }
    put(MANIFEST_FILE, manifest.as_bytes())?;
    Ok(records)
}

/// Reads a dataset manifest written by [`generate_dataset`].
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = crate::textio::read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                DataError::Format(FormatError::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::make_toy_model;
    use crate::textio::{load_depth, parse_landmarks, parse_params, read_text};

    fn plane(size: usize, depth: f64) -> DepthImage {
        DepthImage::new(size, size, vec![depth; size * size]).unwrap()
    }

    #[test]
    fn identity_augmentation() {
        let model = make_toy_model(2, 200, 4, 2).unwrap();
        let cam = default_canonical_camera(&model, 64);
        let face = model.synthesize(&model.neutral_params([1.0; 7])).unwrap();
        let img = rasterize_depth(&face, model.triangles(), &cam, 64, 64).unwrap();
        let out = augment(&img, &AugmentConfig::identity()).unwrap();
        assert_eq!(out.image, img);
        assert!(out.occlusions.is_empty());
    }

    #[test]
    fn occlusion_hits_exactly_its_rectangle() {
        let img = DepthImage::new(40, 30, (0..1200).map(|i| 100.0 + i as f64).collect()).unwrap();
        let cfg = AugmentConfig {
            occlusion: OcclusionConfig {
                count: 1,
                min_frac: 0.1,
                max_frac: 0.1,
            },
            seed: 11,
            ..AugmentConfig::identity()
        };
        let out = augment(&img, &cfg).unwrap();
        let b = out.occlusions[0];
        assert!(b.width * b.height > 0);
        for y in 0..30 {
            for x in 0..40 {
                let inside = x >= b.x && x < b.x + b.width && y >= b.y && y < b.y + b.height;
                let got = out.image.get(x, y);
                if inside {
                    assert_eq!(got, SENTINEL);
                } else {
                    assert_eq!(got, img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn noise_level_matches_sigma() {
        let cfg = AugmentConfig {
            noise_sigma: 5.0,
            seed: 3,
            ..AugmentConfig::identity()
        };
        let out = augment(&plane(128, 500.0), &cfg).unwrap();
        let v = out.image.data();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!((sd - 5.0).abs() < 0.5, "{sd}");
    }

    #[test]
    fn sentinels_stay_sentinel() {
        let data: Vec<f64> = (0..64 * 64)
            .map(|i| if (i * 7919) % 5 == 0 { 0.0 } else { 400.0 + (i % 13) as f64 })
            .collect();
        let img = DepthImage::new(64, 64, data).unwrap();
        for factor in 1..5 {
            let cfg = AugmentConfig {
                downsample_factor: factor,
                seed: factor as u64,
                ..AugmentConfig::default()
            };
            let out = augment(&img, &cfg).unwrap();
            for (a, b) in img.data().iter().zip(out.image.data()) {
                if *a == SENTINEL {
                    assert_eq!(*b, SENTINEL);
                }
            }
        }
    }

    #[test]
    fn downsample_repeats_blocks() {
        let img = DepthImage::new(4, 4, (1..=16).map(f64::from).collect()).unwrap();
        let cfg = AugmentConfig {
            downsample_factor: 2,
            ..AugmentConfig::identity()
        };
        let out = augment(&img, &cfg).unwrap();
        let expect = [1.0, 1.0, 3.0, 3.0, 1.0, 1.0, 3.0, 3.0, 9.0, 9.0, 11.0, 11.0, 9.0, 9.0, 11.0, 11.0];
        assert_eq!(out.image.data(), &expect);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AugmentConfig::default();
        cfg.occlusion.min_frac = 0.5;
        cfg.occlusion.max_frac = 0.2;
        assert!(cfg.validate().is_err());
        cfg = AugmentConfig {
            downsample_factor: 0,
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn small_cfg() -> DatasetConfig {
        DatasetConfig {
            n_subjects: 2,
            images_per_subject: 3,
            seed: 9,
            out_size: 64,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn dataset_is_deterministic_and_consistent() {
        let model = make_toy_model(2, 200, 4, 2).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ra = generate_dataset(&model, &small_cfg(), a.path()).unwrap();
        let rb = generate_dataset(&model, &small_cfg(), b.path()).unwrap();
        assert_eq!(ra.len(), 6);
        assert_eq!(ra, rb);
        let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        names.sort();
        assert_eq!(names.len(), 19);
        for n in &names {
            assert_eq!(fs::read(a.path().join(n)).unwrap(), fs::read(b.path().join(n)).unwrap());
        }

        assert_eq!(read_manifest(&a.path().join(MANIFEST_FILE)).unwrap(), ra);
        for subject in ["s0000", "s0001"] {
            let shapes: Vec<Vec<f64>> = ra
                .iter()
                .filter(|r| r.subject == subject)
                .map(|r| {
                    let p = parse_params(&read_text(&a.path().join(&r.params)).unwrap(), &model).unwrap();
                    let (raw_s, raw_e) = model.denormalize_params(&p.shape, &p.expression).unwrap();
                    let (s, e) = model.normalize_params(&raw_s, &raw_e).unwrap();
                    assert_eq!((s.clone(), e), (p.shape.clone(), p.expression.clone()));
                    p.shape
                })
                .collect();
            assert_eq!(shapes.len(), 3);
            assert!(shapes.iter().all(|s| *s == shapes[0]));
        }
        for r in &ra {
            load_depth(&a.path().join(&r.depth)).unwrap();
            let lms = parse_landmarks(&read_text(&a.path().join(&r.landmarks)).unwrap()).unwrap();
            assert_eq!(lms.len(), model.landmark_indices().len());
        }
        assert_eq!(ra[0].role, "gallery");
        assert_eq!(ra[1].role, "probe");
        assert_eq!(ra[0].pose.yaw_deg, 0.0);
    }

    #[test]
    fn zeroed_augmentation_equals_clean_render() {
        let model = make_toy_model(2, 200, 4, 2).unwrap();
        let cfg = DatasetConfig {
            augment: AugmentConfig::identity(),
            ..small_cfg()
        };
        for s in generate_subject(&model, &cfg, 1).unwrap() {
            let face = model.synthesize(&s.params).unwrap();
            let cam = s.params.camera().unwrap();
            let clean = rasterize_depth(&face, model.triangles(), &cam, 64, 64).unwrap();
            assert_eq!(s.depth, clean);
            assert!(clean.valid_count() > 500);
        }
    }

    #[test]
    fn failed_write_cleans_up() {
        let model = make_toy_model(2, 200, 4, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        // A directory where the manifest should go makes the final write fail.
        fs::create_dir(dir.path().join(MANIFEST_FILE)).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE).join("x"), b"x").unwrap();
        assert!(generate_dataset(&model, &small_cfg(), dir.path()).is_err());
        let left: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(left.len(), 1);
    }
}
