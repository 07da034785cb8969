//! End-to-end checks through files on disk.

use std::sync::Arc;

use pendepth::datagen::{generate_dataset, read_manifest, AugmentConfig, DatasetConfig, PoseRange, MANIFEST_FILE};
use pendepth::estimate::LandmarkFitter;
use pendepth::eval::{extract_feature, rank1_identify, reconstruction_rmse};
use pendepth::model::{load_model, make_toy_model, save_model};
use pendepth::pipeline::{batch_normalize, NormalizeJob, PenConfig};
use pendepth::render::{rasterize_depth, SENTINEL};
use pendepth::textio::{load_depth, parse_landmarks, parse_params, read_text};

#[test]
fn dataset_on_disk_normalizes_and_identifies() {
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m.penm");
    save_model(&make_toy_model(4, 300, 6, 3).unwrap(), &model_path).unwrap();
    let model = load_model(&model_path).unwrap();

    let cfg = DatasetConfig {
        n_subjects: 4,
        images_per_subject: 4,
        pose_range: PoseRange { yaw_deg: 30.0, pitch_deg: 10.0, roll_deg: 5.0 },
        augment: AugmentConfig { downsample_factor: 1, noise_sigma: 1.0, ..AugmentConfig::identity() },
        out_size: 96,
        seed: 21,
        ..DatasetConfig::default()
    };
    let data = dir.path().join("data");
    generate_dataset(&model, &cfg, &data).unwrap();
    let records = read_manifest(&data.join(MANIFEST_FILE)).unwrap();
    assert_eq!(records.len(), 16);

    let pen_cfg = PenConfig::for_model(&model);
    let jobs: Vec<NormalizeJob> = records
        .iter()
        .map(|r| NormalizeJob {
            id: r.id.clone(),
            depth: load_depth(&data.join(&r.depth)).unwrap(),
            landmarks: Some(parse_landmarks(&read_text(&data.join(&r.landmarks)).unwrap()).unwrap()),
            estimator: Arc::new(LandmarkFitter::default()),
        })
        .collect();
    let results = batch_normalize(&jobs, &model, &pen_cfg, 2).unwrap();

    let (mut gallery, mut probes, mut gt, mut est) = (vec![], vec![], vec![], vec![]);
    for (r, res) in records.iter().zip(results) {
        let out = res.unwrap();
        let truth = parse_params(&read_text(&data.join(&r.params)).unwrap(), &model).unwrap();
        let neutral = vec![0.0; model.expression_dim()];
        gt.push(model.synthesize_coefficients(&truth.shape, &neutral).unwrap());
        est.push(model.synthesize_coefficients(&out.estimate.params.shape, &neutral).unwrap());
        let f = extract_feature(&out.pen, 8).unwrap().values;
        if r.role == "gallery" {
            gallery.push((r.subject.clone(), f));
        } else {
            probes.push((r.subject.clone(), f));
        }
    }
    let ident = rank1_identify(&gallery, &probes).unwrap();
    assert_eq!(ident.rank1, Some(1.0), "{}", ident.to_table());
    let rmse = reconstruction_rmse(&gt, &est).unwrap().rmse.unwrap();
    assert!(rmse < 2.0, "shape rmse {rmse} mm");
}

#[test]
fn stored_parameters_reproduce_the_clean_render() {
    let dir = tempfile::tempdir().unwrap();
    let model = make_toy_model(6, 200, 4, 2).unwrap();
    let cfg = DatasetConfig {
        n_subjects: 2,
        images_per_subject: 2,
        augment: AugmentConfig::identity(),
        out_size: 64,
        ..DatasetConfig::default()
    };
    generate_dataset(&model, &cfg, dir.path()).unwrap();
    for r in read_manifest(&dir.path().join(MANIFEST_FILE)).unwrap() {
        let params = parse_params(&read_text(&dir.path().join(&r.params)).unwrap(), &model).unwrap();
        let stored = load_depth(&dir.path().join(&r.depth)).unwrap();
        let face = model.synthesize(&params).unwrap();
        let img = rasterize_depth(&face, model.triangles(), &params.camera().unwrap(), 64, 64).unwrap();
        for (a, b) in img.data().iter().zip(stored.data()) {
            assert_eq!(*a == SENTINEL, *b == SENTINEL);
            // Stored depth is quantized to 0.1 mm.
            assert!((a - b).abs() <= 0.05 + 1e-9, "{a} vs {b}");
        }
    }
}
