use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use pendepth::datagen::{generate_dataset_with_threads, read_manifest, AugmentConfig, DatasetConfig, PoseRange};
use pendepth::estimate::{
    Estimator, ExternalEstimator, LandmarkFitConfig, LandmarkFitter, Passthrough,
};
use pendepth::eval::{extract_feature, rank1_identify, reconstruction_rmse, EvalReport};
use pendepth::hha::{depth_to_hha, HhaConfig, Intrinsics};
use pendepth::model::{load_model, make_toy_model, save_model, MorphableModel};
use pendepth::pipeline::{
    batch_normalize, canonical_from_landmarks, default_canonical_camera, NormalizeJob, PenConfig,
    PoseSummary,
};
use pendepth::render::{crop_resize, face_bbox, DEFAULT_OUT_SIZE};
use pendepth::textio::{
    encode_depth_pgm, encode_hha_ppm, format_manifest, format_params, load_depth, parse_feature,
    parse_landmarks, parse_manifest, parse_params, read_text, write_file,
};
use pendepth::WeakPerspective;

mod config;

use config::{explicit, pick, FileConfig};

#[derive(Parser)]
#[command(name = "pendepth", version, about = "Pose and expression normalization of facial depth images")]
struct Cli {
    /// TOML configuration file; explicit flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic morphable model
    GenModel(GenModel),
    /// Render a synthetic depth dataset from a model
    GenData(GenData),
    /// Encode a depth image as HHA
    Hha(HhaCmd),
    /// Estimate a canonical camera from frontal landmark files
    FitProjection(FitProjection),
    /// Normalize depth images to frontal pose and neutral expression
    Normalize(Normalize),
    /// Compare estimated and ground-truth shapes
    ReconstructEval(ReconstructEval),
    /// Rank-1 identification of probes against a gallery
    Identify(Identify),
}

#[derive(Args)]
struct GenModel {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Number of mesh vertices
    #[arg(long, default_value_t = 500)]
    vertices: usize,
    /// Number of shape components
    #[arg(long, default_value_t = 10)]
    shape_dim: usize,
    /// Number of expression components
    #[arg(long, default_value_t = 5)]
    expr_dim: usize,
    /// Output model file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct GenData {
    /// Model file (or `model` in the config)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Images per subject
    #[arg(long, default_value_t = 40)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Yaw half-range in degrees
    #[arg(long, default_value_t = 60.0)]
    yaw: f64,
    /// Pitch half-range in degrees
    #[arg(long, default_value_t = 30.0)]
    pitch: f64,
    /// Roll half-range in degrees
    #[arg(long, default_value_t = 15.0)]
    roll: f64,
    /// Expression coefficient half-range (normalized units)
    #[arg(long, default_value_t = 1.0)]
    expr_range: f64,
    /// Subsampling factor
    #[arg(long, default_value_t = 2)]
    downsample: usize,
    /// Depth noise standard deviation in mm
    #[arg(long, default_value_t = 3.0)]
    noise: f64,
    /// Number of occluding rectangles
    #[arg(long, default_value_t = 1)]
    occlusions: usize,
    /// Smallest occluder area fraction
    #[arg(long, default_value_t = 0.05)]
    occlusion_min: f64,
    /// Largest occluder area fraction
    #[arg(long, default_value_t = 0.15)]
    occlusion_max: f64,
    /// Landmark depth noise standard deviation in mm
    #[arg(long, default_value_t = 0.0)]
    landmark_noise: f64,
    /// Raster size in pixels
    #[arg(long, default_value_t = DEFAULT_OUT_SIZE)]
    size: usize,
    /// Do not reserve image 0 of each subject as a frontal neutral gallery image
    #[arg(long)]
    no_gallery: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct HhaCmd {
    /// Input depth PGM
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output PPM
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Crop to the face and resize to --size before encoding
    #[arg(long)]
    crop: bool,
    #[arg(long, default_value_t = DEFAULT_OUT_SIZE)]
    size: usize,
    /// Weak-perspective scale used for the surrogate intrinsics
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Nearest encoded depth in meters
    #[arg(long, default_value_t = 0.3)]
    d_min: f64,
    /// Farthest encoded depth in meters
    #[arg(long, default_value_t = 10.0)]
    d_max: f64,
    /// Height mapped to 255, in meters
    #[arg(long, default_value_t = 2.5)]
    h_max: f64,
    /// Normal estimation window radius in pixels
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Also write the gravity and ground estimate here
    #[arg(long, value_name = "FILE")]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct FitProjection {
    /// Model file (or `model` in the config)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Output camera file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Frontal landmark files
    #[arg(required = true, value_name = "LANDMARKS")]
    landmarks: Vec<PathBuf>,
}

#[derive(Args)]
struct Normalize {
    /// Model file (or `model` in the config)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Dataset manifest (JSON lines) listing depth, landmark and parameter files
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// passthrough, landmark or external:<command>
    #[arg(long, default_value = "landmark")]
    estimator: String,
    /// `default` or a camera file
    #[arg(long, default_value = "default")]
    camera: String,
    /// Output raster size
    #[arg(long, default_value_t = DEFAULT_OUT_SIZE)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// External estimator timeout in seconds
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    /// Record wall-clock time per item in the audit (breaks byte equality between runs)
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct ReconstructEval {
    /// Model file (or `model` in the config)
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// Ground-truth manifest: `id<TAB>params file`
    #[arg(long, value_name = "FILE")]
    gt: PathBuf,
    /// Estimate manifest: `id<TAB>params file`
    #[arg(long, value_name = "FILE")]
    est: PathBuf,
    /// Keep expression coefficients instead of comparing neutral shapes
    #[arg(long)]
    with_expression: bool,
    /// Write the JSON report here
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Write the table here instead of stdout
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

#[derive(Args)]
struct Identify {
    /// Gallery manifest: `identity<TAB>depth PGM or feature file`
    #[arg(long, value_name = "FILE")]
    gallery: PathBuf,
    /// Probe manifest in the same format
    #[arg(long, value_name = "FILE")]
    probes: PathBuf,
    /// Block grid size of the depth descriptor
    #[arg(long, default_value_t = 8)]
    grid: usize,
    /// Write the JSON report here
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
    /// Write the table here instead of stdout
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(cli, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pendepth {name}: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli, m: &ArgMatches) -> Result<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::GenModel(a) => gen_model(a),
        Command::GenData(a) => gen_data(a, m, file),
        Command::Hha(a) => hha(a, m, file),
        Command::FitProjection(a) => fit_projection(a, file),
        Command::Normalize(a) => normalize(a, m, file),
        Command::ReconstructEval(a) => reconstruct_eval(a, file),
        Command::Identify(a) => identify(a),
    }
}

fn model_path(flag: Option<PathBuf>, file: &FileConfig) -> Result<PathBuf> {
    flag.or_else(|| file.model.clone())
        .ok_or_else(|| anyhow!("load model: no model given (use --model or `model` in the config)"))
}

fn open_model(flag: Option<PathBuf>, file: &FileConfig) -> Result<MorphableModel> {
    let path = model_path(flag, file)?;
    load_model(&path).with_context(|| format!("load model: {}", path.display()))
}

fn write(path: &Path, bytes: &[u8], stage: &str) -> Result<()> {
    write_file(path, bytes).with_context(|| format!("{stage}: write {}", path.display()))
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        bail!("threads: must be at least 1");
    }
    Ok(())
}

fn gen_model(a: GenModel) -> Result<()> {
    let model = make_toy_model(a.seed, a.vertices, a.shape_dim, a.expr_dim).context("build model")?;
    save_model(&model, &a.out).with_context(|| format!("save model: {}", a.out.display()))
}

fn gen_data(a: GenData, m: &ArgMatches, file: FileConfig) -> Result<()> {
    let model = open_model(a.model.clone(), &file)?;
    let mut augment = file.augment.unwrap_or_default();
    if explicit(m, "downsample") || file.augment.is_none() {
        augment.downsample_factor = a.downsample;
    }
    if explicit(m, "noise") || file.augment.is_none() {
        augment.noise_sigma = a.noise;
    }
    if explicit(m, "occlusions") || file.augment.is_none() {
        augment.occlusion.count = a.occlusions;
    }
    if explicit(m, "occlusion_min") || file.augment.is_none() {
        augment.occlusion.min_frac = a.occlusion_min;
    }
    if explicit(m, "occlusion_max") || file.augment.is_none() {
        augment.occlusion.max_frac = a.occlusion_max;
    }
    let cfg = DatasetConfig {
        n_subjects: a.subjects,
        images_per_subject: a.images,
        pose_range: PoseRange {
            yaw_deg: a.yaw,
            pitch_deg: a.pitch,
            roll_deg: a.roll,
        },
        expr_range: a.expr_range,
        augment: AugmentConfig {
            seed: augment.seed ^ a.seed,
            ..augment
        },
        seed: a.seed,
        out_size: a.size,
        gallery: !a.no_gallery,
        landmark_sigma: a.landmark_noise,
        ..DatasetConfig::default()
    };
    let threads = pick(m, "threads", a.threads, file.threads);
    check_threads(threads)?;
    let records = generate_dataset_with_threads(&model, &cfg, &a.out, threads)
        .context("generate")?;
    let mut gallery = Vec::new();
    let mut probes = Vec::new();
    let mut params = Vec::new();
    for r in &records {
        let entry = (r.subject.clone(), r.depth.clone());
        if r.role == "gallery" {
            gallery.push(entry);
        } else {
            probes.push(entry);
        }
        params.push((r.id.clone(), r.params.clone()));
    }
    write(&a.out.join("gallery.tsv"), format_manifest(&gallery).as_bytes(), "generate")?;
    write(&a.out.join("probes.tsv"), format_manifest(&probes).as_bytes(), "generate")?;
    write(&a.out.join("params.tsv"), format_manifest(&params).as_bytes(), "generate")?;
    Ok(())
}

fn hha(a: HhaCmd, m: &ArgMatches, file: FileConfig) -> Result<()> {
    let mut depth = load_depth(&a.input).with_context(|| format!("load depth: {}", a.input.display()))?;
    if a.crop {
        let bbox = face_bbox(&depth).context("crop")?;
        depth = crop_resize(&depth, bbox, a.size).context("crop")?;
    }
    let base = file.hha.unwrap_or_default();
    let cfg = HhaConfig {
        d_min: pick(m, "d_min", a.d_min, file.hha.map(|_| base.d_min)),
        d_max: pick(m, "d_max", a.d_max, file.hha.map(|_| base.d_max)),
        h_max: pick(m, "h_max", a.h_max, file.hha.map(|_| base.h_max)),
        window_radius: pick(m, "window", a.window, file.hha.map(|_| base.window_radius)),
    };
    let k = Intrinsics::weak_perspective_surrogate(a.scale, depth.width(), depth.height())
        .context("hha")?;
    let enc = depth_to_hha(&depth, &k, &cfg).context("hha")?;
    write(&a.out, &encode_hha_ppm(&enc.image), "hha")?;
    if let Some(meta) = &a.meta {
        write(meta, enc.metadata(&cfg, &k).as_bytes(), "hha")?;
    }
    Ok(())
}

fn fit_projection(a: FitProjection, file: FileConfig) -> Result<()> {
    let model = open_model(a.model, &file)?;
    let obs = a
        .landmarks
        .iter()
        .map(|p| {
            read_text(p)
                .map_err(anyhow::Error::from)
                .and_then(|t| Ok(parse_landmarks(&t)?))
                .with_context(|| format!("load landmarks: {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let cam = canonical_from_landmarks(&model, &obs).context("fit")?;
    write(&a.out, format!("{cam}\n").as_bytes(), "fit")
}

fn make_estimator(
    spec: &str,
    params_file: &Path,
    exchange: PathBuf,
    timeout: u64,
    landmark: LandmarkFitConfig,
    model: &MorphableModel,
) -> Result<Arc<dyn Estimator>> {
    Ok(match spec {
        "passthrough" => {
            let text = read_text(params_file)?;
            let params = parse_params(&text, model)
                .with_context(|| format!("{}", params_file.display()))?;
            Arc::new(Passthrough::new(params))
        }
        "landmark" => Arc::new(LandmarkFitter::new(landmark)),
        other => match other.strip_prefix("external:") {
            Some(cmd) if !cmd.trim().is_empty() => Arc::new(
                ExternalEstimator::new(cmd, exchange)
                    .with_timeout(std::time::Duration::from_secs(timeout)),
            ),
            _ => bail!("unknown estimator {other:?} (expected passthrough, landmark or external:<cmd>)"),
        },
    })
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    id: &'a str,
    estimator: &'a str,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    stage: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pen: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pose: Option<PoseSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expression: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    time_ms: Option<f64>,
}

fn normalize(a: Normalize, m: &ArgMatches, file: FileConfig) -> Result<()> {
    let model = open_model(a.model.clone(), &file)?;
    let estimator = pick(m, "estimator", a.estimator.clone(), file.estimator.clone());
    let camera = pick(m, "camera", a.camera.clone(), file.camera.clone());
    let threads = pick(m, "threads", a.threads, file.threads);
    check_threads(threads)?;

    let canonical = if camera == "default" {
        default_canonical_camera(&model, a.size)
    } else {
        let text = read_text(Path::new(&camera)).context("load camera")?;
        text.trim()
            .parse::<WeakPerspective>()
            .with_context(|| format!("load camera: {camera}"))?
    };
    let mut cfg = PenConfig::new(canonical, a.size).context("configure")?;
    if let Some(h) = file.hha {
        cfg.hha = h;
    }
    let landmark_cfg = file.landmark.unwrap_or_default();

    let records = read_manifest(&a.manifest)
        .with_context(|| format!("load manifest: {}", a.manifest.display()))?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let mut jobs = Vec::with_capacity(records.len());
    for r in &records {
        let load = || -> Result<NormalizeJob> {
            let depth = load_depth(&base.join(&r.depth))?;
            let landmarks = if estimator == "landmark" {
                Some(parse_landmarks(&read_text(&base.join(&r.landmarks))?)?)
            } else {
                None
            };
            let est = make_estimator(
                &estimator,
                &base.join(&r.params),
                a.out.join("exchange").join(&r.id),
                a.timeout,
                landmark_cfg,
                &model,
            )?;
            Ok(NormalizeJob {
                id: r.id.clone(),
                depth,
                landmarks,
                estimator: est,
            })
        };
        jobs.push(load().with_context(|| format!("load item {}", r.id))?);
    }

    std::fs::create_dir_all(&a.out).with_context(|| format!("output: {}", a.out.display()))?;
    let start = Instant::now();
    let results = batch_normalize(&jobs, &model, &cfg, threads).context("normalize")?;
    let elapsed = start.elapsed().as_secs_f64() * 1000.0 / jobs.len().max(1) as f64;

    let mut audit = String::new();
    let (mut gallery, mut probes, mut estimates) = (Vec::new(), Vec::new(), Vec::new());
    let mut failures = Vec::new();
    for ((r, job), res) in records.iter().zip(&jobs).zip(results) {
        let name = job.estimator.name();
        let rec = match res {
            Ok(out) => {
                let pen_name = format!("{}.pen.pgm", r.id);
                let params_name = format!("{}.params.txt", r.id);
                write(&a.out.join(&pen_name), &encode_depth_pgm(&out.pen)?, "write")?;
                write(
                    &a.out.join(&params_name),
                    format_params(&out.estimate.params).as_bytes(),
                    "write",
                )?;
                let entry = (r.subject.clone(), pen_name.clone());
                if r.role == "gallery" {
                    gallery.push(entry);
                } else {
                    probes.push(entry);
                }
                estimates.push((r.id.clone(), params_name));
                let p = &out.estimate.params;
                AuditRecord {
                    id: &r.id,
                    estimator: name,
                    ok: true,
                    stage: None,
                    error: None,
                    pen: Some(pen_name),
                    pose: Some(PoseSummary::from(p)),
                    shape: Some(p.shape.clone()),
                    expression: Some(p.expression.clone()),
                    converged: Some(out.estimate.converged),
                    iterations: Some(out.estimate.iterations),
                    residual: out.estimate.final_residual,
                    time_ms: a.timing.then_some(elapsed),
                }
            }
            Err(e) => {
                failures.push(format!("{}: {e}", r.id));
                AuditRecord {
                    id: &r.id,
                    estimator: name,
                    ok: false,
                    stage: Some(e.stage()),
                    error: Some(e.to_string()),
                    pen: None,
                    pose: None,
                    shape: None,
                    expression: None,
                    converged: None,
                    iterations: None,
                    residual: None,
                    time_ms: a.timing.then_some(elapsed),
                }
            }
        };
        audit.push_str(&serde_json::to_string(&rec)?);
        audit.push('\n');
    }
    write(&a.out.join("audit.jsonl"), audit.as_bytes(), "write")?;
    write(&a.out.join("gallery.tsv"), format_manifest(&gallery).as_bytes(), "write")?;
    write(&a.out.join("probes.tsv"), format_manifest(&probes).as_bytes(), "write")?;
    write(&a.out.join("estimates.tsv"), format_manifest(&estimates).as_bytes(), "write")?;
    if let Some(first) = failures.first() {
        bail!(
            "{} of {} items failed; first: {first}",
            failures.len(),
            records.len()
        );
    }
    Ok(())
}

fn load_tsv(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    let text = read_text(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text, base).with_context(|| format!("{}", path.display()))?)
}

fn emit(report: &EvalReport, json: Option<&Path>, table: Option<&Path>) -> Result<()> {
    if let Some(p) = json {
        write(p, report.to_json().as_bytes(), "report")?;
    }
    match table {
        Some(p) => write(p, report.to_table().as_bytes(), "report"),
        None => {
            print!("{}", report.to_table());
            Ok(())
        }
    }
}

fn reconstruct_eval(a: ReconstructEval, file: FileConfig) -> Result<()> {
    let model = open_model(a.model, &file)?;
    let gt = load_tsv(&a.gt).context("load ground truth")?;
    let est = load_tsv(&a.est).context("load estimates")?;
    let est_by_id: std::collections::HashMap<_, _> = est.iter().map(|(id, p)| (id.as_str(), p)).collect();
    let shape_of = |path: &Path| -> Result<pendepth::FaceShape> {
        let params = parse_params(&read_text(path)?, &model)
            .with_context(|| format!("{}", path.display()))?;
        let expression = if a.with_expression {
            params.expression.clone()
        } else {
            vec![0.0; model.expression_dim()]
        };
        Ok(model.synthesize_coefficients(&params.shape, &expression)?)
    };
    let (mut ids, mut gts, mut ests) = (Vec::new(), Vec::new(), Vec::new());
    for (id, path) in &gt {
        let ep = est_by_id
            .get(id.as_str())
            .ok_or_else(|| anyhow!("evaluate: no estimate for sample {id}"))?;
        gts.push(shape_of(path).context("load ground truth")?);
        ests.push(shape_of(ep).context("load estimates")?);
        ids.push(id.clone());
    }
    let mut report = reconstruction_rmse(&gts, &ests).context("evaluate")?;
    for (s, id) in report.per_sample.iter_mut().zip(ids) {
        s.id = id;
    }
    emit(&report, a.json.as_deref(), a.table.as_deref())
}

fn load_feature(path: &Path, grid: usize) -> Result<Vec<f64>> {
    if path.extension().is_some_and(|e| e == "pgm") {
        Ok(extract_feature(&load_depth(path)?, grid)?.values)
    } else {
        Ok(parse_feature(&read_text(path)?)?)
    }
}

fn identify(a: Identify) -> Result<()> {
    let load = |p: &Path| -> Result<Vec<(String, Vec<f64>)>> {
        load_tsv(p)?
            .into_iter()
            .map(|(id, path)| {
                let f = load_feature(&path, a.grid)
                    .with_context(|| format!("feature: {}", path.display()))?;
                Ok((id, f))
            })
            .collect()
    };
    let gallery = load(&a.gallery).context("load gallery")?;
    let probes = load(&a.probes).context("load probes")?;
    let report = rank1_identify(&gallery, &probes).context("identify")?;
    emit(&report, a.json.as_deref(), a.table.as_deref())
}
