//! Run orchestration shared by the CLI and the C bindings: asset loading,
//! output-directory locking, run manifests, and the train / render /
//! evaluate entry points.

use crate::body_model::{BodyShapeParams, PoseParams, SkinnedBodyModel};
use crate::buffers::ImageBuffer;
use crate::error::{Error, Result};
use crate::evaluator::MetricReport;
use crate::io_formats::{
    list_image_files, load_body_model_archive, load_cameras, load_image, load_image_with_mask,
    load_mask, load_motion_sequence, load_pose_row, load_shape_row, sha256_file,
    write_frame_sequence, TrainConfig,
};
use crate::losses::PerceptualMetric;
use crate::motion_field::ComposedField;
use crate::renderer::{render_image, Bounds, RenderSettings};
use crate::trainer::{
    load_checkpoint, read_checkpoint, save_checkpoint, Ablation, CheckpointMeta, Stage,
    TrainInputs, TrainSession,
};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

/// Exclusive ownership of an output directory for the duration of a run,
/// via a `.lock` file.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "output directory is locked by another run: {}",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Provenance record emitted for every run: config snapshot, asset digests,
/// seed, stage timings, and output paths.
#[derive(serde::Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub asset_digests: BTreeMap<String, String>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub outputs: Vec<String>,
    pub ablations: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> RunManifest {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            asset_digests: BTreeMap::new(),
            stage_seconds: BTreeMap::new(),
            outputs: Vec::new(),
            ablations: Vec::new(),
        }
    }

    pub fn digest(&mut self, name: &str, path: &Path) -> Result<()> {
        // Directories (model archives) are identified by their manifest.
        let target = if path.is_dir() {
            path.join("manifest.txt")
        } else {
            path.to_path_buf()
        };
        self.asset_digests
            .insert(name.to_string(), sha256_file(&target)?);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn ablation_name(a: &Ablation) -> String {
    serde_json::to_string(a)
        .unwrap_or_default()
        .trim_matches('"')
        .to_string()
}

fn config_snapshot(config: &TrainConfig) -> BTreeMap<String, String> {
    config
        .to_text()
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

/// Input paths of a training run.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub config: PathBuf,
    pub model: PathBuf,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub camera: PathBuf,
    pub shape: PathBuf,
    pub input_pose: PathBuf,
    pub motion: PathBuf,
    pub out: PathBuf,
}

/// Run summary written next to the checkpoint.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainSummary {
    pub iterations: u64,
    pub stage: Stage,
    pub incidents: u64,
    pub psnr_input_view_start: Option<f64>,
    pub psnr_input_view_post_init: Option<f64>,
    pub psnr_input_view_final: f64,
    pub pseudo_gt_psnr_start: Option<f64>,
    pub pseudo_gt_psnr_post_init: Option<f64>,
    pub silhouette_iou_post_init: Option<f64>,
    pub silhouette_iou_final: f64,
}

/// Load all training assets and build the session plus its run manifest.
pub fn load_training_session(
    paths: &TrainPaths,
    command: &str,
    ablations: Vec<Ablation>,
) -> Result<(TrainSession, RunManifest, CheckpointMeta)> {
    let config = TrainConfig::load(&paths.config)?;
    let model = Arc::new(load_body_model_archive(&paths.model)?);
    let (image, mask) = load_image_with_mask(&paths.image, &paths.mask)?;
    let cameras = load_cameras(&paths.camera)?;
    let beta = BodyShapeParams::from_slice(&load_shape_row(&paths.shape)?)?;
    let input_pose =
        PoseParams::from_frame(&load_pose_row(&paths.input_pose)?, model.joint_count())?;
    let motion_file = load_motion_sequence(&paths.motion)?;
    let motion: Vec<PoseParams> = motion_file
        .frames
        .iter()
        .map(|f| PoseParams::from_frame(f, model.joint_count()))
        .collect::<Result<_>>()?;

    let mut manifest = RunManifest::new(command, config.seed);
    manifest.config = config_snapshot(&config);
    manifest.ablations = ablations.iter().map(ablation_name).collect();
    for (name, path) in [
        ("config", &paths.config),
        ("model", &paths.model),
        ("image", &paths.image),
        ("mask", &paths.mask),
        ("camera", &paths.camera),
        ("shape", &paths.shape),
        ("input_pose", &paths.input_pose),
        ("motion", &paths.motion),
    ] {
        manifest.digest(name, path)?;
    }
    let meta = CheckpointMeta {
        beta: beta.clone(),
        model_path: paths.model.display().to_string(),
        config_digest: sha256_file(&paths.config)?,
    };

    let session = TrainSession::new(TrainInputs {
        model,
        beta,
        input_pose,
        input_camera: cameras[0].clone(),
        input_image: image,
        input_mask: mask,
        motion,
        config,
        ablations,
    })?;
    Ok((session, manifest, meta))
}

/// Full training run: init stage (unless resumed past it), one-shot stage
/// (unless `init_only`), checkpoints, summary, manifest.
pub fn run_training(
    paths: &TrainPaths,
    ablations: Vec<Ablation>,
    resume: Option<&Path>,
    init_only: bool,
) -> Result<TrainSummary> {
    let _lock = DirLock::acquire(&paths.out)?;
    let command = if init_only { "init" } else { "train" };
    let (mut session, mut manifest, meta) = load_training_session(paths, command, ablations)?;

    session.set_log_file(&paths.out.join("train_log.jsonl"))?;
    if session.config.snapshot_every > 0 {
        session.set_snapshot_dir(&paths.out.join("snapshots"))?;
    }

    let mut state = match resume {
        Some(ck) => {
            let model = Arc::new(load_body_model_archive(&paths.model)?);
            let (state, ck_meta) = load_checkpoint(ck, model)?;
            if ck_meta.config_digest != meta.config_digest {
                eprintln!("note: checkpoint was produced with a different config");
            }
            state
        }
        None => session.initial_state()?,
    };

    let probes = session.spread_cameras(4);
    let mut summary = TrainSummary {
        iterations: 0,
        stage: state.stage,
        incidents: 0,
        psnr_input_view_start: None,
        psnr_input_view_post_init: None,
        psnr_input_view_final: 0.0,
        pseudo_gt_psnr_start: None,
        pseudo_gt_psnr_post_init: None,
        silhouette_iou_post_init: None,
        silhouette_iou_final: 0.0,
    };

    if state.stage == Stage::Init {
        summary.psnr_input_view_start = Some(session.input_view_psnr(&state)?);
        summary.pseudo_gt_psnr_start = Some(session.pseudo_gt_psnr(&state, &probes)?);
        let t = Instant::now();
        session.run_init_stage(&mut state)?;
        manifest
            .stage_seconds
            .insert("init".into(), t.elapsed().as_secs_f64());
        summary.psnr_input_view_post_init = Some(session.input_view_psnr(&state)?);
        summary.pseudo_gt_psnr_post_init = Some(session.pseudo_gt_psnr(&state, &probes)?);
        summary.silhouette_iou_post_init = Some(session.silhouette_iou(&state, &probes)?);
        save_checkpoint(&paths.out.join("init.ckpt"), &state, &meta)?;
        manifest.outputs.push("init.ckpt".into());
    }

    if !init_only && state.stage == Stage::OneShot {
        let t = Instant::now();
        session.run_oneshot_stage(&mut state)?;
        manifest
            .stage_seconds
            .insert("oneshot".into(), t.elapsed().as_secs_f64());
    }

    summary.iterations = state.iteration;
    summary.stage = state.stage;
    summary.incidents = state.incidents;
    summary.psnr_input_view_final = session.input_view_psnr(&state)?;
    summary.silhouette_iou_final = session.silhouette_iou(&state, &probes)?;

    save_checkpoint(&paths.out.join("checkpoint.ckpt"), &state, &meta)?;
    manifest.outputs.push("checkpoint.ckpt".into());
    manifest.outputs.push("train_log.jsonl".into());
    let summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::InvalidInput(format!("summary serialization: {e}")))?;
    let summary_path = paths.out.join("summary.json");
    std::fs::write(&summary_path, summary_text).map_err(|e| Error::io(&summary_path, e))?;
    manifest.outputs.push("summary.json".into());
    manifest.write(&paths.out)?;
    Ok(summary)
}

/// Render one frame per (pose, camera) pair from a checkpoint; returns the
/// frame count.
pub fn run_render(
    checkpoint: &Path,
    model_override: Option<&Path>,
    motion_path: &Path,
    cameras_path: &Path,
    out: &Path,
    samples: usize,
    margin: f64,
) -> Result<usize> {
    let _lock = DirLock::acquire(out)?;
    let model: Arc<SkinnedBodyModel> = match model_override {
        Some(p) => Arc::new(load_body_model_archive(p)?),
        None => {
            let raw = read_checkpoint(checkpoint)?;
            Arc::new(load_body_model_archive(Path::new(&raw.meta.model_path))?)
        }
    };
    let (state, _meta) = load_checkpoint(checkpoint, model.clone())?;

    let motion_file = load_motion_sequence(motion_path)?;
    let cameras = load_cameras(cameras_path)?;

    let mut frames = Vec::new();
    for frame in &motion_file.frames {
        let theta = PoseParams::from_frame(frame, model.joint_count())?;
        let pose = state.warp.pose_condition(&theta)?;
        let mesh = model.forward(&state.warp.beta, &theta)?;
        let bounds = Bounds::from_mesh(&mesh, margin);
        let scene = ComposedField::new(&state.field, &state.warp, &pose);
        for camera in &cameras {
            let settings = RenderSettings::eval(samples, bounds, [0.0, 0.0, 0.0]);
            let (img, _alpha) = render_image(&scene, camera, &settings)?;
            frames.push(img);
        }
    }
    let count = write_frame_sequence(&frames, out)?;

    let mut manifest = RunManifest::new("render", 0);
    manifest.digest("checkpoint", checkpoint)?;
    manifest.digest("motion", motion_path)?;
    manifest.digest("cameras", cameras_path)?;
    manifest.outputs = (0..count).map(|i| format!("{i:06}.png")).collect();
    manifest.write(out)?;
    Ok(count)
}

/// Metric tables over matched frame directories.
pub fn run_evaluate(
    rendered: &Path,
    truth: &Path,
    masks: &Path,
    out: &Path,
    margin: i64,
    perceptual: &str,
) -> Result<MetricReport> {
    let _lock = DirLock::acquire(out)?;
    let load_dir = |dir: &Path| -> Result<Vec<ImageBuffer>> {
        let files = list_image_files(dir)?;
        let mut images = Vec::with_capacity(files.len());
        for f in &files {
            images.push(load_image(f)?);
        }
        Ok(images)
    };
    let rendered_frames = load_dir(rendered)?;
    let truth_frames = load_dir(truth)?;
    let mask_files = list_image_files(masks)?;
    let mut mask_frames = Vec::with_capacity(mask_files.len());
    for f in &mask_files {
        mask_frames.push(load_mask(f)?);
    }
    let metric = PerceptualMetric::from_config(perceptual)?;
    let report = crate::evaluator::evaluate_frames(
        &rendered_frames,
        &truth_frames,
        &mask_frames,
        margin,
        &metric,
    )?;
    report.write_csv(&out.join("metrics.csv"))?;
    report.write_json(&out.join("metrics.json"))?;

    let mut manifest = RunManifest::new("evaluate", 0);
    manifest.outputs = vec!["metrics.csv".into(), "metrics.json".into()];
    manifest.write(out)?;
    Ok(report)
}

/// Generate the capsule fixture with a manifest.
pub fn run_fixture(out: &Path, seed: u64) -> Result<crate::fixture::FixturePaths> {
    let paths = crate::fixture::generate_capsule_fixture(out, seed)?;
    let mut manifest = RunManifest::new("fixture", seed);
    for (name, path) in [
        ("model", &paths.model_dir),
        ("motion", &paths.motion),
        ("cameras", &paths.cameras),
        ("image", &paths.image),
        ("mask", &paths.mask),
        ("config", &paths.config),
    ] {
        manifest.digest(name, path)?;
        manifest.outputs.push(path.display().to_string());
    }
    manifest.write(out)?;
    Ok(paths)
}
