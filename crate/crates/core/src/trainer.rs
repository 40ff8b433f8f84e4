//! Two-stage optimization: mesh-render initialization, then one-shot
//! training driven by the hybrid view sampler. Owns the Adam updates,
//! checkpointing, structured logs, and the evaluation probes the run
//! summaries report.

use crate::body_model::{BodyShapeParams, PoseCondition, PoseParams, PosedMesh, SkinnedBodyModel};
use crate::buffers::{AlphaMap, ImageBuffer, PixelRect, SegmentationMap, SilhouetteMask};
use crate::cameras::{build_rig, part_patch_camera, Camera, CameraRig, OrientationBins};
use crate::embedder::{create_embedder, Embedding, EmbedderSpec, ImageEmbedder};
use crate::error::{Error, Result};
use crate::evaluator::psnr;
use crate::io_formats::TrainConfig;
use crate::losses::{
    combined_loss, reconstruction_vjp, semantic_vjp_multi, silhouette_vjp, BranchTerms,
    LossBranch, LossReport, PerceptualMetric, SilhouetteMode,
};
use crate::motion_field::{ComposedField, PoseSnapshot, ResidualMlp, SceneGrads, WarpField};
use crate::neural_field::{FieldArch, FieldParams};
use crate::rasterizer::{rasterize_all, rasterize_parts, rasterize_silhouette};
use crate::renderer::{render_image, render_image_backward, Bounds, RenderSettings};
use crate::sampling::{
    reference_patch, CameraRef, PoseRef, ReferenceSpec, SamplerAssets, SamplerConfig, ViewSampler,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Neighbor count for warp weight transfer.
pub const WARP_KNN: usize = 8;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    OneShot,
    Done,
}

/// Table-4 style ablation switches; each toggles exactly one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoInit,
    NoSemantic,
    NoGeometry,
    HardGeometry,
    NoHybridSampling,
    InputPoseOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Ablation> {
        match s {
            "no_init" => Ok(Ablation::NoInit),
            "no_semantic" => Ok(Ablation::NoSemantic),
            "no_geometry" => Ok(Ablation::NoGeometry),
            "hard_geometry" => Ok(Ablation::HardGeometry),
            "no_hybrid_sampling" => Ok(Ablation::NoHybridSampling),
            "input_pose_only" => Ok(Ablation::InputPoseOnly),
            other => Err(Error::Config(format!("unknown ablation `{other}`"))),
        }
    }
}

/// First-order adaptive-moment optimizer state over the concatenated
/// (field, residual) parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }
}

/// One Adam update over a parameter group slice.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
) {
    let t = step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    for i in 0..params.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grads[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    RejectedNonFinite,
}

/// Everything the optimization mutates; checkpoints capture it exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub field: FieldParams,
    pub warp: WarpField,
    pub adam: AdamState,
    pub iteration: u64,
    pub stage: Stage,
    pub rng: ChaCha8Rng,
    /// Rejected non-finite updates.
    pub incidents: u64,
    pub history: Vec<IterationLog>,
}

const HISTORY_CAP: usize = 100_000;

#[derive(Debug, Clone, serde::Serialize)]
pub struct IterationLog {
    pub iteration: u64,
    pub stage: Stage,
    pub part: u16,
    pub rejected: bool,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Apply one optimizer step; non-finite gradients roll back (parameters and
/// moments untouched) but still advance the counters.
pub fn step(state: &mut TrainState, grads: &SceneGrads, lr_field: f64, lr_residual: f64) -> StepOutcome {
    if !grads.is_finite() {
        state.incidents += 1;
        state.iteration += 1;
        return StepOutcome::RejectedNonFinite;
    }
    state.adam.steps += 1;
    let nf = state.field.values.len();
    adam_update(
        &mut state.field.values,
        &grads.field,
        &mut state.adam.m[..nf],
        &mut state.adam.v[..nf],
        state.adam.steps,
        lr_field,
    );
    if let Some(res) = state.warp.residual.as_mut() {
        adam_update(
            &mut res.values,
            &grads.residual,
            &mut state.adam.m[nf..],
            &mut state.adam.v[nf..],
            state.adam.steps,
            lr_residual,
        );
    }
    state.iteration += 1;
    StepOutcome::Applied
}

/// Immutable inputs of one training run.
pub struct TrainInputs {
    pub model: Arc<SkinnedBodyModel>,
    pub beta: BodyShapeParams,
    pub input_pose: PoseParams,
    pub input_camera: Camera,
    pub input_image: ImageBuffer,
    pub input_mask: SilhouetteMask,
    pub motion: Vec<PoseParams>,
    pub config: TrainConfig,
    pub ablations: Vec<Ablation>,
}

/// The training orchestrator: assets, caches, adapters, and the loop.
pub struct TrainSession {
    model: Arc<SkinnedBodyModel>,
    beta: BodyShapeParams,
    input_pose: PoseParams,
    input_camera: Camera,
    /// Input image with the background masked to black.
    input_image: ImageBuffer,
    pub rig: CameraRig,
    motion: Vec<PoseParams>,
    pub config: TrainConfig,
    ablations: Vec<Ablation>,
    input_seg: SegmentationMap,
    sampler: ViewSampler,
    warp_base: WarpField,
    snapshots: HashMap<PoseRef, PoseSnapshot>,
    meshes: HashMap<PoseRef, PosedMesh>,
    conditions: HashMap<PoseRef, PoseCondition>,
    bounds: HashMap<PoseRef, Bounds>,
    pseudo_gt: HashMap<(PoseRef, usize), (ImageBuffer, SilhouetteMask)>,
    ref_embeddings: HashMap<(u16, PixelRect), Embedding>,
    text_embedding: Option<Embedding>,
    /// Input image at patch resolution (the input-branch target).
    input_target: ImageBuffer,
    embedder: Box<dyn ImageEmbedder>,
    perceptual: PerceptualMetric,
    log_file: Option<std::io::BufWriter<std::fs::File>>,
    snapshot_dir: Option<PathBuf>,
}

impl TrainSession {
    pub fn new(inputs: TrainInputs) -> Result<TrainSession> {
        let TrainInputs {
            model,
            beta,
            input_pose,
            input_camera,
            input_image,
            input_mask,
            motion,
            config,
            ablations,
        } = inputs;
        config.validate()?;
        input_camera.validate()?;
        if motion.is_empty() {
            return Err(Error::InvalidInput("motion sequence is empty".into()));
        }
        input_image.same_resolution(&ImageBuffer::new(input_mask.width, input_mask.height))?;

        // Background to black, matching the renderer's default.
        let mut masked = input_image;
        for (i, &inside) in input_mask.data.iter().enumerate() {
            if !inside {
                masked.data[i * 3..i * 3 + 3].copy_from_slice(&[0.0, 0.0, 0.0]);
            }
        }

        let input_mesh = model.forward(&beta, &input_pose)?;
        let center = {
            let mut c = crate::math::Vec3::zeros();
            for v in &input_mesh.vertices {
                c += v;
            }
            c / input_mesh.vertices.len() as f64
        };
        let cam_offset = input_camera.center() - center;
        let input_yaw = cam_offset.x.atan2(cam_offset.z).to_degrees();
        let rig = build_rig(
            &center,
            config.rig_radius,
            config.rig_height,
            config.rig_cameras,
            input_yaw,
            OrientationBins {
                front: config.bin_front,
                side: config.bin_side,
            },
            &input_camera,
        )?;

        let input_seg = rasterize_parts(&input_mesh, &model.faces, &input_camera);
        let sampler = ViewSampler::new(SamplerConfig {
            p_novel: config.p_novel,
            part_probs: config.resolved_part_probs(model.num_parts()),
            head_part_id: config.head_part_id,
            front_ref_for_all_side_parts: config.front_ref_for_all_side_parts,
            hybrid: !ablations.contains(&Ablation::NoHybridSampling),
            input_pose_only: ablations.contains(&Ablation::InputPoseOnly),
        });
        let warp_base = WarpField::new(model.clone(), beta.clone(), WARP_KNN);

        let embedder = create_embedder(&EmbedderSpec::from_config(
            &config.embedder,
            config.embedder_resolution,
            config.embedder_dim,
        )?)?;
        let perceptual = PerceptualMetric::from_config(&config.perceptual)?;
        let text_embedding = if config.text_prompt.is_empty() {
            None
        } else {
            Some(embedder.embed_text(&config.text_prompt)?)
        };

        let input_target = crate::imageops::crop_resize(
            &masked,
            0.0,
            0.0,
            masked.width as f64,
            masked.height as f64,
            config.patch_size,
            config.patch_size,
        );

        let mut session = TrainSession {
            model,
            beta,
            input_pose,
            input_camera,
            input_image: masked,
            rig,
            motion,
            config,
            ablations,
            input_seg,
            sampler,
            warp_base,
            snapshots: HashMap::new(),
            meshes: HashMap::new(),
            conditions: HashMap::new(),
            bounds: HashMap::new(),
            pseudo_gt: HashMap::new(),
            ref_embeddings: HashMap::new(),
            text_embedding,
            input_target,
            embedder,
            perceptual,
            log_file: None,
            snapshot_dir: None,
        };
        session.ensure_pose(PoseRef::Input)?;
        Ok(session)
    }

    /// Append structured JSONL iteration logs to this file.
    pub fn set_log_file(&mut self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.log_file = Some(std::io::BufWriter::new(file));
        Ok(())
    }

    pub fn set_snapshot_dir(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.snapshot_dir = Some(dir.to_path_buf());
        Ok(())
    }

    pub fn ablations(&self) -> &[Ablation] {
        &self.ablations
    }

    pub fn beta(&self) -> &BodyShapeParams {
        &self.beta
    }

    fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn effective_t_init(&self) -> u64 {
        if self.ablated(Ablation::NoInit) {
            0
        } else {
            self.config.t_init
        }
    }

    /// Fresh optimizer state at iteration zero.
    pub fn initial_state(&self) -> Result<TrainState> {
        let arch = FieldArch {
            hidden_layers: self.config.field_layers,
            width: self.config.field_width,
            skip_at: self.config.field_skip,
            num_freqs: self.config.field_freqs,
        };
        let field = FieldParams::init(arch, self.config.seed)?;
        let mut warp = self.warp_base.clone();
        if self.config.residual_enabled {
            warp = warp.with_residual(ResidualMlp::init(
                self.config.residual_width,
                self.config.residual_freqs,
                self.model.joint_count(),
                self.config.seed ^ 0x5eed_0b5e,
            ));
        }
        let total = field.values.len() + warp.residual_param_count();
        Ok(TrainState {
            field,
            warp,
            adam: AdamState::new(total),
            iteration: 0,
            stage: if self.effective_t_init() == 0 {
                Stage::OneShot
            } else {
                Stage::Init
            },
            rng: ChaCha8Rng::seed_from_u64(self.config.seed),
            incidents: 0,
            history: Vec::new(),
        })
    }

    fn ensure_pose(&mut self, pose: PoseRef) -> Result<()> {
        if self.snapshots.contains_key(&pose) {
            return Ok(());
        }
        let theta = match pose {
            PoseRef::Input => &self.input_pose,
            PoseRef::Motion(i) => &self.motion[i],
        };
        let mesh = self.model.forward(&self.beta, theta)?;
        let condition = self.model.pose_condition(&self.beta, theta)?;
        let snapshot = self.warp_base.snapshot(&condition);
        let bounds = Bounds::from_mesh(&mesh, self.config.ray_margin);
        self.meshes.insert(pose, mesh);
        self.conditions.insert(pose, condition);
        self.snapshots.insert(pose, snapshot);
        self.bounds.insert(pose, bounds);
        Ok(())
    }

    fn ensure_pseudo_gt(&mut self, pose: PoseRef, cam: usize) -> Result<()> {
        if self.pseudo_gt.contains_key(&(pose, cam)) {
            return Ok(());
        }
        self.ensure_pose(pose)?;
        let mesh = &self.meshes[&pose];
        let out = rasterize_all(mesh, &self.model.faces, &self.rig.cameras[cam], true);
        self.pseudo_gt.insert(
            (pose, cam),
            (out.color.expect("color requested"), out.silhouette),
        );
        Ok(())
    }

    fn train_settings(&self, pose: PoseRef, jitter: u64) -> RenderSettings {
        RenderSettings {
            samples_per_ray: self.config.samples_per_ray,
            bounds: self.bounds[&pose],
            background: self.config.background,
            jitter_seed: self.config.train_jitter.then_some(jitter),
        }
    }

    fn eval_settings(&self, pose: PoseRef) -> RenderSettings {
        RenderSettings::eval(
            self.config.samples_per_ray,
            self.bounds[&pose],
            self.config.background,
        )
    }

    /// Cached embedding of an input-image crop, keyed by (part, bbox).
    fn input_crop_embedding(&mut self, part: u16, bbox: PixelRect) -> Result<Embedding> {
        if let Some(e) = self.ref_embeddings.get(&(part, bbox)) {
            return Ok(e.clone());
        }
        let patch = reference_patch(
            &ReferenceSpec::InputCrop { bbox },
            &self.input_image,
            None,
            &self.rig,
            self.config.patch_size,
            &self.eval_settings(PoseRef::Input),
        )?;
        let embedding = self.embedder.embed_image(&patch)?;
        self.ref_embeddings.insert((part, bbox), embedding.clone());
        Ok(embedding)
    }

    fn log_iteration(&mut self, state: &mut TrainState, entry: IterationLog) -> Result<()> {
        if let Some(file) = self.log_file.as_mut() {
            let line = serde_json::to_string(&entry)
                .map_err(|e| Error::InvalidInput(format!("log serialization: {e}")))?;
            writeln!(file, "{line}").map_err(|e| Error::io("train log", e))?;
        }
        if state.history.len() == HISTORY_CAP {
            state.history.remove(0);
        }
        state.history.push(entry);
        Ok(())
    }

    fn lr_at(&self, iteration: u64) -> f64 {
        let mut lr = self.config.lr;
        if self.config.lr_warmup > 0 && iteration < self.config.lr_warmup {
            lr *= (iteration + 1) as f64 / self.config.lr_warmup as f64;
        }
        lr
    }

    fn maybe_snapshot(&mut self, state: &TrainState) -> Result<()> {
        let every = self.config.snapshot_every;
        if every == 0 || state.iteration == 0 || state.iteration % every != 0 {
            return Ok(());
        }
        let Some(dir) = self.snapshot_dir.clone() else {
            return Ok(());
        };
        let (img, _) = self.render_input_view(state)?;
        crate::io_formats::save_image_png8(
            &img,
            &dir.join(format!("iter_{:06}.png", state.iteration)),
        )
    }

    /// One initialization iteration: fit a uniformly drawn pseudo-ground-
    /// truth mesh render with the reconstruction loss.
    fn init_iteration(&mut self, state: &mut TrainState) -> Result<()> {
        let jitter: u64 = state.rng.gen();
        let pose = PoseRef::Motion(state.rng.gen_range(0..self.motion.len()));
        let cam = state.rng.gen_range(0..self.rig.len());
        self.ensure_pseudo_gt(pose, cam)?;
        let target = self.pseudo_gt[&(pose, cam)].0.clone();

        let settings = self.train_settings(pose, jitter);
        let camera = self.rig.cameras[cam].clone();
        let (report, grads) = {
            let scene = ComposedField::with_snapshot(
                &state.field,
                &state.warp,
                &self.snapshots[&pose],
            );
            let (img, _alpha) = render_image(&scene, &camera, &settings)?;
            let (mse, perc, d_image) =
                reconstruction_vjp(&img, &target, &self.perceptual, self.config.lambda_mse)?;
            let report = combined_loss(
                LossBranch::InputView,
                BranchTerms {
                    recon_mse: Some(mse),
                    recon_perceptual: Some(perc),
                    ..Default::default()
                },
                self.config.lambda_mse,
                self.config.lambda_clip,
                self.config.lambda_sil,
            )?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite init loss at iteration {}",
                    state.iteration
                )));
            }
            let d_alpha = AlphaMap::new(camera.width, camera.height);
            let grads = render_image_backward(&scene, &camera, &settings, &d_image, &d_alpha)?;
            (report, grads)
        };
        let lr = self.lr_at(state.iteration);
        let outcome = step(
            state,
            &grads,
            lr * self.config.lr_field_mult,
            lr * self.config.lr_residual_mult,
        );
        let entry = IterationLog {
            iteration: state.iteration,
            stage: Stage::Init,
            part: 0,
            rejected: outcome == StepOutcome::RejectedNonFinite,
            report,
        };
        self.log_iteration(state, entry)?;
        self.maybe_snapshot(state)
    }

    /// One one-shot iteration: sample a training view, render its patch,
    /// build the reference, combine losses, and step.
    fn oneshot_iteration(&mut self, state: &mut TrainState) -> Result<()> {
        let jitter: u64 = state.rng.gen();
        let view = {
            let assets = SamplerAssets {
                model: &self.model,
                beta: &self.beta,
                input_pose: &self.input_pose,
                input_camera: &self.input_camera,
                input_seg: &self.input_seg,
                motion_poses: &self.motion,
                rig: &self.rig,
            };
            self.sampler.sample_iteration(&mut state.rng, &assets)?
        };
        self.ensure_pose(view.pose)?;

        let semantic_active =
            !self.ablated(Ablation::NoSemantic) && self.config.lambda_clip > 0.0;
        let geometry_active =
            !self.ablated(Ablation::NoGeometry) && self.config.lambda_sil > 0.0;

        // Phase 1 (cache mutations): reference embeddings.
        let references: Vec<(Embedding, f64)> = if view.branch == LossBranch::NovelView
            && semantic_active
        {
            let image_embedding = match &view.reference {
                ReferenceSpec::InputCrop { bbox } => {
                    Some(self.input_crop_embedding(view.part, *bbox)?)
                }
                ReferenceSpec::RenderedView { .. } => {
                    // Frozen snapshot of the current parameters; rendered and
                    // embedded fresh every iteration, never differentiated.
                    let img = {
                        let scene = ComposedField::with_snapshot(
                            &state.field,
                            &state.warp,
                            &self.snapshots[&view.pose],
                        );
                        reference_patch(
                            &view.reference,
                            &self.input_image,
                            Some(&scene),
                            &self.rig,
                            self.config.patch_size,
                            &self.eval_settings(view.pose),
                        )?
                    };
                    Some(self.embedder.embed_image(&img)?)
                }
                ReferenceSpec::Text { prompt } => Some(self.embedder.embed_text(prompt)?),
            };
            let mut refs = Vec::new();
            match (&self.text_embedding, image_embedding) {
                (Some(text), Some(img)) => {
                    let w = self.config.text_weight;
                    refs.push((img, 1.0 - w));
                    refs.push((text.clone(), w));
                }
                (None, Some(img)) => refs.push((img, 1.0)),
                (Some(text), None) => refs.push((text.clone(), 1.0)),
                (None, None) => {}
            }
            refs
        } else {
            Vec::new()
        };

        // Phase 2 (immutable): render, losses, backward.
        let camera = match view.camera {
            CameraRef::Input => self.input_camera.clone(),
            CameraRef::Rig(i) => self.rig.cameras[i].clone(),
        };
        let crop_camera = part_patch_camera(&camera, &view.bbox, self.config.patch_size)?;
        let settings = self.train_settings(view.pose, jitter);
        let (report, grads) = {
            let scene = ComposedField::with_snapshot(
                &state.field,
                &state.warp,
                &self.snapshots[&view.pose],
            );
            let (rendered, alpha) = render_image(&scene, &crop_camera, &settings)?;

            let mut d_image = ImageBuffer::new(rendered.width, rendered.height);
            let mut d_alpha = AlphaMap::new(alpha.width, alpha.height);
            let mut terms = BranchTerms::default();

            match view.branch {
                LossBranch::InputView => {
                    let (mse, perc, grad) = reconstruction_vjp(
                        &rendered,
                        &self.input_target,
                        &self.perceptual,
                        self.config.lambda_mse,
                    )?;
                    terms.recon_mse = Some(mse);
                    terms.recon_perceptual = Some(perc);
                    d_image = grad;
                }
                LossBranch::NovelView => {
                    if semantic_active {
                        let (sem, grad) =
                            semantic_vjp_multi(self.embedder.as_ref(), &rendered, &references)?;
                        terms.semantic = Some(sem);
                        for (di, g) in d_image.data.iter_mut().zip(&grad.data) {
                            *di += self.config.lambda_clip * g;
                        }
                    }
                    if geometry_active {
                        let mesh = &self.meshes[&view.pose];
                        let mask =
                            rasterize_silhouette(mesh, &self.model.faces, &crop_camera);
                        let mode = if self.ablated(Ablation::HardGeometry) {
                            SilhouetteMode::Hard
                        } else {
                            self.config.sil_mode
                        };
                        let (sil_mse, sil_chamfer, grad) = silhouette_vjp(
                            &alpha,
                            &mask,
                            mode,
                            self.config.sil_band,
                            self.config.edge_connectivity,
                        )?;
                        terms.sil_mse = Some(sil_mse);
                        terms.sil_chamfer = Some(sil_chamfer);
                        for (da, g) in d_alpha.data.iter_mut().zip(&grad.data) {
                            *da += self.config.lambda_sil * g;
                        }
                    }
                }
            }

            let report = combined_loss(
                view.branch,
                terms,
                self.config.lambda_mse,
                if semantic_active {
                    self.config.lambda_clip
                } else {
                    0.0
                },
                if geometry_active {
                    self.config.lambda_sil
                } else {
                    0.0
                },
            )?;
            if !report.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at iteration {}",
                    state.iteration
                )));
            }
            let grads =
                render_image_backward(&scene, &crop_camera, &settings, &d_image, &d_alpha)?;
            (report, grads)
        };

        let lr = self.lr_at(state.iteration);
        let outcome = step(
            state,
            &grads,
            lr * self.config.lr_field_mult,
            lr * self.config.lr_residual_mult,
        );
        let entry = IterationLog {
            iteration: state.iteration,
            stage: Stage::OneShot,
            part: view.part,
            rejected: outcome == StepOutcome::RejectedNonFinite,
            report,
        };
        self.log_iteration(state, entry)?;
        self.maybe_snapshot(state)
    }

    /// Run (or finish) the initialization stage.
    pub fn run_init_stage(&mut self, state: &mut TrainState) -> Result<()> {
        let t_init = self.effective_t_init();
        while state.stage == Stage::Init && state.iteration < t_init {
            self.init_iteration(state)?;
        }
        if state.stage == Stage::Init {
            state.stage = Stage::OneShot;
        }
        Ok(())
    }

    /// Advance the run to `target` iterations (clamped to the run length),
    /// crossing the stage boundary if needed. Used for mid-run checkpoints.
    pub fn run_until(&mut self, state: &mut TrainState, target: u64) -> Result<()> {
        let t_init = self.effective_t_init();
        let end = t_init + self.config.t_train;
        let target = target.min(end);
        loop {
            if state.stage == Stage::Init && state.iteration >= t_init {
                state.stage = Stage::OneShot;
            }
            if state.stage == Stage::OneShot && state.iteration >= end {
                state.stage = Stage::Done;
            }
            if state.iteration >= target || state.stage == Stage::Done {
                break;
            }
            match state.stage {
                Stage::Init => self.init_iteration(state)?,
                Stage::OneShot => self.oneshot_iteration(state)?,
                Stage::Done => break,
            }
        }
        Ok(())
    }

    /// Run (or finish) the one-shot stage.
    pub fn run_oneshot_stage(&mut self, state: &mut TrainState) -> Result<()> {
        if state.stage == Stage::Init {
            return Err(Error::InvalidInput(
                "one-shot stage requires the init stage to have finished (or the no_init ablation)"
                    .into(),
            ));
        }
        let end = self.effective_t_init() + self.config.t_train;
        while state.stage == Stage::OneShot && state.iteration < end {
            self.oneshot_iteration(state)?;
        }
        if state.stage == Stage::OneShot {
            state.stage = Stage::Done;
        }
        Ok(())
    }

    /// Deterministic evaluation render of the input view.
    pub fn render_input_view(&mut self, state: &TrainState) -> Result<(ImageBuffer, AlphaMap)> {
        self.ensure_pose(PoseRef::Input)?;
        let scene = ComposedField::with_snapshot(
            &state.field,
            &state.warp,
            &self.snapshots[&PoseRef::Input],
        );
        render_image(&scene, &self.input_camera, &self.eval_settings(PoseRef::Input))
    }

    /// PSNR of the input-view render against the (masked) input image.
    pub fn input_view_psnr(&mut self, state: &TrainState) -> Result<f64> {
        let (img, _) = self.render_input_view(state)?;
        psnr(
            &img,
            &self.input_image,
            &PixelRect::full(self.input_image.width, self.input_image.height),
        )
    }

    /// Mean PSNR of neural renders against the template-textured pseudo
    /// ground truth over the given rig cameras (first motion pose).
    pub fn pseudo_gt_psnr(&mut self, state: &TrainState, cams: &[usize]) -> Result<f64> {
        let pose = PoseRef::Motion(0);
        let mut total = 0.0;
        for &cam in cams {
            self.ensure_pseudo_gt(pose, cam)?;
            let target = self.pseudo_gt[&(pose, cam)].0.clone();
            let scene =
                ComposedField::with_snapshot(&state.field, &state.warp, &self.snapshots[&pose]);
            let (img, _) =
                render_image(&scene, &self.rig.cameras[cam], &self.eval_settings(pose))?;
            total += psnr(&img, &target, &PixelRect::full(img.width, img.height))?;
        }
        Ok(total / cams.len() as f64)
    }

    /// Mean IoU of the thresholded alpha map against the rasterized
    /// silhouette over the given rig cameras (input pose).
    pub fn silhouette_iou(&mut self, state: &TrainState, cams: &[usize]) -> Result<f64> {
        self.ensure_pose(PoseRef::Input)?;
        let mut total = 0.0;
        for &cam in cams {
            let mesh = &self.meshes[&PoseRef::Input];
            let mask = rasterize_silhouette(mesh, &self.model.faces, &self.rig.cameras[cam]);
            let scene = ComposedField::with_snapshot(
                &state.field,
                &state.warp,
                &self.snapshots[&PoseRef::Input],
            );
            let (_, alpha) = render_image(
                &scene,
                &self.rig.cameras[cam],
                &self.eval_settings(PoseRef::Input),
            )?;
            total += alpha.threshold(0.5).iou(&mask);
        }
        Ok(total / cams.len() as f64)
    }

    /// Evenly spread rig camera indices (used by the IoU and PSNR probes).
    pub fn spread_cameras(&self, count: usize) -> Vec<usize> {
        (0..count).map(|i| i * self.rig.len() / count).collect()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_MAGIC: &[u8; 4] = b"AVCK";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub beta: BodyShapeParams,
    pub model_path: String,
    pub config_digest: String,
}

fn push_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, "checkpoint truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::parse(self.path, "checkpoint holds invalid utf-8"))
    }
}

/// Serialize the full optimization state (field + residual + optimizer
/// moments + RNG position) with run provenance.
pub fn save_checkpoint(path: &Path, state: &TrainState, meta: &CheckpointMeta) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let arch = &state.field.arch;
    for v in [
        arch.hidden_layers as u32,
        arch.width as u32,
        arch.skip_at as u32,
        arch.num_freqs as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    push_f64s(&mut buf, &state.field.values);

    match &state.warp.residual {
        Some(res) => {
            buf.push(1);
            for v in [res.width as u32, res.num_freqs as u32, res.joints as u32] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            push_f64s(&mut buf, &res.values);
        }
        None => buf.push(0),
    }

    push_f64s(&mut buf, &state.adam.m);
    push_f64s(&mut buf, &state.adam.v);
    buf.extend_from_slice(&state.adam.steps.to_le_bytes());
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    buf.push(match state.stage {
        Stage::Init => 0,
        Stage::OneShot => 1,
        Stage::Done => 2,
    });
    buf.extend_from_slice(&state.incidents.to_le_bytes());
    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    push_f64s(&mut buf, &meta.beta.beta);
    let path_bytes = meta.model_path.as_bytes();
    buf.extend_from_slice(&(path_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(path_bytes);
    let digest = meta.config_digest.as_bytes();
    buf.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    buf.extend_from_slice(digest);

    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Checkpoint contents before a body model is attached.
pub struct RawCheckpoint {
    pub field: FieldParams,
    pub residual: Option<ResidualMlp>,
    pub adam: AdamState,
    pub iteration: u64,
    pub stage: Stage,
    pub incidents: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub meta: CheckpointMeta,
}

/// Parse a checkpoint file; needs no model (the archive path is recorded in
/// the metadata).
pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let arch = FieldArch {
        hidden_layers: r.u32()? as usize,
        width: r.u32()? as usize,
        skip_at: r.u32()? as usize,
        num_freqs: r.u32()? as usize,
    };
    let field_values = r.f64s()?;
    let field = FieldParams {
        arch,
        values: field_values,
    };
    field.validate()?;

    let residual = if r.u8()? == 1 {
        let width = r.u32()? as usize;
        let num_freqs = r.u32()? as usize;
        let joints = r.u32()? as usize;
        let values = r.f64s()?;
        if values.len() != ResidualMlp::param_count(width, num_freqs, joints) {
            return Err(Error::parse(path, "residual parameter count mismatch"));
        }
        Some(ResidualMlp {
            width,
            num_freqs,
            joints,
            values,
        })
    } else {
        None
    };

    let m = r.f64s()?;
    let v = r.f64s()?;
    let steps = r.u64()?;
    let iteration = r.u64()?;
    let stage = match r.u8()? {
        0 => Stage::Init,
        1 => Stage::OneShot,
        2 => Stage::Done,
        _ => return Err(Error::parse(path, "bad stage tag")),
    };
    let incidents = r.u64()?;
    let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let beta_values = r.f64s()?;
    let beta = BodyShapeParams::from_slice(&beta_values)?;
    let model_path = r.string()?;
    let config_digest = r.string()?;

    Ok(RawCheckpoint {
        field,
        residual,
        adam: AdamState { m, v, steps },
        iteration,
        stage,
        incidents,
        rng_seed,
        rng_word_pos,
        meta: CheckpointMeta {
            beta,
            model_path,
            config_digest,
        },
    })
}

/// Load a checkpoint back into a usable state; the body model must be
/// supplied (checkpoints record the archive path, not its content).
pub fn load_checkpoint(
    path: &Path,
    model: Arc<SkinnedBodyModel>,
) -> Result<(TrainState, CheckpointMeta)> {
    let raw = read_checkpoint(path)?;
    let mut rng = ChaCha8Rng::from_seed(raw.rng_seed);
    rng.set_word_pos(raw.rng_word_pos);

    let mut warp = WarpField::new(model, raw.meta.beta.clone(), WARP_KNN);
    if let Some(res) = raw.residual {
        if res.joints != warp.model.joint_count() {
            return Err(Error::parse(path, "residual joint count mismatch"));
        }
        warp = warp.with_residual(res);
    }
    let total = raw.field.values.len() + warp.residual_param_count();
    if raw.adam.m.len() != total || raw.adam.v.len() != total {
        return Err(Error::parse(path, "optimizer moment size mismatch"));
    }

    Ok((
        TrainState {
            field: raw.field,
            warp,
            adam: raw.adam,
            iteration: raw.iteration,
            stage: raw.stage,
            rng,
            incidents: raw.incidents,
            history: Vec::new(),
        },
        raw.meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::make_capsule_fixture;
    use crate::math::Mat3;
    use crate::math::Vec3;
    use tempfile::TempDir;

    fn desk_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.patch_size = 32;
        c.t_init = 12;
        c.t_train = 12;
        c.field_layers = 2;
        c.field_width = 16;
        c.field_skip = 0;
        c.field_freqs = 4;
        c.samples_per_ray = 8;
        c.rig_cameras = 8;
        c.rig_radius = 2.0;
        c.rig_height = 0.8;
        c.lr = 0.01;
        c.part_probs = vec![(0, 0.5), (1, 0.25), (2, 0.25)];
        c.head_part_id = 2;
        c.seed = 7;
        c
    }

    fn capsule_inputs(config: TrainConfig, ablations: Vec<Ablation>) -> TrainInputs {
        let model = Arc::new(make_capsule_fixture(2, 64));
        let beta = BodyShapeParams::zeros();
        let input_pose = PoseParams::rest(2);
        let input_camera = Camera {
            fx: 36.0,
            fy: 36.0,
            cx: 16.0,
            cy: 16.0,
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, -0.8, 2.0),
            width: 32,
            height: 32,
        };
        let mesh = model.forward(&beta, &input_pose).unwrap();
        let raster = rasterize_all(&mesh, &model.faces, &input_camera, true);
        let input_image = raster.color.unwrap();
        let input_mask = raster.silhouette;
        let mut bent = PoseParams::rest(2);
        bent.theta[3] = 0.5;
        TrainInputs {
            model,
            beta,
            input_pose,
            input_camera,
            input_image,
            input_mask,
            motion: vec![PoseParams::rest(2), bent],
            config,
            ablations,
        }
    }

    #[test]
    fn adam_first_step_displacement() {
        let mut params = vec![0.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut params, &[1.0], &mut m, &mut v, 1, 0.1);
        assert!(
            (params[0] + 0.1).abs() < 1e-6,
            "first step was {}",
            params[0]
        );
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let session = TrainSession::new(capsule_inputs(desk_config(), vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        let before = state.field.values.clone();
        let grads = SceneGrads::zeros(&state.field, &state.warp);
        assert_eq!(step(&mut state, &grads, 0.01, 0.01), StepOutcome::Applied);
        assert_eq!(state.field.values, before);
        assert_eq!(state.iteration, 1);
    }

    #[test]
    fn non_finite_gradient_rolls_back_and_logs_incident() {
        let session = TrainSession::new(capsule_inputs(desk_config(), vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        let before = state.field.values.clone();
        let moments_before = state.adam.clone();
        let mut grads = SceneGrads::zeros(&state.field, &state.warp);
        grads.field[3] = f64::NAN;
        assert_eq!(
            step(&mut state, &grads, 0.01, 0.01),
            StepOutcome::RejectedNonFinite
        );
        assert_eq!(state.field.values, before);
        assert_eq!(state.adam, moments_before);
        assert_eq!(state.iteration, 1);
        assert_eq!(state.incidents, 1);
    }

    #[test]
    fn zero_t_init_only_flips_the_stage() {
        let mut config = desk_config();
        config.t_init = 0;
        let mut session = TrainSession::new(capsule_inputs(config, vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        let params = state.field.values.clone();
        session.run_init_stage(&mut state).unwrap();
        assert_eq!(state.stage, Stage::OneShot);
        assert_eq!(state.iteration, 0);
        assert_eq!(state.field.values, params);
    }

    #[test]
    fn stages_advance_and_log() {
        let mut session = TrainSession::new(capsule_inputs(desk_config(), vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        session.run_init_stage(&mut state).unwrap();
        assert_eq!(state.stage, Stage::OneShot);
        assert_eq!(state.iteration, 12);
        session.run_oneshot_stage(&mut state).unwrap();
        assert_eq!(state.stage, Stage::Done);
        assert_eq!(state.iteration, 24);
        assert_eq!(state.history.len(), 24);
        assert!(state
            .history
            .iter()
            .take(12)
            .all(|l| l.stage == Stage::Init));
        assert!(state.history.iter().all(|l| l.report.total.is_finite()));
    }

    /// Degenerate config (p_novel = 0, no novel losses) reduces to pure
    /// input-view reconstruction, whose windowed mean loss must decrease.
    #[test]
    fn degenerate_config_is_monotone_reconstruction() {
        let mut config = desk_config();
        config.t_init = 0;
        config.t_train = 150;
        config.p_novel = 0.0;
        config.lambda_clip = 0.0;
        config.lambda_sil = 0.0;
        config.lr = 0.02;
        let mut session = TrainSession::new(capsule_inputs(config, vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        session.run_init_stage(&mut state).unwrap();
        session.run_oneshot_stage(&mut state).unwrap();
        let totals: Vec<f64> = state.history.iter().map(|l| l.report.total).collect();
        let window = 50;
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let first = mean(&totals[..window]);
        let last = mean(&totals[totals.len() - window..]);
        assert!(
            last < first,
            "windowed loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn ablation_flags_toggle_loss_terms() {
        use crate::losses::LossTerm;
        let mut config = desk_config();
        config.t_init = 0;
        config.t_train = 40;
        config.p_novel = 1.0;
        for (ablations, absent, present) in [
            (
                vec![Ablation::NoSemantic],
                LossTerm::Semantic,
                LossTerm::SilMse,
            ),
            (
                vec![Ablation::NoGeometry],
                LossTerm::SilMse,
                LossTerm::Semantic,
            ),
        ] {
            let mut session =
                TrainSession::new(capsule_inputs(config.clone(), ablations.clone())).unwrap();
            let mut state = session.initial_state().unwrap();
            session.run_init_stage(&mut state).unwrap();
            session.run_oneshot_stage(&mut state).unwrap();
            for log in &state.history {
                assert!(
                    !log.report.terms.contains_key(&absent),
                    "{ablations:?} left term {absent:?}"
                );
                assert!(
                    log.report.terms.contains_key(&present),
                    "{ablations:?} dropped term {present:?}"
                );
            }
        }
    }

    #[test]
    fn no_init_ablation_skips_the_init_stage() {
        let mut config = desk_config();
        config.t_train = 10;
        let mut session =
            TrainSession::new(capsule_inputs(config, vec![Ablation::NoInit])).unwrap();
        let mut state = session.initial_state().unwrap();
        assert_eq!(state.stage, Stage::OneShot);
        session.run_init_stage(&mut state).unwrap();
        assert_eq!(state.iteration, 0);
        session.run_oneshot_stage(&mut state).unwrap();
        assert_eq!(state.iteration, 10);
        assert!(state.history.iter().all(|l| l.stage == Stage::OneShot));
    }

    #[test]
    fn hard_geometry_ablation_runs_with_sil_terms() {
        use crate::losses::LossTerm;
        let mut config = desk_config();
        config.t_init = 0;
        config.t_train = 10;
        config.p_novel = 1.0;
        let mut session =
            TrainSession::new(capsule_inputs(config, vec![Ablation::HardGeometry])).unwrap();
        let mut state = session.initial_state().unwrap();
        session.run_oneshot_stage(&mut state).unwrap();
        assert!(state
            .history
            .iter()
            .all(|l| l.report.terms.contains_key(&LossTerm::SilChamfer)));
    }

    /// Checkpoint at the midpoint and resume: the loss trajectory must match
    /// the uninterrupted run bit for bit.
    #[test]
    fn checkpoint_resume_reproduces_trajectory() {
        let config = desk_config();
        let dir = TempDir::new().unwrap();
        let ck = dir.path().join("mid.ckpt");

        // Uninterrupted run.
        let mut session = TrainSession::new(capsule_inputs(config.clone(), vec![])).unwrap();
        let mut state = session.initial_state().unwrap();
        session.run_init_stage(&mut state).unwrap();
        session.run_oneshot_stage(&mut state).unwrap();
        let reference: Vec<f64> = state.history.iter().map(|l| l.report.total).collect();

        // Interrupted at the stage boundary.
        let mut session2 = TrainSession::new(capsule_inputs(config.clone(), vec![])).unwrap();
        let mut state2 = session2.initial_state().unwrap();
        session2.run_init_stage(&mut state2).unwrap();
        let meta = CheckpointMeta {
            beta: BodyShapeParams::zeros(),
            model_path: "fixture".into(),
            config_digest: "test".into(),
        };
        save_checkpoint(&ck, &state2, &meta).unwrap();

        let model = Arc::new(make_capsule_fixture(2, 64));
        let (mut resumed, meta2) = load_checkpoint(&ck, model).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(resumed.iteration, state2.iteration);
        // Fresh session (fresh caches), resumed state.
        let mut session3 = TrainSession::new(capsule_inputs(config, vec![])).unwrap();
        session3.run_oneshot_stage(&mut resumed).unwrap();
        let tail: Vec<f64> = resumed.history.iter().map(|l| l.report.total).collect();
        assert_eq!(&reference[12..], &tail[..]);
    }

    #[test]
    fn incompatible_checkpoint_version_is_reported() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"AVCK");
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        let model = Arc::new(make_capsule_fixture(2, 24));
        let err = load_checkpoint(&path, model).unwrap_err();
        assert!(matches!(
            err,
            Error::CheckpointVersion {
                found: 99,
                supported: 1
            }
        ));
    }

    /// The reference branch render is a frozen snapshot: the parameter
    /// gradient of one iteration must match finite differences computed with
    /// the reference held fixed at the snapshot image.
    #[test]
    fn reference_render_is_detached_from_gradients() {
        use crate::embedder::MockEmbedder;
        let model = Arc::new(make_capsule_fixture(2, 64));
        let warp = WarpField::new(model.clone(), BodyShapeParams::zeros(), WARP_KNN);
        let field = FieldParams::init(FieldArch::desk(), 3).unwrap();
        let pose = model
            .pose_condition(&BodyShapeParams::zeros(), &PoseParams::rest(2))
            .unwrap();
        let snapshot = warp.snapshot(&pose);
        let mesh = model
            .forward(&BodyShapeParams::zeros(), &PoseParams::rest(2))
            .unwrap();
        let camera = Camera {
            fx: 18.0,
            fy: 18.0,
            cx: 8.0,
            cy: 8.0,
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, -0.8, 2.0),
            width: 16,
            height: 16,
        };
        let ref_camera = {
            let mut c = camera.clone();
            c.translation = Vec3::new(0.2, -0.8, 2.0);
            c
        };
        let settings = RenderSettings::eval(8, Bounds::from_mesh(&mesh, 0.15), [0.0; 3]);
        let mock = MockEmbedder::new(16);

        // Frozen reference from the CURRENT parameters.
        let reference_embedding = {
            let scene = ComposedField::with_snapshot(&field, &warp, &snapshot);
            let (img, _) = render_image(&scene, &ref_camera, &settings).unwrap();
            mock.embed_image(&img).unwrap()
        };
        let refs = [(reference_embedding.clone(), 1.0)];

        // Analytic gradient through the training render only.
        let grads = {
            let scene = ComposedField::with_snapshot(&field, &warp, &snapshot);
            let (rendered, _) = render_image(&scene, &camera, &settings).unwrap();
            let (_, d_image) = semantic_vjp_multi(&mock, &rendered, &refs).unwrap();
            let d_alpha = AlphaMap::new(16, 16);
            render_image_backward(&scene, &camera, &settings, &d_image, &d_alpha).unwrap()
        };

        // Finite differences with the reference embedding held fixed.
        let loss_with_frozen_ref = |f: &FieldParams| -> f64 {
            let scene = ComposedField::with_snapshot(f, &warp, &snapshot);
            let (rendered, _) = render_image(&scene, &camera, &settings).unwrap();
            crate::losses::semantic_loss_multi(&mock, &rendered, &refs).unwrap()
        };
        let h = 1e-4;
        let mut max_rel: f64 = 0.0;
        let mut probed = 0;
        for i in (0..field.values.len()).step_by(53) {
            let mut up = field.clone();
            up.values[i] += h;
            let mut dn = field.clone();
            dn.values[i] -= h;
            let fd = (loss_with_frozen_ref(&up) - loss_with_frozen_ref(&dn)) / (2.0 * h);
            let denom = grads.field[i].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((grads.field[i] - fd).abs() / denom);
            probed += 1;
        }
        assert!(probed > 10);
        assert!(
            max_rel < 1e-5,
            "frozen-reference gradient mismatch: {max_rel}"
        );
    }
}
