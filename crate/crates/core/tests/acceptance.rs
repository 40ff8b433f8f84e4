//! Acceptance suite: one test per shipped criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them). The desk-scale
//! end-to-end run is shared between the training and determinism criteria.

use avatar_core::body_model::{make_capsule_fixture, BodyShapeParams, PoseParams};
use avatar_core::buffers::{AlphaMap, ImageBuffer, PixelRect, SilhouetteMask};
use avatar_core::cameras::{build_rig, Camera, Orientation, OrientationBins};
use avatar_core::embedder::{ImageEmbedder, MockEmbedder};
use avatar_core::io_formats::{
    load_body_model_archive, load_cameras, load_image_with_mask, load_motion_sequence,
    TrainConfig,
};
use avatar_core::losses::{
    reconstruction_loss, reconstruction_vjp, semantic_loss_multi, semantic_vjp_multi,
    silhouette_loss, silhouette_vjp, LossBranch, PerceptualMetric, SilhouetteMode,
};
use avatar_core::math::{Mat3, Vec3};
use avatar_core::motion_field::{ComposedField, WarpField};
use avatar_core::neural_field::{
    gradient, FieldArch, FieldParams, LossClosure, RadianceSample,
};
use avatar_core::rasterizer::{rasterize_parts, rasterize_silhouette, Connectivity};
use avatar_core::renderer::{
    render_image, render_image_backward, render_ray, Bounds, RenderSettings,
};
use avatar_core::sampling::{CameraRef, ReferenceSpec, SamplerAssets, SamplerConfig, ViewSampler};
use avatar_core::trainer::{
    load_checkpoint, save_checkpoint, CheckpointMeta, Stage, TrainInputs, TrainSession, WARP_KNN,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::{Arc, LazyLock};
use std::time::Instant;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

/// Criterion 1: homogeneous-medium rendering matches the analytic integral
/// (sigma = 2/m, gray 0.5, 1 m segment, 256 midpoint samples) within 1e-3.
#[test]
fn criterion_1_analytic_volume_rendering() {
    let start = Instant::now();
    let field = |_: &Vec3| {
        Ok(RadianceSample {
            color: [0.5; 3],
            sigma: 2.0,
        })
    };
    let ray = avatar_core::cameras::Ray {
        origin: Vec3::zeros(),
        direction: Vec3::new(0.0, 0.0, 1.0),
        t_near: 0.0,
        t_far: 10.0,
    };
    let settings = RenderSettings::eval(
        256,
        Bounds::Fixed {
            near: 1.0,
            far: 2.0,
        },
        [0.0; 3],
    );
    let (color, alpha) = render_ray(&field, &ray, &settings).unwrap();
    let expect_color = 0.5 * (1.0 - (-2.0f64).exp());
    let expect_alpha = 1.0 - (-2.0f64).exp();
    let color_err = color
        .iter()
        .map(|c| (c - expect_color).abs())
        .fold(0.0, f64::max);
    let alpha_err = (alpha - expect_alpha).abs();
    let elapsed = start.elapsed();
    report(
        "1 (analytic volume rendering)",
        color_err < 1e-3 && alpha_err < 1e-3 && elapsed.as_secs_f64() < 1.0,
        &format!(
            "color err {color_err:.2e}, alpha err {alpha_err:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// A scene fixture for the gradient checks: capsule, desk field, 8x8 camera.
struct GradScene {
    field: FieldParams,
    warp: WarpField,
    pose: avatar_core::body_model::PoseCondition,
    camera: Camera,
    settings: RenderSettings,
    mask: SilhouetteMask,
    target: ImageBuffer,
}

impl GradScene {
    fn new() -> GradScene {
        let model = Arc::new(make_capsule_fixture(2, 64));
        let beta = BodyShapeParams::zeros();
        let theta = PoseParams::rest(2);
        let warp = WarpField::new(model.clone(), beta.clone(), WARP_KNN);
        let field = FieldParams::init(FieldArch::desk(), 21).unwrap();
        let pose = model.pose_condition(&beta, &theta).unwrap();
        let mesh = model.forward(&beta, &theta).unwrap();
        let camera = Camera {
            fx: 9.0,
            fy: 9.0,
            cx: 4.0,
            cy: 4.0,
            rotation: Mat3::identity(),
            translation: Vec3::new(0.0, -0.8, 2.0),
            width: 8,
            height: 8,
        };
        let settings = RenderSettings::eval(16, Bounds::from_mesh(&mesh, 0.15), [0.0; 3]);
        let mask = rasterize_silhouette(&mesh, &model.faces, &camera);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut target = ImageBuffer::new(8, 8);
        for v in target.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        GradScene {
            field,
            warp,
            pose,
            camera,
            settings,
            mask,
            target,
        }
    }

    fn render(&self, params: &FieldParams) -> (ImageBuffer, AlphaMap) {
        let scene = ComposedField::new(params, &self.warp, &self.pose);
        render_image(&scene, &self.camera, &self.settings).unwrap()
    }
}

enum GradLoss {
    Recon,
    Semantic,
    Silhouette(SilhouetteMode),
}

/// Full-chain loss closure: value re-renders from scratch; backward chains
/// the loss vjp through the renderer backward pass.
struct SceneClosure<'a> {
    scene: &'a GradScene,
    loss: GradLoss,
    embedder: MockEmbedder,
    reference: Vec<(avatar_core::embedder::Embedding, f64)>,
    perceptual: PerceptualMetric,
}

impl SceneClosure<'_> {
    fn new(scene: &GradScene, loss: GradLoss) -> SceneClosure<'_> {
        let embedder = MockEmbedder::new(32);
        let reference = vec![(embedder.embed_image(&scene.target).unwrap(), 1.0)];
        SceneClosure {
            scene,
            loss,
            embedder,
            reference,
            perceptual: PerceptualMetric::builtin(),
        }
    }
}

impl LossClosure for SceneClosure<'_> {
    fn value(&self, params: &FieldParams) -> avatar_core::Result<f64> {
        let (img, alpha) = self.scene.render(params);
        Ok(match &self.loss {
            GradLoss::Recon => {
                let (mse, perc) =
                    reconstruction_loss(&img, &self.scene.target, &self.perceptual, 1.0)?;
                perc + mse
            }
            GradLoss::Semantic => semantic_loss_multi(&self.embedder, &img, &self.reference)?,
            GradLoss::Silhouette(mode) => {
                let (m, c) =
                    silhouette_loss(&alpha, &self.scene.mask, *mode, 3.0, Connectivity::Four)?;
                m + c
            }
        })
    }

    fn backward(&self, params: &FieldParams, grad: &mut [f64]) -> avatar_core::Result<f64> {
        let (img, alpha) = self.scene.render(params);
        let mut d_image = ImageBuffer::new(img.width, img.height);
        let mut d_alpha = AlphaMap::new(alpha.width, alpha.height);
        let value = match &self.loss {
            GradLoss::Recon => {
                let (mse, perc, g) =
                    reconstruction_vjp(&img, &self.scene.target, &self.perceptual, 1.0)?;
                d_image = g;
                perc + mse
            }
            GradLoss::Semantic => {
                let (v, g) = semantic_vjp_multi(&self.embedder, &img, &self.reference)?;
                d_image = g;
                v
            }
            GradLoss::Silhouette(mode) => {
                let (m, c, g) =
                    silhouette_vjp(&alpha, &self.scene.mask, *mode, 3.0, Connectivity::Four)?;
                d_alpha = g;
                m + c
            }
        };
        let composed = ComposedField::new(params, &self.scene.warp, &self.scene.pose);
        let grads = render_image_backward(
            &composed,
            &self.scene.camera,
            &self.scene.settings,
            &d_image,
            &d_alpha,
        )?;
        for (g, src) in grad.iter_mut().zip(&grads.field) {
            *g += src;
        }
        Ok(value)
    }
}

/// Criterion 2: analytic gradients of every loss term match central finite
/// differences (64-bit, step 1e-4) with max relative error < 1e-5.
#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let scene = GradScene::new();
    let mut worst: f64 = 0.0;
    let mut worst_name = "";
    for (name, loss) in [
        ("reconstruction", GradLoss::Recon),
        ("semantic", GradLoss::Semantic),
        ("silhouette-literal", GradLoss::Silhouette(SilhouetteMode::Literal)),
        (
            "silhouette-band",
            GradLoss::Silhouette(SilhouetteMode::BoundaryBand),
        ),
    ] {
        let closure = SceneClosure::new(&scene, loss);
        let analytic = gradient(&scene.field, &closure).unwrap();
        let h = 1e-4;
        let mut params = scene.field.clone();
        for i in 0..params.values.len() {
            let orig = params.values[i];
            params.values[i] = orig + h;
            let up = closure.value(&params).unwrap();
            params.values[i] = orig - h;
            let down = closure.value(&params).unwrap();
            params.values[i] = orig;
            let fd = (up - down) / (2.0 * h);
            // Relative error with a floor for near-zero coordinates.
            let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_name = name;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "2 (gradient correctness)",
        worst < 1e-5 && elapsed.as_secs_f64() < 60.0,
        &format!(
            "max rel err {worst:.2e} ({worst_name}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 3: rest pose reproduces the template to 1e-6; one-hot skinning
/// equals per-vertex rigid transforms to 1e-6 over 100 random single-joint
/// poses.
#[test]
fn criterion_3_skinning_identity_and_rigid_equivalence() {
    let start = Instant::now();
    let model = make_capsule_fixture(3, 48);
    let beta = BodyShapeParams::zeros();

    let rest = model.forward(&beta, &PoseParams::rest(3)).unwrap();
    let rest_err = rest
        .vertices
        .iter()
        .zip(&model.template_vertices)
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);

    let mut rigid_err: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for _ in 0..100 {
        let joint = rng.gen_range(0..3);
        let mut theta = PoseParams::rest(3);
        for c in 0..3 {
            theta.theta[joint * 3 + c] = rng.gen_range(-1.5..1.5);
        }
        let mesh = model.forward(&beta, &theta).unwrap();
        let transforms = model.canonical_to_posed(&beta, &theta).unwrap();
        for vi in 0..model.vertex_count() {
            let owner = (0..3).find(|&j| model.skin_weight(vi, j) == 1.0).unwrap();
            let expected = transforms[owner].apply(&model.template_vertices[vi]);
            rigid_err = rigid_err.max((mesh.vertices[vi] - expected).norm());
        }
    }
    let elapsed = start.elapsed();
    report(
        "3 (skinning identity and rigid equivalence)",
        rest_err < 1e-6 && rigid_err < 1e-6 && elapsed.as_secs_f64() < 10.0,
        &format!(
            "rest err {rest_err:.2e}, rigid err {rigid_err:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 4: both silhouette-loss modes equal brute-force references
/// exactly on 100 random 16x16 pairs, and never read alpha outside the mask.
#[test]
fn criterion_4_silhouette_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut exact = true;
    let mut metamorphic = true;
    for _ in 0..100 {
        let mut mask = SilhouetteMask::new(16, 16);
        for b in mask.data.iter_mut() {
            *b = rng.gen_bool(0.35);
        }
        if mask.count() == 0 {
            mask.set(8, 8, true);
        }
        let mut alpha = AlphaMap::new(16, 16);
        for a in alpha.data.iter_mut() {
            *a = rng.gen_range(0.0..1.0);
        }
        let band = 3.0;

        // Brute force over all pixel/edge pairs, same accumulation order.
        let mut edge = Vec::new();
        for y in 0..16i64 {
            for x in 0..16i64 {
                if !mask.get(x as usize, y as usize) {
                    continue;
                }
                let boundary = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                    let (nx, ny) = (x + dx, y + dy);
                    !(0..16).contains(&nx)
                        || !(0..16).contains(&ny)
                        || !mask.get(nx as usize, ny as usize)
                });
                if boundary {
                    edge.push((x, y));
                }
            }
        }
        let dist_at = |x: i64, y: i64| -> f64 {
            edge.iter()
                .map(|&(ex, ey)| (((x - ex).pow(2) + (y - ey).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let norm = mask.count() as f64;
        for mode in [SilhouetteMode::Literal, SilhouetteMode::BoundaryBand] {
            let mut want_mse = 0.0;
            let mut want_chamfer = 0.0;
            for y in 0..16i64 {
                for x in 0..16i64 {
                    if !mask.get(x as usize, y as usize) {
                        continue;
                    }
                    let a = alpha.get(x as usize, y as usize);
                    let d = a - 1.0;
                    want_mse += d * d / norm;
                    let dd = dist_at(x, y);
                    let in_domain =
                        mode == SilhouetteMode::Literal || dd <= band;
                    if in_domain {
                        want_chamfer += a * dd / norm;
                    }
                }
            }
            let (mse, chamfer) =
                silhouette_loss(&alpha, &mask, mode, band, Connectivity::Four).unwrap();
            if mse != want_mse || chamfer != want_chamfer {
                exact = false;
            }

            // Perturb alpha outside the mask: values must not move.
            let mut perturbed = alpha.clone();
            for y in 0..16 {
                for x in 0..16 {
                    if !mask.get(x, y) {
                        perturbed.set(x, y, rng.gen_range(0.0..1.0));
                    }
                }
            }
            let (m2, c2) =
                silhouette_loss(&perturbed, &mask, mode, band, Connectivity::Four).unwrap();
            if m2 != mse || c2 != chamfer {
                metamorphic = false;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        "4 (silhouette-loss oracle equivalence)",
        exact && metamorphic && elapsed.as_secs_f64() < 30.0,
        &format!(
            "exact={exact}, outside-mask invariance={metamorphic}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 5: 10,000 seeded draws respect the novel-view probability, the
/// rear->side and head-side->front reference rules, and the part
/// probabilities within 3-sigma multinomial bands.
#[test]
fn criterion_5_sampling_statistics() {
    let start = Instant::now();
    let model = make_capsule_fixture(2, 64);
    let beta = BodyShapeParams::zeros();
    let input_pose = PoseParams::rest(2);
    let template = Camera {
        fx: 65.0,
        fy: 65.0,
        cx: 32.0,
        cy: 32.0,
        rotation: Mat3::identity(),
        translation: Vec3::zeros(),
        width: 64,
        height: 64,
    };
    let center = Vec3::new(0.0, 0.8, 0.0);
    let rig = build_rig(&center, 2.0, 0.0, 8, 0.0, OrientationBins::default(), &template).unwrap();
    let mesh = model.forward(&beta, &input_pose).unwrap();
    let input_seg = rasterize_parts(&mesh, &model.faces, &rig.cameras[0]);
    let mut bent = PoseParams::rest(2);
    bent.theta[3] = 0.5;
    let motion = vec![PoseParams::rest(2), bent];
    let assets = SamplerAssets {
        model: &model,
        beta: &beta,
        input_pose: &input_pose,
        input_camera: &rig.cameras[0],
        input_seg: &input_seg,
        motion_poses: &motion,
        rig: &rig,
    };
    let part_probs = vec![(0u16, 0.5), (1, 0.25), (2, 0.25)];
    let mut sampler = ViewSampler::new(SamplerConfig {
        p_novel: 0.5,
        part_probs: part_probs.clone(),
        head_part_id: 2,
        front_ref_for_all_side_parts: false,
        hybrid: true,
        input_pose_only: false,
    });

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 10_000;
    let mut novel = 0usize;
    let mut rear_violations = 0usize;
    let mut head_violations = 0usize;
    let mut part_counts = std::collections::BTreeMap::<u16, usize>::new();
    for _ in 0..draws {
        let view = sampler.sample_iteration(&mut rng, &assets).unwrap();
        if view.branch != LossBranch::NovelView {
            continue;
        }
        novel += 1;
        *part_counts.entry(view.part).or_default() += 1;
        let CameraRef::Rig(cam) = view.camera else {
            continue;
        };
        match rig.orientation[cam] {
            Orientation::Rear => match &view.reference {
                ReferenceSpec::RenderedView { camera, .. } => {
                    if !rig.orientation[*camera].is_side() {
                        rear_violations += 1;
                    } else {
                        // It must be the yaw-nearest side camera.
                        let got =
                            avatar_core::math::wrap_degrees(rig.yaw[*camera] - rig.yaw[cam]).abs();
                        for (i, o) in rig.orientation.iter().enumerate() {
                            if o.is_side() {
                                let alt = avatar_core::math::wrap_degrees(
                                    rig.yaw[i] - rig.yaw[cam],
                                )
                                .abs();
                                if alt + 1e-9 < got {
                                    rear_violations += 1;
                                }
                            }
                        }
                    }
                }
                _ => rear_violations += 1,
            },
            o if o.is_side() && view.part == 2 => match &view.reference {
                ReferenceSpec::RenderedView { camera, .. } => {
                    if rig.orientation[*camera] != Orientation::Front {
                        head_violations += 1;
                    }
                }
                _ => head_violations += 1,
            },
            _ => {}
        }
    }
    let fraction = novel as f64 / draws as f64;
    let fraction_ok = (0.48..=0.52).contains(&fraction);

    // Multinomial 3-sigma bands over the novel draws.
    let mut parts_ok = true;
    let mut parts_detail = String::new();
    for (id, p) in &part_probs {
        let observed = *part_counts.get(id).unwrap_or(&0) as f64;
        let expected = p * novel as f64;
        let sigma = (novel as f64 * p * (1.0 - p)).sqrt();
        if (observed - expected).abs() > 3.0 * sigma {
            parts_ok = false;
        }
        parts_detail.push_str(&format!("part {id}: {observed} vs {expected:.0}±{sigma:.0}; "));
    }
    let elapsed = start.elapsed();
    report(
        "5 (sampling statistics)",
        fraction_ok
            && rear_violations == 0
            && head_violations == 0
            && parts_ok
            && elapsed.as_secs_f64() < 30.0,
        &format!(
            "novel fraction {fraction:.4}, rear violations {rear_violations}, head violations {head_violations}, {parts_detail}{:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

/// Criterion 7: PSNR arithmetic, SSIM/perceptual identities, and bbox
/// invariance.
#[test]
fn criterion_7_metric_correctness() {
    use avatar_core::evaluator::{perceptual, psnr, ssim, PSNR_CAP};
    let start = Instant::now();
    let a = ImageBuffer::filled(24, 24, [0.5, 0.5, 0.5]);
    let b = ImageBuffer::filled(24, 24, [0.6, 0.6, 0.6]);
    let bbox = PixelRect::full(24, 24);
    let metric = PerceptualMetric::builtin();

    let p20 = psnr(&a, &b, &bbox).unwrap();
    let identical_psnr = psnr(&a, &a.clone(), &bbox).unwrap();
    let identical_ssim = ssim(&a, &a.clone(), &bbox).unwrap();
    let identical_perc = perceptual(&a, &a.clone(), &bbox, &metric).unwrap();

    // Invariance to corruption outside the bbox.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut x = ImageBuffer::new(32, 32);
    let mut y = ImageBuffer::new(32, 32);
    for v in x.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    for v in y.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    let inner = PixelRect {
        x0: 8,
        y0: 8,
        x1: 23,
        y1: 23,
    };
    let before = (
        psnr(&x, &y, &inner).unwrap(),
        ssim(&x, &y, &inner).unwrap(),
        perceptual(&x, &y, &inner, &metric).unwrap(),
    );
    let mut corrupted = x.clone();
    for yy in 0..32 {
        for xx in 0..32 {
            if !((8..=23).contains(&(xx as i64)) && (8..=23).contains(&(yy as i64))) {
                corrupted.set_pixel(xx, yy, [0.99, 0.01, 0.5]);
            }
        }
    }
    let after = (
        psnr(&corrupted, &y, &inner).unwrap(),
        ssim(&corrupted, &y, &inner).unwrap(),
        perceptual(&corrupted, &y, &inner, &metric).unwrap(),
    );
    let elapsed = start.elapsed();
    report(
        "7 (metric correctness)",
        (p20 - 20.0).abs() < 1e-9
            && identical_psnr == PSNR_CAP
            && (identical_ssim - 1.0).abs() < 1e-12
            && identical_perc == 0.0
            && before == after
            && elapsed.as_secs_f64() < 5.0,
        &format!(
            "PSNR(mse 0.01) = {p20:.6} dB, identities ({identical_psnr}, {identical_ssim}, {identical_perc}), bbox-invariant={}, {:.1}s",
            before == after,
            elapsed.as_secs_f64()
        ),
    );
}

/// Shared desk-scale run: capsule fixture, 64x64, mock embedder,
/// T_init = 500 + T_train = 1000, with a checkpoint captured at the midpoint
/// (iteration 750).
struct DeskRun {
    fixture_dir: tempfile::TempDir,
    trajectory: Vec<f64>,
    psnr_start: f64,
    psnr_post_init: f64,
    psnr_final: f64,
    iou_post_init: f64,
    midpoint_checkpoint: std::path::PathBuf,
    elapsed_seconds: f64,
}

fn desk_session(fixture_dir: &std::path::Path) -> TrainSession {
    let paths = avatar_core::fixture::FixturePaths {
        model_dir: fixture_dir.join("body_model"),
        motion: fixture_dir.join("motion.txt"),
        cameras: fixture_dir.join("cameras.txt"),
        image: fixture_dir.join("input.png"),
        mask: fixture_dir.join("input_mask.png"),
        shape: fixture_dir.join("shape.txt"),
        input_pose: fixture_dir.join("input_pose.txt"),
        config: fixture_dir.join("desk.cfg"),
    };
    let config = TrainConfig::load(&paths.config).unwrap();
    let model = Arc::new(load_body_model_archive(&paths.model_dir).unwrap());
    let (image, mask) = load_image_with_mask(&paths.image, &paths.mask).unwrap();
    let cameras = load_cameras(&paths.cameras).unwrap();
    let motion = load_motion_sequence(&paths.motion)
        .unwrap()
        .frames
        .iter()
        .map(|f| PoseParams::from_frame(f, model.joint_count()).unwrap())
        .collect();
    TrainSession::new(TrainInputs {
        model,
        beta: BodyShapeParams::zeros(),
        input_pose: PoseParams::rest(2),
        input_camera: cameras[0].clone(),
        input_image: image,
        input_mask: mask,
        motion,
        config,
        ablations: vec![],
    })
    .unwrap()
}

fn run_desk(fixture_dir: &std::path::Path) -> Vec<f64> {
    let mut session = desk_session(fixture_dir);
    let mut state = session.initial_state().unwrap();
    let end = session.effective_t_init() + session.config.t_train;
    session.run_until(&mut state, end).unwrap();
    assert_eq!(state.stage, Stage::Done);
    state.history.iter().map(|l| l.report.total).collect()
}

static DESK: LazyLock<DeskRun> = LazyLock::new(|| {
    let fixture_dir = tempfile::TempDir::new().unwrap();
    avatar_core::fixture::generate_capsule_fixture(fixture_dir.path(), 42).unwrap();
    let start = Instant::now();

    let mut session = desk_session(fixture_dir.path());
    let mut state = session.initial_state().unwrap();
    let probes = session.spread_cameras(4);
    let psnr_start = session.input_view_psnr(&state).unwrap();

    let midpoint_checkpoint = fixture_dir.path().join("midpoint.ckpt");
    // Init stage (500), then capture the midpoint at 750, then finish.
    session.run_until(&mut state, 500).unwrap();
    let psnr_post_init = session.input_view_psnr(&state).unwrap();
    let iou_post_init = session.silhouette_iou(&state, &probes).unwrap();
    session.run_until(&mut state, 750).unwrap();
    let meta = CheckpointMeta {
        beta: BodyShapeParams::zeros(),
        model_path: fixture_dir.path().join("body_model").display().to_string(),
        config_digest: "desk".into(),
    };
    save_checkpoint(&midpoint_checkpoint, &state, &meta).unwrap();
    session.run_until(&mut state, 1500).unwrap();
    assert_eq!(state.stage, Stage::Done);
    let psnr_final = session.input_view_psnr(&state).unwrap();
    let elapsed_seconds = start.elapsed().as_secs_f64();

    DeskRun {
        fixture_dir,
        trajectory: state.history.iter().map(|l| l.report.total).collect(),
        psnr_start,
        psnr_post_init,
        psnr_final,
        iou_post_init,
        midpoint_checkpoint,
        elapsed_seconds,
    }
});

/// Criterion 6: the end-to-end desk run improves input-view PSNR by >= 6 dB
/// during init and >= 3 dB more during one-shot training, with post-init
/// alpha-vs-silhouette IoU >= 0.6 over 4 rig views.
#[test]
fn criterion_6_end_to_end_desk_run() {
    let desk = &*DESK;
    let init_gain = desk.psnr_post_init - desk.psnr_start;
    let oneshot_gain = desk.psnr_final - desk.psnr_post_init;
    report(
        "6 (end-to-end desk-scale run)",
        init_gain >= 6.0
            && oneshot_gain >= 3.0
            && desk.iou_post_init >= 0.6
            && desk.elapsed_seconds < 900.0,
        &format!(
            "init gain {init_gain:.2} dB (>=6), one-shot gain {oneshot_gain:.2} dB (>=3), post-init IoU {:.3} (>=0.6), {:.0}s (<=900)",
            desk.iou_post_init, desk.elapsed_seconds
        ),
    );
}

/// Criterion 8: repeating the desk run with the same seed reproduces the
/// loss trajectory bit-stably, and resuming from the midpoint checkpoint
/// matches the uninterrupted run.
#[test]
fn criterion_8_determinism_and_resume() {
    let desk = &*DESK;

    // Full rerun with the same seed, fresh session and caches.
    let rerun_trajectory = run_desk(desk.fixture_dir.path());
    let rerun_identical = rerun_trajectory == desk.trajectory;

    // Resume the midpoint checkpoint in a fresh session.
    let model = Arc::new(
        load_body_model_archive(&desk.fixture_dir.path().join("body_model")).unwrap(),
    );
    let (mut resumed, _meta) = load_checkpoint(&desk.midpoint_checkpoint, model).unwrap();
    assert_eq!(resumed.iteration, 750);
    let mut session = desk_session(desk.fixture_dir.path());
    session.run_until(&mut resumed, 1500).unwrap();
    let tail: Vec<f64> = resumed.history.iter().map(|l| l.report.total).collect();
    let resume_identical = tail[..] == desk.trajectory[750..];

    report(
        "8 (determinism and checkpoint resume)",
        rerun_identical && resume_identical,
        &format!(
            "same-seed rerun bit-identical={rerun_identical}, midpoint resume bit-identical={resume_identical}"
        ),
    );
}
