//! Desk-scale end-to-end fixture: a capsule body archive, a two-pose motion
//! table, a small camera file, a pseudo-ground-truth input image with mask,
//! and the desk training config. Everything is deterministic for a given
//! seed, so the end-to-end tests can pin their expectations.

use crate::body_model::{make_capsule_fixture, BodyShapeParams, PoseParams};
use crate::cameras::{build_rig, OrientationBins};
use crate::error::Result;
use crate::io_formats::{
    save_cameras, save_image_png8, save_mask_png8, save_motion_sequence, save_row,
    write_body_model_archive, MotionSequence, TrainConfig,
};
use crate::math::Vec3;
use crate::rasterizer::rasterize_all;
use std::path::{Path, PathBuf};

pub const FIXTURE_IMAGE_SIZE: usize = 64;
const FIXTURE_FOCAL: f64 = 65.0;
const FIXTURE_RADIUS: f64 = 2.0;
/// Stripe modulation painted over the template colors; the one-shot stage
/// has to recover it from the input image alone.
const STRIPE_AMPLITUDE: f64 = 0.18;
const STRIPE_PERIOD_PX: f64 = 12.0;

/// Files written by [`generate_capsule_fixture`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub model_dir: PathBuf,
    pub motion: PathBuf,
    pub cameras: PathBuf,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub shape: PathBuf,
    pub input_pose: PathBuf,
    pub config: PathBuf,
}

/// Desk-scale training preset for the capsule fixture.
pub fn desk_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.seed = seed;
    c.patch_size = FIXTURE_IMAGE_SIZE;
    c.t_init = 500;
    c.t_train = 1000;
    c.part_probs = vec![(0, 0.5), (1, 0.25), (2, 0.25)];
    c.head_part_id = 2; // upper capsule segment
    c.rig_cameras = 8;
    c.rig_radius = FIXTURE_RADIUS;
    c.rig_height = 0.0;
    c.field_layers = 2;
    c.field_width = 16;
    c.field_skip = 0;
    c.field_freqs = 4;
    c.samples_per_ray = 32;
    c.lr = 0.02;
    c.embedder = "mock".into();
    c.embedder_resolution = 16;
    c.embedder_dim = 64;
    c
}

/// Generate the whole fixture under `out_dir`.
pub fn generate_capsule_fixture(out_dir: &Path, seed: u64) -> Result<FixturePaths> {
    std::fs::create_dir_all(out_dir).map_err(|e| crate::error::Error::io(out_dir, e))?;
    let model = make_capsule_fixture(2, 96);
    let beta = BodyShapeParams::zeros();
    let input_pose = PoseParams::rest(2);

    let model_dir = out_dir.join("body_model");
    write_body_model_archive(&model, &model_dir)?;

    // Two poses: rest (the input pose) and a bent upper segment.
    let mut bent = vec![0.0; 72];
    bent[3] = 0.6;
    let motion = MotionSequence {
        frames: vec![vec![0.0; 72], bent],
        fps: Some(10.0),
    };
    let motion_path = out_dir.join("motion.txt");
    save_motion_sequence(&motion, &motion_path)?;

    let shape_path = out_dir.join("shape.txt");
    save_row(&[0.0; 10], &shape_path)?;
    let input_pose_path = out_dir.join("input_pose.txt");
    save_row(&[0.0; 72], &input_pose_path)?;

    // Four cameras around the subject; the first is the input view.
    let mesh = model.forward(&beta, &input_pose)?;
    let center = {
        let mut c = Vec3::zeros();
        for v in &mesh.vertices {
            c += v;
        }
        c / mesh.vertices.len() as f64
    };
    let size = FIXTURE_IMAGE_SIZE;
    let template = crate::cameras::Camera {
        fx: FIXTURE_FOCAL,
        fy: FIXTURE_FOCAL,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        rotation: crate::math::Mat3::identity(),
        translation: Vec3::zeros(),
        width: size,
        height: size,
    };
    let rig = build_rig(
        &center,
        FIXTURE_RADIUS,
        0.0,
        4,
        0.0,
        OrientationBins::default(),
        &template,
    )?;
    let cameras_path = out_dir.join("cameras.txt");
    save_cameras(&rig.cameras, &cameras_path)?;

    // Pseudo ground truth: template-textured render with a horizontal
    // stripe modulation the initialization palette does not contain.
    let input_camera = &rig.cameras[0];
    let raster = rasterize_all(&mesh, &model.faces, input_camera, true);
    let mut image = raster.color.expect("color requested");
    let mask = raster.silhouette;
    for y in 0..size {
        let stripe = 1.0 + STRIPE_AMPLITUDE * (std::f64::consts::TAU * y as f64 / STRIPE_PERIOD_PX).sin();
        for x in 0..size {
            if mask.get(x, y) {
                let mut px = image.pixel(x, y);
                for c in px.iter_mut() {
                    *c = (*c * stripe).clamp(0.0, 1.0);
                }
                image.set_pixel(x, y, px);
            }
        }
    }
    let image_path = out_dir.join("input.png");
    save_image_png8(&image, &image_path)?;
    let mask_path = out_dir.join("input_mask.png");
    save_mask_png8(&mask, &mask_path)?;

    let config = desk_config(seed);
    let config_path = out_dir.join("desk.cfg");
    config.save(&config_path)?;

    Ok(FixturePaths {
        model_dir,
        motion: motion_path,
        cameras: cameras_path,
        image: image_path,
        mask: mask_path,
        shape: shape_path,
        input_pose: input_pose_path,
        config: config_path,
    })
}
