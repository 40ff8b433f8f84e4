//! Per-iteration training-view sampling: input vs novel view, body part,
//! patch bbox from the rasterized part segmentation, and the reference
//! source (input crop, rendered neighbor view, or text prompt), with the
//! rotation-aware reference rules for occluded views.

use crate::body_model::{BodyShapeParams, PoseParams, SkinnedBodyModel};
use crate::buffers::{ImageBuffer, PixelRect, SegmentationMap};
use crate::cameras::{Camera, CameraRig, Orientation};
use crate::error::{Error, Result};
use crate::losses::LossBranch;
use crate::motion_field::ComposedField;
use crate::rasterizer::{part_bbox, rasterize_parts};
use crate::renderer::{render_patch, RenderSettings};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Pose of a training view: the input pose or a motion frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum PoseRef {
    Input,
    Motion(usize),
}

/// Camera of a training view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CameraRef {
    Input,
    Rig(usize),
}

/// Where the supervision patch comes from.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ReferenceSpec {
    /// Crop of the input image (bbox in input-image pixels).
    InputCrop { bbox: PixelRect },
    /// Patch rendered from a frozen field snapshot at a rig camera.
    RenderedView { camera: usize, bbox: PixelRect },
    /// Text prompt embedding.
    Text { prompt: String },
}

/// One sampled training view.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingView {
    pub branch: LossBranch,
    pub pose: PoseRef,
    pub camera: CameraRef,
    /// Part id; 0 is the whole body.
    pub part: u16,
    /// Patch bbox in the training camera's image.
    pub bbox: PixelRect,
    pub reference: ReferenceSpec,
}

/// Immutable assets the sampler draws against.
pub struct SamplerAssets<'a> {
    pub model: &'a SkinnedBodyModel,
    pub beta: &'a BodyShapeParams,
    pub input_pose: &'a PoseParams,
    pub input_camera: &'a Camera,
    /// Part segmentation of the input pose seen from the input camera.
    pub input_seg: &'a SegmentationMap,
    pub motion_poses: &'a [PoseParams],
    pub rig: &'a CameraRig,
}

/// Sampling knobs; a subset of the train config plus ablation switches.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub p_novel: f64,
    /// `(part id, probability)`, cumulative draw in listed order.
    pub part_probs: Vec<(u16, f64)>,
    pub head_part_id: u16,
    pub front_ref_for_all_side_parts: bool,
    /// Rotation- and part-aware sampling; off reduces every novel draw to a
    /// whole-body patch supervised by the input image.
    pub hybrid: bool,
    /// Restrict novel-view poses to the input pose.
    pub input_pose_only: bool,
}

const CAMERA_RETRIES: usize = 8;
const PART_RETRIES: usize = 256;

/// Draws training views; owns the (pose, camera) segmentation cache.
pub struct ViewSampler {
    config: SamplerConfig,
    seg_cache: HashMap<(PoseRef, usize), SegmentationMap>,
}

impl ViewSampler {
    pub fn new(config: SamplerConfig) -> ViewSampler {
        assert!(
            !config.part_probs.is_empty(),
            "sampler needs resolved part probabilities"
        );
        ViewSampler {
            config,
            seg_cache: HashMap::new(),
        }
    }

    fn pose_params<'a>(assets: &'a SamplerAssets, pose: PoseRef) -> &'a PoseParams {
        match pose {
            PoseRef::Input => assets.input_pose,
            PoseRef::Motion(i) => &assets.motion_poses[i],
        }
    }

    /// Rasterize (or fetch) the part segmentation of `pose` from rig camera
    /// `cam`.
    fn seg(&mut self, assets: &SamplerAssets, pose: PoseRef, cam: usize) -> Result<&SegmentationMap> {
        if !self.seg_cache.contains_key(&(pose, cam)) {
            let theta = Self::pose_params(assets, pose);
            let mesh = assets.model.forward(assets.beta, theta)?;
            let seg = rasterize_parts(&mesh, &assets.model.faces, &assets.rig.cameras[cam]);
            self.seg_cache.insert((pose, cam), seg);
        }
        Ok(&self.seg_cache[&(pose, cam)])
    }

    fn draw_part(&self, rng: &mut ChaCha8Rng) -> u16 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(id, p) in &self.config.part_probs {
            acc += p;
            if u < acc {
                return id;
            }
        }
        self.config.part_probs.last().map(|&(id, _)| id).unwrap_or(0)
    }

    /// Reference bbox for `part` in the input view: the part's segmentation
    /// bbox, falling back to the whole body when the part is occluded there.
    fn input_crop_bbox(assets: &SamplerAssets, part: u16) -> Result<PixelRect> {
        let query = if part == 0 { None } else { Some(part) };
        if let Some(b) = part_bbox(assets.input_seg, query) {
            return Ok(b);
        }
        part_bbox(assets.input_seg, None)
            .ok_or_else(|| Error::InvalidInput("input segmentation is empty".into()))
    }

    /// One training-view draw. RNG consumption is strictly sequential, so a
    /// fixed seed reproduces the draw sequence.
    pub fn sample_iteration(
        &mut self,
        rng: &mut ChaCha8Rng,
        assets: &SamplerAssets,
    ) -> Result<TrainingView> {
        let novel: bool = rng.gen::<f64>() < self.config.p_novel;
        if !novel {
            // Input-view branch: full-image reconstruction of the input.
            let bbox = PixelRect::full(assets.input_camera.width, assets.input_camera.height);
            return Ok(TrainingView {
                branch: LossBranch::InputView,
                pose: PoseRef::Input,
                camera: CameraRef::Input,
                part: 0,
                bbox,
                reference: ReferenceSpec::InputCrop { bbox },
            });
        }

        for _ in 0..CAMERA_RETRIES {
            let pose = if self.config.input_pose_only {
                PoseRef::Input
            } else if assets.motion_poses.is_empty() {
                PoseRef::Input
            } else {
                PoseRef::Motion(rng.gen_range(0..assets.motion_poses.len()))
            };
            let cam = rng.gen_range(0..assets.rig.len());

            // Without hybrid sampling: whole-body patch, input reference.
            if !self.config.hybrid {
                let seg = self.seg(assets, pose, cam)?;
                let Some(bbox) = part_bbox(seg, None) else {
                    continue;
                };
                return Ok(TrainingView {
                    branch: LossBranch::NovelView,
                    pose,
                    camera: CameraRef::Rig(cam),
                    part: 0,
                    bbox,
                    reference: ReferenceSpec::InputCrop {
                        bbox: Self::input_crop_bbox(assets, 0)?,
                    },
                });
            }

            let whole = part_bbox(self.seg(assets, pose, cam)?, None);
            if whole.is_none() {
                continue; // nothing visible: resample the camera
            }

            // Body-part draw; invisible parts are redrawn.
            let mut chosen: Option<(u16, PixelRect)> = None;
            for _ in 0..PART_RETRIES {
                let part = self.draw_part(rng);
                let query = if part == 0 { None } else { Some(part) };
                if let Some(bbox) = part_bbox(self.seg(assets, pose, cam)?, query) {
                    chosen = Some((part, bbox));
                    break;
                }
            }
            let Some((part, bbox)) = chosen else {
                continue;
            };

            // Rotation-aware reference selection.
            let orientation = assets.rig.orientation[cam];
            let yaw = assets.rig.yaw[cam];
            let reference = match orientation {
                Orientation::Rear => {
                    let ref_cam = assets
                        .rig
                        .nearest_with_class(yaw, Orientation::is_side)
                        .ok_or_else(|| {
                            Error::InvalidInput("rig has no side cameras for rear references".into())
                        })?;
                    self.rendered_reference(assets, pose, ref_cam, part)?
                }
                o if o.is_side()
                    && (part == self.config.head_part_id
                        || self.config.front_ref_for_all_side_parts) =>
                {
                    let ref_cam = assets
                        .rig
                        .nearest_with_class(yaw, |c| c == Orientation::Front)
                        .ok_or_else(|| {
                            Error::InvalidInput("rig has no front cameras for side references".into())
                        })?;
                    self.rendered_reference(assets, pose, ref_cam, part)?
                }
                _ => ReferenceSpec::InputCrop {
                    bbox: Self::input_crop_bbox(assets, part)?,
                },
            };
            return Ok(TrainingView {
                branch: LossBranch::NovelView,
                pose,
                camera: CameraRef::Rig(cam),
                part,
                bbox,
                reference,
            });
        }
        Err(Error::InvalidInput(format!(
            "no visible body part after {CAMERA_RETRIES} camera draws"
        )))
    }

    fn rendered_reference(
        &mut self,
        assets: &SamplerAssets,
        pose: PoseRef,
        ref_cam: usize,
        part: u16,
    ) -> Result<ReferenceSpec> {
        let seg = self.seg(assets, pose, ref_cam)?;
        let query = if part == 0 { None } else { Some(part) };
        let bbox = part_bbox(seg, query)
            .or_else(|| part_bbox(seg, None))
            .ok_or_else(|| {
                Error::InvalidInput("reference camera sees no body pixels".into())
            })?;
        Ok(ReferenceSpec::RenderedView {
            camera: ref_cam,
            bbox,
        })
    }
}

/// Continuous square window covering a bbox (symmetric padding), identical
/// to the framing of `part_patch_camera`.
fn square_window(bbox: &PixelRect) -> (f64, f64, f64) {
    let side = (bbox.width() as f64).max(bbox.height() as f64);
    let (cx, cy) = bbox.center();
    (cx - side * 0.5, cy - side * 0.5, side)
}

/// Materialize a reference patch: crop+resize the input image, or render
/// from the frozen field snapshot (never differentiated).
pub fn reference_patch(
    reference: &ReferenceSpec,
    input_image: &ImageBuffer,
    frozen_scene: Option<&ComposedField<'_>>,
    rig: &CameraRig,
    patch: usize,
    settings: &RenderSettings,
) -> Result<ImageBuffer> {
    match reference {
        ReferenceSpec::InputCrop { bbox } => {
            let (x0, y0, side) = square_window(bbox);
            Ok(crate::imageops::crop_resize(
                input_image,
                x0,
                y0,
                side,
                side,
                patch,
                patch,
            ))
        }
        ReferenceSpec::RenderedView { camera, bbox } => {
            let scene = frozen_scene.ok_or_else(|| {
                Error::InvalidInput("rendered reference needs a frozen field snapshot".into())
            })?;
            // References are evaluation renders: midpoint sampling, no jitter.
            let eval = settings.clone().with_jitter(None);
            let (img, _) = render_patch(scene, &rig.cameras[*camera], bbox, patch, &eval)?;
            Ok(img)
        }
        ReferenceSpec::Text { .. } => Err(Error::InvalidInput(
            "text references embed directly; they have no image patch".into(),
        )),
    }
}
