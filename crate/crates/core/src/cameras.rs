//! Pinhole cameras, ray casting, the multi-view rig around the subject, and
//! yaw-based orientation classes for rotation-aware sampling.
//!
//! Conventions: world-to-camera extrinsics `x_cam = R x + t`; camera frame is
//! x right, y down, z forward; pixel `(i, j)` spans the continuous square
//! `[i, i+1) x [j, j+1)` so its center is `(i+0.5, j+0.5)`.

use crate::buffers::PixelRect;
use crate::error::{Error, Result};
use crate::math::{is_rotation, wrap_degrees, Mat3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation, meters.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

/// Yaw class of a rig camera relative to the input view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Front,
    SideLeft,
    SideRight,
    Rear,
}

impl Orientation {
    pub fn is_side(self) -> bool {
        matches!(self, Orientation::SideLeft | Orientation::SideRight)
    }
}

/// Yaw boundaries in degrees: front strictly inside `front`, side in
/// `[front, side]`, rear strictly outside `side`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationBins {
    pub front: f64,
    pub side: f64,
}

impl Default for OrientationBins {
    fn default() -> Self {
        OrientationBins {
            front: 60.0,
            side: 120.0,
        }
    }
}

impl OrientationBins {
    pub fn classify(&self, yaw_degrees: f64) -> Orientation {
        let yaw = wrap_degrees(yaw_degrees);
        let a = yaw.abs();
        if a < self.front {
            Orientation::Front
        } else if a <= self.side {
            if yaw > 0.0 {
                Orientation::SideLeft
            } else {
                Orientation::SideRight
            }
        } else {
            Orientation::Rear
        }
    }
}

/// The pre-defined ring of cameras around the subject, each tagged with its
/// yaw relative to the input view and the orientation class of that yaw.
#[derive(Debug, Clone)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub orientation: Vec<Orientation>,
    /// Degrees in `(-180, 180]`, zero at the input view.
    pub yaw: Vec<f64>,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !is_rotation(&self.rotation, 1e-6) {
            return Err(Error::InvalidInput(
                "camera rotation is not orthonormal with determinant 1".into(),
            ));
        }
        Ok(())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Optical axis (camera +z) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.transpose() * Vec3::new(0.0, 0.0, 1.0)
    }

    /// Project a world point; returns continuous pixel coordinates and the
    /// camera-space depth.
    pub fn project(&self, x: &Vec3) -> (f64, f64, f64) {
        let c = self.rotation * x + self.translation;
        (
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        )
    }
}

/// Cast the ray through continuous pixel coordinates `(px, py)`.
///
/// Near/far are placeholders (`1e-3`, `1e6`); the renderer clips them to its
/// bounds policy before marching.
pub fn cast_ray(camera: &Camera, px: f64, py: f64) -> Result<Ray> {
    if !(px >= 0.0 && px <= camera.width as f64 && py >= 0.0 && py <= camera.height as f64) {
        return Err(Error::InvalidInput(format!(
            "pixel ({px}, {py}) outside {}x{} image",
            camera.width, camera.height
        )));
    }
    let dir_cam = Vec3::new(
        (px - camera.cx) / camera.fx,
        (py - camera.cy) / camera.fy,
        1.0,
    );
    let rt = camera.rotation.transpose();
    let direction = (rt * dir_cam).normalize();
    Ok(Ray {
        origin: camera.center(),
        direction,
        t_near: 1e-3,
        t_far: 1e6,
    })
}

/// Ray through the center of integer pixel `(ix, iy)`.
pub fn cast_pixel_ray(camera: &Camera, ix: usize, iy: usize) -> Result<Ray> {
    cast_ray(camera, ix as f64 + 0.5, iy as f64 + 0.5)
}

/// Look-at extrinsics: world-to-camera rotation and translation for a camera
/// at `eye` whose optical axis passes through `target`, with y-down frame
/// derived from the world up vector.
pub fn look_at(eye: &Vec3, target: &Vec3, up: &Vec3) -> Result<(Mat3, Vec3)> {
    let forward = target - eye;
    if forward.norm() < 1e-12 {
        return Err(Error::InvalidInput("look-at eye equals target".into()));
    }
    let z = forward.normalize();
    let x = z.cross(up);
    if x.norm() < 1e-9 {
        return Err(Error::InvalidInput(
            "look-at direction is parallel to the up vector".into(),
        ));
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let translation = -(rotation * eye);
    Ok((rotation, translation))
}

/// Rig construction parameters shared by config and fixtures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigSpec {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    pub bins: OrientationBins,
}

/// Build `m` cameras on a horizontal circle of `radius` about `center`, all
/// looking at `center`, at vertical offset `height`. Camera `k` sits at yaw
/// `input_yaw + k * 360/m` degrees; its stored yaw is relative to the input
/// view and classified through `bins`.
///
/// Intrinsics are copied from `template` (focal lengths, principal point,
/// resolution), matching the input camera's framing.
#[allow(clippy::too_many_arguments)]
pub fn build_rig(
    center: &Vec3,
    radius: f64,
    height: f64,
    m: usize,
    input_yaw: f64,
    bins: OrientationBins,
    template: &Camera,
) -> Result<CameraRig> {
    if m < 4 {
        return Err(Error::InvalidInput(format!(
            "camera rig needs at least 4 cameras, got {m}"
        )));
    }
    if radius <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "camera rig radius must be positive, got {radius}"
        )));
    }
    let up = Vec3::new(0.0, 1.0, 0.0);
    let mut cameras = Vec::with_capacity(m);
    let mut orientation = Vec::with_capacity(m);
    let mut yaw = Vec::with_capacity(m);
    for k in 0..m {
        let rel = wrap_degrees(k as f64 * 360.0 / m as f64);
        let azimuth = (input_yaw + rel).to_radians();
        let eye = center + Vec3::new(radius * azimuth.sin(), height, radius * azimuth.cos());
        let (rotation, translation) = look_at(&eye, center, &up)?;
        cameras.push(Camera {
            fx: template.fx,
            fy: template.fy,
            cx: template.cx,
            cy: template.cy,
            rotation,
            translation,
            width: template.width,
            height: template.height,
        });
        orientation.push(bins.classify(rel));
        yaw.push(rel);
    }
    Ok(CameraRig {
        cameras,
        orientation,
        yaw,
    })
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// Index of the camera with the given class nearest in absolute yaw to
    /// `yaw_degrees`. Ties break toward the left-side (positive-yaw) camera.
    pub fn nearest_with_class(
        &self,
        yaw_degrees: f64,
        accept: impl Fn(Orientation) -> bool,
    ) -> Option<usize> {
        let mut best: Option<(usize, f64, f64)> = None;
        for (idx, (&cls, &y)) in self.orientation.iter().zip(&self.yaw).enumerate() {
            if !accept(cls) {
                continue;
            }
            let dist = wrap_degrees(y - yaw_degrees).abs();
            let better = match best {
                None => true,
                Some((_, bd, by)) => dist < bd - 1e-12 || ((dist - bd).abs() <= 1e-12 && y > by),
            };
            if better {
                best = Some((idx, dist, y));
            }
        }
        best.map(|(idx, _, _)| idx)
    }
}

/// Camera that frames exactly the square-padded `bbox` of `camera`'s image at
/// `patch x patch` resolution. Rays through corresponding pixels coincide
/// with the original camera's rays.
pub fn part_patch_camera(camera: &Camera, bbox: &PixelRect, patch: usize) -> Result<Camera> {
    if bbox.width() <= 0 || bbox.height() <= 0 {
        return Err(Error::InvalidInput("empty bbox for patch camera".into()));
    }
    if patch == 0 {
        return Err(Error::InvalidInput("patch size must be positive".into()));
    }
    // Continuous extent of the inclusive pixel rect.
    let w = bbox.width() as f64;
    let h = bbox.height() as f64;
    let side = w.max(h);
    let (cx_box, cy_box) = bbox.center();
    let x0 = cx_box - side * 0.5;
    let y0 = cy_box - side * 0.5;
    let scale = patch as f64 / side;
    Ok(Camera {
        fx: camera.fx * scale,
        fy: camera.fy * scale,
        cx: (camera.cx - x0) * scale,
        cy: (camera.cy - y0) * scale,
        rotation: camera.rotation,
        translation: camera.translation,
        width: patch,
        height: patch,
    })
}
