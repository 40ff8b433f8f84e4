//! Software z-buffer rasterization of the posed body mesh: silhouettes, part
//! segmentations, and template-textured color renders. Pixel-center sampling,
//! no anti-aliasing, so masks and bboxes are bit-stable.

use crate::body_model::PosedMesh;
use crate::buffers::{ImageBuffer, PixelRect, SegmentationMap, SilhouetteMask};
use crate::cameras::Camera;

/// Edge connectivity for [`mask_edge`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

/// Fixed palette for template-textured renders, one distinct albedo per part.
pub fn part_albedo(part: u16) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 8] = [
        [0.85, 0.30, 0.25],
        [0.25, 0.55, 0.85],
        [0.30, 0.75, 0.35],
        [0.90, 0.75, 0.20],
        [0.70, 0.35, 0.80],
        [0.25, 0.75, 0.75],
        [0.85, 0.50, 0.65],
        [0.55, 0.60, 0.30],
    ];
    PALETTE[((part.max(1) - 1) as usize) % PALETTE.len()]
}

/// Depth + triangle-index buffers; every mode derives from this one pass, so
/// silhouette and parts coverage agree exactly.
struct RasterCore {
    width: usize,
    height: usize,
    triangle: Vec<i64>,
    depth: Vec<f64>,
}

const NEAR_EPS: f64 = 1e-6;

fn rasterize_core(mesh: &PosedMesh, camera: &Camera, faces: &[[u32; 3]]) -> RasterCore {
    let (w, h) = (camera.width, camera.height);
    let mut core = RasterCore {
        width: w,
        height: h,
        triangle: vec![-1; w * h],
        depth: vec![f64::INFINITY; w * h],
    };
    let projected: Vec<(f64, f64, f64)> =
        mesh.vertices.iter().map(|v| camera.project(v)).collect();

    for (ti, face) in faces.iter().enumerate() {
        let p0 = projected[face[0] as usize];
        let p1 = projected[face[1] as usize];
        let p2 = projected[face[2] as usize];
        // Conservative near-plane handling: drop triangles touching or
        // behind the camera plane.
        if p0.2 <= NEAR_EPS || p1.2 <= NEAR_EPS || p2.2 <= NEAR_EPS {
            continue;
        }
        let area = (p1.0 - p0.0) * (p2.1 - p0.1) - (p1.1 - p0.1) * (p2.0 - p0.0);
        if area.abs() < 1e-12 {
            continue;
        }
        let min_x = p0.0.min(p1.0).min(p2.0);
        let max_x = p0.0.max(p1.0).max(p2.0);
        let min_y = p0.1.min(p1.1).min(p2.1);
        let max_y = p0.1.max(p1.1).max(p2.1);
        if max_x < 0.5 || max_y < 0.5 || min_x > w as f64 - 0.5 || min_y > h as f64 - 0.5 {
            continue;
        }
        // Pixel centers sit at i + 0.5.
        let ix0 = (min_x - 0.5).ceil().max(0.0) as usize;
        let ix1 = (max_x - 0.5).floor().min(w as f64 - 1.0) as usize;
        let iy0 = (min_y - 0.5).ceil().max(0.0) as usize;
        let iy1 = (max_y - 0.5).floor().min(h as f64 - 1.0) as usize;
        let inv_area = 1.0 / area;
        for iy in iy0..=iy1 {
            let py = iy as f64 + 0.5;
            for ix in ix0..=ix1 {
                let px = ix as f64 + 0.5;
                // Barycentric coordinates from signed sub-areas.
                let w0 = ((p1.0 - px) * (p2.1 - py) - (p1.1 - py) * (p2.0 - px)) * inv_area;
                let w1 = ((p2.0 - px) * (p0.1 - py) - (p2.1 - py) * (p0.0 - px)) * inv_area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                // Perspective-correct depth from linear 1/z.
                let inv_z = w0 / p0.2 + w1 / p1.2 + w2 / p2.2;
                let z = 1.0 / inv_z;
                let idx = iy * w + ix;
                if z < core.depth[idx] {
                    core.depth[idx] = z;
                    core.triangle[idx] = ti as i64;
                }
            }
        }
    }
    core
}

/// Majority part label of a triangle's vertices; ties go to the smaller id.
fn triangle_labels(mesh: &PosedMesh, faces: &[[u32; 3]]) -> Vec<u16> {
    faces
        .iter()
        .map(|face| {
            let a = mesh.part_labels[face[0] as usize];
            let b = mesh.part_labels[face[1] as usize];
            let c = mesh.part_labels[face[2] as usize];
            if b == c {
                b
            } else if a == b || a == c {
                a
            } else {
                a.min(b).min(c)
            }
        })
        .collect()
}

/// Raster products of one z-buffer pass.
pub struct Rasterized {
    pub silhouette: SilhouetteMask,
    pub segmentation: SegmentationMap,
    pub color: Option<ImageBuffer>,
}

/// Rasterize the mesh. `faces` come from the body model the mesh was posed
/// from. An empty projection simply yields background everywhere.
pub fn rasterize_all(
    mesh: &PosedMesh,
    faces: &[[u32; 3]],
    camera: &Camera,
    with_color: bool,
) -> Rasterized {
    let core = rasterize_core(mesh, camera, faces);
    let labels = triangle_labels(mesh, faces);
    let (w, h) = (core.width, core.height);

    let mut silhouette = SilhouetteMask::new(w, h);
    let mut segmentation = SegmentationMap::new(w, h);
    for i in 0..w * h {
        let t = core.triangle[i];
        if t >= 0 {
            silhouette.data[i] = true;
            segmentation.data[i] = labels[t as usize];
        }
    }

    let color = with_color.then(|| {
        // Face normals shaded by a headlight along the optical axis,
        // two-sided so grazing geometry never goes fully dark.
        let axis = camera.forward();
        let lambert: Vec<f64> = faces
            .iter()
            .map(|face| {
                let a = mesh.vertices[face[0] as usize];
                let b = mesh.vertices[face[1] as usize];
                let c = mesh.vertices[face[2] as usize];
                let n = (b - a).cross(&(c - a));
                let len = n.norm();
                if len < 1e-12 {
                    0.0
                } else {
                    (n.dot(&axis) / len).abs()
                }
            })
            .collect();
        let mut img = ImageBuffer::new(w, h);
        for i in 0..w * h {
            let t = core.triangle[i];
            if t >= 0 {
                let albedo = part_albedo(labels[t as usize]);
                let shade = 0.25 + 0.75 * lambert[t as usize];
                img.data[i * 3] = albedo[0] * shade;
                img.data[i * 3 + 1] = albedo[1] * shade;
                img.data[i * 3 + 2] = albedo[2] * shade;
            }
        }
        img
    });

    Rasterized {
        silhouette,
        segmentation,
        color,
    }
}

pub fn rasterize_silhouette(
    mesh: &PosedMesh,
    faces: &[[u32; 3]],
    camera: &Camera,
) -> SilhouetteMask {
    rasterize_all(mesh, faces, camera, false).silhouette
}

pub fn rasterize_parts(mesh: &PosedMesh, faces: &[[u32; 3]], camera: &Camera) -> SegmentationMap {
    rasterize_all(mesh, faces, camera, false).segmentation
}

pub fn rasterize_template_color(
    mesh: &PosedMesh,
    faces: &[[u32; 3]],
    camera: &Camera,
) -> ImageBuffer {
    rasterize_all(mesh, faces, camera, true)
        .color
        .expect("color requested")
}

/// Tight bbox of the pixels labeled `part`, or of all nonzero labels when
/// `part` is `None` (whole body). Empty labels yield `None`.
pub fn part_bbox(seg: &SegmentationMap, part: Option<u16>) -> Option<PixelRect> {
    let mut bbox: Option<PixelRect> = None;
    for y in 0..seg.height {
        for x in 0..seg.width {
            let label = seg.get(x, y);
            let hit = match part {
                Some(p) => label == p,
                None => label != 0,
            };
            if hit {
                match &mut bbox {
                    Some(b) => b.include(x as i64, y as i64),
                    None => bbox = Some(PixelRect::single(x as i64, y as i64)),
                }
            }
        }
    }
    bbox
}

/// Pixels of the mask with at least one neighbor outside it; the image
/// border counts as outside.
pub fn mask_edge(mask: &SilhouetteMask, connectivity: Connectivity) -> Vec<(usize, usize)> {
    let offsets: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ],
    };
    let mut edge = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            if !mask.get(x, y) {
                continue;
            }
            let boundary = offsets.iter().any(|&(dx, dy)| {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                nx < 0
                    || ny < 0
                    || nx >= mask.width as i64
                    || ny >= mask.height as i64
                    || !mask.get(nx as usize, ny as usize)
            });
            if boundary {
                edge.push((x, y));
            }
        }
    }
    edge
}
