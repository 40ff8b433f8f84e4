//! Skinned vertex-based parametric body: shape/pose coefficients in, posed
//! mesh and joint transforms out. This is the geometric prior behind
//! initialization, the silhouette constraint, and the canonical warp.

use crate::error::{Error, Result};
use crate::math::{rodrigues, Mat3, Rigid, Vec3};

pub const SHAPE_COEFFS: usize = 10;

/// Default six-part grouping used for body-part-aware sampling.
pub const PART_NAMES: [&str; 6] = [
    "head",
    "torso",
    "left_arm",
    "right_arm",
    "left_leg",
    "right_leg",
];

/// Joint → part table for standard 24-joint archives, indexed by joint id.
/// Parts: 1 head, 2 torso, 3 left arm, 4 right arm, 5 left leg, 6 right leg.
pub const JOINT_PART_24: [u16; 24] = [
    2, // 0 pelvis
    5, // 1 left hip
    6, // 2 right hip
    2, // 3 spine1
    5, // 4 left knee
    6, // 5 right knee
    2, // 6 spine2
    5, // 7 left ankle
    6, // 8 right ankle
    2, // 9 spine3
    5, // 10 left foot
    6, // 11 right foot
    1, // 12 neck
    2, // 13 left collar
    2, // 14 right collar
    1, // 15 head
    3, // 16 left shoulder
    4, // 17 right shoulder
    3, // 18 left elbow
    4, // 19 right elbow
    3, // 20 left wrist
    4, // 21 right wrist
    3, // 22 left hand
    4, // 23 right hand
];

/// The loaded body model: template geometry, blend shapes, the joint
/// regressor, skinning weights, per-vertex part labels, and the kinematic
/// tree. Immutable after load.
#[derive(Debug, Clone)]
pub struct SkinnedBodyModel {
    /// `N x 3` rest vertices, meters.
    pub template_vertices: Vec<Vec3>,
    /// Triangles indexing `template_vertices`.
    pub faces: Vec<[u32; 3]>,
    /// `N * 3 * 10` shape blend directions, flattened `[vertex][coord][coeff]`.
    pub shape_dirs: Vec<f64>,
    /// `N * 3 * 9(J-1)` pose blend directions, flattened `[vertex][coord][k]`.
    pub pose_dirs: Vec<f64>,
    /// `J * N` joint regressor, flattened `[joint][vertex]`.
    pub joint_regressor: Vec<f64>,
    /// `N * J` skinning weights, flattened `[vertex][joint]`.
    pub skin_weights: Vec<f64>,
    /// Per-vertex part id in `1..=num_parts`.
    pub part_labels: Vec<u16>,
    /// Parent joint per joint; -1 for the root.
    pub kinematic_parents: Vec<i32>,
}

/// Unitless PCA shape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyShapeParams {
    pub beta: [f64; SHAPE_COEFFS],
}

impl BodyShapeParams {
    pub fn zeros() -> Self {
        BodyShapeParams {
            beta: [0.0; SHAPE_COEFFS],
        }
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() != SHAPE_COEFFS {
            return Err(Error::Dimension(format!(
                "shape parameters need {} coefficients, got {}",
                SHAPE_COEFFS,
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite shape coefficient".into()));
        }
        let mut beta = [0.0; SHAPE_COEFFS];
        beta.copy_from_slice(values);
        Ok(BodyShapeParams { beta })
    }
}

/// Axis-angle joint rotations, radians, root first; `3 * J` values.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams {
    pub theta: Vec<f64>,
}

impl PoseParams {
    pub fn rest(joints: usize) -> Self {
        PoseParams {
            theta: vec![0.0; joints * 3],
        }
    }

    /// Pose rows in motion files are always 72-wide; a model with `J < 24`
    /// joints reads the leading `3 * J` entries.
    pub fn from_frame(frame: &[f64], joints: usize) -> Result<Self> {
        if frame.len() < joints * 3 {
            return Err(Error::Dimension(format!(
                "pose row of {} values cannot drive {} joints",
                frame.len(),
                joints
            )));
        }
        Ok(PoseParams {
            theta: frame[..joints * 3].to_vec(),
        })
    }

    pub fn joints(&self) -> usize {
        self.theta.len() / 3
    }

    pub fn axis_angle(&self, joint: usize) -> Vec3 {
        Vec3::new(
            self.theta[joint * 3],
            self.theta[joint * 3 + 1],
            self.theta[joint * 3 + 2],
        )
    }
}

/// Deformed mesh produced by [`SkinnedBodyModel::forward`].
#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub vertices: Vec<Vec3>,
    pub joints_posed: Vec<Vec3>,
    pub part_labels: Vec<u16>,
}

/// Pose conditioning for the warp field: posed joint locations plus the
/// chained world rotation of every joint.
#[derive(Debug, Clone)]
pub struct PoseCondition {
    pub joints: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
}

impl SkinnedBodyModel {
    pub fn vertex_count(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn joint_count(&self) -> usize {
        self.kinematic_parents.len()
    }

    pub fn num_parts(&self) -> u16 {
        self.part_labels.iter().copied().max().unwrap_or(0)
    }

    #[inline]
    pub fn skin_weight(&self, vertex: usize, joint: usize) -> f64 {
        self.skin_weights[vertex * self.joint_count() + joint]
    }

    /// Check every structural invariant; returns the first violation as an
    /// `InvalidModelData` error carrying the offending statistic.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertex_count();
        let j = self.joint_count();
        if n == 0 || j == 0 {
            return Err(Error::InvalidModelData(format!(
                "degenerate model: {n} vertices, {j} joints"
            )));
        }
        let expect = |name: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::InvalidModelData(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
            Ok(())
        };
        expect("shapedirs", self.shape_dirs.len(), n * 3 * SHAPE_COEFFS)?;
        expect("posedirs", self.pose_dirs.len(), n * 3 * 9 * (j - 1))?;
        expect("J_regressor", self.joint_regressor.len(), j * n)?;
        expect("weights", self.skin_weights.len(), n * j)?;
        expect("part_labels", self.part_labels.len(), n)?;

        for (vi, v) in self.template_vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(Error::InvalidModelData(format!(
                    "template vertex {vi} is not finite"
                )));
            }
        }
        for face in &self.faces {
            for &idx in face {
                if idx as usize >= n {
                    return Err(Error::InvalidModelData(format!(
                        "face references vertex {idx}, model has {n}"
                    )));
                }
            }
        }
        for vi in 0..n {
            let row = &self.skin_weights[vi * j..(vi + 1) * j];
            let mut sum = 0.0;
            for &w in row {
                if !(w.is_finite() && w >= 0.0) {
                    return Err(Error::InvalidModelData(format!(
                        "skinning weight of vertex {vi} is negative or non-finite: {w}"
                    )));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidModelData(format!(
                    "skinning weights of vertex {vi} sum to {sum}, expected 1"
                )));
            }
        }
        for ji in 0..j {
            let sum: f64 = self.joint_regressor[ji * n..(ji + 1) * n].iter().sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidModelData(format!(
                    "joint regressor row {ji} sums to {sum}, expected 1"
                )));
            }
        }
        let parts = self.num_parts();
        for (vi, &label) in self.part_labels.iter().enumerate() {
            if label == 0 || label > parts {
                return Err(Error::InvalidModelData(format!(
                    "vertex {vi} has part label {label} outside 1..={parts}"
                )));
            }
        }
        // Kinematic tree: exactly one root, acyclic, single component.
        let roots = self
            .kinematic_parents
            .iter()
            .filter(|&&p| p == -1)
            .count();
        if roots != 1 {
            return Err(Error::InvalidModelData(format!(
                "kinematic tree has {roots} roots, expected 1"
            )));
        }
        for (ji, &parent) in self.kinematic_parents.iter().enumerate() {
            if parent >= 0 {
                if parent as usize >= j {
                    return Err(Error::InvalidModelData(format!(
                        "joint {ji} has out-of-range parent {parent}"
                    )));
                }
                // Parents must come earlier; this forbids cycles and lets the
                // forward pass chain transforms in index order.
                if parent as usize >= ji {
                    return Err(Error::InvalidModelData(format!(
                        "joint {ji} has parent {parent}; parents must precede children"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Rest vertices after shape and pose blend offsets.
    fn shaped_vertices(&self, beta: &BodyShapeParams, pose_feature: &[f64]) -> Vec<Vec3> {
        let n = self.vertex_count();
        let mut out = Vec::with_capacity(n);
        for vi in 0..n {
            let mut v = self.template_vertices[vi];
            for c in 0..3 {
                let base = (vi * 3 + c) * SHAPE_COEFFS;
                let mut offset = 0.0;
                for (k, &b) in beta.beta.iter().enumerate() {
                    offset += self.shape_dirs[base + k] * b;
                }
                let pbase = (vi * 3 + c) * pose_feature.len();
                for (k, &f) in pose_feature.iter().enumerate() {
                    offset += self.pose_dirs[pbase + k] * f;
                }
                v[c] += offset;
            }
            out.push(v);
        }
        out
    }

    fn regress_joints(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        let n = self.vertex_count();
        (0..self.joint_count())
            .map(|ji| {
                let row = &self.joint_regressor[ji * n..(ji + 1) * n];
                let mut acc = Vec3::zeros();
                for (v, &w) in vertices.iter().zip(row) {
                    acc += v * w;
                }
                acc
            })
            .collect()
    }

    /// Vectorized `R(θ_j) - I` over the non-root joints, the standard pose
    /// blend feature.
    fn pose_feature(&self, theta: &PoseParams) -> Vec<f64> {
        let j = self.joint_count();
        let mut feature = Vec::with_capacity((j - 1) * 9);
        for ji in 1..j {
            let r = rodrigues(&theta.axis_angle(ji)) - Mat3::identity();
            for row in 0..3 {
                for col in 0..3 {
                    feature.push(r[(row, col)]);
                }
            }
        }
        feature
    }

    /// World transform of every joint, chained along the kinematic tree, plus
    /// the rest joints they were chained from.
    fn joint_transforms(&self, beta: &BodyShapeParams, theta: &PoseParams) -> (Vec<Rigid>, Vec<Vec3>) {
        let pose_feature = self.pose_feature(theta);
        let shaped = self.shaped_vertices(beta, &pose_feature);
        let joints_rest = self.regress_joints(&shaped);
        let mut world: Vec<Rigid> = Vec::with_capacity(self.joint_count());
        for ji in 0..self.joint_count() {
            let local_rot = rodrigues(&theta.axis_angle(ji));
            let parent = self.kinematic_parents[ji];
            let g = if parent < 0 {
                Rigid::new(local_rot, joints_rest[ji])
            } else {
                let p = parent as usize;
                let local = Rigid::new(local_rot, joints_rest[ji] - joints_rest[p]);
                world[p].compose(&local)
            };
            world.push(g);
        }
        (world, joints_rest)
    }

    fn check_dims(&self, theta: &PoseParams) -> Result<()> {
        if theta.theta.len() != self.joint_count() * 3 {
            return Err(Error::Dimension(format!(
                "pose has {} values, model with {} joints needs {}",
                theta.theta.len(),
                self.joint_count(),
                self.joint_count() * 3
            )));
        }
        if !theta.theta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite pose parameter".into()));
        }
        Ok(())
    }

    /// Standard linear-blend-skinning forward pass.
    pub fn forward(&self, beta: &BodyShapeParams, theta: &PoseParams) -> Result<PosedMesh> {
        self.forward_translated(beta, theta, &Vec3::zeros())
    }

    /// Forward pass with an extra root translation applied to the output.
    pub fn forward_translated(
        &self,
        beta: &BodyShapeParams,
        theta: &PoseParams,
        translation: &Vec3,
    ) -> Result<PosedMesh> {
        self.check_dims(theta)?;
        let pose_feature = self.pose_feature(theta);
        let shaped = self.shaped_vertices(beta, &pose_feature);
        let (world, joints_rest) = self.joint_transforms(beta, theta);
        let j = self.joint_count();

        // A_j removes the rest joint offset so skinning acts about the joint.
        let skinning: Vec<Rigid> = world
            .iter()
            .zip(&joints_rest)
            .map(|(g, jr)| g.compose(&Rigid::new(Mat3::identity(), -jr)))
            .collect();

        let mut vertices = Vec::with_capacity(shaped.len());
        for (vi, v) in shaped.iter().enumerate() {
            let weights = &self.skin_weights[vi * j..(vi + 1) * j];
            let mut acc = Vec3::zeros();
            for (ji, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    acc += skinning[ji].apply(v) * w;
                }
            }
            vertices.push(acc + translation);
        }
        let joints_posed = world.iter().map(|g| g.translation + translation).collect();
        Ok(PosedMesh {
            vertices,
            joints_posed,
            part_labels: self.part_labels.clone(),
        })
    }

    /// Posed joint locations and chained world rotations, consistent with
    /// [`Self::forward`] (same transform chain, bit for bit).
    pub fn pose_condition(&self, beta: &BodyShapeParams, theta: &PoseParams) -> Result<PoseCondition> {
        self.check_dims(theta)?;
        let (world, _) = self.joint_transforms(beta, theta);
        Ok(PoseCondition {
            joints: world.iter().map(|g| g.translation).collect(),
            rotations: world.iter().map(|g| g.rotation).collect(),
        })
    }

    /// Per-joint transforms mapping canonical (rest) space to the given pose,
    /// i.e. the `A_j` used by skinning. The warp field inverts these.
    pub fn canonical_to_posed(
        &self,
        beta: &BodyShapeParams,
        theta: &PoseParams,
    ) -> Result<Vec<Rigid>> {
        self.check_dims(theta)?;
        let (world, joints_rest) = self.joint_transforms(beta, theta);
        Ok(world
            .iter()
            .zip(&joints_rest)
            .map(|(g, jr)| g.compose(&Rigid::new(Mat3::identity(), -jr)))
            .collect())
    }

    /// Rest-pose joints after shape blending (the canonical skeleton).
    pub fn rest_joints(&self, beta: &BodyShapeParams) -> Vec<Vec3> {
        let shaped = self.shaped_vertices(beta, &vec![0.0; (self.joint_count() - 1) * 9]);
        self.regress_joints(&shaped)
    }
}

/// Derive the six-part grouping from skinning-weight argmax through
/// [`JOINT_PART_24`]. Only defined for 24-joint archives.
pub fn derive_part_labels(
    skin_weights: &[f64],
    vertex_count: usize,
    joint_count: usize,
) -> Result<Vec<u16>> {
    if joint_count != 24 {
        return Err(Error::InvalidModelData(format!(
            "automatic part labels need a 24-joint archive, got {joint_count} joints"
        )));
    }
    Ok((0..vertex_count)
        .map(|vi| {
            let row = &skin_weights[vi * joint_count..(vi + 1) * joint_count];
            let mut best = 0usize;
            for (ji, &w) in row.iter().enumerate() {
                if w > row[best] {
                    best = ji;
                }
            }
            JOINT_PART_24[best]
        })
        .collect())
}

/// Desk-scale stand-in for licensed full-body archives: a stack of rigid
/// cylinder segments, one per joint, chained along +y. Ring 0 of every
/// segment sits exactly at its joint, so the uniform regressor row over that
/// ring recovers the joint position exactly.
pub fn make_capsule_fixture(joints: usize, verts_per_segment: usize) -> SkinnedBodyModel {
    assert!(joints >= 2, "capsule fixture needs at least 2 joints");
    assert!(verts_per_segment >= 8, "need at least 8 vertices per segment");

    let total_height = 1.6;
    let radius = 0.15;
    let segment_height = total_height / joints as f64;
    // Rings of ~8 vertices; pick the divisor of verts_per_segment nearest 8.
    let ring_size = (4..=verts_per_segment)
        .filter(|r| verts_per_segment % r == 0)
        .min_by_key(|r| r.abs_diff(8))
        .expect("verts_per_segment >= 8 always has a divisor >= 4");
    let rings_per_segment = verts_per_segment / ring_size;

    let n = joints * verts_per_segment;
    let mut template = Vec::with_capacity(n);
    let mut skin_weights = vec![0.0; n * joints];
    let mut part_labels = Vec::with_capacity(n);
    let mut regressor = vec![0.0; joints * n];

    for seg in 0..joints {
        let y_base = seg as f64 * segment_height;
        for ring in 0..rings_per_segment {
            let y = y_base + segment_height * ring as f64 / rings_per_segment as f64;
            for s in 0..ring_size {
                let angle = std::f64::consts::TAU * s as f64 / ring_size as f64;
                template.push(Vec3::new(radius * angle.cos(), y, radius * angle.sin()));
            }
        }
        for v in 0..verts_per_segment {
            let vi = seg * verts_per_segment + v;
            skin_weights[vi * joints + seg] = 1.0;
            // Two parts: lower half and upper half of the chain.
            part_labels.push(if seg < joints.div_ceil(2) { 1 } else { 2 });
        }
        // Joint `seg` sits at the centroid of its base ring.
        for s in 0..ring_size {
            let vi = seg * verts_per_segment + s;
            regressor[seg * n + vi] = 1.0 / ring_size as f64;
        }
    }

    // Triangle strips between consecutive rings, plus a top cap fan.
    let mut faces = Vec::new();
    let total_rings = joints * rings_per_segment;
    let ring_start = |r: usize| -> u32 {
        let seg = r / rings_per_segment;
        let within = r % rings_per_segment;
        (seg * verts_per_segment + within * ring_size) as u32
    };
    for r in 0..total_rings - 1 {
        let a = ring_start(r);
        let b = ring_start(r + 1);
        for s in 0..ring_size as u32 {
            let s1 = (s + 1) % ring_size as u32;
            faces.push([a + s, b + s, a + s1]);
            faces.push([a + s1, b + s, b + s1]);
        }
    }
    // Caps as fans around the first vertex of the boundary rings.
    let bottom = ring_start(0);
    let top = ring_start(total_rings - 1);
    for s in 1..ring_size as u32 - 1 {
        faces.push([bottom, bottom + s + 1, bottom + s]);
        faces.push([top, top + s, top + s + 1]);
    }

    let kinematic_parents = (0..joints).map(|j| j as i32 - 1).collect();
    let model = SkinnedBodyModel {
        template_vertices: template,
        faces,
        shape_dirs: vec![0.0; n * 3 * SHAPE_COEFFS],
        pose_dirs: vec![0.0; n * 3 * 9 * (joints - 1)],
        joint_regressor: regressor,
        skin_weights,
        part_labels,
        kinematic_parents,
    };
    model
        .validate()
        .expect("capsule fixture violates model invariants");
    model
}
