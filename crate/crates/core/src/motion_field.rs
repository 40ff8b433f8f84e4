//! Observed-to-canonical warp: blend the inverses of the per-joint rigid
//! transforms with weights carried over from the nearest posed body
//! vertices, optionally plus a small learnable residual displacement.

use crate::body_model::{BodyShapeParams, PoseCondition, PoseParams, SkinnedBodyModel};
use crate::error::Result;
use crate::math::{sigmoid, softplus, Rigid, Vec3};
use crate::neural_field::{self, FieldParams, FieldTrace, RadianceSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Samples farther than this from every posed vertex warp with the root
/// joint's transform alone.
pub const FALLBACK_RADIUS: f64 = 1.0;

const IDW_EPS: f64 = 1e-9;

/// Learnable non-rigid correction: one softplus hidden layer on the encoded
/// skeletal-warp output concatenated with the flattened pose rotations. The
/// output layer starts at zero, so the residual begins as the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMlp {
    pub width: usize,
    pub num_freqs: usize,
    pub joints: usize,
    pub values: Vec<f64>,
}

impl ResidualMlp {
    fn input_len(width_freqs: usize, joints: usize) -> usize {
        3 + 6 * width_freqs + 9 * joints
    }

    pub fn param_count(width: usize, num_freqs: usize, joints: usize) -> usize {
        let input = Self::input_len(num_freqs, joints);
        (input + 1) * width + (width + 1) * 3
    }

    pub fn init(width: usize, num_freqs: usize, joints: usize, seed: u64) -> ResidualMlp {
        let input = Self::input_len(num_freqs, joints);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = (6.0 / input as f64).sqrt();
        let mut values = Vec::with_capacity(Self::param_count(width, num_freqs, joints));
        for _ in 0..input * width {
            values.push(rng.gen_range(-scale..scale));
        }
        values.extend(std::iter::repeat(0.0).take(width)); // hidden bias
        values.extend(std::iter::repeat(0.0).take((width + 1) * 3)); // zeroed output
        ResidualMlp {
            width,
            num_freqs,
            joints,
            values,
        }
    }

    fn build_input(&self, x: &Vec3, pose_feature: &[f64], input: &mut Vec<f64>) {
        neural_field::encode_into(x, self.num_freqs, input);
        input.extend_from_slice(pose_feature);
    }

    fn forward_traced(&self, x: &Vec3, pose_feature: &[f64], trace: &mut ResidualTrace) -> Vec3 {
        self.build_input(x, pose_feature, &mut trace.input);
        let input_len = trace.input.len();
        let w = &self.values[..input_len * self.width];
        let b = &self.values[input_len * self.width..input_len * self.width + self.width];
        trace.pre.clear();
        trace.act.clear();
        for o in 0..self.width {
            let row = &w[o * input_len..(o + 1) * input_len];
            let mut acc = b[o];
            for (wi, vi) in row.iter().zip(&trace.input) {
                acc += wi * vi;
            }
            trace.pre.push(acc);
            trace.act.push(softplus(acc));
        }
        let out_off = input_len * self.width + self.width;
        let wo = &self.values[out_off..out_off + self.width * 3];
        let bo = &self.values[out_off + self.width * 3..];
        let mut delta = Vec3::zeros();
        for c in 0..3 {
            let row = &wo[c * self.width..(c + 1) * self.width];
            let mut acc = bo[c];
            for (wi, ai) in row.iter().zip(&trace.act) {
                acc += wi * ai;
            }
            delta[c] = acc;
        }
        delta
    }

    /// Accumulate parameter gradients for `d_delta` flowing into the output.
    fn backward(&self, trace: &ResidualTrace, d_delta: &Vec3, grad: &mut [f64]) {
        let input_len = trace.input.len();
        let out_off = input_len * self.width + self.width;
        let wo = &self.values[out_off..out_off + self.width * 3];
        let mut d_act = vec![0.0; self.width];
        for c in 0..3 {
            let g = d_delta[c];
            grad[out_off + self.width * 3 + c] += g;
            let row = &wo[c * self.width..(c + 1) * self.width];
            for (o, (&wi, &ai)) in row.iter().zip(&trace.act).enumerate() {
                grad[out_off + c * self.width + o] += g * ai;
                d_act[o] += g * wi;
            }
        }
        for o in 0..self.width {
            let g = d_act[o] * sigmoid(trace.pre[o]);
            if g == 0.0 {
                continue;
            }
            grad[input_len * self.width + o] += g;
            let gw = &mut grad[o * input_len..(o + 1) * input_len];
            for (k, &vi) in trace.input.iter().enumerate() {
                gw[k] += g * vi;
            }
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct ResidualTrace {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

/// The warp field: body model, canonical (rest) skeleton, neighbor count for
/// weight transfer, and the optional residual.
#[derive(Debug, Clone)]
pub struct WarpField {
    pub model: Arc<SkinnedBodyModel>,
    pub beta: BodyShapeParams,
    /// Rest-pose joints; the canonical frame the field lives in.
    pub canonical_joints: Vec<Vec3>,
    pub k_nn: usize,
    pub residual: Option<ResidualMlp>,
}

impl WarpField {
    pub fn new(model: Arc<SkinnedBodyModel>, beta: BodyShapeParams, k_nn: usize) -> WarpField {
        assert!(k_nn >= 1);
        let canonical_joints = model.rest_joints(&beta);
        WarpField {
            model,
            beta,
            canonical_joints,
            k_nn,
            residual: None,
        }
    }

    pub fn with_residual(mut self, residual: ResidualMlp) -> WarpField {
        self.residual = Some(residual);
        self
    }

    pub fn residual_param_count(&self) -> usize {
        self.residual.as_ref().map_or(0, |r| r.values.len())
    }

    /// Pose condition for a pose vector, through the same transform chain as
    /// the body model forward pass.
    pub fn pose_condition(&self, theta: &PoseParams) -> Result<PoseCondition> {
        self.model.pose_condition(&self.beta, theta)
    }

    /// Everything per-pose the warp needs: per-joint inverse transforms, the
    /// posed vertices, their search grid, and the residual's pose feature.
    pub fn snapshot(&self, pose: &PoseCondition) -> PoseSnapshot {
        let j = self.model.joint_count();
        assert_eq!(pose.joints.len(), j, "pose condition joint count mismatch");
        // canonical -> observed: x_obs = Omega_j (x_c - j_rest) + J_j
        let forward: Vec<Rigid> = (0..j)
            .map(|ji| {
                Rigid::new(
                    pose.rotations[ji],
                    pose.joints[ji] - pose.rotations[ji] * self.canonical_joints[ji],
                )
            })
            .collect();
        let inverse: Vec<Rigid> = forward.iter().map(Rigid::inverse).collect();
        let posed_vertices: Vec<Vec3> = self
            .model
            .template_vertices
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                let mut acc = Vec3::zeros();
                for ji in 0..j {
                    let w = self.model.skin_weight(vi, ji);
                    if w != 0.0 {
                        acc += forward[ji].apply(v) * w;
                    }
                }
                acc
            })
            .collect();
        let grid = SpatialGrid::build(&posed_vertices);
        let mut pose_feature = Vec::with_capacity(9 * j);
        for r in &pose.rotations {
            for row in 0..3 {
                for col in 0..3 {
                    pose_feature.push(r[(row, col)]);
                }
            }
        }
        PoseSnapshot {
            inverse,
            posed_vertices,
            grid,
            pose_feature,
        }
    }

    /// Blended joint weights at an observed-space point: inverse-distance
    /// weighted skinning weights of the `k_nn` nearest posed vertices. Falls
    /// back to the root joint beyond [`FALLBACK_RADIUS`].
    fn joint_weights(&self, snap: &PoseSnapshot, x: &Vec3, scratch: &mut WarpScratch) {
        let j = self.model.joint_count();
        scratch.weights.clear();
        scratch.weights.resize(j, 0.0);
        let found = snap
            .grid
            .k_nearest(&snap.posed_vertices, x, self.k_nn, &mut scratch.neighbors);
        if found {
            let mut total = 0.0;
            for &(vi, dist) in &scratch.neighbors {
                let w = 1.0 / (dist + IDW_EPS);
                total += w;
                for ji in 0..j {
                    scratch.weights[ji] += w * self.model.skin_weight(vi as usize, ji);
                }
            }
            for w in scratch.weights.iter_mut() {
                *w /= total;
            }
        } else {
            let root = self
                .model
                .kinematic_parents
                .iter()
                .position(|&p| p == -1)
                .unwrap_or(0);
            scratch.weights[root] = 1.0;
        }
    }

    /// Skeletal part of the warp (no residual).
    pub fn warp_skeletal(&self, snap: &PoseSnapshot, x_observed: &Vec3) -> Vec3 {
        let mut scratch = WarpScratch::default();
        self.warp_skeletal_scratch(snap, x_observed, &mut scratch)
    }

    pub fn warp_skeletal_scratch(
        &self,
        snap: &PoseSnapshot,
        x_observed: &Vec3,
        scratch: &mut WarpScratch,
    ) -> Vec3 {
        self.joint_weights(snap, x_observed, scratch);
        let mut out = Vec3::zeros();
        for (ji, &w) in scratch.weights.iter().enumerate() {
            if w != 0.0 {
                out += snap.inverse[ji].apply(x_observed) * w;
            }
        }
        out
    }

    /// Full warp: skeletal inverse blend plus the residual displacement.
    pub fn warp(&self, snap: &PoseSnapshot, x_observed: &Vec3) -> Vec3 {
        let x_skel = self.warp_skeletal(snap, x_observed);
        match &self.residual {
            Some(res) => {
                let mut trace = ResidualTrace::default();
                x_skel + res.forward_traced(&x_skel, &snap.pose_feature, &mut trace)
            }
            None => x_skel,
        }
    }
}

/// Reusable buffers for warp queries along a ray.
#[derive(Debug, Default, Clone)]
pub struct WarpScratch {
    weights: Vec<f64>,
    neighbors: Vec<(u32, f64)>,
}

/// All per-sample scratch for forward evaluation of a composed field.
#[derive(Debug, Default, Clone)]
pub struct SampleScratch {
    warp: WarpScratch,
    trace: FieldTrace,
    residual: ResidualTrace,
}

/// Per-pose immutable state, built once and then read-only.
#[derive(Debug, Clone)]
pub struct PoseSnapshot {
    inverse: Vec<Rigid>,
    pub posed_vertices: Vec<Vec3>,
    grid: SpatialGrid,
    pose_feature: Vec<f64>,
}

/// Dense uniform grid for deterministic k-nearest-neighbor queries.
#[derive(Debug, Clone)]
struct SpatialGrid {
    cell: f64,
    origin: Vec3,
    dims: [i64; 3],
    cells: Vec<Vec<u32>>,
}

impl SpatialGrid {
    fn build(points: &[Vec3]) -> SpatialGrid {
        let min = points
            .iter()
            .fold(Vec3::repeat(f64::INFINITY), |a, p| a.inf(p));
        let max = points
            .iter()
            .fold(Vec3::repeat(f64::NEG_INFINITY), |a, p| a.sup(p));
        let extent = max - min;
        let volume = (extent.x.max(1e-3)) * (extent.y.max(1e-3)) * (extent.z.max(1e-3));
        let cell = (2.0 * (volume / points.len() as f64).cbrt()).clamp(0.05, 0.4);
        let dims = [
            (extent.x / cell).floor() as i64 + 1,
            (extent.y / cell).floor() as i64 + 1,
            (extent.z / cell).floor() as i64 + 1,
        ];
        let mut cells = vec![Vec::new(); (dims[0] * dims[1] * dims[2]) as usize];
        for (i, p) in points.iter().enumerate() {
            let c = Self::cell_of(p, &min, cell);
            let idx = (c[2] * dims[1] + c[1]) * dims[0] + c[0];
            cells[idx as usize].push(i as u32);
        }
        SpatialGrid {
            cell,
            origin: min,
            dims,
            cells,
        }
    }

    fn cell_of(p: &Vec3, origin: &Vec3, cell: f64) -> [i64; 3] {
        [
            ((p.x - origin.x) / cell).floor() as i64,
            ((p.y - origin.y) / cell).floor() as i64,
            ((p.z - origin.z) / cell).floor() as i64,
        ]
    }

    /// Exact k-nearest by expanding Chebyshev rings; ties break on vertex
    /// index. Fills `best` and returns false when no point lies within
    /// [`FALLBACK_RADIUS`].
    fn k_nearest(&self, points: &[Vec3], x: &Vec3, k: usize, best: &mut Vec<(u32, f64)>) -> bool {
        let center = Self::cell_of(x, &self.origin, self.cell);
        let max_ring = (FALLBACK_RADIUS / self.cell).ceil() as i64 + 1;
        best.clear();
        let consider = |best: &mut Vec<(u32, f64)>, vi: u32, dist: f64| {
            let pos = best
                .binary_search_by(|probe| {
                    probe
                        .1
                        .partial_cmp(&dist)
                        .unwrap()
                        .then(probe.0.cmp(&vi))
                })
                .unwrap_or_else(|p| p);
            best.insert(pos, (vi, dist));
            if best.len() > k {
                best.pop();
            }
        };
        for ring in 0..=max_ring {
            for dz in -ring..=ring {
                let cz = center[2] + dz;
                if cz < 0 || cz >= self.dims[2] {
                    continue;
                }
                for dy in -ring..=ring {
                    let cy = center[1] + dy;
                    if cy < 0 || cy >= self.dims[1] {
                        continue;
                    }
                    for dx in -ring..=ring {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let cx = center[0] + dx;
                        if cx < 0 || cx >= self.dims[0] {
                            continue;
                        }
                        let idx = ((cz * self.dims[1] + cy) * self.dims[0] + cx) as usize;
                        for &vi in &self.cells[idx] {
                            let dist = (points[vi as usize] - x).norm();
                            consider(best, vi, dist);
                        }
                    }
                }
            }
            // Distance from x to anything outside the scanned box: the exact
            // gap between x and the box boundary along the closest axis.
            let mut boundary_gap = f64::INFINITY;
            for a in 0..3 {
                let lo = self.origin[a] + (center[a] - ring) as f64 * self.cell;
                let hi = self.origin[a] + (center[a] + ring + 1) as f64 * self.cell;
                boundary_gap = boundary_gap.min(x[a] - lo).min(hi - x[a]);
            }
            if best.len() >= k && best[k - 1].1 <= boundary_gap {
                break;
            }
        }
        !(best.is_empty() || best[0].1 > FALLBACK_RADIUS)
    }
}

/// Gradient sinks for one differentiable scene (field + warp residual).
#[derive(Debug, Clone)]
pub struct SceneGrads {
    pub field: Vec<f64>,
    pub residual: Vec<f64>,
}

impl SceneGrads {
    pub fn zeros(field: &FieldParams, warp: &WarpField) -> SceneGrads {
        SceneGrads {
            field: vec![0.0; field.values.len()],
            residual: vec![0.0; warp.residual_param_count()],
        }
    }

    pub fn add(&mut self, other: &SceneGrads) {
        for (a, b) in self.field.iter_mut().zip(&other.field) {
            *a += b;
        }
        for (a, b) in self.residual.iter_mut().zip(&other.residual) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.field.iter().all(|g| g.is_finite()) && self.residual.iter().all(|g| g.is_finite())
    }
}

/// The observed-space radiance function `F_c(T(x, p))` for one pose.
pub struct ComposedField<'a> {
    pub field: &'a FieldParams,
    pub warp: &'a WarpField,
    pub snapshot: std::borrow::Cow<'a, PoseSnapshot>,
}

/// Per-sample trace for the composed backward pass.
#[derive(Debug, Default, Clone)]
pub struct ComposedTrace {
    field_trace: FieldTrace,
    residual_trace: Option<ResidualTrace>,
}

impl<'a> ComposedField<'a> {
    pub fn new(field: &'a FieldParams, warp: &'a WarpField, pose: &PoseCondition) -> Self {
        ComposedField {
            field,
            warp,
            snapshot: std::borrow::Cow::Owned(warp.snapshot(pose)),
        }
    }

    /// Reuse an existing per-pose snapshot (snapshots are residual-free, so
    /// sharing them across parameter updates is sound).
    pub fn with_snapshot(
        field: &'a FieldParams,
        warp: &'a WarpField,
        snapshot: &'a PoseSnapshot,
    ) -> Self {
        ComposedField {
            field,
            warp,
            snapshot: std::borrow::Cow::Borrowed(snapshot),
        }
    }

    pub fn sample(&self, x_observed: &Vec3) -> Result<RadianceSample> {
        let x_c = self.warp.warp(&self.snapshot, x_observed);
        neural_field::evaluate(self.field, &x_c)
    }

    pub fn sample_scratch(
        &self,
        x_observed: &Vec3,
        scratch: &mut SampleScratch,
    ) -> Result<RadianceSample> {
        let x_skel = self
            .warp
            .warp_skeletal_scratch(&self.snapshot, x_observed, &mut scratch.warp);
        let x_c = match &self.warp.residual {
            Some(res) => {
                x_skel
                    + res.forward_traced(&x_skel, &self.snapshot.pose_feature, &mut scratch.residual)
            }
            None => x_skel,
        };
        neural_field::evaluate_with_trace(self.field, &x_c, &mut scratch.trace)
    }

    pub fn sample_traced(
        &self,
        x_observed: &Vec3,
        trace: &mut ComposedTrace,
    ) -> Result<RadianceSample> {
        let mut scratch = WarpScratch::default();
        self.sample_traced_scratch(x_observed, trace, &mut scratch)
    }

    pub fn sample_traced_scratch(
        &self,
        x_observed: &Vec3,
        trace: &mut ComposedTrace,
        scratch: &mut WarpScratch,
    ) -> Result<RadianceSample> {
        let x_skel = self
            .warp
            .warp_skeletal_scratch(&self.snapshot, x_observed, scratch);
        let x_c = match &self.warp.residual {
            Some(res) => {
                let rt = trace.residual_trace.get_or_insert_with(Default::default);
                x_skel + res.forward_traced(&x_skel, &self.snapshot.pose_feature, rt)
            }
            None => {
                trace.residual_trace = None;
                x_skel
            }
        };
        neural_field::evaluate_with_trace(self.field, &x_c, &mut trace.field_trace)
    }

    /// Backward through field and residual for one traced sample.
    pub fn backward(
        &self,
        trace: &ComposedTrace,
        d_color: &[f64; 3],
        d_sigma: f64,
        grads: &mut SceneGrads,
    ) {
        let d_xc = neural_field::backward(
            self.field,
            &trace.field_trace,
            d_color,
            d_sigma,
            &mut grads.field,
        );
        if let (Some(res), Some(rt)) = (&self.warp.residual, &trace.residual_trace) {
            res.backward(rt, &d_xc, &mut grads.residual);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::{make_capsule_fixture, BodyShapeParams, PoseParams};
    use crate::neural_field::FieldArch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn capsule_warp(joints: usize) -> WarpField {
        let model = Arc::new(make_capsule_fixture(joints, 32));
        WarpField::new(model, BodyShapeParams::zeros(), 8)
    }

    #[test]
    fn rest_pose_warp_is_identity() {
        let warp = capsule_warp(3);
        let pose = warp.pose_condition(&PoseParams::rest(3)).unwrap();
        let snap = warp.snapshot(&pose);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x = Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(0.0..1.6),
                rng.gen_range(-0.2..0.2),
            );
            let warped = warp.warp(&snap, &x);
            assert!((warped - x).norm() < 1e-6, "{x:?} -> {warped:?}");
        }
    }

    /// Hand-inverted rigid-transform oracle: on a one-hot segment, the warp
    /// must equal applying (R, t)^-1 built by hand.
    #[test]
    fn single_joint_rotation_inverts_exactly() {
        let warp = capsule_warp(2);
        let mut theta = PoseParams::rest(2);
        theta.theta[3] = FRAC_PI_2;
        let pose = warp.pose_condition(&theta).unwrap();
        let snap = warp.snapshot(&pose);

        let joint = warp.canonical_joints[1];
        let r = crate::math::rodrigues(&Vec3::new(FRAC_PI_2, 0.0, 0.0));
        // A surface vertex well inside segment 1 (owned solely by joint 1).
        let x_c = warp.model.template_vertices[32 + 24]; // segment 1, ring 3
        let x_obs = r * (x_c - joint) + joint;
        // Hand-built inverse of the rigid map about the joint.
        let hand = r.transpose() * (x_obs - joint) + joint;
        let warped = warp.warp(&snap, &x_obs);
        assert!((warped - hand).norm() < 1e-6);
        assert!((warped - x_c).norm() < 1e-6);
    }

    /// 100 random single-joint poses: rigid-segment equivalence under one-hot
    /// weights, probing actual surface points of the posed segment.
    #[test]
    fn rigid_segment_equivalence_random_poses() {
        let warp = capsule_warp(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut theta = PoseParams::rest(2);
            for c in 0..3 {
                theta.theta[3 + c] = rng.gen_range(-1.2..1.2);
            }
            let pose = warp.pose_condition(&theta).unwrap();
            let snap = warp.snapshot(&pose);
            // Mid-segment vertices stay surrounded by same-segment neighbors.
            for &vi in &[40usize, 44, 52, 56] {
                let x_c = warp.model.template_vertices[vi];
                let x_obs = snap.posed_vertices[vi];
                let warped = warp.warp(&snap, &x_obs);
                assert!(
                    (warped - x_c).norm() < 1e-6,
                    "vertex {vi}: {warped:?} vs {x_c:?}"
                );
            }
        }
    }

    #[test]
    fn far_points_fall_back_to_root() {
        let warp = capsule_warp(2);
        let mut theta = PoseParams::rest(2);
        theta.theta[0] = 0.3; // root rotation
        let pose = warp.pose_condition(&theta).unwrap();
        let snap = warp.snapshot(&pose);
        let x = Vec3::new(5.0, 5.0, 5.0);
        let warped = warp.warp(&snap, &x);
        let expected = snap.inverse[0].apply(&x);
        assert!((warped - expected).norm() < 1e-12);
    }

    /// Empirical continuity near the body: K-set changes swap equidistant
    /// neighbors, so the blend stays Lipschitz.
    #[test]
    fn warp_is_lipschitz_near_body() {
        let warp = capsule_warp(3);
        let mut theta = PoseParams::rest(3);
        theta.theta[4] = 0.9;
        theta.theta[6] = -0.7;
        let pose = warp.pose_condition(&theta).unwrap();
        let snap = warp.snapshot(&pose);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let delta = 1e-4;
        for _ in 0..500 {
            let x = Vec3::new(
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.1..1.7),
                rng.gen_range(-0.3..0.3),
            );
            let dir = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let a = warp.warp(&snap, &x);
            let b = warp.warp(&snap, &(x + dir * delta));
            let lipschitz = (b - a).norm() / delta;
            assert!(lipschitz < 100.0, "L = {lipschitz} at {x:?}");
        }
    }

    #[test]
    fn composed_field_at_rest_equals_raw_field() {
        let warp = capsule_warp(2);
        let field = FieldParams::init(FieldArch::desk(), 3).unwrap();
        let pose = warp.pose_condition(&PoseParams::rest(2)).unwrap();
        let composed = ComposedField::new(&field, &warp, &pose);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let x = Vec3::new(
                rng.gen_range(-0.2..0.2),
                rng.gen_range(0.0..1.6),
                rng.gen_range(-0.2..0.2),
            );
            let a = composed.sample(&x).unwrap();
            let b = neural_field::evaluate(&field, &x).unwrap();
            for c in 0..3 {
                assert!((a.color[c] - b.color[c]).abs() < 1e-6);
            }
            assert!((a.sigma - b.sigma).abs() < 1e-6);
        }
    }

    /// Canonical consistency: points that warp to the same canonical
    /// location under different poses sample identical radiance.
    #[test]
    fn coincident_canonical_points_agree_across_poses() {
        let warp = capsule_warp(2);
        let field = FieldParams::init(FieldArch::desk(), 5).unwrap();

        let rest_pose = warp.pose_condition(&PoseParams::rest(2)).unwrap();
        let mut theta = PoseParams::rest(2);
        theta.theta[3] = 0.8;
        let bent_pose = warp.pose_condition(&theta).unwrap();

        let composed_rest = ComposedField::new(&field, &warp, &rest_pose);
        let composed_bent = ComposedField::new(&field, &warp, &bent_pose);

        // Same canonical surface vertex, observed under both poses.
        let vi = 32 + 28;
        let x1 = composed_rest.snapshot.posed_vertices[vi];
        let x2 = composed_bent.snapshot.posed_vertices[vi];
        let a = composed_rest.sample(&x1).unwrap();
        let b = composed_bent.sample(&x2).unwrap();
        for c in 0..3 {
            assert!((a.color[c] - b.color[c]).abs() < 1e-6);
        }
        assert!((a.sigma - b.sigma).abs() < 1e-6);
    }

    /// With the residual enabled, gradients reach both parameter groups.
    #[test]
    fn gradients_flow_to_field_and_residual() {
        let model = Arc::new(make_capsule_fixture(2, 32));
        let residual = ResidualMlp::init(8, 2, 2, 77);
        let warp = WarpField::new(model, BodyShapeParams::zeros(), 8).with_residual(residual);
        let field = FieldParams::init(FieldArch::desk(), 9).unwrap();
        let mut theta = PoseParams::rest(2);
        theta.theta[4] = 0.4;
        let pose = warp.pose_condition(&theta).unwrap();
        let composed = ComposedField::new(&field, &warp, &pose);

        let mut grads = SceneGrads::zeros(&field, &warp);
        let mut trace = ComposedTrace::default();
        for &vi in &[10usize, 40, 50] {
            let x = composed.snapshot.posed_vertices[vi] * 0.98;
            composed.sample_traced(&x, &mut trace).unwrap();
            composed.backward(&trace, &[1.0, 0.5, -0.5], 1.0, &mut grads);
        }
        let field_norm: f64 = grads.field.iter().map(|g| g * g).sum::<f64>().sqrt();
        let residual_norm: f64 = grads.residual.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(field_norm > 0.0);
        assert!(residual_norm > 0.0, "residual gradient is zero");
    }

    /// Residual parameter gradients match finite differences through the
    /// composed sample.
    #[test]
    fn residual_gradient_matches_finite_differences() {
        let model = Arc::new(make_capsule_fixture(2, 32));
        let mut residual = ResidualMlp::init(4, 1, 2, 13);
        // Nudge the output layer off zero so hidden weights get gradient.
        let n = residual.values.len();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for v in residual.values[n - 15..].iter_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
        let warp =
            WarpField::new(model, BodyShapeParams::zeros(), 8).with_residual(residual.clone());
        let field = FieldParams::init(FieldArch::desk(), 15).unwrap();
        let mut theta = PoseParams::rest(2);
        theta.theta[3] = 0.5;
        let pose = warp.pose_condition(&theta).unwrap();

        let x = {
            let composed = ComposedField::new(&field, &warp, &pose);
            composed.snapshot.posed_vertices[44]
        };
        let loss = |warp: &WarpField| -> f64 {
            let composed = ComposedField::new(&field, warp, &pose);
            let s = composed.sample(&x).unwrap();
            0.9 * s.color[0] - 0.4 * s.color[1] + 0.2 * s.color[2] + 0.6 * s.sigma
        };

        let composed = ComposedField::new(&field, &warp, &pose);
        let mut grads = SceneGrads::zeros(&field, &warp);
        let mut trace = ComposedTrace::default();
        composed.sample_traced(&x, &mut trace).unwrap();
        composed.backward(&trace, &[0.9, -0.4, 0.2], 0.6, &mut grads);

        let h = 1e-5;
        for i in (0..residual.values.len()).step_by(7) {
            let mut wplus = warp.clone();
            wplus.residual.as_mut().unwrap().values[i] += h;
            let mut wminus = warp.clone();
            wminus.residual.as_mut().unwrap().values[i] -= h;
            let fd = (loss(&wplus) - loss(&wminus)) / (2.0 * h);
            let g = grads.residual[i];
            assert!(
                (g - fd).abs() / fd.abs().max(1e-6) < 1e-3,
                "residual param {i}: {g} vs {fd}"
            );
        }
    }
}
