//! Small 3D math helpers shared across the crate.

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Rigid {
    pub fn identity() -> Self {
        Rigid {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Rigid {
            rotation,
            translation,
        }
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Rigid) -> Rigid {
        Rigid {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Rigid {
        let rt = self.rotation.transpose();
        Rigid {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }
}

/// Axis-angle to rotation matrix (Rodrigues). The Taylor branch keeps the
/// map smooth through the origin.
pub fn rodrigues(axis_angle: &Vec3) -> Mat3 {
    let theta2 = axis_angle.norm_squared();
    if theta2 < 1e-16 {
        // R ≈ I + [w]_x for tiny angles
        return Mat3::identity() + skew(axis_angle);
    }
    let theta = theta2.sqrt();
    let k = axis_angle / theta;
    let kx = skew(&k);
    Mat3::identity() + kx * theta.sin() + kx * kx * (1.0 - theta.cos())
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn is_rotation(m: &Mat3, tol: f64) -> bool {
    let orth = (m * m.transpose() - Mat3::identity()).norm();
    orth <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut aabb = Aabb {
            min: first,
            max: first,
        };
        for p in it {
            aabb.min = aabb.min.inf(p);
            aabb.max = aabb.max.sup(p);
        }
        Some(aabb)
    }

    pub fn dilated(&self, margin: f64) -> Aabb {
        let m = Vec3::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    /// Intersect a ray with the box; returns the clipped `[t0, t1]` within
    /// `[t_min, t_max]`, or `None` when the ray misses.
    pub fn clip_ray(&self, origin: &Vec3, dir: &Vec3, t_min: f64, t_max: f64) -> Option<(f64, f64)> {
        let mut t0 = t_min;
        let mut t1 = t_max;
        for axis in 0..3 {
            let d = dir[axis];
            let o = origin[axis];
            if d.abs() < 1e-15 {
                if o < self.min[axis] || o > self.max[axis] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d;
            let mut near = (self.min[axis] - o) * inv;
            let mut far = (self.max[axis] - o) * inv;
            if near > far {
                std::mem::swap(&mut near, &mut far);
            }
            t0 = t0.max(near);
            t1 = t1.min(far);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }
}

/// Numerically stable softplus and its derivative.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus: the preactivation whose softplus equals `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), rearranged to stay stable for large y
    y + (-(-y).exp_m1()).ln()
}

/// SplitMix64: cheap counter-based hash used for per-pixel jitter streams.
pub fn hash_u64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform sample in `[0, 1)` from a hashed counter.
pub fn hash_unit(z: u64) -> f64 {
    (hash_u64(z) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Wrap an angle in degrees to `(-180, 180]`.
pub fn wrap_degrees(mut deg: f64) -> f64 {
    deg %= 360.0;
    if deg <= -180.0 {
        deg += 360.0;
    } else if deg > 180.0 {
        deg -= 360.0;
    }
    deg
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn rodrigues_quarter_turn_about_x() {
        let r = rodrigues(&Vec3::new(FRAC_PI_2, 0.0, 0.0));
        let y = r * Vec3::new(0.0, 1.0, 0.0);
        assert_relative_eq!(y, Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
        assert!(is_rotation(&r, 1e-12));
    }

    #[test]
    fn rodrigues_is_smooth_at_origin() {
        let r = rodrigues(&Vec3::new(1e-12, 0.0, 0.0));
        assert_relative_eq!(r, Mat3::identity(), epsilon = 1e-9);
    }

    #[test]
    fn rigid_compose_matches_sequential_apply() {
        let a = Rigid::new(rodrigues(&Vec3::new(0.3, -0.2, 0.9)), Vec3::new(1.0, 2.0, 3.0));
        let b = Rigid::new(rodrigues(&Vec3::new(-1.1, 0.4, 0.2)), Vec3::new(-0.5, 0.1, 0.7));
        let x = Vec3::new(0.2, -0.7, 1.3);
        assert_relative_eq!(a.compose(&b).apply(&x), a.apply(&b.apply(&x)), epsilon = 1e-12);
        assert_relative_eq!(a.inverse().apply(&a.apply(&x)), x, epsilon = 1e-12);
    }

    #[test]
    fn aabb_ray_clip() {
        let aabb = Aabb {
            min: Vec3::new(-1.0, -1.0, -1.0),
            max: Vec3::new(1.0, 1.0, 1.0),
        };
        let (t0, t1) = aabb
            .clip_ray(&Vec3::new(0.0, 0.0, -5.0), &Vec3::new(0.0, 0.0, 1.0), 0.0, 100.0)
            .unwrap();
        assert_relative_eq!(t0, 4.0, epsilon = 1e-12);
        assert_relative_eq!(t1, 6.0, epsilon = 1e-12);
        assert!(aabb
            .clip_ray(&Vec3::new(0.0, 3.0, -5.0), &Vec3::new(0.0, 0.0, 1.0), 0.0, 100.0)
            .is_none());
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for &y in &[1e-4, 0.1, 0.6931471805599453, 5.0, 40.0] {
            assert_relative_eq!(softplus(softplus_inverse(y)), y, max_relative = 1e-12);
        }
    }

    #[test]
    fn wrap_degrees_range() {
        assert_eq!(wrap_degrees(180.0), 180.0);
        assert_eq!(wrap_degrees(-180.0), 180.0);
        assert_relative_eq!(wrap_degrees(270.0), -90.0);
        assert_relative_eq!(wrap_degrees(-270.0), 90.0);
        assert_relative_eq!(wrap_degrees(720.0 + 45.0), 45.0);
        let _ = PI;
    }
}
