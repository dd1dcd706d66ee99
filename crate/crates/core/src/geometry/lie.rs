//! Rotations, rigid poses and similarity transforms.
//!
//! Rotations are unit quaternions. Tangent increments are applied on the
//! right (`R ← R·Exp(δ)`), translations are perturbed additively and the
//! similarity scale is perturbed in log space (`s ← s·exp(δσ)`).

use nalgebra::{Matrix3, Quaternion, Unit, UnitQuaternion, Vector3};

const SMALL_ANGLE: f64 = 1e-8;

/// Skew-symmetric matrix of `v`, so that `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of the axis-angle vector `phi`.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Matrix3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = hat(phi);
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let c = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// A 3D rotation stored as a unit quaternion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(UnitQuaternion<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(UnitQuaternion::identity())
    }

    /// Builds a rotation from quaternion coefficients, normalizing them.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self(Unit::new_normalize(Quaternion::new(w, x, y, z)))
    }

    /// Uses the coefficients as given; the caller guarantees unit norm.
    pub fn from_wxyz_unchecked(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self(Unit::new_unchecked(Quaternion::new(w, x, y, z)))
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self(q)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(m);
        Self(UnitQuaternion::from_rotation_matrix(&rot))
    }

    pub fn exp(phi: &Vector3<f64>) -> Self {
        Self(UnitQuaternion::from_scaled_axis(*phi))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Axis-angle vector with angle in `[0, π]`.
    pub fn log(&self) -> Vector3<f64> {
        let q = self.canonical();
        q.0.scaled_axis()
    }

    pub fn quaternion(&self) -> &UnitQuaternion<f64> {
        &self.0
    }

    /// `(w, x, y, z)` coefficients.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.0.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Same rotation with the quaternion sign chosen so that `w ≥ 0`.
    pub fn canonical(&self) -> Self {
        if self.0.w < 0.0 {
            Self(Unit::new_unchecked(-self.0.into_inner()))
        } else {
            *self
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.0.to_rotation_matrix().into_inner()
    }

    /// `self · other`, renormalized.
    pub fn compose(&self, other: &Rotation) -> Rotation {
        Self(Unit::new_normalize(self.0.into_inner() * other.0.into_inner()))
    }

    pub fn inverse(&self) -> Rotation {
        Self(self.0.inverse())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Right retraction `R·Exp(δ)`.
    pub fn plus(&self, delta: &Vector3<f64>) -> Rotation {
        self.compose(&Rotation::exp(delta))
    }

    /// Tangent `δ` with `other = self.plus(δ)`.
    pub fn minus(&self, other: &Rotation) -> Vector3<f64> {
        self.inverse().compose(other).log()
    }

    /// Geodesic distance in radians.
    pub fn angle_to(&self, other: &Rotation) -> f64 {
        self.minus(other).norm()
    }
}

/// Rigid-body transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct RigidPose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let inv = self.rotation.inverse();
        RigidPose {
            rotation: inv,
            translation: -inv.rotate(&self.translation),
        }
    }

    /// Retraction with tangent `[δθ, δt]`: rotation on the right, translation additive.
    pub fn plus(&self, delta: &[f64]) -> RigidPose {
        let dr = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        RigidPose {
            rotation: self.rotation.plus(&dr),
            translation: self.translation + dt,
        }
    }
}

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Similarity {
    fn default() -> Self {
        Self::identity()
    }
}

impl From<RigidPose> for Similarity {
    fn from(p: RigidPose) -> Self {
        Similarity::new(1.0, p.rotation, p.translation)
    }
}

impl Similarity {
    pub fn new(scale: f64, rotation: Rotation, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0, "similarity scale must be positive");
        Self { scale, rotation, translation }
    }

    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Rotation::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * self.rotation.rotate(p) + self.translation
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * other.scale,
            rotation: self.rotation.compose(&other.rotation),
            translation: self.scale * self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Similarity {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        Similarity {
            scale: inv_scale,
            rotation: inv_rot,
            translation: -inv_scale * inv_rot.rotate(&self.translation),
        }
    }

    /// Maps a rigid pose `world_from_x` expressed in the source frame into the
    /// target frame. The scale is absorbed by the translation only.
    pub fn transform_pose(&self, pose: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation.compose(&pose.rotation),
            translation: self.apply(&pose.translation),
        }
    }

    /// Retraction with 7-dim tangent `[δθ, δt, δσ]`.
    pub fn plus(&self, delta: &[f64]) -> Similarity {
        let dr = Vector3::new(delta[0], delta[1], delta[2]);
        let dt = Vector3::new(delta[3], delta[4], delta[5]);
        Similarity {
            scale: self.scale * delta[6].exp(),
            rotation: self.rotation.plus(&dr),
            translation: self.translation + dt,
        }
    }

    /// Largest displacement between the actions of two transforms over `points`.
    pub fn max_discrepancy(&self, other: &Similarity, points: &[Vector3<f64>]) -> f64 {
        points
            .iter()
            .map(|p| (self.apply(p) - other.apply(p)).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn random_rotation(rng: &mut impl Rng) -> Rotation {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        Rotation::exp(&(v * 2.0))
    }

    fn random_sim(rng: &mut impl Rng) -> Similarity {
        Similarity::new(
            rng.random_range(0.3..3.0),
            random_rotation(rng),
            Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
        )
    }

    #[test]
    fn sim3_apply_examples() {
        let p = Vector3::new(1.0, 2.0, 3.0);
        assert_eq!(Similarity::identity().apply(&p), p);

        let t = Similarity::new(2.0, Rotation::identity(), Vector3::zeros());
        assert_relative_eq!(t.apply(&Vector3::x()), Vector3::new(2.0, 0.0, 0.0));

        let t = Similarity::new(1.0, Rotation::from_axis_angle(&Vector3::z(), FRAC_PI_2), Vector3::new(0.0, 0.0, 1.0));
        let got = t.apply(&Vector3::x());
        assert_relative_eq!(got, Vector3::new(0.0, 1.0, 1.0), epsilon = 1e-12);
        // matrix form
        let m = t.rotation.matrix();
        assert_relative_eq!(m * Vector3::x() + t.translation, got, epsilon = 1e-12);
    }

    #[test]
    fn sim3_inverse_example() {
        let t = Similarity::new(2.0, Rotation::identity(), Vector3::new(1.0, 0.0, 0.0));
        let inv = t.inverse();
        assert_relative_eq!(inv.scale, 0.5);
        assert_relative_eq!(inv.translation, Vector3::new(-0.5, 0.0, 0.0));
        let p = Vector3::new(0.3, -2.0, 7.0);
        assert_relative_eq!(inv.apply(&t.apply(&p)), p, epsilon = 1e-12);
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_sim(&mut rng);
        let c = Similarity::identity().compose(&t);
        assert_relative_eq!(c.scale, t.scale);
        assert_relative_eq!(c.translation, t.translation);
        let id = t.compose(&t.inverse());
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(id.rotation.log().norm() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn group_laws_on_random_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let (a, b, c) = (random_sim(&mut rng), random_sim(&mut rng), random_sim(&mut rng));
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let lhs = a.compose(&b).compose(&c).apply(&p);
            let rhs = a.compose(&b.compose(&c)).apply(&p);
            assert!((lhs - rhs).norm() < 1e-9);
            assert!((a.compose(&b).apply(&p) - a.apply(&b.apply(&p))).norm() < 1e-9);
            assert!((a.inverse().apply(&a.apply(&p)) - p).norm() < 1e-9 * p.norm().max(1.0));
        }
    }

    #[test]
    fn unit_scale_matches_rigid_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng);
        let t = Vector3::new(1.0, -2.0, 0.5);
        let pose = RigidPose::new(r, t);
        let sim = Similarity::from(pose);
        let p = Vector3::new(0.2, 0.4, -1.0);
        assert_eq!(pose.apply(&p), sim.apply(&p));
    }

    #[test]
    fn quaternion_stays_normalized_over_long_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut acc = Rotation::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&random_rotation(&mut rng));
        }
        let n = acc.quaternion().into_inner().norm();
        assert!((n - 1.0).abs() < 1e-9);
    }

    #[test]
    fn exp_log_and_jacobians() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let phi = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
            let r = Rotation::exp(&phi);
            assert_relative_eq!(r.log(), phi, epsilon = 1e-10);
            assert_relative_eq!(r.matrix(), so3_exp(&phi), epsilon = 1e-12);
            let jr = right_jacobian(&phi);
            assert_relative_eq!(jr * right_jacobian_inv(&phi), Matrix3::identity(), epsilon = 1e-10);
            let d = Vector3::new(1e-6, -2e-6, 0.5e-6);
            let lhs = Rotation::exp(&(phi + d));
            let rhs = r.plus(&(jr * d));
            assert!(lhs.angle_to(&rhs) < 1e-11);
        }
    }

    #[test]
    fn canonical_sign() {
        let r = Rotation::from_wxyz(-0.5, 0.5, 0.5, 0.5);
        let c = r.canonical();
        assert!(c.wxyz()[0] >= 0.0);
        assert!(r.angle_to(&c) < 1e-12);
    }
}
