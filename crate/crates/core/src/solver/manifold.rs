use nalgebra::Vector3;

use crate::geometry::{RigidPose, Rotation, Similarity};

/// Parameterization of a parameter block.
///
/// Ambient layouts: rotation `[qw, qx, qy, qz]`; rigid pose
/// `[qw, qx, qy, qz, tx, ty, tz]`; similarity `[qw, qx, qy, qz, tx, ty, tz, s]`.
/// Tangent layouts: rotation `[δθ]`, rigid pose `[δθ, δt]`, similarity
/// `[δθ, δt, δlog s]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    Euclidean(usize),
    Rotation,
    RigidPose,
    Similarity,
}

impl Manifold {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::Rotation => 4,
            Manifold::RigidPose => 7,
            Manifold::Similarity => 8,
        }
    }

    pub fn tangent_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(n) => *n,
            Manifold::Rotation => 3,
            Manifold::RigidPose => 6,
            Manifold::Similarity => 7,
        }
    }

    pub fn plus(&self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean(_) => x.iter().zip(delta).map(|(a, b)| a + b).collect(),
            Manifold::Rotation => {
                let r = decode_rotation(x).plus(&Vector3::new(delta[0], delta[1], delta[2]));
                encode_rotation(&r).to_vec()
            }
            Manifold::RigidPose => encode_pose(&decode_pose(x).plus(delta)).to_vec(),
            Manifold::Similarity => encode_similarity(&decode_similarity(x).plus(delta)).to_vec(),
        }
    }

    /// Tangent vector `δ` such that `plus(x, δ) ≈ y`.
    pub fn minus(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match self {
            Manifold::Euclidean(_) => y.iter().zip(x).map(|(a, b)| a - b).collect(),
            Manifold::Rotation => decode_rotation(x).minus(&decode_rotation(y)).as_slice().to_vec(),
            Manifold::RigidPose => {
                let (a, b) = (decode_pose(x), decode_pose(y));
                let dr = a.rotation.minus(&b.rotation);
                let dt = b.translation - a.translation;
                vec![dr.x, dr.y, dr.z, dt.x, dt.y, dt.z]
            }
            Manifold::Similarity => {
                let (a, b) = (decode_similarity(x), decode_similarity(y));
                let dr = a.rotation.minus(&b.rotation);
                let dt = b.translation - a.translation;
                vec![dr.x, dr.y, dr.z, dt.x, dt.y, dt.z, (b.scale / a.scale).ln()]
            }
        }
    }
}

pub fn encode_rotation(r: &Rotation) -> [f64; 4] {
    r.wxyz()
}

pub fn decode_rotation(x: &[f64]) -> Rotation {
    Rotation::from_wxyz(x[0], x[1], x[2], x[3])
}

pub fn encode_pose(p: &RigidPose) -> [f64; 7] {
    let q = p.rotation.wxyz();
    let t = p.translation;
    [q[0], q[1], q[2], q[3], t.x, t.y, t.z]
}

pub fn decode_pose(x: &[f64]) -> RigidPose {
    RigidPose::new(decode_rotation(x), Vector3::new(x[4], x[5], x[6]))
}

pub fn encode_similarity(s: &Similarity) -> [f64; 8] {
    let q = s.rotation.wxyz();
    let t = s.translation;
    [q[0], q[1], q[2], q[3], t.x, t.y, t.z, s.scale]
}

pub fn decode_similarity(x: &[f64]) -> Similarity {
    Similarity::new(x[7], decode_rotation(x), Vector3::new(x[4], x[5], x[6]))
}

pub fn decode_vec3(x: &[f64]) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}
