use crate::geometry::{RigidPose, Similarity};

/// Default timestamp association tolerance: 10 ms.
pub const DEFAULT_ASSOC_TOL_NS: i64 = 10_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StampedPose {
    pub timestamp_ns: i64,
    /// World-from-device.
    pub pose: RigidPose,
}

/// Time-ordered device poses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Self {
        Self { poses }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Seconds between first and last pose.
    pub fn span_s(&self) -> f64 {
        match (self.poses.first(), self.poses.last()) {
            (Some(a), Some(b)) => (b.timestamp_ns - a.timestamp_ns) as f64 * 1e-9,
            _ => 0.0,
        }
    }

    /// Index of the pose closest in time to `t`, if within `tol_ns`.
    pub fn nearest(&self, t: i64, tol_ns: i64) -> Option<usize> {
        let i = self.poses.partition_point(|p| p.timestamp_ns < t);
        let mut best: Option<(usize, i64)> = None;
        for j in [i.wrapping_sub(1), i] {
            if let Some(p) = self.poses.get(j) {
                let d = (p.timestamp_ns - t).abs();
                if d <= tol_ns && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    pub fn pose_at(&self, t: i64, tol_ns: i64) -> Option<&RigidPose> {
        self.nearest(t, tol_ns).map(|i| &self.poses[i].pose)
    }

    pub fn transformed(&self, t: &Similarity) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| StampedPose {
                    timestamp_ns: p.timestamp_ns,
                    pose: t.transform_pose(&p.pose),
                })
                .collect(),
        }
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.poses.windows(2).all(|w| w[1].timestamp_ns > w[0].timestamp_ns)
    }
}
