//! Camera projection models: pinhole, pinhole with radial-tangential
//! distortion, and Kannala-Brandt fisheye.

use nalgebra::{Matrix2x3, Vector2, Vector3};

use super::RigidPose;
use crate::{Error, Result};

const MAX_INVERSION_ITERS: usize = 20;
const INVERSION_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CameraKind {
    Pinhole,
    /// Pinhole with `k1, k2, p1, p2` radial-tangential distortion.
    PinholeRadtan4,
    /// Equidistant fisheye with `k1..k4` odd polynomial in the incidence angle.
    KannalaBrandt4,
}

impl CameraKind {
    pub fn name(&self) -> &'static str {
        match self {
            CameraKind::Pinhole => "pinhole",
            CameraKind::PinholeRadtan4 => "pinhole-radtan4",
            CameraKind::KannalaBrandt4 => "kannala-brandt4",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "pinhole" => Some(CameraKind::Pinhole),
            "pinhole-radtan4" => Some(CameraKind::PinholeRadtan4),
            "kannala-brandt4" => Some(CameraKind::KannalaBrandt4),
            _ => None,
        }
    }

    pub fn num_distortion(&self) -> usize {
        match self {
            CameraKind::Pinhole => 0,
            CameraKind::PinholeRadtan4 | CameraKind::KannalaBrandt4 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: [f64; 4],
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            kind: CameraKind::Pinhole,
            fx,
            fy,
            cx,
            cy,
            distortion: [0.0; 4],
            width,
            height,
        }
    }

    pub fn radtan4(fx: f64, fy: f64, cx: f64, cy: f64, d: [f64; 4], width: u32, height: u32) -> Self {
        Self {
            kind: CameraKind::PinholeRadtan4,
            distortion: d,
            ..Self::pinhole(fx, fy, cx, cy, width, height)
        }
    }

    pub fn kannala_brandt4(fx: f64, fy: f64, cx: f64, cy: f64, k: [f64; 4], width: u32, height: u32) -> Self {
        Self {
            kind: CameraKind::KannalaBrandt4,
            distortion: k,
            ..Self::pinhole(fx, fy, cx, cy, width, height)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("image size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Whether the model can see points with non-positive depth.
    pub fn is_wide_angle(&self) -> bool {
        self.kind == CameraKind::KannalaBrandt4
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.project_with_jacobian(p, false).map(|(px, _)| px)
    }

    /// Projects a camera-frame point, optionally returning `∂pixel/∂p`.
    pub fn project_with_jacobian(&self, p: &Vector3<f64>, want_jac: bool) -> Result<(Vector2<f64>, Option<Matrix2x3<f64>>)> {
        match self.kind {
            CameraKind::Pinhole | CameraKind::PinholeRadtan4 => self.project_perspective(p, want_jac),
            CameraKind::KannalaBrandt4 => self.project_kb(p, want_jac),
        }
    }

    fn project_perspective(&self, p: &Vector3<f64>, want_jac: bool) -> Result<(Vector2<f64>, Option<Matrix2x3<f64>>)> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera { depth: p.z });
        }
        let iz = 1.0 / p.z;
        let (x, y) = (p.x * iz, p.y * iz);
        let (xd, yd, dd) = if self.kind == CameraKind::PinholeRadtan4 {
            let (xd, yd, m) = radtan_distort(&self.distortion, x, y);
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det <= 0.0 {
                return Err(Error::OutOfModelDomain(format!(
                    "radial-tangential distortion is not invertible at ({x:.3}, {y:.3})"
                )));
            }
            (xd, yd, m)
        } else {
            (x, y, [[1.0, 0.0], [0.0, 1.0]])
        };
        let px = Vector2::new(self.fx * xd + self.cx, self.fy * yd + self.cy);
        let jac = want_jac.then(|| {
            // d(x, y)/d(X, Y, Z)
            let n = Matrix2x3::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
            let d = nalgebra::Matrix2::new(
                self.fx * dd[0][0],
                self.fx * dd[0][1],
                self.fy * dd[1][0],
                self.fy * dd[1][1],
            );
            d * n
        });
        Ok((px, jac))
    }

    fn project_kb(&self, p: &Vector3<f64>, want_jac: bool) -> Result<(Vector2<f64>, Option<Matrix2x3<f64>>)> {
        let r2 = p.x * p.x + p.y * p.y;
        let r = r2.sqrt();
        if r2 + p.z * p.z == 0.0 {
            return Err(Error::OutOfModelDomain("cannot project the camera centre".into()));
        }
        let theta = r.atan2(p.z);
        let (theta_d, dtheta_d) = kb_poly(&self.distortion, theta);
        if dtheta_d <= 0.0 {
            return Err(Error::OutOfModelDomain(format!(
                "fisheye polynomial is not monotonic at incidence {theta:.3} rad"
            )));
        }
        if r < 1e-9 * p.z.abs().max(1e-300) || r == 0.0 {
            if p.z <= 0.0 {
                return Err(Error::OutOfModelDomain("point on the negative optical axis".into()));
            }
            let iz = 1.0 / p.z;
            let px = Vector2::new(self.fx * p.x * iz + self.cx, self.fy * p.y * iz + self.cy);
            let jac = want_jac.then(|| {
                Matrix2x3::new(
                    self.fx * iz,
                    0.0,
                    -self.fx * p.x * iz * iz,
                    0.0,
                    self.fy * iz,
                    -self.fy * p.y * iz * iz,
                )
            });
            return Ok((px, jac));
        }
        let g = theta_d / r;
        let px = Vector2::new(self.fx * g * p.x + self.cx, self.fy * g * p.y + self.cy);
        let jac = want_jac.then(|| {
            let rho2 = r2 + p.z * p.z;
            let dtheta_dr = p.z / rho2;
            let dtheta_dz = -r / rho2;
            // dg/dr
            let h = (dtheta_d * dtheta_dr - g) / r;
            let (ux, uy) = (p.x / r, p.y / r);
            let dg_dx = h * ux;
            let dg_dy = h * uy;
            let dg_dz = dtheta_d * dtheta_dz / r;
            Matrix2x3::new(
                self.fx * (g + p.x * dg_dx),
                self.fx * p.x * dg_dy,
                self.fx * p.x * dg_dz,
                self.fy * p.y * dg_dx,
                self.fy * (g + p.y * dg_dy),
                self.fy * p.y * dg_dz,
            )
        });
        Ok((px, jac))
    }

    /// Unit-norm viewing ray through pixel `px`.
    pub fn unproject(&self, px: &Vector2<f64>) -> Result<Vector3<f64>> {
        let mx = (px.x - self.cx) / self.fx;
        let my = (px.y - self.cy) / self.fy;
        match self.kind {
            CameraKind::Pinhole => Ok(Vector3::new(mx, my, 1.0).normalize()),
            CameraKind::PinholeRadtan4 => {
                let (x, y) = radtan_undistort(&self.distortion, mx, my)?;
                Ok(Vector3::new(x, y, 1.0).normalize())
            }
            CameraKind::KannalaBrandt4 => {
                let theta_d = (mx * mx + my * my).sqrt();
                if theta_d < 1e-15 {
                    return Ok(Vector3::z());
                }
                let theta = kb_invert(&self.distortion, theta_d)?;
                let s = theta.sin() / theta_d;
                Ok(Vector3::new(mx * s, my * s, theta.cos()))
            }
        }
    }
}

/// Returns distorted normalized coordinates and the 2×2 Jacobian of the map.
fn radtan_distort(d: &[f64; 4], x: f64, y: f64) -> (f64, f64, [[f64; 2]; 2]) {
    let [k1, k2, p1, p2] = *d;
    let r2 = x * x + y * y;
    let rad = 1.0 + k1 * r2 + k2 * r2 * r2;
    let xd = x * rad + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
    let yd = y * rad + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
    let drad = k1 + 2.0 * k2 * r2;
    let (drad_dx, drad_dy) = (2.0 * x * drad, 2.0 * y * drad);
    let m = [
        [
            rad + x * drad_dx + 2.0 * p1 * y + 6.0 * p2 * x,
            x * drad_dy + 2.0 * p1 * x + 2.0 * p2 * y,
        ],
        [
            y * drad_dx + 2.0 * p1 * x + 2.0 * p2 * y,
            rad + y * drad_dy + 6.0 * p1 * y + 2.0 * p2 * x,
        ],
    ];
    (xd, yd, m)
}

fn radtan_undistort(d: &[f64; 4], xd: f64, yd: f64) -> Result<(f64, f64)> {
    let [k1, k2, p1, p2] = *d;
    let (mut x, mut y) = (xd, yd);
    let mut step = f64::INFINITY;
    for _ in 0..MAX_INVERSION_ITERS {
        let r2 = x * x + y * y;
        let rad = 1.0 + k1 * r2 + k2 * r2 * r2;
        let dx = 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x);
        let dy = p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y;
        let nx = (xd - dx) / rad;
        let ny = (yd - dy) / rad;
        step = ((nx - x).powi(2) + (ny - y).powi(2)).sqrt();
        x = nx;
        y = ny;
        if !step.is_finite() {
            break;
        }
        if step < 1e-14 {
            return Ok((x, y));
        }
    }
    if step < INVERSION_TOL {
        Ok((x, y))
    } else {
        Err(Error::NonConvergence(format!(
            "radial-tangential inversion stalled at step {step:.3e} after {MAX_INVERSION_ITERS} iterations"
        )))
    }
}

/// `θ_d(θ)` and its derivative.
fn kb_poly(k: &[f64; 4], theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    let t4 = t2 * t2;
    let t6 = t4 * t2;
    let t8 = t4 * t4;
    let v = theta * (1.0 + k[0] * t2 + k[1] * t4 + k[2] * t6 + k[3] * t8);
    let d = 1.0 + 3.0 * k[0] * t2 + 5.0 * k[1] * t4 + 7.0 * k[2] * t6 + 9.0 * k[3] * t8;
    (v, d)
}

fn kb_invert(k: &[f64; 4], theta_d: f64) -> Result<f64> {
    let mut theta = theta_d.min(std::f64::consts::PI);
    let mut step = f64::INFINITY;
    for _ in 0..MAX_INVERSION_ITERS {
        let (v, d) = kb_poly(k, theta);
        if d <= 0.0 {
            return Err(Error::OutOfModelDomain(format!(
                "fisheye polynomial is not monotonic near incidence {theta:.3} rad"
            )));
        }
        step = (v - theta_d) / d;
        theta -= step;
        if step.abs() < 1e-14 {
            break;
        }
    }
    if !(step.abs() < INVERSION_TOL) {
        return Err(Error::NonConvergence(format!(
            "fisheye inversion stalled at step {step:.3e} after {MAX_INVERSION_ITERS} iterations"
        )));
    }
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(Error::OutOfModelDomain(format!("incidence {theta:.3} rad outside [0, π]")));
    }
    Ok(theta)
}

/// Remaps pixels from `src` into the pinhole camera `dst` sharing the same
/// optical centre. `None` marks rays outside the destination frustum.
pub fn undistort_points(src: &CameraModel, dst: &CameraModel, pts: &[Vector2<f64>]) -> Result<Vec<Option<Vector2<f64>>>> {
    if dst.kind != CameraKind::Pinhole {
        return Err(Error::InvalidInput(format!(
            "destination camera must be pinhole, got {}",
            dst.kind.name()
        )));
    }
    pts.iter()
        .map(|pt| {
            let ray = src.unproject(pt)?;
            if ray.z <= 0.0 {
                return Ok(None);
            }
            let out = dst.project(&ray)?;
            Ok(dst.in_image(&out).then_some(out))
        })
        .collect()
}

/// A camera with its pose relative to the device body.
#[derive(Clone, Debug, PartialEq)]
pub struct RigCamera {
    pub id: String,
    pub model: CameraModel,
    /// Maps device-frame points into the camera frame.
    pub camera_from_device: RigidPose,
}
