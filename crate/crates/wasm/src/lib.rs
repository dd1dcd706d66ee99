//! Browser bindings for three small interactive views: the error-to-score
//! curve, a noisy Sim(3) alignment, and the whitened-residual histogram.

use cpgt_core::alignment::umeyama;
use cpgt_core::geometry::{Rotation, Similarity};
use cpgt_core::metrics;
use cpgt_core::validation::{histogram, residual_stats};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use statrs::function::erf::erf;
use wasm_bindgen::prelude::*;

/// Score of one alignment error in meters; NaN for invalid input.
#[wasm_bindgen]
pub fn score(error_m: f64) -> f64 {
    metrics::score(error_m).unwrap_or(f64::NAN)
}

/// Scores at `samples` evenly spaced errors over `[0, max_error_m]`.
#[wasm_bindgen]
pub fn score_curve(max_error_m: f64, samples: usize) -> Vec<f64> {
    if samples < 2 || !(max_error_m > 0.0) {
        return Vec::new();
    }
    (0..samples)
        .map(|i| score(max_error_m * i as f64 / (samples - 1) as f64))
        .collect()
}

/// Mean score over a set of errors; untriangulated points pass `Infinity`.
#[wasm_bindgen]
pub fn sequence_score(errors_m: &[f64]) -> f64 {
    metrics::sequence_score(errors_m).unwrap_or(f64::NAN)
}

#[wasm_bindgen]
pub struct AlignmentDemo {
    scale: f64,
    yaw_deg: f64,
    tilt_deg: f64,
    rmse: f64,
    errors: Vec<f64>,
    local_xy: Vec<f64>,
    world_xy: Vec<f64>,
    aligned_xy: Vec<f64>,
}

#[wasm_bindgen]
impl AlignmentDemo {
    #[wasm_bindgen(getter)]
    pub fn scale(&self) -> f64 {
        self.scale
    }

    #[wasm_bindgen(getter)]
    pub fn yaw_deg(&self) -> f64 {
        self.yaw_deg
    }

    /// Angle between the aligned and true vertical, degrees.
    #[wasm_bindgen(getter)]
    pub fn tilt_deg(&self) -> f64 {
        self.tilt_deg
    }

    #[wasm_bindgen(getter)]
    pub fn rmse(&self) -> f64 {
        self.rmse
    }

    /// Per-point distance between aligned and surveyed positions.
    #[wasm_bindgen(getter)]
    pub fn errors(&self) -> Vec<f64> {
        self.errors.clone()
    }

    /// Interleaved `x, y` of the points in the trajectory frame.
    #[wasm_bindgen(getter)]
    pub fn local_xy(&self) -> Vec<f64> {
        self.local_xy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn world_xy(&self) -> Vec<f64> {
        self.world_xy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn aligned_xy(&self) -> Vec<f64> {
        self.aligned_xy.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn score(&self) -> f64 {
        sequence_score(&self.errors)
    }
}

fn xy(points: &[Vector3<f64>]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y]).collect()
}

/// Surveys `points` random control points, expresses them in a local frame
/// with the given scale and yaw, adds triangulation noise, and recovers the
/// similarity in closed form.
#[wasm_bindgen]
pub fn align_demo(seed: u32, points: usize, noise_m: f64, scale: f64, yaw_deg: f64) -> Result<AlignmentDemo, JsError> {
    simulate_alignment(seed, points, noise_m, scale, yaw_deg).map_err(|e| JsError::new(&e))
}

pub fn simulate_alignment(seed: u32, points: usize, noise_m: f64, scale: f64, yaw_deg: f64) -> Result<AlignmentDemo, String> {
    if points < 3 {
        return Err("at least three control points are needed".into());
    }
    if !(noise_m >= 0.0 && scale > 0.0) {
        return Err("noise must be non-negative and scale positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let spread = Uniform::new(-20.0, 20.0).map_err(|e| e.to_string())?;
    let height = Uniform::new(-1.0, 3.0).map_err(|e| e.to_string())?;
    let noise = Normal::new(0.0, noise_m).map_err(|e| e.to_string())?;
    let world: Vec<Vector3<f64>> = (0..points)
        .map(|_| Vector3::new(spread.sample(&mut rng), spread.sample(&mut rng), height.sample(&mut rng)))
        .collect();
    let truth = Similarity::new(scale, Rotation::exp(&Vector3::new(0.0, 0.0, yaw_deg.to_radians())), Vector3::new(4.0, -3.0, 0.5));
    let to_local = truth.inverse();
    let local: Vec<Vector3<f64>> = world
        .iter()
        .map(|p| to_local.apply(&(p + Vector3::from_fn(|_, _| noise.sample(&mut rng)))))
        .collect();
    let t = umeyama(&local, &world, true).map_err(|e| e.to_string())?;
    let aligned: Vec<Vector3<f64>> = local.iter().map(|p| t.apply(p)).collect();
    let errors: Vec<f64> = aligned.iter().zip(&world).map(|(a, w)| (a - w).norm()).collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    let yaw = t.rotation.log().z.to_degrees();
    Ok(AlignmentDemo {
        scale: t.scale,
        yaw_deg: yaw,
        tilt_deg: metrics::gravity_error(&t),
        rmse,
        errors,
        local_xy: xy(&local),
        world_xy: xy(&world),
        aligned_xy: xy(&aligned),
    })
}

#[wasm_bindgen]
pub struct ResidualDemo {
    edges: Vec<f64>,
    counts: Vec<u32>,
    density: Vec<f64>,
    std: f64,
    ks_distance: f64,
    outside: u32,
}

#[wasm_bindgen]
impl ResidualDemo {
    #[wasm_bindgen(getter)]
    pub fn edges(&self) -> Vec<f64> {
        self.edges.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn counts(&self) -> Vec<u32> {
        self.counts.clone()
    }

    /// Expected count per bin under a unit normal.
    #[wasm_bindgen(getter)]
    pub fn density(&self) -> Vec<f64> {
        self.density.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn std(&self) -> f64 {
        self.std
    }

    #[wasm_bindgen(getter)]
    pub fn ks_distance(&self) -> f64 {
        self.ks_distance
    }

    /// Samples outside the plotted range.
    #[wasm_bindgen(getter)]
    pub fn outside(&self) -> u32 {
        self.outside
    }
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Residuals drawn with `sigma_true` and whitened with `sigma_assumed`,
/// binned over `[-range, range]`.
#[wasm_bindgen]
pub fn residual_demo(seed: u32, samples: usize, sigma_true: f64, sigma_assumed: f64, bins: usize, range: f64) -> Result<ResidualDemo, JsError> {
    simulate_residuals(seed, samples, sigma_true, sigma_assumed, bins, range).map_err(|e| JsError::new(&e))
}

pub fn simulate_residuals(
    seed: u32,
    samples: usize,
    sigma_true: f64,
    sigma_assumed: f64,
    bins: usize,
    range: f64,
) -> Result<ResidualDemo, String> {
    if !(sigma_true > 0.0 && sigma_assumed > 0.0 && range > 0.0) || bins == 0 || samples < 2 {
        return Err("sigmas and range must be positive, with at least one bin and two samples".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let noise = Normal::new(0.0, sigma_true).map_err(|e| e.to_string())?;
    let white: Vec<f64> = (0..samples).map(|_| noise.sample(&mut rng) / sigma_assumed).collect();
    let h = histogram(&white, bins, -range, range).map_err(|e| e.to_string())?;
    let stats = residual_stats(&white).map_err(|e| e.to_string())?;
    let density = h
        .edges
        .windows(2)
        .map(|w| samples as f64 * (normal_cdf(w[1]) - normal_cdf(w[0])))
        .collect();
    Ok(ResidualDemo {
        counts: h.counts.iter().map(|&c| c as u32).collect(),
        edges: h.edges,
        density,
        std: stats.std,
        ks_distance: stats.ks_distance,
        outside: (h.underflow + h.overflow) as u32,
    })
}
