//! Linear stochastic interpolant
//! `x_t = (1 - t) x0 + t x1 + gamma(t) z`, `gamma(t) = sqrt(2 t (1 - t))`.
//!
//! The flow target `x1 - x0` is the time derivative of the deterministic
//! part; the denoiser target is `z`, and the score follows as
//! `s = -n / gamma(t)`.

use ndarray::{Array2, Zip};
use rand::Rng as _;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpolantError {
    #[error("singular at t = {0} (gamma or its derivative vanishes or diverges)")]
    Singularity(f64),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T, E = InterpolantError> = std::result::Result<T, E>;

/// Smallest distance from the endpoints used when sampling training times.
pub const DEFAULT_T_MIN: f64 = 1e-3;

pub fn gamma(t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(InterpolantError::Argument(format!("t = {t} outside [0, 1]")));
    }
    Ok((2.0 * t * (1.0 - t)).sqrt())
}

/// `(1 - 2t) / sqrt(2 t (1 - t))`, defined on the open interval only.
pub fn gamma_dot(t: f64) -> Result<f64> {
    if !(t > 0.0 && t < 1.0) {
        return Err(InterpolantError::Singularity(t));
    }
    Ok((1.0 - 2.0 * t) / (2.0 * t * (1.0 - t)).sqrt())
}

/// One training draw of the interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantSample {
    pub t: f64,
    pub x_t: Array2<f64>,
    pub z: Array2<f64>,
    pub flow_target: Array2<f64>,
}

impl InterpolantSample {
    /// Rebuild `x_t` from stored endpoints and noise.
    pub fn recompose(&self, x0: &Array2<f64>) -> Result<Array2<f64>> {
        let g = gamma(self.t)?;
        let x1 = x0 + &self.flow_target;
        Ok(compose(x0, &x1, &self.z, self.t, g))
    }
}

fn compose(x0: &Array2<f64>, x1: &Array2<f64>, z: &Array2<f64>, t: f64, g: f64) -> Array2<f64> {
    let mut out = Array2::zeros(x0.dim());
    Zip::from(&mut out)
        .and(x0)
        .and(x1)
        .and(z)
        .for_each(|o, &a, &b, &n| *o = (1.0 - t) * a + t * b + g * n);
    out
}

pub fn standard_normal(dim: (usize, usize), rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn(dim, || rng.sample(StandardNormal))
}

/// Interpolant with caller-provided noise `z`.
pub fn sample_point_with_noise(x0: &Array2<f64>, x1: &Array2<f64>, t: f64, z: Array2<f64>) -> Result<InterpolantSample> {
    if x0.dim() != x1.dim() || z.dim() != x0.dim() {
        return Err(InterpolantError::Argument(format!(
            "shapes x0 {:?}, x1 {:?}, z {:?} differ",
            x0.dim(),
            x1.dim(),
            z.dim()
        )));
    }
    let g = gamma(t)?;
    let x_t = compose(x0, x1, &z, t, g);
    Ok(InterpolantSample { t, x_t, z, flow_target: x1 - x0 })
}

pub fn sample_point(x0: &Array2<f64>, x1: &Array2<f64>, t: f64, rng: &mut Rng) -> Result<InterpolantSample> {
    if x0.dim() != x1.dim() {
        return Err(InterpolantError::Argument(format!("shapes {:?} and {:?} differ", x0.dim(), x1.dim())));
    }
    let z = standard_normal(x0.dim(), rng);
    sample_point_with_noise(x0, x1, t, z)
}

/// `s(t, x) = -n(t, x) / gamma(t)`.
pub fn score_from_denoiser(n: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(InterpolantError::Singularity(t));
    }
    let g = gamma(t)?;
    Ok(n.mapv(|v| -v / g))
}

/// Exact fields for independent standard-normal endpoints (any shape,
/// elementwise): `v = (2t - 1) x`, `n = gamma(t) x`, `s = -x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianCoupling;

impl GaussianCoupling {
    pub fn flow(&self, t: f64, x: &Array2<f64>) -> Array2<f64> {
        x * (2.0 * t - 1.0)
    }

    pub fn denoiser(&self, t: f64, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(x * gamma(t)?)
    }
}
