//! Mean-scale Gaussian conditional: likelihood of a unit quantization bin.

use candle_core::Tensor;

use super::{LIKELIHOOD_MIN, SIGMA_MIN};
use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Probability mass of `[d - 0.5, d + 0.5]` under `N(0, sigma²)`, with the
/// scale and likelihood floors applied. Evaluated on the lower tail for
/// precision.
pub fn bin_probability(d: f64, sigma: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    let a = d.abs();
    let p = normal_cdf((0.5 - a) / s) - normal_cdf((-0.5 - a) / s);
    p.max(LIKELIHOOD_MIN)
}

/// Differentiable per-element bin likelihood (floored).
pub fn gaussian_likelihood(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    if y.dims() != mu.dims() || y.dims() != sigma.dims() {
        return Err(Error::Shape(format!(
            "latent {:?}, mean {:?}, scale {:?}",
            y.dims(),
            mu.dims(),
            sigma.dims()
        )));
    }
    let s = sigma.clamp(SIGMA_MIN, f64::INFINITY)?;
    let a = (y - mu)?.abs()?;
    let upper = std_cdf(&(a.affine(-1.0, 0.5)? / &s)?)?;
    let lower = std_cdf(&(a.affine(-1.0, -0.5)? / &s)?)?;
    let p = (upper - lower)?;
    Ok(p.clamp(LIKELIHOOD_MIN, f64::INFINITY)?)
}

fn std_cdf(x: &Tensor) -> Result<Tensor> {
    Ok(((x * FRAC_1_SQRT_2)?.erf()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Total bits `−Σ log2 p` over all elements, as a scalar tensor.
pub fn rate_gaussian(y: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<Tensor> {
    bits_from_likelihood(&gaussian_likelihood(y, mu, sigma)?)
}

pub fn bits_from_likelihood(p: &Tensor) -> Result<Tensor> {
    Ok((p.log()?.sum_all()? * (-std::f64::consts::LOG2_E))?)
}
