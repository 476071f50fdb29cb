//! Learned univariate density per channel, parameterized by a monotone
//! cumulative function (Ballé et al. "entropy bottleneck").

use candle_core::{DType, Device, Tensor};

use super::LIKELIHOOD_MIN;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Init, Path};

const FILTERS: [usize; 3] = [3, 3, 3];
const INIT_SCALE: f64 = 10.0;

pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

impl FactorizedPrior {
    pub fn new(p: &Path, channels: usize) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(1)
            .chain(FILTERS.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let scale = INIT_SCALE.powf(1.0 / (FILTERS.len() + 1) as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for i in 0..dims.len() - 1 {
            let init = (1.0 / scale / dims[i + 1] as f64).exp_m1().ln();
            matrices.push(p.param(&format!("matrix{i}"), &[channels, dims[i + 1], dims[i]], Init::Const(init))?);
            biases.push(p.param(&format!("bias{i}"), &[channels, dims[i + 1], 1], Init::Uniform(-0.5, 0.5))?);
            if i < dims.len() - 2 {
                factors.push(p.param(&format!("factor{i}"), &[channels, dims[i + 1], 1], Init::Zeros)?);
            }
        }
        Ok(Self {
            channels,
            matrices,
            biases,
            factors,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dtype(&self) -> DType {
        self.matrices[0].dtype()
    }

    pub fn device(&self) -> &Device {
        self.matrices[0].device()
    }

    /// Logit of the cumulative at `x` of shape (C, 1, L).
    fn logits_cdf(&self, x: &Tensor) -> Result<Tensor> {
        let mut logits = x.clone();
        for i in 0..self.matrices.len() {
            let m = softplus(&self.matrices[i])?;
            logits = m.matmul(&logits)?.broadcast_add(&self.biases[i])?;
            if i < self.factors.len() {
                let f = self.factors[i].tanh()?;
                logits = (&logits + logits.tanh()?.broadcast_mul(&f)?)?;
            }
        }
        Ok(logits)
    }

    /// Per-element probability of the unit bin around each value of `z`
    /// (N, C, h, w), floored at `LIKELIHOOD_MIN`.
    pub fn likelihood(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.bin_mass(z)?.clamp(LIKELIHOOD_MIN, f64::INFINITY)?)
    }

    fn bin_mass(&self, z: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = z.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("factorized prior has {} channels, got {c}", self.channels)));
        }
        // (C, 1, N·h·w)
        let v = z.transpose(0, 1)?.contiguous()?.reshape((c, 1, n * h * w))?;
        let lower = self.logits_cdf(&(&v - 0.5)?)?;
        let upper = self.logits_cdf(&(&v + 0.5)?)?;
        // evaluate on whichever tail keeps the sigmoids away from 1
        let sign = (&lower + &upper)?.sign()?.neg()?.detach();
        let p = (sigmoid(&(&sign * &upper)?)? - sigmoid(&(&sign * &lower)?)?)?.abs()?;
        Ok(p.reshape((c, n, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    /// `−Σ log2 p(z)`, scalar tensor.
    pub fn rate(&self, z: &Tensor) -> Result<Tensor> {
        super::gaussian::bits_from_likelihood(&self.likelihood(z)?)
    }

    /// Cumulative (not logit) at arbitrary points for every channel:
    /// `points` has `L` values, result is `C × L` in f64.
    pub fn cdf_at(&self, points: &[f64]) -> Result<Vec<Vec<f64>>> {
        let c = self.channels;
        let dev = self.matrices[0].device();
        let dt = self.matrices[0].dtype();
        let x = Tensor::from_slice(points, (1, 1, points.len()), dev)?
            .to_dtype(dt)?
            .broadcast_as((c, 1, points.len()))?
            .contiguous()?;
        let cdf = sigmoid(&self.logits_cdf(&x)?)?.to_dtype(DType::F64)?;
        let cdf = cdf.reshape((c, points.len()))?.to_vec2::<f64>()?;
        Ok(cdf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn bits_bounded_and_nonnegative() {
        let store = ParamStore::new(3);
        let prior = FactorizedPrior::new(&store.root().pp("p"), 4).unwrap();
        let z = Tensor::from_vec(
            (0..4 * 9).map(|i| (i as f32 - 18.0) * 7.0).collect::<Vec<_>>(),
            (1, 4, 3, 3),
            &Device::Cpu,
        )
        .unwrap();
        let p = prior.likelihood(&z).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for &pi in &p {
            let bits = -(pi as f64).log2();
            assert!((0.0..=16.0 + 1e-4).contains(&bits), "{bits}");
        }
        assert!(prior.rate(&z).unwrap().to_scalar::<f32>().unwrap() >= 0.0);
    }

    /// Trapezoid quadrature of the noise-relaxed density over a wide
    /// interval, in f64.
    #[test]
    fn relaxed_density_integrates_to_one() {
        let store = ParamStore::with_dtype(4, DType::F64);
        let prior = FactorizedPrior::new(&store.root().pp("p"), 3).unwrap();
        let (lo, hi, n) = (-400.0f64, 400.0f64, 160_001usize);
        let step = (hi - lo) / (n - 1) as f64;
        let pts: Vec<f64> = (0..n).map(|i| lo + i as f64 * step).collect();
        let z = Tensor::from_slice(&pts, (1, 1, 1, n), &Device::Cpu)
            .unwrap()
            .broadcast_as((1, 3, 1, n))
            .unwrap()
            .contiguous()
            .unwrap();
        let p = prior.bin_mass(&z).unwrap().reshape((3, n)).unwrap().to_vec2::<f64>().unwrap();
        for ch in p {
            let integral: f64 = ch.windows(2).map(|w| 0.5 * step * (w[0] + w[1])).sum();
            assert!((integral - 1.0).abs() < 1e-3, "{integral}");
        }
    }

    #[test]
    fn cdf_is_monotone() {
        let store = ParamStore::new(5);
        let prior = FactorizedPrior::new(&store.root().pp("p"), 2).unwrap();
        let pts: Vec<f64> = (-200..=200).map(|v| v as f64).collect();
        for row in prior.cdf_at(&pts).unwrap() {
            assert!(row.windows(2).all(|w| w[1] >= w[0]));
            assert!(row[0] < 0.01 && row[row.len() - 1] > 0.99);
        }
    }
}
