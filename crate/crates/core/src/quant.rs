//! Latent quantization in its training and coding variants.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ste_round;

/// How a latent is relaxed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// `y + u` for the rate and for every downstream transform.
    AdditiveNoise,
    /// `y + u` for the rate only; downstream transforms see the rounded
    /// value with an identity gradient.
    RoundSte,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Seeded source of `U(-0.5, 0.5)` noise tensors.
pub struct NoiseGen {
    rng: ChaCha8Rng,
}

impl NoiseGen {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform_like(&mut self, t: &Tensor) -> Result<Tensor> {
        let n = t.elem_count();
        let v: Vec<f32> = (0..n).map(|_| self.rng.random_range(-0.5f32..0.5)).collect();
        Ok(Tensor::from_vec(v, t.dims(), t.device())?.to_dtype(t.dtype())?)
    }
}

/// The two views of a quantized latent: what the rate model scores and
/// what later transforms consume.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub for_rate: Tensor,
    pub value: Tensor,
}

/// Quantizes `y` around `mu` (zero when absent).
pub fn quantize(
    y: &Tensor,
    mu: Option<&Tensor>,
    mode: QuantMode,
    phase: Phase,
    noise: Option<&mut NoiseGen>,
) -> Result<Quantized> {
    if let Some(m) = mu {
        if m.dims() != y.dims() {
            return Err(Error::Shape(format!("mean {:?} vs latent {:?}", m.dims(), y.dims())));
        }
    }
    let rounded = |ste: bool| -> Result<Tensor> {
        Ok(match mu {
            Some(m) => {
                let d = (y - m)?;
                let r = if ste { ste_round(&d)? } else { d.round()? };
                (r + m)?
            }
            None => {
                if ste {
                    ste_round(y)?
                } else {
                    y.round()?
                }
            }
        })
    };
    match phase {
        Phase::Test => {
            let v = rounded(false)?;
            Ok(Quantized {
                for_rate: v.clone(),
                value: v,
            })
        }
        Phase::Train => {
            let noise = noise.ok_or_else(|| Error::InvalidArgument("training quantization needs a noise source".into()))?;
            let noisy = (y + noise.uniform_like(y)?)?;
            let value = match mode {
                QuantMode::AdditiveNoise => noisy.clone(),
                QuantMode::RoundSte => rounded(true)?,
            };
            Ok(Quantized { for_rate: noisy, value })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn noise_stays_in_half_bin() {
        let y = Tensor::new(&[0.3f32, -7.0, 12.5, 0.0], &Device::Cpu).unwrap();
        let mut g = NoiseGen::new(1);
        let q = quantize(&y, None, QuantMode::AdditiveNoise, Phase::Train, Some(&mut g)).unwrap();
        let a = y.to_vec1::<f32>().unwrap();
        let b = q.value.to_vec1::<f32>().unwrap();
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() <= 0.5);
        }
    }

    #[test]
    fn round_ste_value_and_gradient() {
        let y = Var::new(&[1.4f32, -2.6, 0.4], &Device::Cpu).unwrap();
        let mut g = NoiseGen::new(2);
        let q = quantize(y.as_tensor(), None, QuantMode::RoundSte, Phase::Train, Some(&mut g)).unwrap();
        assert_eq!(q.value.to_vec1::<f32>().unwrap(), vec![1.0, -3.0, 0.0]);
        let grads = q.value.sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(y.as_tensor()).unwrap().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn mean_centered_rounding_matches_test_phase() {
        let y = Tensor::new(&[0.9f32, 3.2, -1.7], &Device::Cpu).unwrap();
        let mu = Tensor::new(&[0.25f32, -0.4, 0.6], &Device::Cpu).unwrap();
        let mut g = NoiseGen::new(3);
        let tr = quantize(&y, Some(&mu), QuantMode::RoundSte, Phase::Train, Some(&mut g)).unwrap();
        let te = quantize(&y, Some(&mu), QuantMode::RoundSte, Phase::Test, None).unwrap();
        assert_eq!(tr.value.to_vec1::<f32>().unwrap(), te.value.to_vec1::<f32>().unwrap());
        let sym = (te.value - &mu).unwrap().to_vec1::<f32>().unwrap();
        assert!(sym.iter().all(|s| s.fract() == 0.0));
    }

    #[test]
    fn training_without_noise_source_is_an_error() {
        let y = Tensor::new(&[0.0f32], &Device::Cpu).unwrap();
        assert!(quantize(&y, None, QuantMode::RoundSte, Phase::Train, None).is_err());
    }
}
