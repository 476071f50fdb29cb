//! Hyperprior + quadtree context model for one main latent.
//!
//! The hyper latent `z` is scored by a learned factorized prior and decoded
//! into base Gaussian parameters. With the quadtree enabled, the latent is
//! coded in four steps; step `s` refines the base parameters with a small
//! network that sees the elements of steps `< s` (all others masked to
//! zero) and an optional temporal context.

use candle_core::{DType, Device, Tensor};

use super::factorized::FactorizedPrior;
use super::gaussian::gaussian_likelihood;
use super::quadtree::{pad_even, quadtree_partition, QuadtreeGroups, STEPS};
use super::range_coder::{Cdf, RangeDecoder, RangeEncoder};
use super::symbols::{boundaries, decode_symbol, encode_symbol, gaussian_table, table_from_boundaries};
use super::SIGMA_MIN;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, softplus, Conv2d, ConvConfig, ConvTranspose2d, Path};
use crate::quant::{quantize, NoiseGen, Phase, QuantMode};

/// How a latent passes through the entropy model.
pub enum Coding<'a> {
    /// Relaxed quantization with a noise-based rate.
    Train { quant: QuantMode, noise: &'a mut NoiseGen },
    /// Test-time rounding, rate from the model only.
    Estimate,
    Encode(&'a mut RangeEncoder),
    Decode(&'a mut RangeDecoder),
}

impl Coding<'_> {
    pub fn phase(&self) -> Phase {
        match self {
            Coding::Train { .. } => Phase::Train,
            _ => Phase::Test,
        }
    }

    pub fn is_decode(&self) -> bool {
        matches!(self, Coding::Decode(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntropyConfig {
    pub latent_channels: usize,
    pub hyper_channels: usize,
    pub hidden: usize,
    /// Channels of the temporal context (0 when absent).
    pub temporal_channels: usize,
    pub quadtree: bool,
}

#[derive(Debug, Clone)]
pub struct StepParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Result of coding one latent.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    /// Estimated bits of `y` and `z` (scalar tensors).
    pub bits_y: Tensor,
    pub bits_z: Tensor,
    /// Parameters used at each decoding step.
    pub steps: Vec<StepParams>,
}

impl LatentCode {
    pub fn bits(&self) -> Result<Tensor> {
        Ok((&self.bits_y + &self.bits_z)?)
    }
}

struct ContextNet {
    c0: Conv2d,
    c1: Conv2d,
    out: Conv2d,
}

impl ContextNet {
    fn new(p: &Path, in_ch: usize, hidden: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            c0: Conv2d::new(&p.pp("conv0"), in_ch, hidden, ConvConfig::same(3))?,
            c1: Conv2d::new(&p.pp("conv1"), hidden, hidden, ConvConfig::same(3))?,
            out: Conv2d::new(&p.pp("out"), hidden, out_ch, ConvConfig::same(3).zeroed())?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.c0.forward(x)?)?;
        let h = leaky_relu(&self.c1.forward(&h)?)?;
        self.out.forward(&h)
    }
}

pub struct LatentEntropyModel {
    cfg: EntropyConfig,
    ha: [Conv2d; 3],
    hs0: ConvTranspose2d,
    hs1: ConvTranspose2d,
    hs2: Conv2d,
    prior: FactorizedPrior,
    ctx: Vec<ContextNet>,
}

impl LatentEntropyModel {
    pub fn new(p: &Path, cfg: EntropyConfig) -> Result<Self> {
        let (c, cz, h) = (cfg.latent_channels, cfg.hyper_channels, cfg.hidden);
        if c % STEPS != 0 {
            return Err(Error::Config(format!("latent channels {c} not divisible by 4")));
        }
        let ha = [
            Conv2d::new(&p.pp("ha0"), c, h, ConvConfig::same(3))?,
            Conv2d::new(&p.pp("ha1"), h, h, ConvConfig::down(5))?,
            Conv2d::new(&p.pp("ha2"), h, cz, ConvConfig::down(5))?,
        ];
        let hs0 = ConvTranspose2d::new(&p.pp("hs0"), cz, h, ConvConfig::up(5))?;
        let hs1 = ConvTranspose2d::new(&p.pp("hs1"), h, h, ConvConfig::up(5))?;
        let hs2 = Conv2d::new(&p.pp("hs2"), h, 2 * c, ConvConfig::same(3))?;
        let prior = FactorizedPrior::new(&p.pp("prior"), cz)?;
        let mut ctx = Vec::new();
        if cfg.quadtree {
            for s in 0..STEPS {
                ctx.push(ContextNet::new(
                    &p.pp("ctx").pp(format!("step{s}")),
                    2 * c + cfg.temporal_channels + c,
                    h,
                    2 * c,
                )?);
            }
        }
        Ok(Self {
            cfg,
            ha,
            hs0,
            hs1,
            hs2,
            prior,
            ctx,
        })
    }

    pub fn config(&self) -> &EntropyConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &FactorizedPrior {
        &self.prior
    }

    /// Spatial size of `z` for a latent of size `h × w`.
    pub fn hyper_size(h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(4), w.div_ceil(4))
    }

    pub fn hyper_analysis(&self, y: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.ha[0].forward(&y.abs()?)?)?;
        let h = leaky_relu(&self.ha[1].forward(&h)?)?;
        self.ha[2].forward(&h)
    }

    fn hyper_synthesis(&self, z: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let f = leaky_relu(&self.hs0.forward(z)?)?;
        let f = leaky_relu(&self.hs1.forward(&f)?)?;
        let f = self.hs2.forward(&f)?;
        let (_, _, fh, fw) = f.dims4()?;
        if fh < h || fw < w {
            return Err(Error::Shape(format!("hyper synthesis gives {fh}x{fw}, latent is {h}x{w}")));
        }
        Ok(f.narrow(2, 0, h)?.narrow(3, 0, w)?)
    }

    fn split_params(&self, raw: &Tensor) -> Result<StepParams> {
        let c = self.cfg.latent_channels;
        let mu = raw.narrow(1, 0, c)?;
        let sigma = softplus(&raw.narrow(1, c, c)?)?.clamp(SIGMA_MIN, f64::INFINITY)?;
        Ok(StepParams { mu, sigma })
    }

    /// Codes one latent.
    ///
    /// `source` holds `(y, z)` on the encoder side and is `None` when
    /// decoding; `shape` is the batch and latent spatial size.
    pub fn code(
        &self,
        source: Option<(&Tensor, &Tensor)>,
        shape: (usize, usize, usize),
        temporal: Option<&Tensor>,
        coding: &mut Coding,
    ) -> Result<LatentCode> {
        let (n, h, w) = shape;
        let c = self.cfg.latent_channels;
        let cz = self.cfg.hyper_channels;
        if source.is_none() != coding.is_decode() {
            return Err(Error::InvalidArgument("source latents are required except when decoding".into()));
        }
        if let Some((y, z)) = source {
            let (zh, zw) = Self::hyper_size(h, w);
            if y.dims() != [n, c, h, w] || z.dims() != [n, cz, zh, zw] {
                return Err(Error::Shape(format!("latent {:?} / hyper {:?} for shape {shape:?}", y.dims(), z.dims())));
            }
        }
        match (temporal, self.cfg.temporal_channels) {
            (None, 0) => {}
            (Some(t), tc) if t.dims() == [n, tc, h, w] => {}
            (t, tc) => {
                return Err(Error::Shape(format!(
                    "temporal context {:?} for a model expecting {tc} channels",
                    t.map(|t| t.dims().to_vec())
                )))
            }
        }

        let (z_hat, bits_z) = self.code_hyper(source.map(|s| s.1), (n, h, w), coding)?;
        let base = self.hyper_synthesis(&z_hat, h, w)?;

        // work on an even-sized grid; `valid` excludes the padding
        let device = base.device().clone();
        let base_p = pad_even(&base)?;
        let (_, _, hp, wp) = base_p.dims4()?;
        let valid = pad_even(&Tensor::ones((1, 1, h, w), base.dtype(), &device)?)?;
        let y_p = source.map(|(y, _)| pad_even(y)).transpose()?;
        let temporal_p = temporal.map(pad_even).transpose()?;

        let (groups, masks) = if self.cfg.quadtree {
            let g = quadtree_partition(c, hp, wp)?;
            let masks = (0..STEPS)
                .map(|s| Ok(g.mask(s, &device)?.to_dtype(base.dtype())?.broadcast_mul(&valid)?))
                .collect::<Result<Vec<_>>>()?;
            (Some(g), masks)
        } else {
            (None, vec![valid.broadcast_as((1, c, hp, wp))?.contiguous()?])
        };

        let mut y_acc = Tensor::zeros((n, c, hp, wp), base.dtype(), &device)?;
        let mut bits_y = Tensor::zeros((), base.dtype(), &device)?;
        let mut steps = Vec::with_capacity(masks.len());
        for (s, mask) in masks.iter().enumerate() {
            let raw = if self.cfg.quadtree {
                let mut parts = vec![&base_p];
                if let Some(t) = temporal_p.as_ref() {
                    parts.push(t);
                }
                parts.push(&y_acc);
                let ctx_in = Tensor::cat(&parts, 1)?;
                (&base_p + self.ctx[s].forward(&ctx_in)?)?
            } else {
                base_p.clone()
            };
            let params = self.split_params(&raw)?;
            let (mu, sigma) = (&params.mu, &params.sigma);

            let (value, rate_input) = match coding {
                Coding::Train { quant, noise } => {
                    let y = y_p.as_ref().expect("checked above");
                    let q = quantize(y, Some(mu), *quant, Phase::Train, Some(&mut **noise))?;
                    (q.value, q.for_rate)
                }
                Coding::Estimate => {
                    let y = y_p.as_ref().expect("checked above");
                    let v = ((y - mu)?.round()? + mu)?;
                    (v.clone(), v)
                }
                Coding::Encode(enc) => {
                    let y = y_p.as_ref().expect("checked above");
                    let sym = (y - mu)?.round()?;
                    let positions = step_positions(groups.as_ref(), s, n, (c, hp, wp), (h, w));
                    encode_gaussian_symbols(enc, &sym, sigma, &positions)?;
                    let v = (sym + mu)?;
                    (v.clone(), v)
                }
                Coding::Decode(dec) => {
                    let positions = step_positions(groups.as_ref(), s, n, (c, hp, wp), (h, w));
                    let sym = decode_gaussian_symbols(dec, sigma, &positions, &device)?;
                    let v = (sym.to_dtype(mu.dtype())? + mu)?;
                    (v.clone(), v)
                }
            };
            let p = gaussian_likelihood(&rate_input, mu, sigma)?;
            let step_bits = (p.log()?.broadcast_mul(mask)?.sum_all()? * (-std::f64::consts::LOG2_E))?;
            bits_y = (bits_y + step_bits)?;
            y_acc = (y_acc + value.broadcast_mul(mask)?)?;
            steps.push(StepParams {
                mu: crop(&params.mu, h, w)?,
                sigma: crop(&params.sigma, h, w)?,
            });
        }

        Ok(LatentCode {
            y_hat: crop(&y_acc, h, w)?,
            z_hat,
            bits_y,
            bits_z,
            steps,
        })
    }

    fn code_hyper(&self, z: Option<&Tensor>, shape: (usize, usize, usize), coding: &mut Coding) -> Result<(Tensor, Tensor)> {
        let (n, h, w) = shape;
        let (zh, zw) = Self::hyper_size(h, w);
        let cz = self.cfg.hyper_channels;
        match coding {
            Coding::Train { quant, noise } => {
                let z = z.expect("checked by caller");
                let q = quantize(z, None, *quant, Phase::Train, Some(&mut **noise))?;
                Ok((q.value, self.prior.rate(&q.for_rate)?))
            }
            Coding::Estimate => {
                let zq = z.expect("checked by caller").round()?;
                let bits = self.prior.rate(&zq)?;
                Ok((zq, bits))
            }
            Coding::Encode(enc) => {
                let zq = z.expect("checked by caller").round()?;
                let tables = self.hyper_tables()?;
                let vals = zq.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                let per = zh * zw;
                for (i, v) in vals.iter().enumerate() {
                    encode_symbol(enc, *v as i64, &tables[(i / per) % cz])?;
                }
                let bits = self.prior.rate(&zq)?;
                Ok((zq, bits))
            }
            Coding::Decode(dec) => {
                let tables = self.hyper_tables()?;
                let per = zh * zw;
                let mut vals = Vec::with_capacity(n * cz * per);
                for i in 0..n * cz * per {
                    vals.push(decode_symbol(dec, &tables[(i / per) % cz])? as f32);
                }
                let zq = Tensor::from_vec(vals, (n, cz, zh, zw), self.prior.device())?.to_dtype(self.prior.dtype())?;
                let bits = self.prior.rate(&zq)?;
                Ok((zq, bits))
            }
        }
    }

    /// One coder table per hyper channel.
    pub fn hyper_tables(&self) -> Result<Vec<Cdf>> {
        self.prior
            .cdf_at(&boundaries())?
            .iter()
            .map(|row| table_from_boundaries(row))
            .collect()
    }
}

fn crop(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, _, th, tw) = t.dims4()?;
    if th == h && tw == w {
        return Ok(t.clone());
    }
    Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
}

/// Flat indices into the padded (N, C, hp, wp) grid coded at step `s`,
/// skipping padding.
fn step_positions(
    groups: Option<&QuadtreeGroups>,
    s: usize,
    n: usize,
    (c, hp, wp): (usize, usize, usize),
    (h, w): (usize, usize),
) -> Vec<usize> {
    let per = c * hp * wp;
    let inside = |i: usize| {
        let r = i % (hp * wp);
        r / wp < h && r % wp < w
    };
    let base: Vec<usize> = match groups {
        Some(g) => g.group(s).iter().copied().filter(|&i| inside(i)).collect(),
        None => (0..per).filter(|&i| inside(i)).collect(),
    };
    (0..n).flat_map(|b| base.iter().map(move |&i| b * per + i)).collect()
}

fn encode_gaussian_symbols(enc: &mut RangeEncoder, sym: &Tensor, sigma: &Tensor, positions: &[usize]) -> Result<()> {
    let sym = sym.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let sigma = sigma.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    for &i in positions {
        if !sym[i].is_finite() {
            return Err(Error::NonFinite("latent"));
        }
        encode_symbol(enc, sym[i] as i64, &gaussian_table(sigma[i] as f64)?)?;
    }
    Ok(())
}

fn decode_gaussian_symbols(dec: &mut RangeDecoder, sigma: &Tensor, positions: &[usize], device: &Device) -> Result<Tensor> {
    let dims = sigma.dims().to_vec();
    let sigma = sigma.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut sym = vec![0f32; sigma.len()];
    for &i in positions {
        sym[i] = decode_symbol(dec, &gaussian_table(sigma[i] as f64)?)? as f32;
    }
    Ok(Tensor::from_vec(sym, dims, device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::gaussian::rate_gaussian;
    use crate::nn::ParamStore;

    fn model(store: &ParamStore, c: usize, temporal: usize) -> LatentEntropyModel {
        let cfg = EntropyConfig {
            latent_channels: c,
            hyper_channels: 4,
            hidden: 8,
            temporal_channels: temporal,
            quadtree: true,
        };
        LatentEntropyModel::new(&store.root().pp("em"), cfg).unwrap()
    }

    fn latent(seed: u64, shape: (usize, usize, usize, usize), scale: f64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, Normal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, scale).unwrap();
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn later_steps_do_not_leak_into_earlier_predictions() {
        let store = ParamStore::new(11);
        let em = model(&store, 8, 0);
        store.perturb(3, 0.2, |n| n.contains(".ctx.")).unwrap();
        let (n, c, h, w) = (1, 8, 6, 6);
        let y = latent(1, (n, c, h, w), 2.0);
        let z = em.hyper_analysis(&y).unwrap().round().unwrap();
        let reference = em.code(Some((&y, &z)), (n, h, w), None, &mut Coding::Estimate).unwrap();
        let groups = quadtree_partition(c, h, w).unwrap();
        for s in 1..STEPS {
            let mut v = values(&y);
            for later in s..STEPS {
                for &i in groups.group(later) {
                    v[i] += 37.0;
                }
            }
            let y2 = Tensor::from_vec(v, (n, c, h, w), &Device::Cpu).unwrap();
            let out = em.code(Some((&y2, &z)), (n, h, w), None, &mut Coding::Estimate).unwrap();
            for k in 0..=s {
                assert_eq!(values(&out.steps[k].mu), values(&reference.steps[k].mu), "step {k} μ after perturbing ≥ {s}");
                assert_eq!(values(&out.steps[k].sigma), values(&reference.steps[k].sigma));
            }
            if s + 1 < STEPS {
                assert_ne!(values(&out.steps[s + 1].mu), values(&reference.steps[s + 1].mu));
            }
        }
    }

    #[test]
    fn zero_context_nets_reduce_to_hyperprior_rate() {
        let store = ParamStore::new(12);
        let em = model(&store, 8, 0);
        let (n, h, w) = (2, 6, 4);
        let y = latent(2, (n, 8, h, w), 1.5);
        let z = em.hyper_analysis(&y).unwrap().round().unwrap();
        let out = em.code(Some((&y, &z)), (n, h, w), None, &mut Coding::Estimate).unwrap();
        let base = &out.steps[0];
        for s in &out.steps[1..] {
            assert_eq!(values(&s.mu), values(&base.mu));
            assert_eq!(values(&s.sigma), values(&base.sigma));
        }
        let y_hat = ((&y - &base.mu).unwrap().round().unwrap() + &base.mu).unwrap();
        assert_eq!(values(&out.y_hat), values(&y_hat));
        let plain = rate_gaussian(&y_hat, &base.mu, &base.sigma).unwrap().to_scalar::<f32>().unwrap();
        let got = out.bits_y.to_scalar::<f32>().unwrap();
        assert!((plain - got).abs() <= 1e-3 * plain.max(1.0), "{plain} vs {got}");
    }

    fn roundtrip(c: usize, temporal: usize, (n, h, w): (usize, usize, usize), seed: u64) -> (usize, f64) {
        let store = ParamStore::new(seed);
        let em = model(&store, c, temporal);
        store.perturb(seed + 1, 0.1, |n| n.contains(".ctx.")).unwrap();
        let y = latent(seed + 2, (n, c, h, w), 1.5);
        let t = (temporal > 0).then(|| latent(seed + 3, (n, temporal, h, w), 1.0));
        let z = em.hyper_analysis(&y).unwrap().round().unwrap();

        let mut enc = RangeEncoder::new();
        let a = em.code(Some((&y, &z)), (n, h, w), t.as_ref(), &mut Coding::Encode(&mut enc)).unwrap();
        let bytes = enc.finish();
        let est = em.code(Some((&y, &z)), (n, h, w), t.as_ref(), &mut Coding::Estimate).unwrap();
        let mut dec = RangeDecoder::new(bytes.clone());
        let b = em.code(None, (n, h, w), t.as_ref(), &mut Coding::Decode(&mut dec)).unwrap();

        assert_eq!(values(&a.y_hat), values(&b.y_hat));
        assert_eq!(values(&a.z_hat), values(&b.z_hat));
        assert_eq!(values(&a.y_hat), values(&est.y_hat));
        let est_bits = est.bits().unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap();
        (bytes.len(), est_bits)
    }

    #[test]
    fn encode_decode_agree_on_odd_sizes_with_temporal_context() {
        roundtrip(8, 4, (2, 5, 3), 20);
        roundtrip(4, 0, (1, 1, 7), 30);
    }

    #[test]
    fn coded_length_tracks_estimated_rate() {
        // 8 × 112 × 112 = 100 352 elements
        let (bytes, est_bits) = roundtrip(8, 0, (1, 112, 112), 40);
        let actual = bytes as f64 * 8.0;
        let tol = 0.01 * est_bits + 64.0 * 8.0;
        assert!((actual - est_bits).abs() <= tol, "actual {actual} bits, estimated {est_bits}");
    }

    #[test]
    fn decoder_requires_no_source_and_encoder_requires_one() {
        let store = ParamStore::new(5);
        let em = model(&store, 4, 0);
        assert!(em.code(None, (1, 2, 2), None, &mut Coding::Estimate).is_err());
        let y = latent(1, (1, 4, 2, 2), 1.0);
        let z = em.hyper_analysis(&y).unwrap();
        let mut dec = RangeDecoder::new(vec![]);
        assert!(em.code(Some((&y, &z)), (1, 2, 2), None, &mut Coding::Decode(&mut dec)).is_err());
        assert!(em.code(Some((&y, &z)), (1, 2, 2), Some(&y), &mut Coding::Estimate).is_err());
    }
}
