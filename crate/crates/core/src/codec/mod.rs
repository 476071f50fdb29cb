//! Transform codecs: the conditional ANF codec used for motion and inter
//! coding, and the plain hyperprior autoencoder used for I-frames and the
//! first P-frame's motion.

use candle_core::Tensor;

use crate::entropy::{Coding, EntropyConfig, LatentCode, LatentEntropyModel};
use crate::error::{Error, Result};
use crate::mcnet::{apply_site, ModulationState};
use crate::nn::{leaky_relu, Conv2d, ConvConfig, ConvTranspose2d, Path};

pub use crate::quant::{quantize, NoiseGen, Phase, QuantMode, Quantized};

/// Spatial downsampling of every main latent.
pub const LATENT_STRIDE: usize = 16;
const STAGES: usize = 4;
const KERNEL: usize = 5;
pub const ANF_STEPS: usize = 2;

#[derive(Debug, Clone)]
pub struct CodecOutput {
    pub reconstruction: Tensor,
    pub latent: LatentCode,
    /// Estimated bits of every latent (scalar tensor).
    pub rate_bits: Tensor,
    /// `x2 − cond` from the analysis pass (conditional codecs, encoder
    /// side only).
    pub residual: Option<Tensor>,
}

fn latent_hw(h: usize, w: usize) -> Result<(usize, usize)> {
    if h % LATENT_STRIDE != 0 || w % LATENT_STRIDE != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not a multiple of {LATENT_STRIDE}")));
    }
    Ok((h / LATENT_STRIDE, w / LATENT_STRIDE))
}

/// Four strided convolutions down to the latent resolution; the first
/// layer's output may be modulated.
struct Analysis {
    layers: Vec<Conv2d>,
}

impl Analysis {
    fn new(p: &Path, in_ch: usize, hidden: usize, out_ch: usize, zero_out: bool) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = in_ch;
        for i in 0..STAGES {
            let last = i == STAGES - 1;
            let o = if last { out_ch } else { hidden };
            let mut cfg = ConvConfig::down(KERNEL);
            if last && zero_out {
                cfg = cfg.zeroed();
            }
            layers.push(Conv2d::new(&p.pp(format!("conv{i}")), c, o, cfg)?);
            c = o;
        }
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor, mods: Option<&ModulationState>, site: &str) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i == 0 {
                h = apply_site(&h, mods, site)?;
            }
            if i + 1 < self.layers.len() {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Four transposed convolutions back to full resolution, optionally fused
/// with a condition by a final convolution.
struct Synthesis {
    layers: Vec<ConvTranspose2d>,
    fuse: Option<Conv2d>,
}

impl Synthesis {
    fn new(p: &Path, in_ch: usize, hidden: usize, out_ch: usize, cond_ch: Option<usize>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = in_ch;
        for i in 0..STAGES {
            let o = if i == STAGES - 1 && cond_ch.is_none() { out_ch } else { hidden };
            layers.push(ConvTranspose2d::new(&p.pp(format!("deconv{i}")), c, o, ConvConfig::up(KERNEL))?);
            c = o;
        }
        let fuse = match cond_ch {
            Some(cc) => Some(Conv2d::new(&p.pp("fuse"), hidden + cc, out_ch, ConvConfig::same(3).zeroed())?),
            None => None,
        };
        Ok(Self { layers, fuse })
    }

    fn forward(&self, z: &Tensor, cond: Option<&Tensor>, mods: Option<&ModulationState>, site: &str) -> Result<Tensor> {
        let mut h = z.clone();
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i == 0 {
                h = apply_site(&h, mods, site)?;
            }
            if i + 1 < n || self.fuse.is_some() {
                h = leaky_relu(&h)?;
            }
        }
        match (&self.fuse, cond) {
            (Some(f), Some(c)) => f.forward(&Tensor::cat(&[&h, c], 1)?),
            (None, _) => Ok(h),
            (Some(_), None) => Err(Error::InvalidArgument("conditional synthesis without a condition".into())),
        }
    }
}

struct CouplingStep {
    enc: Analysis,
    dec: Synthesis,
}

/// Result of the analysis pass of [`AnfCodec`].
#[derive(Debug, Clone)]
pub struct AnfForward {
    pub y2: Tensor,
    pub z2: Tensor,
    pub x2: Tensor,
}

/// Conditional augmented normalizing flow with additive couplings:
/// `z ← z + h_enc(x, c)`, `x ← x − g_dec(z, c)`, repeated `ANF_STEPS`
/// times from `z = 0`.
pub struct AnfCodec {
    name: String,
    channels: usize,
    latent_channels: usize,
    steps: Vec<CouplingStep>,
    entropy: LatentEntropyModel,
}

impl AnfCodec {
    pub fn new(p: &Path, channels: usize, hidden: usize, entropy: EntropyConfig) -> Result<Self> {
        let c = entropy.latent_channels;
        let mut steps = Vec::new();
        for k in 0..ANF_STEPS {
            let sp = p.pp(format!("step{k}"));
            steps.push(CouplingStep {
                enc: Analysis::new(&sp.pp("enc"), 2 * channels, hidden, c, true)?,
                dec: Synthesis::new(&sp.pp("dec"), c, hidden, channels, Some(channels))?,
            });
        }
        Ok(Self {
            name: p.prefix().to_string(),
            channels,
            latent_channels: c,
            steps,
            entropy: LatentEntropyModel::new(&p.pp("entropy"), entropy)?,
        })
    }

    /// Modulation sites with their channel counts.
    pub fn modulation_sites(&self, hidden: usize) -> Vec<(String, usize)> {
        (0..ANF_STEPS)
            .flat_map(|k| {
                [
                    (format!("{}.step{k}.enc", self.name), hidden),
                    (format!("{}.step{k}.dec", self.name), hidden),
                ]
            })
            .collect()
    }

    pub fn entropy(&self) -> &LatentEntropyModel {
        &self.entropy
    }

    fn site(&self, k: usize, part: &str) -> String {
        format!("{}.step{k}.{part}", self.name)
    }

    fn check(&self, x: &Tensor, cond: &Tensor) -> Result<()> {
        if x.dims() != cond.dims() {
            return Err(Error::Shape(format!("signal {:?} vs condition {:?}", x.dims(), cond.dims())));
        }
        if x.dim(1)? != self.channels {
            return Err(Error::Shape(format!("{} expects {} channels, got {}", self.name, self.channels, x.dim(1)?)));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor, mods: Option<&ModulationState>) -> Result<AnfForward> {
        self.check(x, cond)?;
        let (n, _, h, w) = x.dims4()?;
        let (lh, lw) = latent_hw(h, w)?;
        let mut z = Tensor::zeros((n, self.latent_channels, lh, lw), x.dtype(), x.device())?;
        let mut x = x.clone();
        for (k, s) in self.steps.iter().enumerate() {
            let e = s.enc.forward(&Tensor::cat(&[&x, cond], 1)?, mods, &self.site(k, "enc"))?;
            z = (z + e)?;
            let d = s.dec.forward(&z, Some(cond), mods, &self.site(k, "dec"))?;
            x = (x - d)?;
        }
        let z2 = self.entropy.hyper_analysis(&z)?;
        Ok(AnfForward { y2: z, z2, x2: x })
    }

    /// Runs the couplings backwards from `y2`. The decoder does not know
    /// `x2` and uses the condition in its place.
    pub fn inverse(&self, y2: &Tensor, cond: &Tensor, x2: Option<&Tensor>, mods: Option<&ModulationState>) -> Result<Tensor> {
        let (n, c, h, w) = cond.dims4()?;
        let (lh, lw) = latent_hw(h, w)?;
        if c != self.channels || y2.dims() != [n, self.latent_channels, lh, lw] {
            return Err(Error::Shape(format!("latent {:?} for condition {:?}", y2.dims(), cond.dims())));
        }
        let mut x = match x2 {
            Some(v) => {
                self.check(v, cond)?;
                v.clone()
            }
            None => cond.clone(),
        };
        let mut z = y2.clone();
        for k in (0..self.steps.len()).rev() {
            let s = &self.steps[k];
            let d = s.dec.forward(&z, Some(cond), mods, &self.site(k, "dec"))?;
            x = (x + d)?;
            if k > 0 {
                let e = s.enc.forward(&Tensor::cat(&[&x, cond], 1)?, mods, &self.site(k, "enc"))?;
                z = (z - e)?;
            }
        }
        Ok(x)
    }

    /// Codes `x` given `cond`. `x` is `None` only when decoding.
    pub fn code(
        &self,
        x: Option<&Tensor>,
        cond: &Tensor,
        temporal: Option<&Tensor>,
        mods: Option<&ModulationState>,
        coding: &mut Coding,
    ) -> Result<CodecOutput> {
        let (n, _, h, w) = cond.dims4()?;
        let (lh, lw) = latent_hw(h, w)?;
        let (latent, residual) = match x {
            Some(x) => {
                let f = self.forward(x, cond, mods)?;
                let code = self.entropy.code(Some((&f.y2, &f.z2)), (n, lh, lw), temporal, coding)?;
                (code, Some((f.x2 - cond)?))
            }
            None => (self.entropy.code(None, (n, lh, lw), temporal, coding)?, None),
        };
        let reconstruction = self.inverse(&latent.y_hat, cond, None, mods)?;
        let rate_bits = latent.bits()?;
        Ok(CodecOutput {
            reconstruction,
            latent,
            rate_bits,
            residual,
        })
    }
}

/// Mean-scale hyperprior autoencoder without a condition.
pub struct HyperpriorCodec {
    channels: usize,
    analysis: Analysis,
    synthesis: Synthesis,
    entropy: LatentEntropyModel,
}

impl HyperpriorCodec {
    pub fn new(p: &Path, channels: usize, hidden: usize, entropy: EntropyConfig) -> Result<Self> {
        let c = entropy.latent_channels;
        Ok(Self {
            channels,
            analysis: Analysis::new(&p.pp("analysis"), channels, hidden, c, false)?,
            synthesis: Synthesis::new(&p.pp("synthesis"), c, hidden, channels, None)?,
            entropy: LatentEntropyModel::new(&p.pp("entropy"), entropy)?,
        })
    }

    pub fn entropy(&self) -> &LatentEntropyModel {
        &self.entropy
    }

    pub fn analysis(&self, x: &Tensor) -> Result<Tensor> {
        if x.dim(1)? != self.channels {
            return Err(Error::Shape(format!("expected {} channels, got {}", self.channels, x.dim(1)?)));
        }
        self.analysis.forward(x, None, "")
    }

    pub fn synthesis(&self, y: &Tensor) -> Result<Tensor> {
        self.synthesis.forward(y, None, None, "")
    }

    /// `x` is `None` only when decoding, in which case `shape` gives
    /// (N, H, W) of the signal.
    pub fn code(&self, x: Option<&Tensor>, shape: (usize, usize, usize), coding: &mut Coding) -> Result<CodecOutput> {
        let (n, h, w) = shape;
        let (lh, lw) = latent_hw(h, w)?;
        let latent = match x {
            Some(x) => {
                let y = self.analysis(x)?;
                let z = self.entropy.hyper_analysis(&y)?;
                self.entropy.code(Some((&y, &z)), (n, lh, lw), None, coding)?
            }
            None => self.entropy.code(None, (n, lh, lw), None, coding)?,
        };
        let reconstruction = self.synthesis(&latent.y_hat)?;
        let rate_bits = latent.bits()?;
        Ok(CodecOutput {
            reconstruction,
            latent,
            rate_bits,
            residual: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn entropy_cfg(temporal: usize) -> EntropyConfig {
        EntropyConfig {
            latent_channels: 16,
            hyper_channels: 8,
            hidden: 16,
            temporal_channels: temporal,
            quadtree: true,
        }
    }

    fn randomize(store: &ParamStore, seed: u64) {
        store.perturb(seed, 0.05, |_| true).unwrap();
    }

    #[test]
    fn anf_inverts_exactly_without_quantization() {
        let store = ParamStore::new(7);
        let codec = AnfCodec::new(&store.root().pp("inter"), 3, 16, entropy_cfg(0)).unwrap();
        randomize(&store, 1);
        let x = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let c = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let f = codec.forward(&x, &c, None).unwrap();
        assert_eq!(f.y2.dims(), &[1, 16, 4, 4]);
        assert_eq!(f.z2.dims(), &[1, 8, 1, 1]);
        let moved = (&f.x2 - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(moved > 0.0);
        let back = codec.inverse(&f.y2, &c, Some(&f.x2), None).unwrap();
        let err = (back - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_init_passes_condition_through() {
        let store = ParamStore::new(8);
        let codec = AnfCodec::new(&store.root().pp("motion"), 2, 16, entropy_cfg(0)).unwrap();
        let x = Tensor::rand(-4f32, 4., (1, 2, 64, 64), &Device::Cpu).unwrap();
        let c = Tensor::rand(-4f32, 4., (1, 2, 64, 64), &Device::Cpu).unwrap();
        let f = codec.forward(&x, &c, None).unwrap();
        assert_eq!(f.x2.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        assert_eq!(f.y2.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let out = codec.code(Some(&x), &c, None, None, &mut Coding::Estimate).unwrap();
        assert_eq!(
            out.reconstruction.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            c.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let zero = Tensor::zeros((1, 16, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let rec = codec.inverse(&zero, &c, None, None).unwrap();
        assert_eq!(rec.flatten_all().unwrap().to_vec1::<f32>().unwrap(), c.flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn shape_errors() {
        let store = ParamStore::new(9);
        let codec = AnfCodec::new(&store.root().pp("inter"), 3, 16, entropy_cfg(0)).unwrap();
        let x = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let c = Tensor::zeros((1, 3, 32, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(codec.forward(&x, &c, None).is_err());
        let bad = Tensor::zeros((1, 16, 2, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(codec.inverse(&bad, &x, None, None).is_err());
    }

    #[test]
    fn hyperprior_latent_stride_and_rate() {
        let store = ParamStore::new(10);
        let mut ec = entropy_cfg(0);
        ec.quadtree = false;
        let codec = HyperpriorCodec::new(&store.root().pp("iframe"), 3, 16, ec).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 64, 128), &Device::Cpu).unwrap();
        let out = codec.code(Some(&x), (1, 64, 128), &mut Coding::Estimate).unwrap();
        assert_eq!(out.latent.y_hat.dims(), &[1, 16, 4, 8]);
        assert_eq!(out.reconstruction.dims(), x.dims());
        assert!(out.rate_bits.to_scalar::<f32>().unwrap() >= 0.0);
        let again = codec.code(Some(&x), (1, 64, 128), &mut Coding::Estimate).unwrap();
        assert_eq!(
            again.reconstruction.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            out.reconstruction.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
