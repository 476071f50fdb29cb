use candle_core::Tensor;

use super::{rescale_flow, warp};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, Conv2d, ConvConfig, Path};

const LEVELS: usize = 3;

struct LevelNet {
    convs: Vec<Conv2d>,
}

impl LevelNet {
    fn new(p: &Path, in_ch: usize, hidden: &[usize; 4]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = in_ch;
        for (i, &h) in hidden.iter().enumerate() {
            convs.push(Conv2d::new(&p.pp(format!("conv{i}")), c, h, ConvConfig::same(3))?);
            c = h;
        }
        convs.push(Conv2d::new(&p.pp("out"), c, 2, ConvConfig::same(3))?);
        Ok(Self { convs })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(&h)?;
            if i < last {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h)
    }
}

/// Coarse-to-fine three-level pyramid estimator: each level predicts a
/// residual on top of the upsampled coarser flow after warping the
/// reference with it.
pub struct FlowEstimator {
    levels: Vec<LevelNet>,
}

impl FlowEstimator {
    pub fn new(p: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mut levels = Vec::new();
        for l in 0..LEVELS {
            // the coarsest level sees only the two frames
            let in_ch = if l == LEVELS - 1 { 6 } else { 8 };
            levels.push(LevelNet::new(&p.pp(format!("level{l}")), in_ch, &cfg.flow_hidden)?);
        }
        Ok(Self { levels })
    }

    /// Backward flow such that `warp(reference, flow) ≈ current`.
    pub fn forward(&self, current: &Tensor, reference: &Tensor) -> Result<Tensor> {
        if current.dims() != reference.dims() {
            return Err(Error::Shape(format!(
                "flow estimation between {:?} and {:?}",
                current.dims(),
                reference.dims()
            )));
        }
        let (_, _, h, w) = current.dims4()?;
        if h % (1 << (LEVELS - 1)) != 0 || w % (1 << (LEVELS - 1)) != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by 4")));
        }
        let mut cur = vec![current.clone()];
        let mut refs = vec![reference.clone()];
        for l in 1..LEVELS {
            cur.push(cur[l - 1].avg_pool2d(2)?);
            refs.push(refs[l - 1].avg_pool2d(2)?);
        }
        let top = LEVELS - 1;
        let mut flow = self.levels[top].forward(&Tensor::cat(&[&cur[top], &refs[top]], 1)?)?;
        for l in (0..top).rev() {
            let up = rescale_flow(&flow, 2.0)?;
            let warped = warp(&refs[l], &up)?;
            let res = self.levels[l].forward(&Tensor::cat(&[&cur[l], &warped, &up], 1)?)?;
            flow = (up + res)?;
        }
        Ok(flow)
    }
}

/// Small U-shaped network predicting the next flow from three decoded
/// frames and two decoded flows.
pub struct FlowExtrapolator {
    enc0: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    up: Conv2d,
    dec: Conv2d,
    out: Conv2d,
}

impl FlowExtrapolator {
    pub fn new(p: &Path, cfg: &ModelConfig) -> Result<Self> {
        let h = cfg.extrap_hidden;
        Ok(Self {
            enc0: Conv2d::new(&p.pp("enc0"), 13, h, ConvConfig::same(3))?,
            down: Conv2d::new(&p.pp("down"), h, 2 * h, ConvConfig::down(3))?,
            mid: Conv2d::new(&p.pp("mid"), 2 * h, 2 * h, ConvConfig::same(3))?,
            up: Conv2d::new(&p.pp("up"), 2 * h, h, ConvConfig::same(3))?,
            dec: Conv2d::new(&p.pp("dec"), 2 * h, h, ConvConfig::same(3))?,
            out: Conv2d::new(&p.pp("out"), h, 2, ConvConfig::same(3))?,
        })
    }

    /// `frames` most recent first (x̂_{t-1}, x̂_{t-2}, x̂_{t-3}); `flows`
    /// likewise (f̂_{t-1}, f̂_{t-2}).
    pub fn forward(&self, frames: [&Tensor; 3], flows: [&Tensor; 2]) -> Result<Tensor> {
        let dims = frames[0].dims();
        let (n, _, h, w) = frames[0].dims4()?;
        if frames.iter().any(|f| f.dims() != dims) || flows.iter().any(|f| f.dims() != [n, 2, h, w]) {
            return Err(Error::Shape("extrapolator inputs differ in size".into()));
        }
        let x = Tensor::cat(&[frames[0], frames[1], frames[2], flows[0], flows[1]], 1)?;
        let e0 = leaky_relu(&self.enc0.forward(&x)?)?;
        let d = leaky_relu(&self.down.forward(&e0)?)?;
        let d = leaky_relu(&self.mid.forward(&d)?)?;
        let u = leaky_relu(&self.up.forward(&d.upsample_nearest2d(h, w)?)?)?;
        let u = leaky_relu(&self.dec.forward(&Tensor::cat(&[&u, &e0], 1)?)?)?;
        // extrapolate on top of the last decoded motion
        Ok((self.out.forward(&u)? + flows[0])?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn estimator_shape_and_gradient() {
        let store = ParamStore::new(1);
        let est = FlowEstimator::new(&store.root().pp("flow"), &ModelConfig::tiny()).unwrap();
        let cur = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let refr = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let f = est.forward(&cur, &refr).unwrap();
        assert_eq!(f.dims(), &[1, 2, 64, 64]);
        let d = (warp(&refr, &f).unwrap() - &cur).unwrap().sqr().unwrap().mean_all().unwrap();
        let g = d.backward().unwrap();
        let total: f32 = store
            .all_vars()
            .iter()
            .filter_map(|(_, v)| g.get(v.as_tensor()))
            .map(|t| t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
            .sum();
        assert!(total > 0.0);
    }

    #[test]
    fn extrapolator_shape_and_finite() {
        let store = ParamStore::new(2);
        let ex = FlowExtrapolator::new(&store.root().pp("extrap"), &ModelConfig::tiny()).unwrap();
        let fr = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let fl = Tensor::zeros((1, 2, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let out = ex.forward([&fr, &fr, &fr], [&fl, &fl]).unwrap();
        assert_eq!(out.dims(), &[1, 2, 64, 64]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }
}
