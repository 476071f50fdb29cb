//! Motion compensation: a feature pyramid of the reference frame, warped
//! by the decoded flow and fused by a 3×6 GridNet into the prediction
//! `x_c`, with optional channel-wise modulation of every lateral block.

mod modulation;

use candle_core::Tensor;

pub use modulation::{apply_site, modulate, ModulationState, Modulator};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::{rescale_flow, warp};
use crate::nn::{leaky_relu, Conv2d, ConvConfig, Path};

pub const ROWS: usize = 3;
pub const COLUMNS: usize = 6;

/// Features at strides 1, 2 and 4.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; ROWS],
}

pub struct PyramidExtractor {
    convs: Vec<(Conv2d, Conv2d)>,
}

impl PyramidExtractor {
    pub fn new(p: &Path, widths: &[usize; ROWS]) -> Result<Self> {
        let mut convs = Vec::new();
        let mut c = 3;
        for (l, &w) in widths.iter().enumerate() {
            let first = if l == 0 { ConvConfig::same(3) } else { ConvConfig::down(3) };
            convs.push((
                Conv2d::new(&p.pp(format!("level{l}.conv0")), c, w, first)?,
                Conv2d::new(&p.pp(format!("level{l}.conv1")), w, w, ConvConfig::same(3))?,
            ));
            c = w;
        }
        Ok(Self { convs })
    }

    pub fn forward(&self, frame: &Tensor) -> Result<FeaturePyramid> {
        let mut out = Vec::with_capacity(ROWS);
        let mut h = frame.clone();
        for (a, b) in &self.convs {
            h = b.forward(&leaky_relu(&a.forward(&h)?)?)?;
            out.push(h.clone());
        }
        Ok(FeaturePyramid {
            levels: out.try_into().expect("three levels"),
        })
    }
}

/// Per-level `[warped ‖ unwarped]` features plus the frame-level pair.
#[derive(Debug, Clone)]
pub struct WarpedInputs {
    pub frame: Tensor,
    pub levels: [Tensor; ROWS],
}

pub fn warp_and_concat(pyr: &FeaturePyramid, reference: &Tensor, flow: &Tensor) -> Result<WarpedInputs> {
    let (_, _, h, w) = reference.dims4()?;
    let (_, fc, fh, fw) = flow.dims4()?;
    if fc != 2 || fh != h || fw != w {
        return Err(Error::Shape(format!("flow {:?} for a {h}x{w} reference", flow.dims())));
    }
    let frame = Tensor::cat(&[&warp(reference, flow)?, reference], 1)?;
    let mut levels = Vec::with_capacity(ROWS);
    for (l, feat) in pyr.levels.iter().enumerate() {
        let f = if l == 0 { flow.clone() } else { rescale_flow(flow, 1.0 / (1 << l) as f64)? };
        levels.push(Tensor::cat(&[&warp(feat, &f)?, feat], 1)?);
    }
    Ok(WarpedInputs {
        frame,
        levels: levels.try_into().expect("three levels"),
    })
}

/// Two-conv residual block without normalization; the first convolution
/// is a modulation site.
struct ResBlock {
    site: String,
    c0: Conv2d,
    c1: Conv2d,
}

impl ResBlock {
    fn new(p: &Path, site: String, ch: usize) -> Result<Self> {
        Ok(Self {
            site,
            c0: Conv2d::new(&p.pp("conv0"), ch, ch, ConvConfig::same(3))?,
            c1: Conv2d::new(&p.pp("conv1"), ch, ch, ConvConfig::same(3))?,
        })
    }

    fn forward(&self, x: &Tensor, mods: Option<&ModulationState>) -> Result<Tensor> {
        let h = apply_site(&self.c0.forward(&leaky_relu(x)?)?, mods, &self.site)?;
        let h = self.c1.forward(&leaky_relu(&h)?)?;
        Ok((x + h)?)
    }
}

struct DownBlock {
    c0: Conv2d,
    c1: Conv2d,
}

impl DownBlock {
    fn new(p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            c0: Conv2d::new(&p.pp("conv0"), cin, cout, ConvConfig::down(3))?,
            c1: Conv2d::new(&p.pp("conv1"), cout, cout, ConvConfig::same(3))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.c0.forward(&leaky_relu(x)?)?;
        self.c1.forward(&leaky_relu(&h)?)
    }
}

struct UpBlock {
    c0: Conv2d,
    c1: Conv2d,
}

impl UpBlock {
    fn new(p: &Path, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            c0: Conv2d::new(&p.pp("conv0"), cin, cout, ConvConfig::same(3))?,
            c1: Conv2d::new(&p.pp("conv1"), cout, cout, ConvConfig::same(3))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let up = x.upsample_nearest2d(2 * h, 2 * w)?;
        let h = self.c0.forward(&leaky_relu(&up)?)?;
        self.c1.forward(&leaky_relu(&h)?)
    }
}

/// 3 rows × 6 columns. Column 0 embeds the inputs, columns 0–2 pass
/// information down the rows, columns 3–5 pass it back up; every other
/// cell is a lateral residual block.
pub struct GridNet {
    input: Vec<Conv2d>,
    lateral: Vec<Vec<ResBlock>>,
    down: Vec<Vec<DownBlock>>,
    up: Vec<Vec<UpBlock>>,
    out: Conv2d,
}

impl GridNet {
    pub fn new(p: &Path, widths: &[usize; ROWS]) -> Result<Self> {
        let mut input = Vec::new();
        for (r, &w) in widths.iter().enumerate() {
            // row 0 also receives the warped and unwarped frames
            let cin = 2 * w + if r == 0 { 6 } else { 0 };
            input.push(Conv2d::new(&p.pp(format!("in{r}")), cin, w, ConvConfig::same(3))?);
        }
        let mut lateral = Vec::new();
        for (r, &w) in widths.iter().enumerate() {
            let mut row = Vec::new();
            for c in 1..COLUMNS {
                row.push(ResBlock::new(&p.pp(format!("r{r}.c{c}")), Self::site_name(r, c), w)?);
            }
            lateral.push(row);
        }
        let mut down = Vec::new();
        let mut up = Vec::new();
        for c in 0..COLUMNS / 2 {
            let mut d = Vec::new();
            for r in 1..ROWS {
                d.push(DownBlock::new(&p.pp(format!("down.r{r}.c{c}")), widths[r - 1], widths[r])?);
            }
            down.push(d);
        }
        for c in COLUMNS / 2..COLUMNS {
            let mut u = Vec::new();
            for r in 0..ROWS - 1 {
                u.push(UpBlock::new(&p.pp(format!("up.r{r}.c{c}")), widths[r + 1], widths[r])?);
            }
            up.push(u);
        }
        let out = Conv2d::new(&p.pp("out"), widths[0], 3, ConvConfig::same(3).zeroed())?;
        Ok(Self {
            input,
            lateral,
            down,
            up,
            out,
        })
    }

    pub fn site_name(r: usize, c: usize) -> String {
        format!("gridnet.r{r}.c{c}")
    }

    pub fn modulation_sites(widths: &[usize; ROWS]) -> Vec<(String, usize)> {
        let mut v = Vec::new();
        for (r, &w) in widths.iter().enumerate() {
            for c in 1..COLUMNS {
                v.push((Self::site_name(r, c), w));
            }
        }
        v
    }

    /// Residual on top of the warped reference, 3 channels.
    pub fn forward(&self, inputs: &WarpedInputs, mods: Option<&ModulationState>) -> Result<Tensor> {
        let mut state: Vec<Tensor> = Vec::with_capacity(ROWS);
        for r in 0..ROWS {
            let x = if r == 0 {
                Tensor::cat(&[&inputs.frame, &inputs.levels[0]], 1)?
            } else {
                inputs.levels[r].clone()
            };
            let mut s = self.input[r].forward(&x)?;
            if r > 0 {
                s = (s + self.down[0][r - 1].forward(&state[r - 1])?)?;
            }
            state.push(s);
        }
        for c in 1..COLUMNS {
            if c < COLUMNS / 2 {
                for r in 0..ROWS {
                    let mut s = self.lateral[r][c - 1].forward(&state[r], mods)?;
                    if r > 0 {
                        s = (s + self.down[c][r - 1].forward(&state[r - 1])?)?;
                    }
                    state[r] = s;
                }
            } else {
                for r in (0..ROWS).rev() {
                    let mut s = self.lateral[r][c - 1].forward(&state[r], mods)?;
                    if r + 1 < ROWS {
                        s = (s + self.up[c - COLUMNS / 2][r].forward(&state[r + 1])?)?;
                    }
                    state[r] = s;
                }
            }
        }
        self.out.forward(&leaky_relu(&state[0])?)
    }
}

/// Single-scale alternative: warp the frame, then refine it with a short
/// residual stack.
pub struct SingleScale {
    input: Conv2d,
    blocks: Vec<ResBlock>,
    out: Conv2d,
}

impl SingleScale {
    pub fn new(p: &Path, width: usize) -> Result<Self> {
        Ok(Self {
            input: Conv2d::new(&p.pp("in"), 8, width, ConvConfig::same(3))?,
            blocks: (0..2)
                .map(|i| ResBlock::new(&p.pp(format!("res{i}")), format!("single.r{i}"), width))
                .collect::<Result<_>>()?,
            out: Conv2d::new(&p.pp("out"), width, 3, ConvConfig::same(3).zeroed())?,
        })
    }

    pub fn modulation_sites(width: usize) -> Vec<(String, usize)> {
        (0..2).map(|i| (format!("single.r{i}"), width)).collect()
    }

    fn forward(&self, warped: &Tensor, reference: &Tensor, flow: &Tensor, mods: Option<&ModulationState>) -> Result<Tensor> {
        let mut h = self.input.forward(&Tensor::cat(&[warped, reference, flow], 1)?)?;
        for b in &self.blocks {
            h = b.forward(&h, mods)?;
        }
        self.out.forward(&leaky_relu(&h)?)
    }
}

pub enum McNet {
    MultiScale { pyramid: PyramidExtractor, grid: GridNet },
    SingleScale(SingleScale),
}

impl McNet {
    pub fn new(p: &Path, cfg: &ModelConfig) -> Result<Self> {
        Ok(if cfg.multiscale {
            McNet::MultiScale {
                pyramid: PyramidExtractor::new(&p.pp("pyramid"), &cfg.pyramid_channels)?,
                grid: GridNet::new(&p.pp("gridnet"), &cfg.pyramid_channels)?,
            }
        } else {
            McNet::SingleScale(SingleScale::new(&p.pp("single"), cfg.pyramid_channels[0])?)
        })
    }

    pub fn modulation_sites(cfg: &ModelConfig) -> Vec<(String, usize)> {
        if cfg.multiscale {
            GridNet::modulation_sites(&cfg.pyramid_channels)
        } else {
            SingleScale::modulation_sites(cfg.pyramid_channels[0])
        }
    }

    /// Prediction `x_c` of the current frame from `reference` and the
    /// decoded flow, clamped to `[0, 1]`.
    pub fn forward(&self, reference: &Tensor, flow: &Tensor, mods: Option<&ModulationState>) -> Result<Tensor> {
        let (_, _, h, w) = reference.dims4()?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by 4")));
        }
        let warped = warp(reference, flow)?;
        let residual = match self {
            McNet::MultiScale { pyramid, grid } => {
                let pyr = pyramid.forward(reference)?;
                let inputs = warp_and_concat(&pyr, reference, flow)?;
                grid.forward(&inputs, mods)?
            }
            McNet::SingleScale(s) => s.forward(&warped, reference, flow, mods)?,
        };
        Ok((warped + residual)?.clamp(0f32, 1f32)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn pyramid_shapes_and_zero_input() {
        let store = ParamStore::new(0);
        let pe = PyramidExtractor::new(&store.root().pp("p"), &[32, 64, 96]).unwrap();
        let zero = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let pyr = pe.forward(&zero).unwrap();
        let expect = [(32, 64), (64, 32), (96, 16)];
        for (l, (c, s)) in expect.iter().enumerate() {
            assert_eq!(pyr.levels[l].dims(), &[1, *c, *s, *s]);
            assert_eq!(pyr.levels[l].abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
        let x = Tensor::rand(0f32, 1., (1, 3, 64, 64), &Device::Cpu).unwrap();
        let a = pe.forward(&x).unwrap();
        let b = pe.forward(&x).unwrap();
        for l in 0..ROWS {
            assert_eq!(flat(&a.levels[l]), flat(&b.levels[l]));
        }
    }

    #[test]
    fn zero_flow_duplicates_features() {
        let store = ParamStore::new(1);
        let pe = PyramidExtractor::new(&store.root().pp("p"), &[8, 12, 16]).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let pyr = pe.forward(&x).unwrap();
        let zero = Tensor::zeros((1, 2, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let wi = warp_and_concat(&pyr, &x, &zero).unwrap();
        for (l, &c) in [8usize, 12, 16].iter().enumerate() {
            assert_eq!(wi.levels[l].dim(1).unwrap(), 2 * c);
            let a = wi.levels[l].narrow(1, 0, c).unwrap();
            let b = wi.levels[l].narrow(1, c, c).unwrap();
            assert_eq!(flat(&a), flat(&b));
        }
        assert_eq!(wi.frame.dim(1).unwrap(), 6);
    }

    #[test]
    fn translation_realigns_features() {
        // integer shift: the warped stream equals the shifted content away
        // from the clamped border
        let store = ParamStore::new(2);
        let pe = PyramidExtractor::new(&store.root().pp("p"), &[4, 4, 4]).unwrap();
        let (h, w) = (16usize, 16usize);
        let board: Vec<f32> = (0..3 * h * w).map(|i| (((i % w) / 2 + (i / w % h) / 2) % 2) as f32).collect();
        let x = Tensor::from_vec(board, (1, 3, h, w), &Device::Cpu).unwrap();
        let pyr = pe.forward(&x).unwrap();
        let mut fl = vec![0f32; 2 * h * w];
        for v in fl.iter_mut().take(h * w) {
            *v = 4.0;
        }
        let flow = Tensor::from_vec(fl, (1, 2, h, w), &Device::Cpu).unwrap();
        let wi = warp_and_concat(&pyr, &x, &flow).unwrap();
        // level 1 is at half resolution: a 2-pixel shift
        let f1 = &pyr.levels[1];
        let warped1 = wi.levels[1].narrow(1, 0, 4).unwrap();
        let a = warped1.narrow(3, 0, 4).unwrap();
        let b = f1.narrow(3, 2, 4).unwrap();
        assert_eq!(flat(&a.contiguous().unwrap()), flat(&b.contiguous().unwrap()));
    }

    #[test]
    fn gridnet_shapes_and_identity_modulation() {
        let store = ParamStore::new(3);
        let cfg = ModelConfig::tiny();
        let mc = McNet::new(&store.root().pp("mcnet"), &cfg).unwrap();
        let sites = McNet::modulation_sites(&cfg);
        assert_eq!(sites.len(), 15);
        let m = Modulator::new(&store.root().pp("modulator"), &cfg, &sites).unwrap();
        // make the residual path non-trivial
        for (name, v) in store.all_vars() {
            if name.starts_with("mcnet") && name.ends_with("out.weight") {
                v.set(&(v.ones_like().unwrap() * 0.01).unwrap()).unwrap();
            }
        }
        let x = Tensor::rand(0f32, 1., (1, 3, 32, 48), &Device::Cpu).unwrap();
        let f = Tensor::rand(-2f32, 2., (1, 2, 32, 48), &Device::Cpu).unwrap();
        let plain = mc.forward(&x, &f, None).unwrap();
        assert_eq!(plain.dims(), &[1, 3, 32, 48]);
        let state = m.state(&f).unwrap();
        let modded = mc.forward(&x, &f, Some(&state)).unwrap();
        assert_eq!(flat(&plain), flat(&modded));
        assert_eq!(flat(&plain), flat(&mc.forward(&x, &f, None).unwrap()));
    }

    #[test]
    fn single_scale_variant() {
        let store = ParamStore::new(4);
        let cfg = ModelConfig {
            multiscale: false,
            ..ModelConfig::tiny()
        };
        let mc = McNet::new(&store.root().pp("mcnet"), &cfg).unwrap();
        let x = Tensor::rand(0f32, 1., (1, 3, 16, 16), &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 2, 16, 16), DType::F32, &Device::Cpu).unwrap();
        // zero-initialized output: the prediction is the warped frame
        assert_eq!(flat(&mc.forward(&x, &zero, None).unwrap()), flat(&x));
    }
}
