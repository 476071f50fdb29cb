//! Minimal layer toolkit over `candle_core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names
//! (`inter.step0.enc.conv0.weight`). Initialization draws from a seeded
//! ChaCha stream so a model built twice from the same seed is bit-identical.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]` with `bound = gain * sqrt(3 / fan_in)`.
    Kaiming { fan_in: usize, gain: f64 },
    Uniform(f64, f64),
}

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn root(&self) -> Path<'_> {
        Path {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!(
                    "parameter {name} exists with shape {:?}, requested {shape:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; n],
                Init::Const(c) => vec![c; n],
                Init::Kaiming { fan_in, gain } => {
                    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
                }
                Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..=hi)).collect(),
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.vars.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.borrow().is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose name satisfies `pred`.
    pub fn select(&self, pred: impl Fn(&str) -> bool) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Copy of every parameter value, for freeze checks and snapshots.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f32>>> {
        let mut out = BTreeMap::new();
        for (k, v) in self.vars.borrow().iter() {
            let vals = v
                .as_tensor()
                .to_dtype(DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?;
            out.insert(k.clone(), vals);
        }
        Ok(out)
    }

    /// Adds uniform noise in `[-amplitude, amplitude]` to every parameter
    /// whose name satisfies `pred`.
    pub fn perturb(&self, seed: u64, amplitude: f64, pred: impl Fn(&str) -> bool) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, v) in self.vars.borrow().iter() {
            if !pred(name) {
                continue;
            }
            let vals: Vec<f32> = (0..v.elem_count())
                .map(|_| rng.random_range(-amplitude..=amplitude) as f32)
                .collect();
            let noise = Tensor::from_vec(vals, v.dims(), &self.device)?.to_dtype(self.dtype)?;
            v.set(&(v.as_tensor() + noise)?)?;
        }
        Ok(())
    }

    /// Overwrite parameters by name. Unknown names are returned, shape
    /// mismatches are errors.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<String>> {
        let vars = self.vars.borrow();
        let mut unknown = Vec::new();
        for (name, t) in tensors {
            match vars.get(name) {
                Some(v) => {
                    if v.dims() != t.dims() {
                        return Err(Error::Checkpoint(format!(
                            "parameter {name}: checkpoint shape {:?} != model shape {:?}",
                            t.dims(),
                            v.dims()
                        )));
                    }
                    v.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                }
                None => unknown.push(name.clone()),
            }
        }
        Ok(unknown)
    }
}

/// A dotted name prefix into a [`ParamStore`].
#[derive(Clone)]
pub struct Path<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> Path<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> Path<'a> {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Path {
            store: self.store,
            prefix,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(&full, shape, init)
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

thread_local! {
    static MAC_COUNTER: Cell<Option<u64>> = const { Cell::new(None) };
}

/// Counts multiply-accumulates of every convolution and linear layer run
/// inside `f` on this thread.
pub fn count_macs<T>(f: impl FnOnce() -> T) -> (T, u64) {
    let prev = MAC_COUNTER.with(|c| c.replace(Some(0)));
    let out = f();
    let macs = MAC_COUNTER.with(|c| c.replace(prev)).unwrap_or(0);
    if let Some(p) = prev {
        MAC_COUNTER.with(|c| c.set(Some(p + macs)));
    }
    (out, macs)
}

fn add_macs(n: u64) {
    MAC_COUNTER.with(|c| {
        if let Some(v) = c.get() {
            c.set(Some(v + n));
        }
    });
}

#[derive(Debug, Clone, Copy)]
pub struct ConvConfig {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Only used by transposed convolutions.
    pub output_padding: usize,
    pub zero_init: bool,
}

impl ConvConfig {
    pub fn same(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            output_padding: 0,
            zero_init: false,
        }
    }

    /// Halves the spatial size (`kernel` odd).
    pub fn down(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 2,
            padding: kernel / 2,
            output_padding: 0,
            zero_init: false,
        }
    }

    /// Doubles the spatial size when used transposed.
    pub fn up(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 2,
            padding: kernel / 2,
            output_padding: 1,
            zero_init: false,
        }
    }

    pub fn zeroed(mut self) -> Self {
        self.zero_init = true;
        self
    }
}

#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    cfg: ConvConfig,
    in_ch: usize,
    out_ch: usize,
}

impl Conv2d {
    pub fn new(p: &Path, in_ch: usize, out_ch: usize, cfg: ConvConfig) -> Result<Self> {
        let k = cfg.kernel;
        let w_init = if cfg.zero_init {
            Init::Zeros
        } else {
            Init::Kaiming {
                fan_in: in_ch * k * k,
                gain: 1.0,
            }
        };
        let weight = p.param("weight", &[out_ch, in_ch, k, k], w_init)?;
        let bias = p.param("bias", &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            cfg,
            in_ch,
            out_ch,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let y = x.conv2d(&self.weight, c.padding, c.stride, 1, 1)?;
        let (_, _, h, w) = y.dims4()?;
        add_macs((y.dim(0)? * h * w * self.out_ch * self.in_ch * c.kernel * c.kernel) as u64);
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_ch, 1, 1))?)?)
    }
}

#[derive(Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    cfg: ConvConfig,
    in_ch: usize,
    out_ch: usize,
}

impl ConvTranspose2d {
    pub fn new(p: &Path, in_ch: usize, out_ch: usize, cfg: ConvConfig) -> Result<Self> {
        let k = cfg.kernel;
        let w_init = if cfg.zero_init {
            Init::Zeros
        } else {
            // fan-in of a transposed conv is roughly in_ch * k^2 / stride^2
            Init::Kaiming {
                fan_in: (in_ch * k * k) / (cfg.stride * cfg.stride).max(1),
                gain: 1.0,
            }
        };
        let weight = p.param("weight", &[in_ch, out_ch, k, k], w_init)?;
        let bias = p.param("bias", &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            cfg,
            in_ch,
            out_ch,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        let (n, _, h, w) = x.dims4()?;
        let y = x.conv_transpose2d(&self.weight, c.padding, c.output_padding, c.stride, 1)?;
        add_macs((n * h * w * self.out_ch * self.in_ch * c.kernel * c.kernel) as u64);
        Ok(y.broadcast_add(&self.bias.reshape((1, self.out_ch, 1, 1))?)?)
    }
}

/// Either kind of convolution; lets networks pick strided-down or
/// transposed-up stages from a config.
#[derive(Clone)]
pub enum AnyConv {
    Down(Conv2d),
    Up(ConvTranspose2d),
}

impl AnyConv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AnyConv::Down(c) => c.forward(x),
            AnyConv::Up(c) => c.forward(x),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            AnyConv::Down(c) => c.out_channels(),
            AnyConv::Up(c) => c.out_channels(),
        }
    }
}

#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new(p: &Path, in_dim: usize, out_dim: usize, w_init: Init, b_init: Init) -> Result<Self> {
        let weight = p.param("weight", &[out_dim, in_dim], w_init)?;
        let bias = p.param("bias", &[out_dim], b_init)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x`: (N, in_dim) -> (N, out_dim)
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        add_macs((x.dim(0)? * self.in_dim * self.out_dim) as u64);
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub const LEAKY_SLOPE: f64 = 0.1;

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    let zeros = x.zeros_like()?;
    Ok((x.maximum(&zeros)? + (x.minimum(&zeros)? * LEAKY_SLOPE)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// `log(1 + e^x)`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let zeros = x.zeros_like()?;
    let pos = x.maximum(&zeros)?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Value of `x` with no gradient path, keeping `x` differentiable for
/// the caller's other uses.
pub fn detach(x: &Tensor) -> Tensor {
    x.detach()
}

/// Rounding with an identity backward pass. The forward value is
/// bit-identical to `x.round()`.
pub fn ste_round(x: &Tensor) -> Result<Tensor> {
    let q = x.round()?.detach();
    // x - x.detach() is exactly zero in value and carries the identity gradient.
    let zero_with_grad = (x - x.detach())?;
    Ok((q + zero_with_grad)?)
}
