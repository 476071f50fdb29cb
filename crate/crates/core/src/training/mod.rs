//! Rate-distortion losses, sequence optimization (with or without
//! error-propagation-aware updates) and the staged training schedule.

mod data;
mod optim;
mod stage;

use candle_core::{DType, Tensor, Var};

pub use data::{ClipSource, SequenceClips, SyntheticClips};
pub use optim::{cosine_lr, Adam};
pub use stage::{
    checkpoint_name, run_stage, stage_plan, train_phase, Objective, PhaseSpec, StageConfig, StageReport, TrainConfig, Trainable,
};

use crate::codec::{NoiseGen, QuantMode};
use crate::error::{Error, Result};
use crate::model::{CanfVcpp, FrameKind, FrameMode, RefBuffer};
use crate::nn::ParamStore;

pub const DEFAULT_REG_WEIGHT: f64 = 0.01;

/// Distortion weight of P-frame `t` (1-based, `t ≥ 2`): `1 + 0.2·(t − 2)`.
pub fn mu_schedule(t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("μ is defined for t ≥ 2, got {t}")));
    }
    Ok(1.0 + 0.2 * (t - 2) as f64)
}

/// Weight actually applied to frame `t`: the I-frame and every frame without
/// the modulated loss use 1.
pub fn frame_weight(t: usize, modulated: bool) -> f64 {
    if modulated && t >= 2 {
        1.0 + 0.2 * (t - 2) as f64
    } else {
        1.0
    }
}

/// `λ·μ·MSE(x, x̂) + bits / pixels`, as a graph tensor. `pixels` is the
/// unpadded pixel count of the whole batch.
pub fn frame_loss(x: &Tensor, x_hat: &Tensor, bits: &Tensor, lambda: f64, mu: f64, pixels: usize) -> Result<Tensor> {
    if x.dims() != x_hat.dims() {
        return Err(Error::Shape(format!("frame {:?} vs reconstruction {:?}", x.dims(), x_hat.dims())));
    }
    if pixels == 0 {
        return Err(Error::InvalidArgument("zero pixel count".into()));
    }
    let d = (x - x_hat)?.sqr()?.mean_all()?;
    let loss = ((d * (lambda * mu))? + (bits / pixels as f64)?)?;
    Ok(loss)
}

/// `weight · Σ energies`; `None` when there is nothing to regularize.
pub fn regularization(energies: &[Tensor], weight: f64) -> Result<Option<Tensor>> {
    let mut it = energies.iter();
    let Some(first) = it.next() else {
        return Ok(None);
    };
    let mut sum = first.clone();
    for e in it {
        sum = (sum + e)?;
    }
    Ok(Some((sum * weight)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTerms {
    pub t: usize,
    pub mu: f64,
    /// MSE (or prediction MSE under the prediction objective).
    pub distortion: f64,
    pub bpp: f64,
}

/// Scalar view of one clip's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub lambda: f64,
    pub frames: Vec<FrameTerms>,
    pub reg: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn distortion(&self) -> f64 {
        self.frames.iter().map(|f| f.distortion).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn bpp(&self) -> f64 {
        self.frames.iter().map(|f| f.bpp).sum::<f64>() / self.frames.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lambda: f64,
    pub epa: bool,
    pub modulated: bool,
    pub quant: QuantMode,
    pub reg_weight: f64,
    pub objective: Objective,
}

impl TrainOptions {
    pub fn new(lambda: f64) -> Self {
        Self {
            lambda,
            epa: true,
            modulated: true,
            quant: QuantMode::RoundSte,
            reg_weight: DEFAULT_REG_WEIGHT,
            objective: Objective::RateDistortion,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    let v = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !v.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(v)
}

/// Runs a clip through the codec in training mode and calls `update` with
/// each loss that should drive an optimizer step: once with the summed clip
/// loss under EPA, once per P-frame otherwise (the I-frame loss is added to
/// the first P-frame's). `frames[i]` is frame `i + 1`, shape (N, 3, H, W).
pub fn train_clip(
    model: &CanfVcpp,
    frames: &[Tensor],
    opts: &TrainOptions,
    noise: &mut NoiseGen,
    mut update: impl FnMut(&Tensor) -> Result<()>,
) -> Result<LossBreakdown> {
    if frames.len() < 2 {
        return Err(Error::SequenceTooShort {
            have: frames.len(),
            need: 2,
        });
    }
    let (n, _, h, w) = frames[0].dims4()?;
    let pixels = n * h * w;
    let mut buf = RefBuffer::new();
    let mut pending: Option<Tensor> = None;
    let mut terms = Vec::with_capacity(frames.len());
    let mut reg_total = 0.0;
    let mut total = 0.0;

    for (i, x) in frames.iter().enumerate() {
        if !opts.epa {
            buf.detach();
        }
        let t = i + 1;
        let mut mode = FrameMode::Train {
            quant: opts.quant,
            noise: &mut *noise,
        };
        let out = model.code_frame(&mut buf, Some(x), (n, h, w), &mut mode)?;
        let mu = frame_weight(t, opts.modulated);
        let (loss, distortion, bits) = match (opts.objective, out.kind) {
            (Objective::Prediction, FrameKind::Intra) => (None, 0.0, 0.0),
            (Objective::Prediction, FrameKind::Predicted) => {
                let x_c = out.prediction.as_ref().expect("predicted frames carry x_c");
                let mb = out.motion_bits.as_ref().expect("predicted frames carry motion bits");
                let l = frame_loss(x, x_c, mb, opts.lambda, mu, pixels)?;
                (Some(l), scalar(&(x - x_c)?.sqr()?.mean_all()?)?, scalar(mb)?)
            }
            (Objective::RateDistortion, _) => {
                let mut l = frame_loss(x, &out.reconstruction, &out.bits, opts.lambda, mu, pixels)?;
                if let Some(r) = regularization(out.residual_energy.as_slice(), opts.reg_weight)? {
                    reg_total += scalar(&r)?;
                    l = (l + r)?;
                }
                let d = scalar(&(x - &out.reconstruction)?.sqr()?.mean_all()?)?;
                (Some(l), d, scalar(&out.bits)?)
            }
        };
        terms.push(FrameTerms {
            t,
            mu,
            distortion,
            bpp: bits / pixels as f64,
        });
        if let Some(l) = loss {
            total += scalar(&l)?;
            pending = Some(match pending.take() {
                Some(p) => (p + l)?,
                None => l,
            });
        }
        if !opts.epa && t >= 2 {
            if let Some(l) = pending.take() {
                update(&l)?;
            }
        }
    }
    if let Some(l) = pending.take() {
        update(&l)?;
    }
    Ok(LossBreakdown {
        lambda: opts.lambda,
        frames: terms,
        reg: reg_total,
        total,
    })
}

/// Owns the optimizer state for one trainable subset of a model.
pub struct Trainer<'a> {
    model: &'a CanfVcpp,
    vars: Vec<(String, Var)>,
    adam: Adam,
    noise: NoiseGen,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a CanfVcpp, store: &ParamStore, trainable: &Trainable, seed: u64) -> Result<Self> {
        let vars = store.select(|n| trainable.contains(n));
        if vars.is_empty() {
            return Err(Error::InvalidArgument(format!("no parameters match {trainable:?}")));
        }
        Ok(Self {
            model,
            vars,
            adam: Adam::default(),
            noise: NoiseGen::new(seed),
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// One clip, one or more optimizer updates at learning rate `lr`.
    pub fn step(&mut self, frames: &[Tensor], opts: &TrainOptions, lr: f64) -> Result<LossBreakdown> {
        let vars = &self.vars;
        let adam = &mut self.adam;
        train_clip(self.model, frames, opts, &mut self.noise, |loss| {
            let grads = loss.backward()?;
            adam.step(vars, &grads, lr)?;
            Ok(())
        })
    }
}
