//! The complete codec: I-frame codec, intra and conditional motion codecs,
//! flow estimation and extrapolation, motion compensation with feature
//! modulation, and the conditional inter codec.

use std::collections::VecDeque;

use candle_core::Tensor;

use crate::codec::{AnfCodec, CodecOutput, HyperpriorCodec, NoiseGen, QuantMode};
use crate::config::{ModelConfig, ModulationScope};
use crate::entropy::{Coding, EntropyConfig, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::flow::{FlowEstimator, FlowExtrapolator, PropagatedFlowState};
use crate::mcnet::{McNet, ModulationState, Modulator};
use crate::nn::{detach, ParamStore};

pub const FRAME_CAPACITY: usize = 3;
pub const FLOW_CAPACITY: usize = 2;

/// Decoded frames and flows kept between frames of one GOP, plus the
/// propagated flow.
#[derive(Debug, Clone)]
pub struct RefBuffer {
    /// Most recent first.
    frames: VecDeque<Tensor>,
    flows: VecDeque<Tensor>,
    propagated: PropagatedFlowState,
    /// 1-based index within the GOP of the next frame.
    next: usize,
}

impl Default for RefBuffer {
    fn default() -> Self {
        Self::new()
    }
}

impl RefBuffer {
    pub fn new() -> Self {
        Self {
            frames: VecDeque::with_capacity(FRAME_CAPACITY),
            flows: VecDeque::with_capacity(FLOW_CAPACITY),
            propagated: PropagatedFlowState::new(),
            next: 1,
        }
    }

    /// Starts a new GOP.
    pub fn reset(&mut self) {
        self.frames.clear();
        self.flows.clear();
        self.propagated.reset();
        self.next = 1;
    }

    pub fn next_index(&self) -> usize {
        self.next
    }

    pub fn frames(&self) -> impl Iterator<Item = &Tensor> {
        self.frames.iter()
    }

    pub fn flows(&self) -> impl Iterator<Item = &Tensor> {
        self.flows.iter()
    }

    pub fn propagated(&self) -> &PropagatedFlowState {
        &self.propagated
    }

    /// (frames, flows) currently held.
    pub fn depth(&self) -> (usize, usize) {
        (self.frames.len(), self.flows.len())
    }

    fn push_frame(&mut self, x: Tensor) {
        self.frames.push_front(x);
        self.frames.truncate(FRAME_CAPACITY);
    }

    fn push_flow(&mut self, f: Tensor) {
        self.flows.push_front(f);
        self.flows.truncate(FLOW_CAPACITY);
    }

    /// Cuts every gradient path through the buffered references.
    pub fn detach(&mut self) {
        for f in self.frames.iter_mut().chain(self.flows.iter_mut()) {
            *f = detach(f);
        }
        self.propagated.detach();
    }
}

/// How one frame is run.
pub enum FrameMode<'a> {
    Train { quant: QuantMode, noise: &'a mut NoiseGen },
    Estimate,
    Encode,
    /// Payloads of this frame's chunks in coding order.
    Decode(&'a [Vec<u8>]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct FrameOutput {
    pub kind: FrameKind,
    /// 1-based position within the GOP.
    pub index: usize,
    pub reconstruction: Tensor,
    /// Estimated bits of every chunk of the frame (scalar tensor).
    pub bits: Tensor,
    pub motion_bits: Option<Tensor>,
    /// Encoded chunk payloads (empty unless encoding).
    pub payloads: Vec<Vec<u8>>,
    /// Sum over conditional codecs of `mean((x2 − cond)²)`.
    pub residual_energy: Option<Tensor>,
    pub prediction: Option<Tensor>,
    pub flow: Option<Tensor>,
    pub modulation: Option<ModulationState>,
}

fn run_chunk<R>(
    mode: &mut FrameMode,
    chunk: usize,
    payloads: &mut Vec<Vec<u8>>,
    f: impl FnOnce(&mut Coding) -> Result<R>,
) -> Result<R> {
    match mode {
        FrameMode::Train { quant, noise } => f(&mut Coding::Train {
            quant: *quant,
            noise: &mut **noise,
        }),
        FrameMode::Estimate => f(&mut Coding::Estimate),
        FrameMode::Encode => {
            let mut enc = RangeEncoder::new();
            let r = f(&mut Coding::Encode(&mut enc))?;
            payloads.push(enc.finish());
            Ok(r)
        }
        FrameMode::Decode(chunks) => {
            let data = chunks
                .get(chunk)
                .ok_or_else(|| Error::Bitstream(format!("frame is missing chunk {chunk}")))?;
            let mut dec = RangeDecoder::new(data.clone());
            f(&mut Coding::Decode(&mut dec))
        }
    }
}

pub struct CanfVcpp {
    cfg: ModelConfig,
    pub iframe: HyperpriorCodec,
    pub intra_motion: HyperpriorCodec,
    pub motion: AnfCodec,
    pub inter: AnfCodec,
    pub flow: FlowEstimator,
    pub extrap: FlowExtrapolator,
    pub mcnet: McNet,
    pub modulator: Option<Modulator>,
}

impl CanfVcpp {
    pub fn new(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = store.root();
        let ec = |temporal: usize, quadtree: bool| EntropyConfig {
            latent_channels: cfg.latent_channels,
            hyper_channels: cfg.hyper_channels,
            hidden: cfg.context_hidden,
            temporal_channels: temporal,
            quadtree,
        };
        let h = cfg.coupling_hidden;
        let iframe = HyperpriorCodec::new(&root.pp("iframe"), 3, h, ec(0, false))?;
        let intra_motion = HyperpriorCodec::new(&root.pp("intra_motion"), 2, h, ec(0, false))?;
        let motion = AnfCodec::new(&root.pp("motion"), 2, h, ec(0, cfg.quadtree))?;
        let inter = AnfCodec::new(&root.pp("inter"), 3, h, ec(cfg.latent_channels, cfg.quadtree))?;
        let flow = FlowEstimator::new(&root.pp("flow"), cfg)?;
        let extrap = FlowExtrapolator::new(&root.pp("extrap"), cfg)?;
        let mcnet = McNet::new(&root.pp("mcnet"), cfg)?;
        let modulator = if cfg.feature_mod {
            let mut sites = McNet::modulation_sites(cfg);
            match cfg.modulation_scope {
                ModulationScope::All => sites.extend(inter.modulation_sites(h)),
                ModulationScope::GridNet => {}
                ModulationScope::GridNetLast => sites.retain(|(s, _)| s.ends_with(&format!(".r0.c{}", crate::mcnet::COLUMNS - 1))),
            }
            Some(Modulator::new(&root.pp("modulator"), cfg, &sites)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            iframe,
            intra_motion,
            motion,
            inter,
            flow,
            extrap,
            mcnet,
            modulator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Buffer size in full-resolution single-channel map equivalents.
    pub fn buffer_frfm(&self) -> usize {
        FRAME_CAPACITY * 3 + FLOW_CAPACITY * 2 + if self.cfg.feature_mod { 2 } else { 0 }
    }

    /// Codes the next frame of `buf`'s GOP and appends its reconstruction.
    ///
    /// `x` is the padded source frame (N, 3, H, W), `None` when decoding;
    /// `shape` is (N, H, W).
    pub fn code_frame(
        &self,
        buf: &mut RefBuffer,
        x: Option<&Tensor>,
        shape: (usize, usize, usize),
        mode: &mut FrameMode,
    ) -> Result<FrameOutput> {
        if let Some(x) = x {
            let (n, h, w) = shape;
            if x.dims() != [n, 3, h, w] {
                return Err(Error::Shape(format!("frame {:?} for declared shape {shape:?}", x.dims())));
            }
        }
        if x.is_none() != matches!(mode, FrameMode::Decode(_)) {
            return Err(Error::InvalidArgument("a source frame is required except when decoding".into()));
        }
        let out = if buf.next == 1 {
            self.code_intra(buf, x, shape, mode)?
        } else {
            self.code_predicted(buf, x, shape, mode)?
        };
        buf.next += 1;
        Ok(out)
    }

    fn code_intra(
        &self,
        buf: &mut RefBuffer,
        x: Option<&Tensor>,
        shape: (usize, usize, usize),
        mode: &mut FrameMode,
    ) -> Result<FrameOutput> {
        let mut payloads = Vec::new();
        let out = run_chunk(mode, 0, &mut payloads, |c| self.iframe.code(x, shape, c))?;
        let recon = out.reconstruction.clamp(0f32, 1f32)?;
        buf.push_frame(recon.clone());
        Ok(FrameOutput {
            kind: FrameKind::Intra,
            index: 1,
            reconstruction: recon,
            bits: out.rate_bits,
            motion_bits: None,
            payloads,
            residual_energy: None,
            prediction: None,
            flow: None,
            modulation: None,
        })
    }

    /// Conditioning flow for frame `t ≥ 3` from the buffered references.
    pub fn extrapolated_flow(&self, buf: &RefBuffer) -> Result<Tensor> {
        let frames: Vec<&Tensor> = buf.frames.iter().collect();
        let oldest = *frames.last().ok_or(Error::EmptyFlowState(buf.next))?;
        let pick = |i: usize| frames.get(i).copied().unwrap_or(oldest);
        let f0 = buf.flows.front().ok_or(Error::EmptyFlowState(buf.next))?;
        let zeros;
        let f1 = match buf.flows.get(1) {
            Some(f) => f,
            None => {
                zeros = f0.zeros_like()?;
                &zeros
            }
        };
        self.extrap.forward([pick(0), pick(1), pick(2)], [f0, f1])
    }

    fn code_predicted(
        &self,
        buf: &mut RefBuffer,
        x: Option<&Tensor>,
        shape: (usize, usize, usize),
        mode: &mut FrameMode,
    ) -> Result<FrameOutput> {
        let t = buf.next;
        let prev = buf
            .frames
            .front()
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("predicted frame without a reference".into()))?;
        let flow_in = x.map(|x| self.flow.forward(x, &prev)).transpose()?;
        let mut payloads = Vec::new();

        let motion: CodecOutput = if t == 2 {
            run_chunk(mode, 0, &mut payloads, |c| self.intra_motion.code(flow_in.as_ref(), shape, c))?
        } else {
            let f_c = self.extrapolated_flow(buf)?;
            run_chunk(mode, 0, &mut payloads, |c| self.motion.code(flow_in.as_ref(), &f_c, None, None, c))?
        };
        let f_hat = motion.reconstruction.clone();
        buf.propagated.update(&f_hat, t)?;

        let modulation = match (&self.modulator, buf.propagated.flow_to_first()) {
            (Some(m), Some(f)) => Some(m.state(f)?),
            _ => None,
        };
        let x_c = self.mcnet.forward(&prev, &f_hat, modulation.as_ref())?;
        let inter = run_chunk(mode, 1, &mut payloads, |c| {
            self.inter.code(x, &x_c, Some(&motion.latent.y_hat), modulation.as_ref(), c)
        })?;
        let recon = inter.reconstruction.clamp(0f32, 1f32)?;

        let energy = |r: &Option<Tensor>| -> Result<Option<Tensor>> { r.as_ref().map(|r| Ok(r.sqr()?.mean_all()?)).transpose() };
        let residual_energy = match (energy(&motion.residual)?, energy(&inter.residual)?) {
            (Some(a), Some(b)) => Some((a + b)?),
            (a, b) => a.or(b),
        };

        buf.push_frame(recon.clone());
        buf.push_flow(f_hat.clone());
        Ok(FrameOutput {
            kind: FrameKind::Predicted,
            index: t,
            reconstruction: recon,
            bits: (&motion.rate_bits + &inter.rate_bits)?,
            motion_bits: Some(motion.rate_bits),
            payloads,
            residual_energy,
            prediction: Some(x_c),
            flow: Some(f_hat),
            modulation,
        })
    }
}
