//! GOP-level encoding and decoding of frame sequences.

use candle_core::{Device, Tensor};
use serde::{Serialize, Serializer};

use crate::entropy::{Bitstream, Chunk, ChunkKind, Header};
use crate::error::{Error, Result};
use crate::frames::{pad_to_stride, Frame, CODEC_STRIDE};
use crate::metrics::{aggregate_bpp, psnr_rgb};
use crate::model::{CanfVcpp, FrameKind, FrameMode, RefBuffer};

/// Writes `+∞` as the string `"inf"`.
pub fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    /// 1-based position in the sequence.
    pub frame: usize,
    pub kind: &'static str,
    /// Coded bits (bytes of the frame's chunks) with the coder on,
    /// estimated bits otherwise.
    pub bits: f64,
    pub estimated_bits: f64,
    pub bpp: f64,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequenceReport {
    pub width: usize,
    pub height: usize,
    pub gop: usize,
    pub lambda: u32,
    pub arithmetic: bool,
    pub bpp: f64,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
    pub frames: Vec<FrameRecord>,
}

impl SequenceReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

pub struct EncodedFrame {
    pub chunks: Vec<Chunk>,
    /// Reconstruction cropped to the source size.
    pub reconstruction: Frame,
    pub record: FrameRecord,
}

/// Encoder or decoder state for one stream. The reference buffer is only
/// ever fed decoded quantities, so both sides evolve identically.
pub struct CodingSession<'m> {
    model: &'m CanfVcpp,
    buf: RefBuffer,
    gop: usize,
    position: usize,
    size: Option<(usize, usize)>,
}

impl<'m> CodingSession<'m> {
    pub fn new(model: &'m CanfVcpp, gop: usize) -> Result<Self> {
        if gop == 0 || gop > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!("GOP {gop} must be in 1..=255")));
        }
        Ok(Self {
            model,
            buf: RefBuffer::new(),
            gop,
            position: 0,
            size: None,
        })
    }

    pub fn buffer(&self) -> &RefBuffer {
        &self.buf
    }

    /// Frames processed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    /// Whether the next frame opens a GOP.
    pub fn next_is_intra(&self) -> bool {
        self.position % self.gop == 0
    }

    fn check_size(&mut self, h: usize, w: usize) -> Result<()> {
        match self.size {
            None => {
                if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
                    return Err(Error::InvalidArgument(format!("unsupported frame size {w}x{h}")));
                }
                self.size = Some((h, w));
                Ok(())
            }
            Some(s) if s == (h, w) => Ok(()),
            Some((sh, sw)) => Err(Error::Shape(format!("frame size changed from {sw}x{sh} to {w}x{h}"))),
        }
    }

    fn begin_frame(&mut self) {
        if self.next_is_intra() {
            self.buf.reset();
        }
    }

    fn padded_shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.size.expect("size is set before coding");
        (1, h.div_ceil(CODEC_STRIDE) * CODEC_STRIDE, w.div_ceil(CODEC_STRIDE) * CODEC_STRIDE)
    }

    /// Codes one frame. With `arithmetic` off only rates are estimated and
    /// no chunks are produced.
    pub fn encode_frame(&mut self, frame: &Frame, arithmetic: bool) -> Result<EncodedFrame> {
        let (h, w) = (frame.height(), frame.width());
        self.check_size(h, w)?;
        self.begin_frame();
        let padded = pad_to_stride(frame, CODEC_STRIDE)?;
        let x = padded.to_tensor(&Device::Cpu)?;
        let mut mode = if arithmetic { FrameMode::Encode } else { FrameMode::Estimate };
        let shape = self.padded_shape();
        let out = self.model.code_frame(&mut self.buf, Some(&x), shape, &mut mode)?;
        self.position += 1;

        let kinds: &[ChunkKind] = match out.kind {
            FrameKind::Intra => &[ChunkKind::Intra],
            FrameKind::Predicted => &[ChunkKind::Motion, ChunkKind::Inter],
        };
        let chunks: Vec<Chunk> = if arithmetic {
            kinds
                .iter()
                .zip(out.payloads)
                .map(|(&kind, payload)| Chunk { kind, payload })
                .collect()
        } else {
            Vec::new()
        };
        let estimated_bits = out.bits.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        let bits = if arithmetic {
            chunks.iter().map(|c| c.payload.len() as f64 * 8.0).sum()
        } else {
            estimated_bits
        };
        let reconstruction = to_frame(&out.reconstruction, h, w)?;
        let record = FrameRecord {
            frame: self.position,
            kind: if out.kind == FrameKind::Intra { "I" } else { "P" },
            bits,
            estimated_bits,
            bpp: bits / (h * w) as f64,
            psnr: psnr_rgb(frame, &reconstruction)?,
        };
        Ok(EncodedFrame {
            chunks,
            reconstruction,
            record,
        })
    }

    /// Decodes the chunks of one frame.
    pub fn decode_frame(&mut self, chunks: &[Chunk], height: usize, width: usize) -> Result<Frame> {
        self.check_size(height, width)?;
        let expected: &[ChunkKind] = if self.next_is_intra() {
            &[ChunkKind::Intra]
        } else {
            &[ChunkKind::Motion, ChunkKind::Inter]
        };
        let kinds: Vec<ChunkKind> = chunks.iter().map(|c| c.kind).collect();
        if kinds != expected {
            return Err(Error::Bitstream(format!(
                "frame {} expects chunks {expected:?}, found {kinds:?}",
                self.position + 1
            )));
        }
        self.begin_frame();
        let payloads: Vec<Vec<u8>> = chunks.iter().map(|c| c.payload.clone()).collect();
        let mut mode = FrameMode::Decode(&payloads);
        let shape = self.padded_shape();
        let out = self.model.code_frame(&mut self.buf, None, shape, &mut mode)?;
        self.position += 1;
        to_frame(&out.reconstruction, height, width)
    }
}

fn to_frame(t: &Tensor, h: usize, w: usize) -> Result<Frame> {
    Ok(Frame::from_tensor(t)?.crop(0, 0, h, w))
}

pub struct EncodeResult {
    /// `None` in estimation-only mode.
    pub bitstream: Option<Bitstream>,
    pub reconstructions: Vec<Frame>,
    pub report: SequenceReport,
}

/// Encodes `frames` with I-frames every `gop` frames.
pub fn encode_sequence(model: &CanfVcpp, frames: &[Frame], gop: usize, lambda: u32, arithmetic: bool) -> Result<EncodeResult> {
    let lambda_index = crate::checkpoint::lambda_index(lambda)?;
    let first = frames.first().ok_or(Error::NoFrames)?;
    let (h, w) = (first.height(), first.width());
    let mut session = CodingSession::new(model, gop)?;
    let mut bs = Bitstream::new(Header {
        width: w.min(u16::MAX as usize) as u16,
        height: h.min(u16::MAX as usize) as u16,
        gop: gop as u8,
        lambda_index,
    });
    let mut records = Vec::with_capacity(frames.len());
    let mut recons = Vec::with_capacity(frames.len());
    for f in frames {
        let e = session.encode_frame(f, arithmetic)?;
        for c in e.chunks {
            bs.push(c.kind, c.payload);
        }
        log::debug!("frame {} {}: {:.4} bpp, {:.3} dB", e.record.frame, e.record.kind, e.record.bpp, e.record.psnr);
        records.push(e.record);
        recons.push(e.reconstruction);
    }
    let bpp = aggregate_bpp(&records.iter().map(|r| (r.bits, h, w)).collect::<Vec<_>>())?;
    let psnr = records.iter().map(|r| r.psnr).sum::<f64>() / records.len() as f64;
    Ok(EncodeResult {
        bitstream: arithmetic.then_some(bs),
        reconstructions: recons,
        report: SequenceReport {
            width: w,
            height: h,
            gop,
            lambda,
            arithmetic,
            bpp,
            psnr,
            frames: records,
        },
    })
}

/// Decodes a whole stream. `lambda` is the rate setting of the loaded
/// model and must match the stream's.
pub fn decode_sequence(model: &CanfVcpp, bs: &Bitstream, lambda: u32) -> Result<Vec<Frame>> {
    if bs.num_frames() == 0 {
        return Err(Error::NoFrames);
    }
    let expected = crate::checkpoint::lambda_index(lambda)?;
    if bs.header.lambda_index != expected {
        return Err(Error::Bitstream(format!(
            "stream was coded with λ id {}, the model is λ = {lambda} (id {expected})",
            bs.header.lambda_index
        )));
    }
    let (h, w) = (bs.header.height as usize, bs.header.width as usize);
    let mut session = CodingSession::new(model, bs.header.gop as usize)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bs.chunks.len() {
        let take = if session.next_is_intra() { 1 } else { 2 };
        if pos + take > bs.chunks.len() {
            return Err(Error::Bitstream(format!("stream ends inside frame {}", session.position() + 1)));
        }
        out.push(session.decode_frame(&bs.chunks[pos..pos + take], h, w)?);
        pos += take;
    }
    Ok(out)
}
