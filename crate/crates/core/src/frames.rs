//! Frame ingestion, stride padding and clip windowing.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};

/// Spatial stride every coded frame is padded to (main latent at 1/16,
/// hyper latent at 1/64).
pub const CODEC_STRIDE: usize = 64;

/// An RGB frame with values in `[0, 1]`, stored planar (`3 × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    data: Vec<f32>,
    height: usize,
    width: usize,
    orig_height: usize,
    orig_width: usize,
}

impl Frame {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "frame data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            orig_height: height,
            orig_width: width,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: vec![0.0; 3 * height * width],
            height,
            width,
            orig_height: height,
            orig_width: width,
        }
    }

    /// From interleaved 8-bit RGB (RGB24).
    pub fn from_rgb8(rgb: &[u8], height: usize, width: usize) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "rgb24 buffer has {} bytes, expected {}",
                rgb.len(),
                3 * height * width
            )));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; 3 * plane];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f32 / 255.0;
            }
        }
        Self::new(data, height, width)
    }

    /// Interleaved 8-bit RGB of the original (unpadded) region.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = Vec::with_capacity(3 * self.orig_height * self.orig_width);
        for y in 0..self.orig_height {
            for x in 0..self.orig_width {
                for c in 0..3 {
                    let v = self.data[c * plane + y * self.width + x];
                    out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn orig_height(&self) -> usize {
        self.orig_height
    }

    pub fn orig_width(&self) -> usize {
        self.orig_width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn with_orig_size(mut self, orig_height: usize, orig_width: usize) -> Self {
        self.orig_height = orig_height;
        self.orig_width = orig_width;
        self
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), device)?)
    }

    /// Build from a `(1, 3, H, W)` or `(3, H, W)` tensor; values are not clamped.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::Shape(format!("frame tensor of rank {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("frame tensor with {c} channels")));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(data, h, w)
    }

    /// Crop back to the original size recorded at load time.
    pub fn crop_to_original(&self) -> Frame {
        self.crop(0, 0, self.orig_height, self.orig_width)
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Frame {
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in top..top + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + left..row + left + w]);
            }
        }
        Frame {
            data,
            height: h,
            width: w,
            orig_height: h,
            orig_width: w,
        }
    }

    pub fn flip_horizontal(&self) -> Frame {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }
}

/// Reads an 8-bit RGB PNG/PPM, or a raw RGB24 file when `raw_size` is
/// given as `(width, height)`.
pub fn load_frame(path: &Path, raw_size: Option<(usize, usize)>) -> Result<Frame> {
    if let Some((w, h)) = raw_size {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Frame::from_rgb8(&bytes, h, w);
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image(e.to_string()))?;
    match img.color() {
        image::ColorType::Rgb8 | image::ColorType::Rgba8 | image::ColorType::L8 => {}
        other => {
            return Err(Error::UnsupportedBitDepth(format!(
                "{} is {other:?}, expected 8-bit RGB",
                path.display()
            )))
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Frame::from_rgb8(rgb.as_raw(), h as usize, w as usize)
}

/// Writes the original region of `frame` as PNG (or PPM for `.ppm`).
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(
        frame.orig_width() as u32,
        frame.orig_height() as u32,
        frame.to_rgb8(),
    )
    .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    buf.save(path).map_err(|e| Error::Image(e.to_string()))
}

/// Image files of a directory in lexicographic order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm" | "pnm")
            )
        })
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn load_sequence(dir: &Path) -> Result<Vec<Frame>> {
    list_frames(dir)?.iter().map(|p| load_frame(p, None)).collect()
}

/// Sequences under `dir`: one per sub-directory of frames, or `dir` itself
/// when it holds frames directly.
pub fn load_sequence_dirs(dir: &Path) -> Result<Vec<Vec<Frame>>> {
    let own = list_frames(dir)?;
    if !own.is_empty() {
        return Ok(vec![own.iter().map(|p| load_frame(p, None)).collect::<Result<_>>()?]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let seqs: Vec<Vec<Frame>> = subdirs
        .iter()
        .map(|d| load_sequence(d))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|s| !s.is_empty())
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidArgument(format!("no frames under {}", dir.display())));
    }
    Ok(seqs)
}

/// Splits a raw RGB24 file holding consecutive `width × height` frames.
pub fn load_raw_sequence(path: &Path, width: usize, height: usize) -> Result<Vec<Frame>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let fsize = 3 * width * height;
    if fsize == 0 || bytes.len() % fsize != 0 {
        return Err(Error::InvalidArgument(format!(
            "raw file of {} bytes is not a whole number of {width}x{height} RGB24 frames",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(fsize)
        .map(|c| Frame::from_rgb8(c, height, width))
        .collect()
}

fn round_up(v: usize, stride: usize) -> usize {
    v.div_ceil(stride) * stride
}

/// Pads with edge replication up to the next multiple of `stride`; the
/// original size is kept for cropping.
pub fn pad_to_stride(f: &Frame, stride: usize) -> Result<Frame> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let (h, w) = (f.height, f.width);
    let (ph, pw) = (round_up(h, stride), round_up(w, stride));
    if ph == h && pw == w {
        return Ok(f.clone());
    }
    let mut data = Vec::with_capacity(3 * ph * pw);
    for c in 0..3 {
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                data.push(f.at(c, sy, x.min(w - 1)));
            }
        }
    }
    Ok(Frame {
        data,
        height: ph,
        width: pw,
        orig_height: f.orig_height,
        orig_width: f.orig_width,
    })
}

/// Consecutive frames sharing dimensions and augmentation.
#[derive(Debug, Clone)]
pub struct Clip {
    frames: Vec<Frame>,
}

impl Clip {
    pub fn new(frames: Vec<Frame>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::SequenceTooShort {
                have: frames.len(),
                need: 2,
            });
        }
        let (h, w) = (frames[0].height, frames[0].width);
        if frames.iter().any(|f| f.height != h || f.width != w) {
            return Err(Error::Shape("clip frames differ in size".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WindowConfig {
    pub clip_len: usize,
    pub crop: usize,
    /// Step between window starts; `clip_len` gives disjoint windows.
    pub stride: usize,
    pub flip_prob: f64,
}

/// Cuts `frames` into windows of `clip_len`, each with one uniformly
/// placed `crop × crop` window and one flip decision shared by its frames.
pub fn window_clips<R: Rng>(frames: &[Frame], cfg: WindowConfig, rng: &mut R) -> Result<Vec<Clip>> {
    if frames.len() < cfg.clip_len {
        return Err(Error::SequenceTooShort {
            have: frames.len(),
            need: cfg.clip_len,
        });
    }
    if cfg.clip_len < 2 {
        return Err(Error::InvalidArgument("clip_len must be >= 2".into()));
    }
    let (h, w) = (frames[0].height, frames[0].width);
    if cfg.crop > h.min(w) || cfg.crop == 0 {
        return Err(Error::InvalidArgument(format!(
            "crop {} does not fit {w}x{h} frames",
            cfg.crop
        )));
    }
    let stride = cfg.stride.max(1);
    let mut clips = Vec::new();
    let mut start = 0;
    while start + cfg.clip_len <= frames.len() {
        let top = rng.random_range(0..=h - cfg.crop);
        let left = rng.random_range(0..=w - cfg.crop);
        let flip = rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
        let out = frames[start..start + cfg.clip_len]
            .iter()
            .map(|f| {
                let c = f.crop(top, left, cfg.crop, cfg.crop);
                if flip {
                    c.flip_horizontal()
                } else {
                    c
                }
            })
            .collect();
        clips.push(Clip::new(out)?);
        start += stride;
    }
    Ok(clips)
}

/// Stacks frame `index` of every clip into an `(N, 3, H, W)` tensor.
pub fn batch_frame(clips: &[Clip], index: usize, device: &Device) -> Result<Tensor> {
    let ts: Vec<Tensor> = clips
        .iter()
        .map(|c| c.frames[index].to_tensor(device))
        .collect::<Result<_>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}
