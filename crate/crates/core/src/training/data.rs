use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frames::{batch_frame, Clip, Frame};

/// Supplies training batches. Element `t` of the result is frame `t + 1`
/// of every clip, stacked to (batch, 3, H, W).
pub trait ClipSource {
    fn sample(&mut self, batch: usize, clip_len: usize) -> Result<Vec<Tensor>>;
}

fn stack(clips: &[Clip], clip_len: usize) -> Result<Vec<Tensor>> {
    (0..clip_len).map(|t| batch_frame(clips, t, &Device::Cpu)).collect()
}

/// Random crops of decoded sequences.
pub struct SequenceClips {
    sequences: Vec<Vec<Frame>>,
    crop: usize,
    flip_prob: f64,
    rng: ChaCha8Rng,
}

impl SequenceClips {
    pub fn new(sequences: Vec<Vec<Frame>>, crop: usize, flip_prob: f64, seed: u64) -> Result<Self> {
        if crop == 0 || crop % 16 != 0 {
            return Err(Error::InvalidArgument(format!("crop {crop} must be a positive multiple of 16")));
        }
        let sequences: Vec<Vec<Frame>> = sequences
            .into_iter()
            .filter(|s| s.first().is_some_and(|f| f.height() >= crop && f.width() >= crop))
            .collect();
        if sequences.is_empty() {
            return Err(Error::InvalidArgument(format!("no sequence is at least {crop}×{crop}")));
        }
        Ok(Self {
            sequences,
            crop,
            flip_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl ClipSource for SequenceClips {
    fn sample(&mut self, batch: usize, clip_len: usize) -> Result<Vec<Tensor>> {
        let eligible: Vec<usize> = (0..self.sequences.len())
            .filter(|&i| self.sequences[i].len() >= clip_len)
            .collect();
        if eligible.is_empty() {
            let have = self.sequences.iter().map(Vec::len).max().unwrap_or(0);
            return Err(Error::SequenceTooShort { have, need: clip_len });
        }
        let mut clips = Vec::with_capacity(batch);
        for _ in 0..batch {
            let seq = &self.sequences[eligible[self.rng.random_range(0..eligible.len())]];
            let start = self.rng.random_range(0..=seq.len() - clip_len);
            let (h, w) = (seq[0].height(), seq[0].width());
            let top = self.rng.random_range(0..=h - self.crop);
            let left = self.rng.random_range(0..=w - self.crop);
            let flip = self.rng.random_bool(self.flip_prob.clamp(0.0, 1.0));
            let frames = seq[start..start + clip_len]
                .iter()
                .map(|f| {
                    let c = f.crop(top, left, self.crop, self.crop);
                    if flip {
                        c.flip_horizontal()
                    } else {
                        c
                    }
                })
                .collect();
            clips.push(Clip::new(frames)?);
        }
        stack(&clips, clip_len)
    }
}

/// Procedural textures sliding at a constant integer velocity.
pub struct SyntheticClips {
    size: usize,
    max_speed: i64,
    rng: ChaCha8Rng,
}

impl SyntheticClips {
    pub fn new(size: usize, max_speed: usize, seed: u64) -> Self {
        Self {
            size,
            max_speed: max_speed as i64,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn texture(&mut self, side: usize) -> Vec<f32> {
        let mut img = vec![0f32; 3 * side * side];
        let rng = &mut self.rng;
        for c in 0..3 {
            let waves: Vec<(f32, f32, f32, f32)> = (0..4)
                .map(|_| {
                    (
                        rng.random_range(-0.5f32..0.5),
                        rng.random_range(-0.5f32..0.5),
                        rng.random_range(0f32..std::f32::consts::TAU),
                        rng.random_range(0.05f32..0.2),
                    )
                })
                .collect();
            for y in 0..side {
                for x in 0..side {
                    let v: f32 = waves
                        .iter()
                        .map(|&(fx, fy, ph, a)| a * (fx * x as f32 + fy * y as f32 + ph).sin())
                        .sum();
                    img[(c * side + y) * side + x] = 0.5 + v;
                }
            }
        }
        for _ in 0..6 {
            let (y0, x0) = (rng.random_range(0..side), rng.random_range(0..side));
            let (bh, bw) = (rng.random_range(2..=side / 4 + 2), rng.random_range(2..=side / 4 + 2));
            let color: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            for y in y0..(y0 + bh).min(side) {
                for x in x0..(x0 + bw).min(side) {
                    for (c, &col) in color.iter().enumerate() {
                        img[(c * side + y) * side + x] = col;
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        img
    }

    fn clip(&mut self, clip_len: usize) -> Result<Clip> {
        let travel = self.max_speed as usize * (clip_len - 1);
        let side = self.size + 2 * travel;
        let tex = self.texture(side);
        let vy = self.rng.random_range(-self.max_speed..=self.max_speed);
        let vx = self.rng.random_range(-self.max_speed..=self.max_speed);
        let s = self.size;
        let frames = (0..clip_len as i64)
            .map(|t| {
                let top = (travel as i64 + vy * t) as usize;
                let left = (travel as i64 + vx * t) as usize;
                let mut data = Vec::with_capacity(3 * s * s);
                for c in 0..3 {
                    for y in 0..s {
                        let row = (c * side + top + y) * side + left;
                        data.extend_from_slice(&tex[row..row + s]);
                    }
                }
                Frame::new(data, s, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Clip::new(frames)
    }
}

impl ClipSource for SyntheticClips {
    fn sample(&mut self, batch: usize, clip_len: usize) -> Result<Vec<Tensor>> {
        let clips = (0..batch).map(|_| self.clip(clip_len)).collect::<Result<Vec<_>>>()?;
        stack(&clips, clip_len)
    }
}
