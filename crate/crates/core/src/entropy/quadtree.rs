//! Four-step spatial-channel decoding order.
//!
//! Channels are cut into four equal chunks and each 2×2 patch carries
//! labels `2·(y mod 2) + (x mod 2)`. Element (chunk `k`, label `l`) is
//! decoded at step `(k + l) mod 4`, so every step touches every chunk and
//! every patch position exactly once.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub const STEPS: usize = 4;

#[inline]
pub fn step_of(c: usize, y: usize, x: usize, channels: usize) -> usize {
    let chunk = c / (channels / STEPS);
    let label = 2 * (y % 2) + (x % 2);
    (chunk + label) % STEPS
}

/// Flat `(c, y, x)` indices (row-major, `c·h·w + y·w + x`) of each step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuadtreeGroups {
    channels: usize,
    height: usize,
    width: usize,
    groups: [Vec<usize>; STEPS],
}

pub fn quadtree_partition(channels: usize, height: usize, width: usize) -> Result<QuadtreeGroups> {
    if channels == 0 || channels % STEPS != 0 {
        return Err(Error::Shape(format!("{channels} channels cannot be split into 4 chunks")));
    }
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::Shape(format!("{height}x{width} latent must be padded to even size")));
    }
    let mut groups: [Vec<usize>; STEPS] = Default::default();
    for c in 0..channels {
        for y in 0..height {
            for x in 0..width {
                groups[step_of(c, y, x, channels)].push((c * height + y) * width + x);
            }
        }
    }
    Ok(QuadtreeGroups {
        channels,
        height,
        width,
        groups,
    })
}

impl QuadtreeGroups {
    pub fn group(&self, s: usize) -> &[usize] {
        &self.groups[s]
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split(&self, values: &[f32]) -> Result<[Vec<f32>; STEPS]> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!("{} values for a {}-element partition", values.len(), self.len())));
        }
        Ok(std::array::from_fn(|s| self.groups[s].iter().map(|&i| values[i]).collect()))
    }

    pub fn merge(&self, parts: &[Vec<f32>; STEPS]) -> Result<Vec<f32>> {
        let mut out = vec![0f32; self.len()];
        for (s, part) in parts.iter().enumerate() {
            if part.len() != self.groups[s].len() {
                return Err(Error::Shape(format!("group {s} has {} values, expected {}", part.len(), self.groups[s].len())));
            }
            for (&i, &v) in self.groups[s].iter().zip(part) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    /// 0/1 mask of shape (1, C, h, w) selecting step `s`.
    pub fn mask(&self, s: usize, device: &Device) -> Result<Tensor> {
        let mut m = vec![0f32; self.len()];
        for &i in &self.groups[s] {
            m[i] = 1.0;
        }
        Ok(Tensor::from_vec(m, (1, self.channels, self.height, self.width), device)?)
    }
}

/// Zero-pads the two spatial dims of an (N, C, h, w) tensor up to even.
pub fn pad_even(t: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = t.dims4()?;
    let t = if h % 2 == 1 { t.pad_with_zeros(2, 0, 1)? } else { t.clone() };
    Ok(if w % 2 == 1 { t.pad_with_zeros(3, 0, 1)? } else { t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exhaustive_small_case() {
        let g = quadtree_partition(8, 4, 4).unwrap();
        let mut seen = vec![0u8; 128];
        for s in 0..STEPS {
            assert_eq!(g.group(s).len(), 32);
            for &i in g.group(s) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
        let vals: Vec<f32> = (0..128).map(|i| i as f32 * 0.5 - 3.0).collect();
        assert_eq!(g.merge(&g.split(&vals).unwrap()).unwrap(), vals);
    }

    #[test]
    fn every_step_spans_all_chunks_and_labels() {
        let g = quadtree_partition(8, 4, 4).unwrap();
        for s in 0..STEPS {
            let mut pairs = std::collections::BTreeSet::new();
            for &i in g.group(s) {
                let (c, y, x) = (i / 16, (i / 4) % 4, i % 4);
                pairs.insert((c / 2, 2 * (y % 2) + x % 2));
            }
            let chunks: std::collections::BTreeSet<_> = pairs.iter().map(|p| p.0).collect();
            let labels: std::collections::BTreeSet<_> = pairs.iter().map(|p| p.1).collect();
            assert_eq!(chunks.len(), 4);
            assert_eq!(labels.len(), 4);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(quadtree_partition(6, 4, 4).is_err());
        assert!(quadtree_partition(8, 3, 4).is_err());
    }

    #[test]
    fn pad_even_pads_odd_dims() {
        let t = Tensor::ones((1, 4, 3, 5), candle_core::DType::F32, &Device::Cpu).unwrap();
        let p = pad_even(&t).unwrap();
        assert_eq!(p.dims(), &[1, 4, 4, 6]);
        assert_eq!(p.sum_all().unwrap().to_scalar::<f32>().unwrap(), 60.0);
    }

    proptest! {
        #[test]
        fn partition_is_a_bijection(c4 in 1usize..5, h2 in 1usize..5, w2 in 1usize..5) {
            let (c, h, w) = (4 * c4, 2 * h2, 2 * w2);
            let g = quadtree_partition(c, h, w).unwrap();
            let vals: Vec<f32> = (0..c * h * w).map(|i| i as f32).collect();
            prop_assert_eq!(g.merge(&g.split(&vals).unwrap()).unwrap(), vals);
            for s in 0..STEPS {
                prop_assert_eq!(g.group(s).len(), c * h * w / 4);
            }
        }
    }
}
