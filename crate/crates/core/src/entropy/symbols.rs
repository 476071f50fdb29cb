//! Integer symbols to coder tables.
//!
//! Symbols in `[-RANGE, RANGE]` map to table slots `1..=2·RANGE+1`; slot 0
//! and the last slot are escapes for values beyond either end, followed by
//! the excess magnitude as a length-prefixed raw integer.

use super::gaussian::normal_cdf;
use super::range_coder::{Cdf, RangeDecoder, RangeEncoder, TOTAL};
use crate::error::{Error, Result};

pub const RANGE: i64 = 64;
pub const NUM_SLOTS: usize = (2 * RANGE + 3) as usize;
const LOW_ESCAPE: usize = 0;
const HIGH_ESCAPE: usize = NUM_SLOTS - 1;
/// Largest magnitude the escape path can carry.
const MAX_MAGNITUDE: i64 = 1 << 30;

/// Quantizes a probability vector (sums to about 1) to a table where every
/// slot keeps a frequency of at least 1.
pub fn table_from_probs(probs: &[f64]) -> Result<Cdf> {
    let n = probs.len() as u32;
    if n < 2 || n > TOTAL {
        return Err(Error::InvalidArgument(format!("{n} symbols cannot form a table")));
    }
    let sum: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::NonFinite("probability table"));
    }
    let budget = (TOTAL - n) as f64;
    let mut freqs: Vec<u32> = probs
        .iter()
        .map(|&p| 1 + ((p.max(0.0) / sum) * budget).floor() as u32)
        .collect();
    let used: u32 = freqs.iter().sum();
    let argmax = (0..freqs.len()).max_by_key(|&i| freqs[i]).unwrap_or(0);
    freqs[argmax] += TOTAL - used;
    Cdf::from_freqs(&freqs)
}

/// Table for the integer residual `round(y − μ)` under `N(0, σ²)`.
pub fn gaussian_table(sigma: f64) -> Result<Cdf> {
    let s = sigma.max(super::SIGMA_MIN);
    let mut probs = Vec::with_capacity(NUM_SLOTS);
    let mut prev = normal_cdf((-(RANGE as f64) - 0.5) / s);
    probs.push(prev);
    for d in -RANGE..=RANGE {
        // upper tail uses the mirrored lower-tail value for accuracy
        let next = if d < 0 {
            normal_cdf((d as f64 + 0.5) / s)
        } else {
            1.0 - normal_cdf(-(d as f64 + 0.5) / s)
        };
        probs.push((next - prev).max(0.0));
        prev = next;
    }
    probs.push(normal_cdf((-(RANGE as f64) - 0.5) / s));
    table_from_probs(&probs)
}

/// Table from cumulative values at the `2·RANGE + 2` half-integer
/// boundaries `-RANGE-0.5, ..., RANGE+0.5`.
pub fn table_from_boundaries(cdf: &[f64]) -> Result<Cdf> {
    if cdf.len() != NUM_SLOTS - 1 {
        return Err(Error::InvalidArgument(format!("{} boundaries, expected {}", cdf.len(), NUM_SLOTS - 1)));
    }
    let mut probs = Vec::with_capacity(NUM_SLOTS);
    probs.push(cdf[0]);
    for w in cdf.windows(2) {
        probs.push(w[1] - w[0]);
    }
    probs.push(1.0 - cdf[cdf.len() - 1]);
    table_from_probs(&probs)
}

/// Half-integer boundaries used by [`table_from_boundaries`].
pub fn boundaries() -> Vec<f64> {
    (-RANGE..=RANGE + 1).map(|v| v as f64 - 0.5).collect()
}

pub fn encode_symbol(enc: &mut RangeEncoder, value: i64, cdf: &Cdf) -> Result<()> {
    if value.abs() > MAX_MAGNITUDE {
        return Err(Error::InvalidArgument(format!("symbol {value} beyond the escape range")));
    }
    if value < -RANGE {
        enc.encode(LOW_ESCAPE, cdf)?;
        encode_magnitude(enc, (-value - RANGE - 1) as u32);
    } else if value > RANGE {
        enc.encode(HIGH_ESCAPE, cdf)?;
        encode_magnitude(enc, (value - RANGE - 1) as u32);
    } else {
        enc.encode((value + RANGE + 1) as usize, cdf)?;
    }
    Ok(())
}

pub fn decode_symbol(dec: &mut RangeDecoder, cdf: &Cdf) -> Result<i64> {
    if cdf.num_symbols() != NUM_SLOTS {
        return Err(Error::CoderDesync(format!("table with {} slots", cdf.num_symbols())));
    }
    let slot = dec.decode(cdf)?;
    Ok(match slot {
        LOW_ESCAPE => -RANGE - 1 - decode_magnitude(dec)? as i64,
        HIGH_ESCAPE => RANGE + 1 + decode_magnitude(dec)? as i64,
        s => s as i64 - RANGE - 1,
    })
}

fn encode_magnitude(enc: &mut RangeEncoder, m: u32) {
    let v = m + 1;
    let len = 31 - v.leading_zeros();
    enc.encode_bits(len, 5);
    let payload = v - (1 << len);
    if len > 16 {
        enc.encode_bits(payload >> 16, len - 16);
        enc.encode_bits(payload & 0xffff, 16);
    } else {
        enc.encode_bits(payload, len);
    }
}

fn decode_magnitude(dec: &mut RangeDecoder) -> Result<u32> {
    let len = dec.decode_bits(5)?;
    if len > 30 {
        return Err(Error::CoderDesync(format!("escape length {len}")));
    }
    let payload = if len > 16 {
        let hi = dec.decode_bits(len - 16)?;
        (hi << 16) | dec.decode_bits(16)?
    } else {
        dec.decode_bits(len)?
    };
    Ok((1u32 << len) + payload - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tables_are_valid_across_scales() {
        for &s in &[0.001, 0.01, 0.3, 1.0, 7.0, 40.0, 500.0] {
            let t = gaussian_table(s).unwrap();
            assert_eq!(t.num_symbols(), NUM_SLOTS);
        }
    }

    #[test]
    fn table_cost_tracks_bin_probability() {
        let t = gaussian_table(2.0).unwrap();
        for d in -5i64..=5 {
            let (_, f) = t.range_of((d + RANGE + 1) as usize);
            let coded = -(f as f64 / TOTAL as f64).log2();
            let ideal = -super::super::gaussian::bin_probability(d as f64, 2.0).log2();
            assert!((coded - ideal).abs() < 0.01, "{d}: {coded} vs {ideal}");
        }
    }

    proptest! {
        #[test]
        fn symbols_roundtrip(values in proptest::collection::vec(-100_000i64..100_000, 1..64), sigma in 0.01f64..50.0) {
            let t = gaussian_table(sigma).unwrap();
            let mut enc = RangeEncoder::new();
            for &v in &values {
                encode_symbol(&mut enc, v, &t).unwrap();
            }
            let mut dec = RangeDecoder::new(enc.finish());
            for &v in &values {
                prop_assert_eq!(decode_symbol(&mut dec, &t).unwrap(), v);
            }
        }
    }
}
