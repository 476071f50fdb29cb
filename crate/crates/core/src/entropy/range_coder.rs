//! Carry-less range coder (Subbotin style) on a 64-bit state.
//!
//! Symbol models are cumulative frequency tables with a total of
//! `2^PRECISION`. Low and range are kept so that `low + range` never
//! overflows; when the range collapses below `BOT` it is cut back to the
//! next `BOT` boundary instead of propagating a carry.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;

/// Cumulative frequency table: `cdf[0] = 0`, `cdf[n] = TOTAL`, strictly
/// increasing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdf(Vec<u32>);

impl Cdf {
    pub fn new(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != TOTAL {
            return Err(Error::InvalidArgument("cdf must start at 0 and end at 2^16".into()));
        }
        if let Some(i) = cdf.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::ZeroWidthSymbol(i));
        }
        Ok(Self(cdf))
    }

    /// From symbol frequencies that sum to `TOTAL`.
    pub fn from_freqs(freqs: &[u32]) -> Result<Self> {
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        cdf.push(0u32);
        let mut acc = 0u32;
        for &f in freqs {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::InvalidArgument("frequency overflow".into()))?;
            cdf.push(acc);
        }
        Self::new(cdf)
    }

    pub fn num_symbols(&self) -> usize {
        self.0.len() - 1
    }

    #[inline]
    pub fn range_of(&self, sym: usize) -> (u32, u32) {
        (self.0[sym], self.0[sym + 1] - self.0[sym])
    }

    /// Symbol whose interval contains `value`.
    #[inline]
    fn find(&self, value: u32) -> usize {
        // first index with cdf > value, minus one
        self.0.partition_point(|&c| c <= value) - 1
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, sym: usize, cdf: &Cdf) -> Result<()> {
        if sym >= cdf.num_symbols() {
            return Err(Error::InvalidArgument(format!(
                "symbol {sym} outside a {}-symbol alphabet",
                cdf.num_symbols()
            )));
        }
        let (start, freq) = cdf.range_of(sym);
        self.encode_range(start, freq);
        Ok(())
    }

    fn encode_range(&mut self, start: u32, freq: u32) {
        let r = self.range >> PRECISION;
        self.low += r * start as u64;
        self.range = r * freq as u64;
        self.normalize();
    }

    /// `nbits` raw bits (at most 16), most significant first.
    pub fn encode_bits(&mut self, value: u32, nbits: u32) {
        debug_assert!(nbits <= PRECISION && (nbits == 32 || value < (1 << nbits)));
        if nbits == 0 {
            return;
        }
        let width = TOTAL >> nbits;
        self.encode_range(value * width, width);
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Writes the shortest tail that pins a value inside the final interval.
    /// The decoder reads zeros past the end, so trailing zero bytes are
    /// dropped.
    pub fn finish(mut self) -> Vec<u8> {
        let low = self.low as u128;
        let high = low + self.range as u128;
        let mut value = low;
        for shift in (0..=64u32).rev().step_by(8) {
            let unit = 1u128 << shift;
            let cand = low.div_ceil(unit) * unit;
            if cand < high {
                value = cand;
                break;
            }
        }
        if value >> 64 != 0 {
            // only reachable when the interval ends exactly at 2^64
            value = low;
        }
        self.out.extend_from_slice(&(value as u64).to_be_bytes());
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }

    /// Bytes emitted so far (excludes the final flush).
    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RangeDecoder {
    low: u64,
    range: u64,
    code: u64,
    data: Vec<u8>,
    pos: usize,
}

impl RangeDecoder {
    pub fn new(data: Vec<u8>) -> Self {
        let mut d = Self {
            low: 0,
            range: u64::MAX,
            code: 0,
            data,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    #[inline]
    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, cdf: &Cdf) -> Result<usize> {
        let r = self.range >> PRECISION;
        let value = self.code.wrapping_sub(self.low) / r;
        if value >= TOTAL as u64 {
            return Err(Error::CoderDesync(format!("target {value} beyond the model total")));
        }
        let sym = cdf.find(value as u32);
        let (start, freq) = cdf.range_of(sym);
        self.low += r * start as u64;
        self.range = r * freq as u64;
        self.normalize();
        Ok(sym)
    }

    pub fn decode_bits(&mut self, nbits: u32) -> Result<u32> {
        if nbits == 0 {
            return Ok(0);
        }
        let width = TOTAL >> nbits;
        let r = self.range >> PRECISION;
        let value = self.code.wrapping_sub(self.low) / r;
        if value >= TOTAL as u64 {
            return Err(Error::CoderDesync("raw bits beyond the model total".into()));
        }
        let v = value as u32 / width;
        self.low += r * (v * width) as u64;
        self.range = r * width as u64;
        self.normalize();
        Ok(v)
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

/// Encodes `symbols`, each with its own table.
pub fn range_encode(symbols: &[usize], cdfs: &[&Cdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::InvalidArgument("one table per symbol required".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&s, c) in symbols.iter().zip(cdfs) {
        enc.encode(s, c)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], cdfs: &[&Cdf]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes.to_vec());
    cdfs.iter().map(|c| dec.decode(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn empty_stream_is_flush_only() {
        assert!(range_encode(&[], &[]).unwrap().len() <= 8);
        let cdf = Cdf::from_freqs(&[TOTAL / 2, TOTAL / 2]).unwrap();
        let bytes = range_encode(&[0, 0, 0], &[&cdf; 3]).unwrap();
        assert!(bytes.len() <= 1);
        assert_eq!(range_decode(&bytes, &[&cdf; 3]).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn rejects_zero_width() {
        assert!(matches!(Cdf::new(vec![0, 100, 100, TOTAL]), Err(Error::ZeroWidthSymbol(1))));
        assert!(Cdf::from_freqs(&[TOTAL / 2, TOTAL / 2]).is_ok());
    }

    #[test]
    fn fair_bits_cost_one_bit_each() {
        let cdf = Cdf::from_freqs(&[TOTAL / 2, TOTAL / 2]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 80_000;
        let syms: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let cdfs = vec![&cdf; n];
        let bytes = range_encode(&syms, &cdfs).unwrap();
        assert!((bytes.len() as i64 - (n / 8) as i64).abs() <= 8, "{} bytes", bytes.len());
        assert_eq!(range_decode(&bytes, &cdfs).unwrap(), syms);
    }

    #[test]
    fn raw_bits_roundtrip() {
        let mut enc = RangeEncoder::new();
        let vals = [(5u32, 3u32), (0, 1), (1, 1), (65535, 16), (1234, 12)];
        for &(v, b) in &vals {
            enc.encode_bits(v, b);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(bytes);
        for &(v, b) in &vals {
            assert_eq!(dec.decode_bits(b).unwrap(), v);
        }
    }

    #[test]
    fn skewed_tables_roundtrip() {
        let cdf = Cdf::from_freqs(&[1, TOTAL - 3, 1, 1]).unwrap();
        let syms = vec![1usize, 1, 0, 3, 1, 2, 1, 1, 1, 0, 0, 0, 3];
        let cdfs = vec![&cdf; syms.len()];
        let bytes = range_encode(&syms, &cdfs).unwrap();
        assert_eq!(range_decode(&bytes, &cdfs).unwrap(), syms);
    }
}
