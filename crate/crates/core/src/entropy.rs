//! Static-model range coding.
//!
//! Symbol models are cumulative frequency tables summing to `2^16`. The coder
//! is a byte-oriented range coder with a 32-bit range and carry propagation
//! through a cached output byte; the stream ends with a 5-byte flush and the
//! decoder checks that it consumed exactly the bytes that were written.

use thiserror::Error;

use crate::bytes::{ByteReader, ByteWriter, Truncated};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntropyError {
    #[error("symbol {symbol} outside alphabet of {size}")]
    SymbolOutOfRange { symbol: u32, size: usize },
    #[error("alphabet of {0} symbols does not fit a 16-bit table")]
    AlphabetSize(usize),
    #[error("corrupt range-coded stream")]
    Corrupt,
    #[error("expected {expected} symbols but the stream holds data for a different count")]
    CountMismatch { expected: usize },
    #[error(transparent)]
    Truncated(#[from] Truncated),
}

/// Cumulative frequencies `cum[0] = 0 < cum[1] < ... < cum[S] = 2^16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    cum: Vec<u32>,
}

impl FrequencyTable {
    /// Every symbol gets width 1; the remaining `2^16 - S` units are shared
    /// in proportion to `counts` by largest remainder (ties to lower symbols).
    pub fn from_counts(counts: &[u64]) -> Result<Self, EntropyError> {
        let s = counts.len();
        if s == 0 || s > PROB_TOTAL as usize {
            return Err(EntropyError::AlphabetSize(s));
        }
        let spare = u128::from(PROB_TOTAL - s as u32);
        let total: u128 = counts.iter().map(|&c| u128::from(c)).sum();
        let weights: Vec<u128> = if total == 0 {
            vec![1; s]
        } else {
            counts.iter().map(|&c| u128::from(c)).collect()
        };
        let total = weights.iter().sum::<u128>();
        let mut widths: Vec<u32> = Vec::with_capacity(s);
        let mut remainders: Vec<(u128, usize)> = Vec::with_capacity(s);
        let mut assigned = 0u128;
        for (i, &w) in weights.iter().enumerate() {
            let num = spare * w;
            let base = num / total;
            assigned += base;
            widths.push(1 + base as u32);
            remainders.push((num % total, i));
        }
        let mut leftover = (spare - assigned) as usize;
        if leftover > 0 {
            remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, i) in remainders.iter() {
                if leftover == 0 {
                    break;
                }
                widths[i] += 1;
                leftover -= 1;
            }
        }
        let mut cum = Vec::with_capacity(s + 1);
        cum.push(0u32);
        for w in widths {
            cum.push(cum.last().unwrap() + w);
        }
        debug_assert_eq!(*cum.last().unwrap(), PROB_TOTAL);
        Ok(Self { cum })
    }

    pub fn symbol_count(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn cum_freq(&self) -> &[u32] {
        &self.cum
    }

    pub fn width(&self, symbol: u32) -> u32 {
        self.cum[symbol as usize + 1] - self.cum[symbol as usize]
    }

    fn check(&self, symbol: u32) -> Result<(), EntropyError> {
        if (symbol as usize) < self.symbol_count() {
            Ok(())
        } else {
            Err(EntropyError::SymbolOutOfRange {
                symbol,
                size: self.symbol_count(),
            })
        }
    }

    fn lookup(&self, target: u32) -> u32 {
        // last index with cum <= target
        (self.cum.partition_point(|&c| c <= target) - 1) as u32
    }

    /// Ideal code length of `symbols` under this table, in bits.
    pub fn cost_bits(&self, symbols: &[u32]) -> f64 {
        symbols
            .iter()
            .map(|&s| f64::from(PROB_BITS) - f64::from(self.width(s)).log2())
            .sum()
    }
}

pub fn symbol_counts(symbols: &[u32], alphabet: usize) -> Result<Vec<u64>, EntropyError> {
    let mut counts = vec![0u64; alphabet];
    for &s in symbols {
        *counts.get_mut(s as usize).ok_or(EntropyError::SymbolOutOfRange {
            symbol: s,
            size: alphabet,
        })? += 1;
    }
    Ok(counts)
}

pub fn build_table(symbols: &[u32], alphabet: usize) -> Result<FrequencyTable, EntropyError> {
    FrequencyTable::from_counts(&symbol_counts(symbols, alphabet)?)
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    symbols: usize,
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
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            symbols: 0,
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, table: &FrequencyTable, symbol: u32) -> Result<(), EntropyError> {
        table.check(symbol)?;
        let start = table.cum[symbol as usize];
        let r = self.range >> PROB_BITS;
        self.low += u64::from(r) * u64::from(start);
        self.range = r * table.width(symbol);
        self.normalize();
        self.symbols += 1;
        Ok(())
    }

    /// Writes the low `bits` bits of `value` with a uniform model (`bits <= 16`).
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && u64::from(value) < 1u64 << bits);
        if bits == 0 {
            return;
        }
        let r = self.range >> bits;
        self.low += u64::from(r) * u64::from(value);
        self.range = r;
        self.normalize();
        self.symbols += 1;
    }

    /// Flushes and returns the payload; an encoder that saw no symbols
    /// produces an empty payload.
    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols == 0 {
            return Vec::new();
        }
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self, EntropyError> {
        if data.len() < 5 {
            return Err(EntropyError::Corrupt);
        }
        let mut d = Self {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | u32::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8, EntropyError> {
        let b = *self.data.get(self.pos).ok_or(EntropyError::Corrupt)?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<(), EntropyError> {
        while self.range < TOP {
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &FrequencyTable) -> Result<u32, EntropyError> {
        let r = self.range >> PROB_BITS;
        let target = self.code / r;
        if target >= PROB_TOTAL {
            return Err(EntropyError::Corrupt);
        }
        let s = table.lookup(target);
        let start = table.cum[s as usize];
        self.code -= r * start;
        self.range = r * table.width(s);
        self.normalize()?;
        Ok(s)
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32, EntropyError> {
        if bits == 0 {
            return Ok(0);
        }
        let r = self.range >> bits;
        let v = self.code / r;
        if u64::from(v) >= 1u64 << bits {
            return Err(EntropyError::Corrupt);
        }
        self.code -= r * v;
        self.range = r;
        self.normalize()?;
        Ok(v)
    }

    /// Final-state check: the whole payload was consumed.
    pub fn finish(self) -> Result<(), EntropyError> {
        if self.pos == self.data.len() && self.code < self.range {
            Ok(())
        } else {
            Err(EntropyError::Corrupt)
        }
    }
}

pub fn encode(symbols: &[u32], table: &FrequencyTable) -> Result<Vec<u8>, EntropyError> {
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        enc.encode(table, s)?;
    }
    Ok(enc.finish())
}

pub fn decode(bytes: &[u8], table: &FrequencyTable, count: usize) -> Result<Vec<u32>, EntropyError> {
    if count == 0 {
        return if bytes.is_empty() {
            Ok(Vec::new())
        } else {
            Err(EntropyError::CountMismatch { expected: 0 })
        };
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(dec.decode(table)?);
    }
    dec.finish().map_err(|_| EntropyError::CountMismatch { expected: count })?;
    Ok(out)
}

/// Empirical Shannon bound `reserve_count * H(p)` in bits, where `p` is the
/// symbol distribution of `symbols`.
pub fn entropy_lower_bound(symbols: &[u32], reserve_count: f64) -> f64 {
    if symbols.is_empty() {
        return 0.0;
    }
    let mut sorted = symbols.to_vec();
    sorted.sort_unstable();
    let n = symbols.len() as f64;
    let mut h = 0.0;
    for run in sorted.chunk_by(|a, b| a == b) {
        let p = run.len() as f64 / n;
        h -= p * p.log2();
    }
    reserve_count * h
}

/// Counts serialized sparsely: `[S][nonzero][(symbol gap, count)...]`.
pub fn write_counts(w: &mut ByteWriter, counts: &[u64]) {
    w.varint(counts.len() as u64);
    let nz = counts.iter().filter(|&&c| c > 0).count();
    w.varint(nz as u64);
    let mut prev = 0usize;
    for (s, &c) in counts.iter().enumerate() {
        if c > 0 {
            w.varint((s - prev) as u64);
            w.varint(c);
            prev = s;
        }
    }
}

pub fn read_counts(r: &mut ByteReader<'_>) -> Result<Vec<u64>, EntropyError> {
    let s = r.varint()? as usize;
    if s > PROB_TOTAL as usize {
        return Err(EntropyError::AlphabetSize(s));
    }
    let nz = r.varint()? as usize;
    let mut counts = vec![0u64; s];
    let mut sym = 0usize;
    for _ in 0..nz {
        sym += r.varint()? as usize;
        let c = r.varint()?;
        *counts.get_mut(sym).ok_or(EntropyError::Corrupt)? = c;
    }
    Ok(counts)
}

/// Zig-zag maps signed offsets to unsigned (`0, -1, 1, -2, ...`).
pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}

/// Magnitude class of `u`: 0 for zero, else its bit length. Values of class
/// `k >= 2` carry `k - 1` mantissa bits below the implied leading one.
pub fn magnitude_class(u: u64) -> u32 {
    64 - u.leading_zeros()
}

/// Classes `0..=17` cover zig-zagged offsets of codes up to 16 bits.
pub const CLASS_ALPHABET: usize = 18;

/// Writes a zig-zagged offset as class symbol plus raw mantissa bits.
pub fn encode_classed(enc: &mut RangeEncoder, table: &FrequencyTable, u: u64) -> Result<(), EntropyError> {
    let k = magnitude_class(u);
    enc.encode(table, k)?;
    if k >= 2 {
        let mbits = k - 1;
        let mantissa = u & ((1u64 << mbits) - 1);
        if mbits > 16 {
            enc.encode_bits((mantissa >> 16) as u32, mbits - 16);
            enc.encode_bits((mantissa & 0xFFFF) as u32, 16);
        } else {
            enc.encode_bits(mantissa as u32, mbits);
        }
    }
    Ok(())
}

pub fn decode_classed(dec: &mut RangeDecoder<'_>, table: &FrequencyTable) -> Result<u64, EntropyError> {
    let k = dec.decode(table)?;
    Ok(match k {
        0 => 0,
        1 => 1,
        _ => {
            let mbits = k - 1;
            let mantissa = if mbits > 16 {
                let hi = u64::from(dec.decode_bits(mbits - 16)?);
                (hi << 16) | u64::from(dec.decode_bits(16)?)
            } else {
                u64::from(dec.decode_bits(mbits)?)
            };
            (1u64 << mbits) | mantissa
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_symbol_table() {
        let t = build_table(&[2, 2, 2], 5).unwrap();
        assert_eq!(t.width(2), PROB_TOTAL - 4);
        assert_eq!(t.width(0), 1);
    }

    #[test]
    fn uniform_table() {
        let t = build_table(&[0, 1, 2, 3, 3, 2, 1, 0], 4).unwrap();
        for s in 0..4 {
            assert_eq!(t.width(s), 16384);
        }
    }

    #[test]
    fn symbol_out_of_range() {
        assert!(matches!(
            build_table(&[0, 7], 4),
            Err(EntropyError::SymbolOutOfRange { symbol: 7, size: 4 })
        ));
        assert!(matches!(
            FrequencyTable::from_counts(&vec![0; 70_000]),
            Err(EntropyError::AlphabetSize(70_000))
        ));
    }

    #[test]
    fn empty_stream() {
        let t = build_table(&[0], 2).unwrap();
        assert!(encode(&[], &t).unwrap().is_empty());
        assert_eq!(decode(&[], &t, 0).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn round_trip_and_corruption() {
        let syms: Vec<u32> = (0..5000u32).map(|i| (i * 7919 % 13) % 6).collect();
        let t = build_table(&syms, 6).unwrap();
        let bytes = encode(&syms, &t).unwrap();
        assert_eq!(decode(&bytes, &t, syms.len()).unwrap(), syms);
        assert!(decode(&bytes[..bytes.len() - 1], &t, syms.len()).is_err());
        assert!(decode(&bytes, &t, syms.len() - 3).is_err());
    }

    #[test]
    fn classed_values() {
        let t = FrequencyTable::from_counts(&[1; CLASS_ALPHABET]).unwrap();
        let vals = [0u64, 1, 2, 3, 4, 255, 65_535, 65_536, (1 << 17) - 1];
        let mut enc = RangeEncoder::new();
        for &v in &vals {
            encode_classed(&mut enc, &t, v).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &v in &vals {
            assert_eq!(decode_classed(&mut dec, &t).unwrap(), v);
        }
        dec.finish().unwrap();
        for v in [-5i64, 0, 7, -1, i64::from(i32::MAX)] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
    }

    #[test]
    fn lower_bounds() {
        assert_eq!(entropy_lower_bound(&[3; 10], 10.0), 0.0);
        let uniform: Vec<u32> = (0..256).collect();
        assert!((entropy_lower_bound(&uniform, 256.0) - 256.0 * 8.0).abs() < 1e-9);
    }

    #[test]
    fn counts_serialization() {
        let counts = vec![0, 4, 0, 0, 9, 1];
        let mut w = ByteWriter::new();
        write_counts(&mut w, &counts);
        let bytes = w.into_inner();
        assert_eq!(read_counts(&mut ByteReader::new(&bytes)).unwrap(), counts);
    }
}
