//! Group-wise uniform quantization and the per-group loss table.
//!
//! A group `c` at bit-width `b` uses
//!
//! ```text
//! S = (max - min) / 2^b
//! Z = round(2^b - max / S)
//! q = round(clamp(c / S + Z, 0, 2^b - 1))
//! c' = (q - Z) * S
//! ```
//!
//! with round-half-to-even everywhere. Width 0 stores no codes and restores
//! every element to the midpoint of the range.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_BITS: u8 = 16;
/// Options per group in the loss table: widths `0..=16`.
pub const WIDTH_OPTIONS: usize = MAX_BITS as usize + 1;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite value in quantization group")]
    NonFinite,
    #[error("bit-width {0} outside 0..=16")]
    BadWidth(u8),
    #[error("channel {channel}, block {block}: {source}")]
    Group {
        channel: usize,
        block: usize,
        #[source]
        source: Box<QuantError>,
    },
    #[error("bit matrix is {rows}x{cols}, expected {channels}x{blocks}")]
    Shape {
        rows: usize,
        cols: usize,
        channels: usize,
        blocks: usize,
    },
}

/// Contiguous near-equal blocks over one coefficient stream. Blocks have
/// `ceil(len / B)` elements except the last; trailing blocks are empty when
/// the stream is shorter than `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    pub offsets: Vec<usize>,
}

impl BlockLayout {
    pub fn new(len: usize, blocks: usize) -> Self {
        assert!(blocks >= 1, "at least one block");
        let size = len.div_ceil(blocks).max(1);
        let offsets = (0..=blocks).map(|j| (j * size).min(len)).collect();
        Self { offsets }
    }

    pub fn blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn range(&self, j: usize) -> std::ops::Range<usize> {
        self.offsets[j]..self.offsets[j + 1]
    }

    pub fn block_len(&self, j: usize) -> usize {
        self.offsets[j + 1] - self.offsets[j]
    }
}

/// Block layouts for every channel stream.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupPartition {
    pub layouts: Vec<BlockLayout>,
}

impl GroupPartition {
    pub fn new(stream_lens: &[usize], blocks: usize) -> Self {
        Self {
            layouts: stream_lens.iter().map(|&n| BlockLayout::new(n, blocks)).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.layouts.len()
    }

    pub fn blocks(&self) -> usize {
        self.layouts.first().map_or(0, BlockLayout::blocks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub codes: Vec<u32>,
    pub bits: u8,
    pub min: f32,
    pub max: f32,
}

/// Scale and zero point of a group, recomputed identically by the decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f64,
    pub zero: f64,
    pub degenerate: bool,
}

impl QuantParams {
    pub fn new(min: f32, max: f32, bits: u8) -> Self {
        let (lo, hi) = (f64::from(min), f64::from(max));
        if hi <= lo || bits == 0 {
            return Self {
                scale: 1.0,
                zero: 0.0,
                degenerate: hi <= lo,
            };
        }
        let levels = f64::from(1u32 << bits);
        let scale = (hi - lo) / levels;
        let zero = (levels - hi / scale).round_ties_even();
        Self {
            scale,
            zero,
            degenerate: false,
        }
    }

    /// Code of the value 0.0, clamped into the code range.
    pub fn zero_code(&self, bits: u8) -> u32 {
        if self.degenerate || bits == 0 {
            return 0;
        }
        let top = f64::from((1u32 << bits) - 1);
        self.zero.clamp(0.0, top) as u32
    }
}

fn round_down(v: f64) -> f32 {
    let f = v as f32;
    if f64::from(f) > v {
        f.next_down()
    } else {
        f
    }
}

fn round_up(v: f64) -> f32 {
    let f = v as f32;
    if f64::from(f) < v {
        f.next_up()
    } else {
        f
    }
}

/// `f32` range covering `values` (rounded outward).
pub fn group_range(values: &[f64]) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    (round_down(lo), round_up(hi))
}

pub fn quantize_group(values: &[f64], bits: u8) -> Result<QuantizedGroup, QuantError> {
    if bits > MAX_BITS {
        return Err(QuantError::BadWidth(bits));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QuantError::NonFinite);
    }
    let (min, max) = group_range(values);
    let p = QuantParams::new(min, max, bits);
    let codes = if bits == 0 {
        Vec::new()
    } else if p.degenerate {
        vec![0; values.len()]
    } else {
        let top = f64::from((1u32 << bits) - 1);
        values
            .iter()
            .map(|&c| (c / p.scale + p.zero).clamp(0.0, top).round_ties_even() as u32)
            .collect()
    };
    Ok(QuantizedGroup {
        codes,
        bits,
        min,
        max,
    })
}

/// Restores `len` values; `len` is only consulted for width-0 groups.
pub fn dequantize_codes(codes: &[u32], bits: u8, min: f32, max: f32, len: usize) -> Vec<f64> {
    let p = QuantParams::new(min, max, bits);
    if p.degenerate {
        return vec![f64::from(min); len];
    }
    if bits == 0 {
        return vec![0.5 * (f64::from(min) + f64::from(max)); len];
    }
    codes
        .iter()
        .map(|&q| (f64::from(q) - p.zero) * p.scale)
        .collect()
}

pub fn dequantize_group(g: &QuantizedGroup, len: usize) -> Vec<f64> {
    dequantize_codes(&g.codes, g.bits, g.min, g.max, len)
}

/// Per-channel, per-block bit-widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitWidthMatrix {
    pub rows: Vec<Vec<u8>>,
}

impl BitWidthMatrix {
    pub fn uniform(channels: usize, blocks: usize, bits: u8) -> Self {
        Self {
            rows: vec![vec![bits; blocks]; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.rows.len()
    }

    pub fn blocks(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.rows[i][j]
    }

    pub fn check_shape(&self, channels: usize, blocks: usize) -> Result<(), QuantError> {
        if self.rows.len() != channels || self.rows.iter().any(|r| r.len() != blocks) {
            return Err(QuantError::Shape {
                rows: self.rows.len(),
                cols: self.blocks(),
                channels,
                blocks,
            });
        }
        if let Some(&b) = self.rows.iter().flatten().find(|&&b| b > MAX_BITS) {
            return Err(QuantError::BadWidth(b));
        }
        Ok(())
    }

    /// Channel-level width: the widest group of each channel.
    pub fn channel_max(&self) -> Vec<u8> {
        self.rows
            .iter()
            .map(|r| r.iter().copied().max().unwrap_or(0))
            .collect()
    }
}

/// Quantizes every group of every channel, in parallel over groups. The
/// result is identical to the sequential loop regardless of thread count.
pub fn quantize_all(
    channels: &[Vec<f64>],
    partition: &GroupPartition,
    q: &BitWidthMatrix,
) -> Result<Vec<Vec<QuantizedGroup>>, QuantError> {
    q.check_shape(partition.channels(), partition.blocks())?;
    let jobs: Vec<(usize, usize)> = (0..partition.channels())
        .flat_map(|i| (0..partition.blocks()).map(move |j| (i, j)))
        .collect();
    let groups: Vec<QuantizedGroup> = jobs
        .par_iter()
        .map(|&(i, j)| {
            let vals = &channels[i][partition.layouts[i].range(j)];
            quantize_group(vals, q.get(i, j)).map_err(|e| QuantError::Group {
                channel: i,
                block: j,
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    let b = partition.blocks();
    let mut out: Vec<Vec<QuantizedGroup>> = Vec::with_capacity(partition.channels());
    let mut it = groups.into_iter();
    for _ in 0..partition.channels() {
        out.push(it.by_ref().take(b).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    #[default]
    L2,
    Linf,
}

impl NormKind {
    pub fn of(self, residual: impl Iterator<Item = f64>) -> f64 {
        match self {
            NormKind::L1 => residual.map(f64::abs).sum(),
            NormKind::L2 => residual.map(|r| r * r).sum::<f64>().sqrt(),
            NormKind::Linf => residual.map(f64::abs).fold(0.0, f64::max),
        }
    }

    /// Additive form of a group loss, summed by the bit allocator: the squared
    /// norm for `L2` (so sums over groups are the total squared error), the
    /// norm itself otherwise.
    pub fn additive(self, omega: f64) -> f64 {
        match self {
            NormKind::L2 => omega * omega,
            _ => omega,
        }
    }

    /// Norm of the concatenated residual from per-group norms.
    pub fn aggregate(self, omegas: impl Iterator<Item = f64>) -> f64 {
        match self {
            NormKind::L1 => omegas.sum(),
            NormKind::L2 => omegas.map(|o| o * o).sum::<f64>().sqrt(),
            NormKind::Linf => omegas.fold(0.0, f64::max),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        [NormKind::L1, NormKind::L2, NormKind::Linf].get(id as usize).copied()
    }
}

/// Quantize-dequantize residual norms for every group and width `0..=16`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    /// `omega[i][j][b]`.
    pub omega: Vec<Vec<[f64; WIDTH_OPTIONS]>>,
    pub norm: NormKind,
}

impl LossTable {
    pub fn get(&self, i: usize, j: usize, b: u8) -> f64 {
        self.omega[i][j][b as usize]
    }
}

pub fn group_loss(values: &[f64], bits: u8, norm: NormKind) -> f64 {
    let g = quantize_group(values, bits).expect("finite stream");
    let restored = dequantize_group(&g, values.len());
    norm.of(restored.iter().zip(values).map(|(r, v)| r - v))
}

pub fn build_loss_table(channels: &[Vec<f64>], partition: &GroupPartition, norm: NormKind) -> LossTable {
    let omega = channels
        .iter()
        .zip(&partition.layouts)
        .map(|(vals, layout)| {
            (0..layout.blocks())
                .into_par_iter()
                .map(|j| {
                    let g = &vals[layout.range(j)];
                    std::array::from_fn(|b| group_loss(g, b as u8, norm))
                })
                .collect()
        })
        .collect();
    LossTable { omega, norm }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_one_bit() {
        let g = quantize_group(&[0.0, 1.0], 1).unwrap();
        let p = QuantParams::new(g.min, g.max, 1);
        assert_eq!(p.scale, 0.5);
        assert_eq!(p.zero, 0.0);
        assert_eq!(g.codes, vec![0, 1]);
        assert_eq!(dequantize_group(&g, 2), vec![0.0, 0.5]);
    }

    #[test]
    fn hand_case_rounded_zero_point() {
        // S = 0.5, max / S = 0, Z = 2
        let g = quantize_group(&[-1.0, 0.0], 1).unwrap();
        let p = QuantParams::new(g.min, g.max, 1);
        assert_eq!((p.scale, p.zero), (0.5, 2.0));
        assert_eq!(g.codes, vec![0, 1]);
        assert_eq!(dequantize_group(&g, 2), vec![-1.0, -0.5]);
        // S = 0.5, max / S = 2.6, Z = round(-0.6) = -1
        let g = quantize_group(&[0.3f32 as f64, 1.3f32 as f64], 1).unwrap();
        let p = QuantParams::new(g.min, g.max, 1);
        assert_eq!(p.zero, -1.0);
    }

    #[test]
    fn constant_group_exact() {
        let g = quantize_group(&[1.75; 5], 6).unwrap();
        assert!(g.codes.iter().all(|&c| c == g.codes[0]));
        assert_eq!(dequantize_group(&g, 5), vec![1.75; 5]);
    }

    #[test]
    fn zero_width_restores_midpoint() {
        let g = quantize_group(&[-1.0, 3.0, 0.0], 0).unwrap();
        assert!(g.codes.is_empty());
        assert_eq!(dequantize_group(&g, 3), vec![1.0; 3]);
    }

    #[test]
    fn errors() {
        assert_eq!(quantize_group(&[f64::NAN], 4), Err(QuantError::NonFinite));
        assert_eq!(quantize_group(&[1.0], 17), Err(QuantError::BadWidth(17)));
        let part = GroupPartition::new(&[4], 2);
        let err = quantize_all(&[vec![0.0, 1.0, f64::INFINITY, 2.0]], &part, &BitWidthMatrix::uniform(1, 2, 4))
            .unwrap_err();
        assert!(matches!(err, QuantError::Group { channel: 0, block: 1, .. }));
    }

    #[test]
    fn layout_shapes() {
        let l = BlockLayout::new(10, 4);
        assert_eq!(l.offsets, vec![0, 3, 6, 9, 10]);
        let l = BlockLayout::new(2, 4);
        assert_eq!(l.offsets, vec![0, 1, 2, 2, 2]);
        let l = BlockLayout::new(0, 3);
        assert_eq!(l.offsets, vec![0, 0, 0, 0]);
    }

    #[test]
    fn loss_table_constant_and_recomputed() {
        let part = GroupPartition::new(&[6, 6], 2);
        let chans = vec![vec![2.0; 6], vec![0.1, -0.4, 0.9, 0.3, 0.3, -1.2]];
        let t = build_loss_table(&chans, &part, NormKind::L2);
        assert!(t.omega[0].iter().flatten().all(|&o| o == 0.0));
        let g = &chans[1][0..3];
        let q = quantize_group(g, 3).unwrap();
        let r = dequantize_group(&q, 3);
        let direct: f64 = r.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert_eq!(t.get(1, 0, 3), direct);
        assert!(t.get(1, 1, 16) <= t.get(1, 1, 1));
    }
}
