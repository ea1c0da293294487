//! End-to-end encoder and decoder.
//!
//! [`PreparedScene`] holds everything about a pruned, voxelized cloud that does
//! not depend on bit-widths: the octree payload, the ten channel streams in
//! both transformed and raw form, their loss tables and the SH clustering.
//! [`PreparedScene::encode`] then produces a container for any transform plan,
//! width matrix and retention count.

use serde::Serialize;
use thiserror::Error;

use crate::bytes::{ByteReader, ByteWriter, Truncated};
use crate::container::{self, ContainerError, Sections};
use crate::entropy::{self, EntropyError, FrequencyTable, RangeDecoder, RangeEncoder, CLASS_ALPHABET};
use crate::geometry::{self, Aabb, GeometryError, OctreeStream, VoxelGrid};
use crate::model::{sh_rest_len, CloudError, GaussianCloud};
use crate::quant::{
    self, BitWidthMatrix, GroupPartition, LossTable, NormKind, QuantError, QuantParams, QuantizedGroup,
};
use crate::splat::{self, SplatError};
use crate::transform::{self, Channel, EulerAngles, RahtPlan, TransformError, TransformPlan, CHANNEL_COUNT};
use crate::vq::{self, KMeans, KMeansConfig, ShCodebook, VqError};

pub const DEFAULT_DEPTH: u8 = 12;
pub const DEFAULT_BLOCKS: usize = 40;
/// Parent contexts seen fewer times than this share the order-0 table.
pub const CONTEXT_MIN_COUNT: u64 = 16;
const OCTREE_CODER_INTERNAL: u8 = 0;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error("empty cloud after pruning")]
    Empty,
    #[error("blocks must be in 1..=65535, got {0}")]
    BadBlocks(usize),
    #[error("malformed {section} section: {detail}")]
    Malformed { section: &'static str, detail: String },
}

fn malformed(section: &'static str, detail: impl Into<String>) -> CodecError {
    CodecError::Malformed {
        section,
        detail: detail.into(),
    }
}

fn truncated(section: &'static str) -> impl Fn(Truncated) -> CodecError {
    move |_| malformed(section, "truncated")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareConfig {
    pub depth: u8,
    pub blocks: usize,
    pub norm: NormKind,
    pub kmeans: KMeansConfig,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            depth: DEFAULT_DEPTH,
            blocks: DEFAULT_BLOCKS,
            norm: NormKind::L2,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// Entropy-coded octree: section bytes plus the serialized context tables.
#[derive(Debug, Clone)]
struct OctreePayload {
    section: Vec<u8>,
    tables: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub tau: f64,
    pub source_len: usize,
    /// Deduplicated cloud in Morton order, positions at voxel centers.
    pub cloud: GaussianCloud,
    pub grid: VoxelGrid,
    /// Per-voxel importance: the maximum over the merged Gaussians.
    pub importance: Vec<f64>,
    pub blocks: usize,
    pub norm: NormKind,
    raw: Vec<Vec<f64>>,
    dc: Vec<f64>,
    ac: Vec<Vec<f64>>,
    pub raht_loss: LossTable,
    pub raw_loss: LossTable,
    pub sh: Option<KMeans>,
    octree: OctreePayload,
}

/// Byte counts of an encoded container, per section and by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeBreakdown {
    pub header: usize,
    pub octree: usize,
    pub flags: usize,
    pub dc: usize,
    pub groups: usize,
    pub codebook: usize,
    pub metadata: usize,
    pub total: usize,
    /// Entropy-coded group payload bytes (excluding group record headers).
    pub group_payload: usize,
    /// Bytes of retained original SH rows in the codebook.
    pub retained_bytes: usize,
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub sizes: SizeBreakdown,
    pub plan: TransformPlan,
    pub q: BitWidthMatrix,
    pub retained: usize,
}

impl PreparedScene {
    /// Prunes `source` by `scores` at ratio `tau`, voxelizes, deduplicates and
    /// builds all width-independent data. With `centroids` the SH clustering is
    /// reused (assignment only) unless it has more entries than voxels.
    pub fn new(
        source: &GaussianCloud,
        scores: &[f64],
        tau: f64,
        cfg: &PrepareConfig,
        centroids: Option<&[f32]>,
    ) -> Result<Self, CodecError> {
        if cfg.blocks == 0 || cfg.blocks > u16::MAX as usize {
            return Err(CodecError::BadBlocks(cfg.blocks));
        }
        source.validate()?;
        let (pruned, kept) = splat::prune(source, scores, tau)?;
        if pruned.is_empty() {
            return Err(CodecError::Empty);
        }
        let aabb = Aabb::around(&pruned.positions);
        let (grid, assignment) = geometry::voxelize(&pruned.positions, cfg.depth, aabb)?;
        let cloud = geometry::dedup_average(&pruned, &grid, &assignment);
        let mut importance = vec![f64::NEG_INFINITY; grid.len()];
        for (i, &g) in assignment.iter().enumerate() {
            importance[g] = importance[g].max(scores[kept[i]]);
        }
        let raht = RahtPlan::new(&grid.keys, grid.depth);
        let raw = transform::raw_channels(&cloud);
        let mut dc = Vec::with_capacity(CHANNEL_COUNT);
        let mut ac = Vec::with_capacity(CHANNEL_COUNT);
        for values in &raw {
            let c = raht.forward(values)?;
            dc.push(c.dc);
            ac.push(c.ac);
        }
        let ac_part = GroupPartition::new(&[raht.ac_count(); CHANNEL_COUNT], cfg.blocks);
        let raw_part = GroupPartition::new(&[grid.len(); CHANNEL_COUNT], cfg.blocks);
        let raht_loss = quant::build_loss_table(&ac, &ac_part, cfg.norm);
        let raw_loss = quant::build_loss_table(&raw, &raw_part, cfg.norm);
        let dim = cloud.rest_dim();
        let sh = if dim == 0 {
            None
        } else {
            let m = cloud.len();
            match centroids {
                Some(c) if c.len() / dim <= m => Some(KMeans {
                    dim,
                    centroids: c.to_vec(),
                    assignments: vq::assign(&cloud.sh_rest, dim, c),
                }),
                _ => {
                    let kcfg = KMeansConfig {
                        k: cfg.kmeans.k.min(m),
                        ..cfg.kmeans
                    };
                    Some(vq::kmeans_batched(&cloud.sh_rest, dim, &kcfg)?)
                }
            }
        };
        let octree = encode_octree_payload(&grid)?;
        Ok(Self {
            tau,
            source_len: source.len(),
            cloud,
            grid,
            importance,
            blocks: cfg.blocks,
            norm: cfg.norm,
            raw,
            dc,
            ac,
            raht_loss,
            raw_loss,
            sh,
            octree,
        })
    }

    pub fn leaf_count(&self) -> usize {
        self.grid.len()
    }

    pub fn rest_dim(&self) -> usize {
        self.cloud.rest_dim()
    }

    /// Stream of channel `c` under `plan`: AC coefficients or raw values.
    pub fn stream(&self, plan: &TransformPlan, c: usize) -> &[f64] {
        if plan.raht[c] {
            &self.ac[c]
        } else {
            &self.raw[c]
        }
    }

    pub fn partition(&self, plan: &TransformPlan) -> GroupPartition {
        let lens: Vec<usize> = (0..CHANNEL_COUNT).map(|c| self.stream(plan, c).len()).collect();
        GroupPartition::new(&lens, self.blocks)
    }

    /// Loss table of the streams selected by `plan`.
    pub fn loss(&self, plan: &TransformPlan) -> LossTable {
        LossTable {
            omega: (0..CHANNEL_COUNT)
                .map(|c| {
                    if plan.raht[c] {
                        self.raht_loss.omega[c].clone()
                    } else {
                        self.raw_loss.omega[c].clone()
                    }
                })
                .collect(),
            norm: self.norm,
        }
    }

    /// Encodes with `q` and keeps the original SH rows of the `retained` most
    /// important voxels.
    pub fn encode(&self, plan: &TransformPlan, q: &BitWidthMatrix, retained: usize) -> Result<Encoded, CodecError> {
        q.check_shape(CHANNEL_COUNT, self.blocks)?;
        let partition = self.partition(plan);
        let streams: Vec<Vec<f64>> = (0..CHANNEL_COUNT).map(|c| self.stream(plan, c).to_vec()).collect();
        let groups = quant::quantize_all(&streams, &partition, q)?;

        let mut flags = ByteWriter::new();
        flags.u16(plan.to_mask());

        let mut dc = ByteWriter::new();
        for c in 0..CHANNEL_COUNT {
            if plan.raht[c] {
                dc.f32(self.dc[c] as f32);
            }
        }

        let (groups_section, class_counts, group_payload) = encode_groups(&groups, plan)?;

        let dim = self.rest_dim();
        let (codebook_section, vq_counts, retained) = match &self.sh {
            Some(km) => {
                let r = retained.min(self.leaf_count());
                let keep = vq::top_indices(&self.importance, r);
                let cb = vq::encode_sh(&self.cloud.sh_rest, dim, km, &keep);
                let (section, counts) = encode_codebook(&cb)?;
                (section, Some(counts), r)
            }
            None => (encode_empty_codebook(), None, 0),
        };

        let mut meta = ByteWriter::new();
        meta.u8(OCTREE_CODER_INTERNAL);
        meta.f32(self.tau as f32);
        meta.u32(self.source_len as u32);
        meta.u8(self.cloud.sh_degree);
        meta.u8(self.grid.depth);
        meta.u16(self.blocks as u16);
        meta.u8(self.norm.id());
        for row in &q.rows {
            meta.bytes(row);
        }
        meta.bytes(&self.octree.tables);
        for counts in &class_counts {
            entropy::write_counts(&mut meta, counts);
        }
        entropy::write_counts(&mut meta, vq_counts.as_deref().unwrap_or(&[]));

        let sections = Sections {
            octree: self.octree.section.clone(),
            flags: flags.into_inner(),
            dc: dc.into_inner(),
            groups: groups_section,
            codebook: codebook_section,
            metadata: meta.into_inner(),
        };
        let (bytes, packed) = container::pack_with_sizes(&sections);
        let s = packed.sections;
        Ok(Encoded {
            sizes: SizeBreakdown {
                header: packed.header,
                octree: s[0],
                flags: s[1],
                dc: s[2],
                groups: s[3],
                codebook: s[4],
                metadata: s[5],
                total: bytes.len(),
                group_payload,
                retained_bytes: retained * dim * 4,
            },
            bytes,
            plan: *plan,
            q: q.clone(),
            retained,
        })
    }

    /// Adds as many retained SH rows to `base` (encoded without retention) as
    /// fit under `budget` bytes. The result is within one retained row of the
    /// budget unless the essential part alone exceeds it or every row is kept.
    pub fn fill_retention(&self, base: Encoded, budget: u64) -> Result<Encoded, CodecError> {
        let per = (self.rest_dim() * 4) as u64;
        if self.sh.is_none() || base.sizes.total as u64 >= budget || per == 0 {
            return Ok(base);
        }
        let (plan, q) = (base.plan, base.q.clone());
        let m = self.leaf_count();
        let mut r = vq::plan_retention(m, base.sizes.total as u64, budget, per);
        let mut best = base;
        let mut over: Option<usize> = None;
        for _ in 0..12 {
            if r == best.retained || over.is_some_and(|o| r >= o) {
                break;
            }
            let e = self.encode(&plan, &q, r)?;
            let total = e.sizes.total as u64;
            if total > budget {
                over = Some(over.map_or(r, |o| o.min(r)));
                let excess = (total - budget).div_ceil(per) as usize;
                r = r.saturating_sub(excess.max(1)).max(best.retained);
                continue;
            }
            best = e;
            let gap = budget - total;
            if gap < per || r == m {
                break;
            }
            r = (r + (gap / per) as usize).min(m);
        }
        Ok(best)
    }
}

/// Occupancy bytes with parent-byte contexts; returns the section and the
/// serialized table block for the metadata.
fn encode_octree_payload(grid: &VoxelGrid) -> Result<OctreePayload, CodecError> {
    let stream = geometry::encode_octree(grid);
    let ctx = geometry::parent_contexts(&stream.occupancy, stream.depth);
    let mut per_ctx = vec![0u64; 256];
    for c in ctx.iter().flatten() {
        per_ctx[*c as usize] += 1;
    }
    let own = |c: Option<u8>| c.is_some_and(|c| per_ctx[c as usize] >= CONTEXT_MIN_COUNT);
    let mut counts = vec![vec![0u64; 256]; 257];
    for (&b, &c) in stream.occupancy.iter().zip(&ctx) {
        let slot = if own(c) { c.unwrap() as usize } else { 256 };
        counts[slot][b as usize] += 1;
    }
    let tables: Vec<Option<FrequencyTable>> = counts
        .iter()
        .enumerate()
        .map(|(slot, cnt)| {
            if slot == 256 || per_ctx[slot] >= CONTEXT_MIN_COUNT {
                FrequencyTable::from_counts(cnt).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut enc = RangeEncoder::new();
    for (&b, &c) in stream.occupancy.iter().zip(&ctx) {
        let slot = if own(c) { c.unwrap() as usize } else { 256 };
        enc.encode(tables[slot].as_ref().unwrap(), u32::from(b))?;
    }
    let payload = enc.finish();
    let mut section = ByteWriter::new();
    section.bytes(&stream.header_bytes());
    section.u32(stream.occupancy.len() as u32);
    section.blob(&payload);
    let mut meta = ByteWriter::new();
    entropy::write_counts(&mut meta, &counts[256]);
    let own_slots: Vec<usize> = (0..256).filter(|&s| per_ctx[s] >= CONTEXT_MIN_COUNT).collect();
    meta.varint(own_slots.len() as u64);
    for s in own_slots {
        meta.u8(s as u8);
        entropy::write_counts(&mut meta, &counts[s]);
    }
    Ok(OctreePayload {
        section: section.into_inner(),
        tables: meta.into_inner(),
    })
}

struct OctreeTables {
    fallback: FrequencyTable,
    contexts: Vec<Option<FrequencyTable>>,
}

fn read_octree_tables(r: &mut ByteReader<'_>) -> Result<OctreeTables, CodecError> {
    let fallback = FrequencyTable::from_counts(&entropy::read_counts(r)?)?;
    let n = r.varint().map_err(truncated("metadata"))? as usize;
    if n > 256 {
        return Err(malformed("metadata", "too many octree contexts"));
    }
    let mut contexts = vec![None; 256];
    for _ in 0..n {
        let c = r.u8().map_err(truncated("metadata"))?;
        contexts[c as usize] = Some(FrequencyTable::from_counts(&entropy::read_counts(r)?)?);
    }
    Ok(OctreeTables { fallback, contexts })
}

fn decode_octree_section(bytes: &[u8], tables: &OctreeTables) -> Result<VoxelGrid, CodecError> {
    let (header, rest) = OctreeStream::header_from_bytes(bytes)?;
    if header.depth == 0 || header.depth > geometry::MAX_DEPTH {
        return Err(GeometryError::BadDepth(header.depth).into());
    }
    let mut r = ByteReader::new(rest);
    let byte_count = r.u32().map_err(truncated("octree"))? as usize;
    let payload = r.blob().map_err(truncated("octree"))?;
    if r.remaining() != 0 {
        return Err(malformed("octree", "trailing bytes"));
    }
    if byte_count == 0 {
        return Err(GeometryError::Truncated.into());
    }
    // every internal node has a nonzero byte, so a level can at most 8x the next
    let mut dec = RangeDecoder::new(payload)?;
    let mut occupancy = Vec::with_capacity(byte_count);
    let mut level: Vec<Option<u8>> = vec![None];
    for _ in 0..header.depth {
        let mut next = Vec::new();
        for &c in &level {
            if occupancy.len() == byte_count {
                return Err(GeometryError::Truncated.into());
            }
            let table = match c {
                Some(c) => tables.contexts[c as usize].as_ref().unwrap_or(&tables.fallback),
                None => &tables.fallback,
            };
            let b = dec.decode(table)? as u8;
            if b == 0 {
                return Err(GeometryError::ZeroOccupancy(occupancy.len()).into());
            }
            occupancy.push(b);
            next.extend(std::iter::repeat_n(Some(b), b.count_ones() as usize));
        }
        level = next;
    }
    dec.finish()?;
    if occupancy.len() != byte_count {
        return Err(GeometryError::TrailingBytes(byte_count - occupancy.len()).into());
    }
    let stream = OctreeStream {
        occupancy,
        ..header
    };
    Ok(geometry::decode_octree(&stream)?)
}

/// Center code offsets are taken from: the code of 0.0 for transformed
/// channels, the middle code for raw channels.
fn center_code(p: &QuantParams, bits: u8, raht: bool) -> i64 {
    if raht {
        i64::from(p.zero_code(bits))
    } else {
        1i64 << (bits - 1)
    }
}

fn codes_coded(bits: u8, p: &QuantParams) -> bool {
    bits > 0 && !p.degenerate
}

/// Group records, per-channel class counts and the total payload bytes.
fn encode_groups(
    groups: &[Vec<QuantizedGroup>],
    plan: &TransformPlan,
) -> Result<(Vec<u8>, Vec<Vec<u64>>, usize), CodecError> {
    let mut out = ByteWriter::new();
    let mut all_counts = Vec::with_capacity(groups.len());
    let mut payload_bytes = 0;
    for (c, row) in groups.iter().enumerate() {
        let raht = plan.raht[c];
        let mut counts = vec![0u64; CLASS_ALPHABET];
        let mut any = false;
        let offsets: Vec<Vec<u64>> = row
            .iter()
            .map(|g| {
                let p = QuantParams::new(g.min, g.max, g.bits);
                if !codes_coded(g.bits, &p) {
                    return Vec::new();
                }
                any = true;
                let center = center_code(&p, g.bits, raht);
                g.codes
                    .iter()
                    .map(|&q| {
                        let u = entropy::zigzag(i64::from(q) - center);
                        counts[entropy::magnitude_class(u) as usize] += 1;
                        u
                    })
                    .collect()
            })
            .collect();
        let table = if any {
            Some(FrequencyTable::from_counts(&counts)?)
        } else {
            counts.clear();
            None
        };
        for (g, offs) in row.iter().zip(&offsets) {
            out.u8(g.bits);
            out.f32(g.min);
            out.f32(g.max);
            let payload = match &table {
                Some(t) if !offs.is_empty() => {
                    let mut enc = RangeEncoder::new();
                    for &u in offs {
                        entropy::encode_classed(&mut enc, t, u)?;
                    }
                    enc.finish()
                }
                _ => Vec::new(),
            };
            payload_bytes += payload.len();
            out.blob(&payload);
        }
        all_counts.push(counts);
    }
    Ok((out.into_inner(), all_counts, payload_bytes))
}

fn encode_codebook(cb: &ShCodebook) -> Result<(Vec<u8>, Vec<u64>), CodecError> {
    let mut w = ByteWriter::new();
    w.u32(cb.k as u32);
    w.u32(cb.r as u32);
    w.u16(cb.dim as u16);
    for &v in &cb.entries {
        w.f32(v);
    }
    let symbols = cb.assignment_symbols();
    let counts = entropy::symbol_counts(&symbols, cb.k + 1)?;
    let table = FrequencyTable::from_counts(&counts)?;
    w.blob(&entropy::encode(&symbols, &table)?);
    Ok((w.into_inner(), counts))
}

fn encode_empty_codebook() -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.u32(0);
    w.u32(0);
    w.u16(0);
    w.blob(&[]);
    w.into_inner()
}

/// Fields recovered from a container without reconstructing the cloud.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainerInfo {
    pub tau: f32,
    pub source_count: u32,
    pub sh_degree: u8,
    pub depth: u8,
    pub blocks: u16,
    pub norm: NormKind,
    pub leaf_count: u32,
    pub transform_mask: u16,
    pub codebook_k: u32,
    pub codebook_retained: u32,
    pub q: Vec<Vec<u8>>,
}

struct Metadata {
    tau: f32,
    source_count: u32,
    sh_degree: u8,
    depth: u8,
    blocks: usize,
    norm: NormKind,
    q: BitWidthMatrix,
    octree: OctreeTables,
    classes: Vec<Option<FrequencyTable>>,
    vq_counts: Vec<u64>,
}

fn read_metadata(bytes: &[u8]) -> Result<Metadata, CodecError> {
    let t = truncated("metadata");
    let mut r = ByteReader::new(bytes);
    let coder = r.u8().map_err(&t)?;
    if coder != OCTREE_CODER_INTERNAL {
        return Err(malformed("metadata", format!("unknown octree coder {coder}")));
    }
    let tau = r.f32().map_err(&t)?;
    let source_count = r.u32().map_err(&t)?;
    let sh_degree = r.u8().map_err(&t)?;
    if sh_degree > 3 {
        return Err(malformed("metadata", format!("SH degree {sh_degree}")));
    }
    let depth = r.u8().map_err(&t)?;
    let blocks = r.u16().map_err(&t)? as usize;
    if blocks == 0 {
        return Err(malformed("metadata", "zero blocks"));
    }
    let norm = NormKind::from_id(r.u8().map_err(&t)?).ok_or_else(|| malformed("metadata", "unknown norm"))?;
    let mut rows = Vec::with_capacity(CHANNEL_COUNT);
    for _ in 0..CHANNEL_COUNT {
        rows.push(r.take(blocks).map_err(&t)?.to_vec());
    }
    let q = BitWidthMatrix { rows };
    q.check_shape(CHANNEL_COUNT, blocks)
        .map_err(|e| malformed("metadata", e.to_string()))?;
    let octree = read_octree_tables(&mut r)?;
    let mut classes = Vec::with_capacity(CHANNEL_COUNT);
    for _ in 0..CHANNEL_COUNT {
        let counts = entropy::read_counts(&mut r)?;
        classes.push(if counts.is_empty() {
            None
        } else {
            Some(FrequencyTable::from_counts(&counts)?)
        });
    }
    let vq_counts = entropy::read_counts(&mut r)?;
    if r.remaining() != 0 {
        return Err(malformed("metadata", "trailing bytes"));
    }
    Ok(Metadata {
        tau,
        source_count,
        sh_degree,
        depth,
        blocks,
        norm,
        q,
        octree,
        classes,
        vq_counts,
    })
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub cloud: GaussianCloud,
    pub info: ContainerInfo,
    pub grid: VoxelGrid,
}

pub fn inspect(bytes: &[u8]) -> Result<ContainerInfo, CodecError> {
    Ok(decode(bytes)?.info)
}

pub fn decode(bytes: &[u8]) -> Result<Decoded, CodecError> {
    let sections = container::unpack(bytes)?;
    let meta = read_metadata(&sections.metadata)?;
    let grid = decode_octree_section(&sections.octree, &meta.octree)?;
    if grid.depth != meta.depth {
        return Err(malformed("octree", "depth disagrees with metadata"));
    }
    let m = grid.len();
    let raht = RahtPlan::new(&grid.keys, grid.depth);

    let mut fr = ByteReader::new(&sections.flags);
    let mask = fr.u16().map_err(truncated("flags"))?;
    if fr.remaining() != 0 || mask >> CHANNEL_COUNT != 0 {
        return Err(malformed("flags", "unexpected content"));
    }
    let plan = TransformPlan::from_mask(mask);

    let mut dr = ByteReader::new(&sections.dc);
    let mut dcs = [0f64; CHANNEL_COUNT];
    for c in 0..CHANNEL_COUNT {
        if plan.raht[c] {
            dcs[c] = f64::from(dr.f32().map_err(truncated("dc"))?);
        }
    }
    if dr.remaining() != 0 {
        return Err(malformed("dc", "trailing bytes"));
    }

    let lens: Vec<usize> = (0..CHANNEL_COUNT)
        .map(|c| if plan.raht[c] { raht.ac_count() } else { m })
        .collect();
    let partition = GroupPartition::new(&lens, meta.blocks);
    let mut gr = ByteReader::new(&sections.groups);
    let mut values = Vec::with_capacity(CHANNEL_COUNT);
    for c in 0..CHANNEL_COUNT {
        let layout = &partition.layouts[c];
        let mut stream = Vec::with_capacity(lens[c]);
        for j in 0..meta.blocks {
            let t = truncated("groups");
            let bits = gr.u8().map_err(&t)?;
            let min = gr.f32().map_err(&t)?;
            let max = gr.f32().map_err(&t)?;
            let payload = gr.blob().map_err(&t)?;
            if bits != meta.q.get(c, j) {
                return Err(malformed("groups", "width disagrees with metadata"));
            }
            if !(min.is_finite() && max.is_finite() && min <= max) {
                return Err(malformed("groups", "bad range"));
            }
            let n = layout.block_len(j);
            let p = QuantParams::new(min, max, bits);
            let codes = if codes_coded(bits, &p) && n > 0 {
                let table = meta.classes[c]
                    .as_ref()
                    .ok_or_else(|| malformed("metadata", "missing class table"))?;
                let center = center_code(&p, bits, plan.raht[c]);
                let top = (1i64 << bits) - 1;
                let mut dec = RangeDecoder::new(payload)?;
                let mut codes = Vec::with_capacity(n);
                for _ in 0..n {
                    let q = center + entropy::unzigzag(entropy::decode_classed(&mut dec, table)?);
                    if !(0..=top).contains(&q) {
                        return Err(EntropyError::Corrupt.into());
                    }
                    codes.push(q as u32);
                }
                dec.finish()?;
                codes
            } else {
                if !payload.is_empty() {
                    return Err(malformed("groups", "payload for an uncoded group"));
                }
                vec![0; if bits > 0 { n } else { 0 }]
            };
            stream.extend(quant::dequantize_codes(&codes, bits, min, max, n));
        }
        let restored = transform::restore_channel(
            &transform::ChannelStream {
                channel: Channel::from_id(c)?,
                raht: plan.raht[c],
                dc: Some(dcs[c]),
                values: stream,
            },
            &raht,
        )?;
        values.push(restored);
    }
    if gr.remaining() != 0 {
        return Err(malformed("groups", "trailing bytes"));
    }

    let dim = sh_rest_len(meta.sh_degree);
    let mut cr = ByteReader::new(&sections.codebook);
    let t = truncated("codebook");
    let k = cr.u32().map_err(&t)? as usize;
    let r = cr.u32().map_err(&t)? as usize;
    let d = cr.u16().map_err(&t)? as usize;
    if d != dim {
        return Err(malformed("codebook", "dimension disagrees with SH degree"));
    }
    let entry_count = (k + r)
        .checked_mul(d)
        .filter(|&n| n * 4 <= cr.remaining())
        .ok_or_else(|| malformed("codebook", "truncated"))?;
    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        entries.push(cr.f32().map_err(&t)?);
    }
    let payload = cr.blob().map_err(&t)?;
    if cr.remaining() != 0 {
        return Err(malformed("codebook", "trailing bytes"));
    }
    let sh_rest = if dim == 0 {
        if !payload.is_empty() || k + r != 0 {
            return Err(malformed("codebook", "entries without SH"));
        }
        Vec::new()
    } else {
        if meta.vq_counts.len() != k + 1 {
            return Err(malformed("metadata", "assignment table size"));
        }
        let table = FrequencyTable::from_counts(&meta.vq_counts)?;
        let symbols = entropy::decode(payload, &table, m)?;
        let assignments = ShCodebook::assignments_from_symbols(&symbols, k);
        if symbols.iter().filter(|&&s| s as usize == k).count() != r {
            return Err(malformed("codebook", "retained count mismatch"));
        }
        vq::decode_sh(&ShCodebook {
            k,
            r,
            dim,
            entries,
            assignments,
        })?
    };

    let mut cloud = GaussianCloud::zeros(m, meta.sh_degree);
    cloud.sh_rest = sh_rest;
    let centers = grid.centers();
    for i in 0..m {
        let v = |c: Channel| values[c.id()][i];
        cloud.positions[i] = centers[i].map(|x| x as f32);
        let q = transform::euler_to_quat(EulerAngles {
            phi: v(Channel::Phi),
            theta: v(Channel::Theta),
            psi: v(Channel::Psi),
        });
        cloud.quaternions[i] = q.map(|x| x as f32);
        cloud.log_scales[i] = [
            v(Channel::LogScale0) as f32,
            v(Channel::LogScale1) as f32,
            v(Channel::LogScale2) as f32,
        ];
        cloud.opacity_logits[i] = v(Channel::Opacity) as f32;
        cloud.sh_dc[i] = [v(Channel::ShDc0) as f32, v(Channel::ShDc1) as f32, v(Channel::ShDc2) as f32];
    }
    cloud.validate()?;
    Ok(Decoded {
        info: ContainerInfo {
            tau: meta.tau,
            source_count: meta.source_count,
            sh_degree: meta.sh_degree,
            depth: meta.depth,
            blocks: meta.blocks as u16,
            norm: meta.norm,
            leaf_count: m as u32,
            transform_mask: mask,
            codebook_k: k as u32,
            codebook_retained: r as u32,
            q: meta.q.rows,
        },
        cloud,
        grid,
    })
}

/// Per-channel value-space residual norms between two Morton-aligned clouds.
pub fn channel_errors(reference: &GaussianCloud, decoded: &GaussianCloud, norm: NormKind) -> [f64; CHANNEL_COUNT] {
    let a = transform::raw_channels(reference);
    let b = transform::raw_channels(decoded);
    std::array::from_fn(|c| norm.of(a[c].iter().zip(&b[c]).map(|(x, y)| x - y)))
}

/// Reconstruction error of a decoded container against an original cloud.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceStats {
    /// Decoded voxels that also hold at least one reference Gaussian.
    pub matched: usize,
    pub norm: NormKind,
    /// Per-channel residual norm over the matched voxels.
    pub channel_error: [f64; CHANNEL_COUNT],
    /// Per-channel largest absolute residual over the matched voxels.
    pub channel_max_abs: [f64; CHANNEL_COUNT],
}

/// Voxelizes `reference` on the decoded grid, averages co-voxel Gaussians the
/// same way the encoder does and compares the voxels both clouds occupy.
/// Reference points outside the decoded bounding box are ignored.
pub fn reference_stats(reference: &GaussianCloud, decoded: &Decoded, norm: NormKind) -> Result<ReferenceStats, CodecError> {
    let aabb = decoded.grid.aabb;
    let inside: Vec<usize> = (0..reference.len())
        .filter(|&i| (0..3).all(|a| (aabb.min[a]..=aabb.max[a]).contains(&reference.positions[i][a])))
        .collect();
    let sub = reference.select(&inside);
    let (grid, assignment) = geometry::voxelize(&sub.positions, decoded.grid.depth, aabb)?;
    let averaged = geometry::dedup_average(&sub, &grid, &assignment);
    let mut ref_idx = Vec::new();
    let mut dec_idx = Vec::new();
    for (i, key) in decoded.grid.keys.iter().enumerate() {
        if let Ok(j) = grid.keys.binary_search(key) {
            ref_idx.push(j);
            dec_idx.push(i);
        }
    }
    let a = transform::raw_channels(&averaged.select(&ref_idx));
    let b = transform::raw_channels(&decoded.cloud.select(&dec_idx));
    Ok(ReferenceStats {
        matched: ref_idx.len(),
        norm,
        channel_error: std::array::from_fn(|c| norm.of(a[c].iter().zip(&b[c]).map(|(x, y)| x - y))),
        channel_max_abs: std::array::from_fn(|c| {
            a[c].iter().zip(&b[c]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    #[test]
    fn round_trip_small_scene() {
        let scene = synth::scene(&synth::SynthConfig {
            n: 600,
            seed: 4,
            ..synth::SynthConfig::default()
        });
        let scores = vec![1.0; scene.cloud.len()];
        let cfg = PrepareConfig {
            blocks: 8,
            kmeans: KMeansConfig {
                k: 16,
                ..KMeansConfig::default()
            },
            ..PrepareConfig::default()
        };
        let prep = PreparedScene::new(&scene.cloud, &scores, 1.0, &cfg, None).unwrap();
        let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 8, 16);
        let plan = TransformPlan::from_channel_bits(&[16; CHANNEL_COUNT]);
        let enc = prep.encode(&plan, &q, 5).unwrap();
        assert_eq!(enc.sizes.total, enc.bytes.len());
        let dec = decode(&enc.bytes).unwrap();
        assert_eq!(dec.cloud.len(), prep.leaf_count());
        assert_eq!(dec.info.codebook_retained, 5);
        let err = channel_errors(&prep.cloud, &dec.cloud, NormKind::Linf);
        assert!(err.iter().all(|&e| e < 1e-3), "{err:?}");
    }

    #[test]
    fn width_zero_everywhere() {
        let scene = synth::scene(&synth::SynthConfig {
            n: 50,
            seed: 1,
            sh_degree: 0,
            ..synth::SynthConfig::default()
        });
        let cfg = PrepareConfig {
            blocks: 3,
            ..PrepareConfig::default()
        };
        let prep = PreparedScene::new(&scene.cloud, &vec![1.0; 50], 1.0, &cfg, None).unwrap();
        let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 3, 0);
        let enc = prep.encode(&TransformPlan::all_raht(), &q, 0).unwrap();
        assert_eq!(enc.sizes.group_payload, 0);
        let dec = decode(&enc.bytes).unwrap();
        assert_eq!(dec.cloud.len(), prep.leaf_count());
    }
}
