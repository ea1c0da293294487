//! Voxelization, co-voxel deduplication and the breadth-first octree
//! occupancy coder.
//!
//! Leaves are kept in Morton order. Bit `3l` of a key is the x bit of level
//! `d - 1 - l`, bit `3l + 1` the y bit and bit `3l + 2` the z bit, so the
//! child octant index inside a node is `x | y << 1 | z << 2`.

use thiserror::Error;

use crate::model::GaussianCloud;

pub const MAX_DEPTH: u8 = 21;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("octree depth {0} outside 1..=21")]
    BadDepth(u8),
    #[error("non-finite position at index {0}")]
    NonFinite(usize),
    #[error("octree stream truncated")]
    Truncated,
    #[error("zero occupancy byte at node {0}")]
    ZeroOccupancy(usize),
    #[error("octree decodes to {decoded} leaves, header says {declared}")]
    LeafCountMismatch { decoded: usize, declared: usize },
    #[error("{0} trailing bytes after octree stream")]
    TrailingBytes(usize),
    #[error("degenerate bounding box")]
    BadAabb,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    /// Tight box around `positions`, padded by a 1e-6 relative margin and
    /// rounded outward to `f32` so the stored box reproduces the voxel grid.
    pub fn around(positions: &[[f32; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions {
            for a in 0..3 {
                lo[a] = lo[a].min(f64::from(p[a]));
                hi[a] = hi[a].max(f64::from(p[a]));
            }
        }
        let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
        let magnitude = (0..3).map(|a| lo[a].abs().max(hi[a].abs())).fold(1.0, f64::max);
        let pad = if extent > 0.0 {
            1e-6 * extent
        } else {
            1e-6 * magnitude
        };
        let mut min = [0f32; 3];
        let mut max = [0f32; 3];
        for a in 0..3 {
            min[a] = round_down(lo[a] - pad);
            max[a] = round_up(hi[a] + pad);
            if max[a] <= min[a] {
                max[a] = min[a].next_up();
            }
        }
        Self { min, max }
    }

    pub fn voxel_size(&self, depth: u8) -> [f64; 3] {
        let cells = (1u64 << depth) as f64;
        std::array::from_fn(|a| (f64::from(self.max[a]) - f64::from(self.min[a])) / cells)
    }

    fn is_valid(&self) -> bool {
        (0..3).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a])
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

/// Interleaves three `depth`-bit cell indices into a Morton key.
pub fn morton_encode(cell: [u32; 3], depth: u8) -> u64 {
    let mut key = 0u64;
    for l in 0..depth as u32 {
        for (a, &c) in cell.iter().enumerate() {
            key |= u64::from((c >> l) & 1) << (3 * l + a as u32);
        }
    }
    key
}

pub fn morton_decode(key: u64, depth: u8) -> [u32; 3] {
    let mut cell = [0u32; 3];
    for l in 0..depth as u32 {
        for (a, c) in cell.iter_mut().enumerate() {
            *c |= (((key >> (3 * l + a as u32)) & 1) as u32) << l;
        }
    }
    cell
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub aabb: Aabb,
    pub depth: u8,
    /// Strictly ascending Morton keys of occupied voxels.
    pub keys: Vec<u64>,
}

impl VoxelGrid {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn voxel_center(&self, key: u64) -> [f64; 3] {
        let cell = morton_decode(key, self.depth);
        let size = self.aabb.voxel_size(self.depth);
        std::array::from_fn(|a| {
            f64::from(self.aabb.min[a]) + (f64::from(cell[a]) + 0.5) * size[a]
        })
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.keys.iter().map(|&k| self.voxel_center(k)).collect()
    }
}

/// Quantizes positions to the depth-`d` grid over `aabb`. Returns the grid and,
/// for every input point, the index of its voxel in the sorted key list.
pub fn voxelize(
    positions: &[[f32; 3]],
    depth: u8,
    aabb: Aabb,
) -> Result<(VoxelGrid, Vec<usize>), GeometryError> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(GeometryError::BadDepth(depth));
    }
    if !aabb.is_valid() {
        return Err(GeometryError::BadAabb);
    }
    let size = aabb.voxel_size(depth);
    let top = (1u64 << depth) - 1;
    let mut point_keys = Vec::with_capacity(positions.len());
    for (i, p) in positions.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        let cell: [u32; 3] = std::array::from_fn(|a| {
            let t = ((f64::from(p[a]) - f64::from(aabb.min[a])) / size[a]).floor();
            t.clamp(0.0, top as f64) as u32
        });
        point_keys.push(morton_encode(cell, depth));
    }
    let mut keys = point_keys.clone();
    keys.sort_unstable();
    keys.dedup();
    let assignment = point_keys
        .iter()
        .map(|k| keys.binary_search(k).expect("key present"))
        .collect();
    Ok((VoxelGrid { aabb, depth, keys }, assignment))
}

/// Merges Gaussians sharing a voxel by averaging every attribute channel.
/// Output is in voxel (Morton) order with positions at voxel centers.
pub fn dedup_average(cloud: &GaussianCloud, grid: &VoxelGrid, assignment: &[usize]) -> GaussianCloud {
    let m = grid.len();
    let d = cloud.rest_dim();
    let mut counts = vec![0usize; m];
    let mut quat = vec![[0f64; 4]; m];
    let mut scale = vec![[0f64; 3]; m];
    let mut opacity = vec![0f64; m];
    let mut dc = vec![[0f64; 3]; m];
    let mut rest = vec![0f64; m * d];
    for (i, &g) in assignment.iter().enumerate() {
        counts[g] += 1;
        for c in 0..4 {
            quat[g][c] += f64::from(cloud.quaternions[i][c]);
        }
        for c in 0..3 {
            scale[g][c] += f64::from(cloud.log_scales[i][c]);
            dc[g][c] += f64::from(cloud.sh_dc[i][c]);
        }
        opacity[g] += f64::from(cloud.opacity_logits[i]);
        for (acc, &v) in rest[g * d..(g + 1) * d].iter_mut().zip(cloud.sh_rest_row(i)) {
            *acc += f64::from(v);
        }
    }
    let mut out = GaussianCloud::zeros(m, cloud.sh_degree);
    for g in 0..m {
        let n = counts[g] as f64;
        let c = grid.voxel_center(grid.keys[g]);
        out.positions[g] = c.map(|v| v as f32);
        out.quaternions[g] = quat[g].map(|v| (v / n) as f32);
        out.log_scales[g] = scale[g].map(|v| (v / n) as f32);
        out.opacity_logits[g] = (opacity[g] / n) as f32;
        out.sh_dc[g] = dc[g].map(|v| (v / n) as f32);
        for (o, &v) in out.sh_rest[g * d..(g + 1) * d]
            .iter_mut()
            .zip(&rest[g * d..(g + 1) * d])
        {
            *o = (v / n) as f32;
        }
    }
    out
}

/// Breadth-first occupancy bytes of a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OctreeStream {
    pub depth: u8,
    pub aabb: Aabb,
    pub leaf_count: u32,
    pub occupancy: Vec<u8>,
}

impl OctreeStream {
    /// `[u8 depth][f32 x 6 aabb][u32 leaf_count][occupancy bytes]`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.occupancy.len());
        out.extend_from_slice(&self.header_bytes());
        out.extend_from_slice(&self.occupancy);
        out
    }

    pub(crate) fn header_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29);
        out.push(self.depth);
        for v in self.aabb.min.iter().chain(&self.aabb.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.leaf_count.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        let (mut stream, rest) = Self::header_from_bytes(bytes)?;
        stream.occupancy = rest.to_vec();
        Ok(stream)
    }

    pub(crate) fn header_from_bytes(bytes: &[u8]) -> Result<(Self, &[u8]), GeometryError> {
        if bytes.len() < 29 {
            return Err(GeometryError::Truncated);
        }
        let f = |i: usize| f32::from_le_bytes(bytes[1 + 4 * i..5 + 4 * i].try_into().unwrap());
        let aabb = Aabb {
            min: [f(0), f(1), f(2)],
            max: [f(3), f(4), f(5)],
        };
        let leaf_count = u32::from_le_bytes(bytes[25..29].try_into().unwrap());
        Ok((
            Self {
                depth: bytes[0],
                aabb,
                leaf_count,
                occupancy: Vec::new(),
            },
            &bytes[29..],
        ))
    }
}

/// Nodes of level `l + 1` grouped under their level-`l` parents, for all
/// levels. Yields one occupancy byte per internal node in breadth-first order.
pub fn encode_octree(grid: &VoxelGrid) -> OctreeStream {
    let d = grid.depth as u32;
    let mut occupancy = Vec::new();
    for level in 0..d {
        let shift = 3 * (d - level - 1);
        let mut prev_parent = None;
        let mut prev_child = None;
        for &key in &grid.keys {
            let child = key >> shift;
            if prev_child == Some(child) {
                continue;
            }
            prev_child = Some(child);
            let parent = child >> 3;
            let bit = 1u8 << (child & 7);
            if prev_parent == Some(parent) {
                *occupancy.last_mut().unwrap() |= bit;
            } else {
                occupancy.push(bit);
                prev_parent = Some(parent);
            }
        }
    }
    OctreeStream {
        depth: grid.depth,
        aabb: grid.aabb,
        leaf_count: grid.len() as u32,
        occupancy,
    }
}

pub fn decode_octree(stream: &OctreeStream) -> Result<VoxelGrid, GeometryError> {
    if stream.depth == 0 || stream.depth > MAX_DEPTH {
        return Err(GeometryError::BadDepth(stream.depth));
    }
    let mut nodes = vec![0u64];
    let mut pos = 0usize;
    for _ in 0..stream.depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &node in &nodes {
            let byte = *stream.occupancy.get(pos).ok_or(GeometryError::Truncated)?;
            if byte == 0 {
                return Err(GeometryError::ZeroOccupancy(pos));
            }
            pos += 1;
            for k in 0..8u64 {
                if byte & (1 << k) != 0 {
                    next.push(node << 3 | k);
                }
            }
        }
        nodes = next;
    }
    if pos != stream.occupancy.len() {
        return Err(GeometryError::TrailingBytes(stream.occupancy.len() - pos));
    }
    if nodes.len() != stream.leaf_count as usize {
        return Err(GeometryError::LeafCountMismatch {
            decoded: nodes.len(),
            declared: stream.leaf_count as usize,
        });
    }
    Ok(VoxelGrid {
        aabb: stream.aabb,
        depth: stream.depth,
        keys: nodes,
    })
}

/// For each occupancy byte, the byte of its parent node (`None` for the root).
pub fn parent_contexts(occupancy: &[u8], depth: u8) -> Vec<Option<u8>> {
    let mut ctx = Vec::with_capacity(occupancy.len());
    let mut level_ctx: Vec<Option<u8>> = vec![None];
    let mut pos = 0;
    for _ in 0..depth {
        let mut next = Vec::new();
        for &c in &level_ctx {
            let Some(&byte) = occupancy.get(pos) else {
                return ctx;
            };
            ctx.push(c);
            pos += 1;
            next.extend(std::iter::repeat_n(Some(byte), byte.count_ones() as usize));
        }
        level_ctx = next;
    }
    ctx
}
