//! Vector quantization of the higher-degree SH coefficients.
//!
//! Centroids come from mini-batch k-means. Leftover budget keeps the original
//! vectors of the most important Gaussians; those are appended to the
//! codebook after the `k` centroids, in increasing Gaussian order.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VqError {
    #[error("no vectors to cluster")]
    Empty,
    #[error("k = {k} exceeds the {m} input vectors")]
    TooManyClusters { k: usize, m: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("assignment {index} at row {row} outside a codebook of {size} entries")]
    AssignmentOutOfRange { row: usize, index: u32, size: usize },
    #[error("vector data length {len} is not a multiple of dimension {dim}")]
    Shape { len: usize, dim: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 4096,
            iters: 10,
            batch: 1 << 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    pub assignments: Vec<u32>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.centroids.len() / self.dim
        }
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

const ASSIGN_CHUNK: usize = 512;

/// Nearest centroid of every row (ties to the lower centroid index).
///
/// Distances are screened with a single-precision GEMM; every centroid within
/// a conservative error window of the screened minimum is then re-ranked with
/// exact double-precision distances, so the result does not depend on the
/// GEMM kernel.
pub fn assign(vectors: &[f32], dim: usize, centroids: &[f32]) -> Vec<u32> {
    if dim == 0 || centroids.is_empty() {
        return vec![0; vectors.len().checked_div(dim).unwrap_or(0)];
    }
    let k = centroids.len() / dim;
    let c_norms: Vec<f32> = centroids.chunks_exact(dim).map(|c| sq_norm(c) as f32).collect();
    let max_c = c_norms.iter().copied().fold(0f32, f32::max);
    let chunks: Vec<&[f32]> = vectors.chunks(ASSIGN_CHUNK * dim).collect();
    chunks
        .par_iter()
        .map(|chunk| {
            let rows = chunk.len() / dim;
            let mut dots = vec![0f32; rows * k];
            // dots = X * C^T
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    dim,
                    k,
                    1.0,
                    chunk.as_ptr(),
                    dim as isize,
                    1,
                    centroids.as_ptr(),
                    1,
                    dim as isize,
                    0.0,
                    dots.as_mut_ptr(),
                    k as isize,
                    1,
                );
            }
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let x = &chunk[r * dim..(r + 1) * dim];
                let row = &dots[r * k..(r + 1) * k];
                let mut best = f32::INFINITY;
                for (c, &d) in row.iter().enumerate() {
                    best = best.min(c_norms[c] - 2.0 * d);
                }
                let window = 1e-4 * (sq_norm(x) as f32 + max_c) + 1e-30;
                let mut pick = (f64::INFINITY, 0u32);
                for (c, &d) in row.iter().enumerate() {
                    if c_norms[c] - 2.0 * d <= best + window {
                        let exact = sq_dist(x, &centroids[c * dim..(c + 1) * dim]);
                        if exact < pick.0 {
                            pick = (exact, c as u32);
                        }
                    }
                }
                out.push(pick.1);
            }
            out
        })
        .collect::<Vec<_>>()
        .concat()
}

/// k-means++ seeding over `rows` (indices into `vectors`).
fn seed_plus_plus(vectors: &[f32], dim: usize, rows: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let row = |i: usize| &vectors[rows[i] * dim..(rows[i] + 1) * dim];
    let mut chosen = vec![false; rows.len()];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..rows.len());
    chosen[first] = true;
    centroids.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..rows.len()).map(|i| sq_dist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            chosen.iter().position(|&c| !c).unwrap_or(0)
        };
        chosen[next] = true;
        let c = row(next);
        centroids.extend_from_slice(c);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), c));
        }
    }
    centroids
}

/// Moves each empty cluster onto a distinct point far from its current centroid.
fn repair_empty(vectors: &[f32], dim: usize, centroids: &mut [f32], assignments: &[u32], counts: &[usize]) {
    let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
    if empty.is_empty() {
        return;
    }
    let mut far: Vec<(f64, usize)> = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let a = a as usize;
            (sq_dist(&vectors[i * dim..(i + 1) * dim], &centroids[a * dim..(a + 1) * dim]), i)
        })
        .collect();
    far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (c, &(_, i)) in empty.iter().zip(&far) {
        centroids[c * dim..(c + 1) * dim].copy_from_slice(&vectors[i * dim..(i + 1) * dim]);
    }
}

/// Mini-batch k-means. With `batch >= M` every iteration is a full Lloyd step.
pub fn kmeans_batched(vectors: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeans, VqError> {
    if dim == 0 || !vectors.len().is_multiple_of(dim) {
        return Err(VqError::Shape {
            len: vectors.len(),
            dim,
        });
    }
    let m = vectors.len() / dim;
    if m == 0 {
        return Err(VqError::Empty);
    }
    if cfg.k == 0 {
        return Err(VqError::ZeroClusters);
    }
    if cfg.k > m {
        return Err(VqError::TooManyClusters { k: cfg.k, m });
    }
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seed_rows: Vec<usize> = if m <= 4 * k {
        (0..m).collect()
    } else {
        let mut s = sample(&mut rng, m, 4 * k).into_vec();
        s.sort_unstable();
        s
    };
    let mut centroids = seed_plus_plus(vectors, dim, &seed_rows, k, &mut rng);
    let batch = cfg.batch.max(1);
    let mut seen = vec![0u64; k];
    for _ in 0..cfg.iters {
        if batch >= m {
            let assignments = assign(vectors, dim, &centroids);
            let mut sums = vec![0f64; k * dim];
            let mut counts = vec![0usize; k];
            for (i, &a) in assignments.iter().enumerate() {
                let a = a as usize;
                counts[a] += 1;
                for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&vectors[i * dim..(i + 1) * dim]) {
                    *s += f64::from(v);
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let n = counts[c] as f64;
                    for t in 0..dim {
                        centroids[c * dim + t] = (sums[c * dim + t] / n) as f32;
                    }
                }
            }
            repair_empty(vectors, dim, &mut centroids, &assignments, &counts);
        } else {
            let mut rows = sample(&mut rng, m, batch).into_vec();
            rows.sort_unstable();
            let mut data = Vec::with_capacity(batch * dim);
            for &r in &rows {
                data.extend_from_slice(&vectors[r * dim..(r + 1) * dim]);
            }
            let a = assign(&data, dim, &centroids);
            for (b, &c) in a.iter().enumerate() {
                let c = c as usize;
                seen[c] += 1;
                let eta = 1.0 / seen[c] as f64;
                for t in 0..dim {
                    let cur = f64::from(centroids[c * dim + t]);
                    centroids[c * dim + t] = (cur + eta * (f64::from(data[b * dim + t]) - cur)) as f32;
                }
            }
        }
    }
    let assignments = assign(vectors, dim, &centroids);
    Ok(KMeans {
        dim,
        centroids,
        assignments,
    })
}

/// Sum of squared distances from each row to its assigned centroid.
pub fn sse(vectors: &[f32], dim: usize, centroids: &[f32], assignments: &[u32]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let a = a as usize;
            sq_dist(&vectors[i * dim..(i + 1) * dim], &centroids[a * dim..(a + 1) * dim])
        })
        .sum()
}

/// Number of original vectors the leftover budget can hold.
pub fn plan_retention(m: usize, essential_bytes: u64, budget_bytes: u64, bytes_per_vector: u64) -> usize {
    if bytes_per_vector == 0 || budget_bytes <= essential_bytes {
        return 0;
    }
    (((budget_bytes - essential_bytes) / bytes_per_vector) as usize).min(m)
}

/// Indices of the `r` most important rows, ascending; ties go to lower indices.
pub fn top_indices(importance: &[f64], r: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..importance.len()).collect();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    let mut top = order[..r.min(order.len())].to_vec();
    top.sort_unstable();
    top
}

/// Codebook of `k` centroids followed by `r` retained original rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCodebook {
    pub k: usize,
    pub r: usize,
    pub dim: usize,
    /// `(k + r) x dim`, row-major.
    pub entries: Vec<f32>,
    pub assignments: Vec<u32>,
}

impl ShCodebook {
    pub fn len(&self) -> usize {
        self.k + self.r
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stream symbols: centroid index, or `k` as the escape for retained rows.
    pub fn assignment_symbols(&self) -> Vec<u32> {
        self.assignments
            .iter()
            .map(|&a| (a as usize).min(self.k) as u32)
            .collect()
    }

    /// Rebuilds assignments from stream symbols; escapes take retained entries in order.
    pub fn assignments_from_symbols(symbols: &[u32], k: usize) -> Vec<u32> {
        let mut next = k as u32;
        symbols
            .iter()
            .map(|&s| {
                if s as usize == k {
                    next += 1;
                    next - 1
                } else {
                    s
                }
            })
            .collect()
    }
}

/// Builds the codebook from clustering output and the retained row set
/// (ascending indices into `sh_rest`).
pub fn encode_sh(sh_rest: &[f32], dim: usize, km: &KMeans, retained: &[usize]) -> ShCodebook {
    let k = km.k();
    let mut entries = km.centroids.clone();
    let mut assignments = km.assignments.clone();
    for (n, &i) in retained.iter().enumerate() {
        entries.extend_from_slice(&sh_rest[i * dim..(i + 1) * dim]);
        assignments[i] = (k + n) as u32;
    }
    ShCodebook {
        k,
        r: retained.len(),
        dim,
        entries,
        assignments,
    }
}

pub fn decode_sh(cb: &ShCodebook) -> Result<Vec<f32>, VqError> {
    let size = cb.len();
    let mut out = Vec::with_capacity(cb.assignments.len() * cb.dim);
    for (row, &a) in cb.assignments.iter().enumerate() {
        if a as usize >= size {
            return Err(VqError::AssignmentOutOfRange { row, index: a, size });
        }
        let a = a as usize;
        out.extend_from_slice(&cb.entries[a * cb.dim..(a + 1) * cb.dim]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v = Vec::new();
        for i in 0..200 {
            let base = if i % 2 == 0 { -5.0 } else { 5.0 };
            for _ in 0..4 {
                v.push(base + rng.gen_range(-0.5f32..0.5));
            }
        }
        v
    }

    #[test]
    fn k_equals_m_is_lossless() {
        let v: Vec<f32> = (0..24).map(|i| (i * i % 17) as f32).collect();
        let km = kmeans_batched(
            &v,
            3,
            &KMeansConfig {
                k: 8,
                iters: 3,
                batch: 8,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(sse(&v, 3, &km.centroids, &km.assignments), 0.0);
        let mut a = km.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn separated_blobs() {
        let v = blobs();
        let cfg = KMeansConfig {
            k: 2,
            iters: 5,
            batch: 1000,
            seed: 0,
        };
        let km = kmeans_batched(&v, 4, &cfg).unwrap();
        for c in 0..2 {
            let members: Vec<usize> = (0..200).filter(|&i| km.assignments[i] == c as u32).collect();
            assert_eq!(members.len(), 100);
            for t in 0..4 {
                let mean = members.iter().map(|&i| f64::from(v[i * 4 + t])).sum::<f64>() / 100.0;
                assert!((f64::from(km.centroids[c * 4 + t]) - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn errors() {
        let cfg = KMeansConfig {
            k: 5,
            ..KMeansConfig::default()
        };
        assert_eq!(
            kmeans_batched(&[0.0; 8], 2, &cfg),
            Err(VqError::TooManyClusters { k: 5, m: 4 })
        );
        assert_eq!(kmeans_batched(&[], 2, &cfg), Err(VqError::Empty));
    }

    #[test]
    fn retention_arithmetic() {
        assert_eq!(plan_retention(100, 500, 500, 180), 0);
        assert_eq!(plan_retention(100, 500, 500 + 1800, 180), 10);
        assert_eq!(plan_retention(5, 0, 1 << 30, 180), 5);
        assert_eq!(top_indices(&[1.0, 3.0, 3.0, 0.5, 2.0], 3), vec![1, 2, 4]);
    }

    #[test]
    fn retained_rows_exact() {
        let v = blobs();
        let cfg = KMeansConfig {
            k: 1,
            iters: 2,
            batch: 1000,
            seed: 0,
        };
        let km = kmeans_batched(&v, 4, &cfg).unwrap();
        let cb = encode_sh(&v, 4, &km, &[3, 7]);
        let out = decode_sh(&cb).unwrap();
        assert_eq!(&out[12..16], &v[12..16]);
        assert_eq!(&out[28..32], &v[28..32]);
        assert_eq!(&out[0..4], &km.centroids[..]);
        let syms = cb.assignment_symbols();
        assert_eq!(ShCodebook::assignments_from_symbols(&syms, 1), cb.assignments);
    }
}
