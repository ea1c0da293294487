//! Forward splatting, importance scores and pruning.
//!
//! The renderer is a plain CPU rasterizer: splats are sorted front to back by
//! camera depth (ties by index) and composited into per-pixel transmittance
//! buffers, which is equivalent to compositing each pixel's sorted list.
//! Pixel centers sit at integer coordinates. Only the degree-0 SH color is
//! evaluated.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivatedGaussian, GaussianCloud, SH_C0};

type Mat3 = [[f64; 3]; 3];

/// Added to the diagonal of every projected covariance, in pixels squared.
pub const DILATION: f64 = 0.3;
/// Contributions below this alpha are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
pub const DEFAULT_BETA: f64 = 0.1;

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("no cameras given")]
    NoCameras,
    #[error("reserve ratio {0} outside [0, 1]")]
    BadTau(f64),
    #[error("score vector has {scores} entries for {n} Gaussians")]
    ScoreLength { scores: usize, n: usize },
    #[error("scores sum to zero")]
    ZeroScores,
    #[error("camera {index}: {detail}")]
    BadCamera { index: usize, detail: String },
    #[error("camera JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("images differ in size")]
    ImageSize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    /// Row-major viewing transform (world to camera).
    pub world_to_camera: [[f64; 4]; 4],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraJson {
    world_to_camera: Vec<f64>,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    near: Option<f64>,
}

impl Camera {
    pub const DEFAULT_NEAR: f64 = 0.01;

    /// Camera at `eye` looking at `target`, with +y of the image pointing down.
    pub fn look_at(eye: [f64; 3], target: [f64; 3], up: [f64; 3], focal: f64, width: u32, height: u32) -> Self {
        let sub = |a: [f64; 3], b: [f64; 3]| [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
        let norm = |a: [f64; 3]| {
            let l = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
            [a[0] / l, a[1] / l, a[2] / l]
        };
        let cross = |a: [f64; 3], b: [f64; 3]| {
            [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ]
        };
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let fwd = norm(sub(target, eye));
        let right = norm(cross(fwd, up));
        let down = cross(fwd, right);
        let rows = [right, down, fwd];
        let mut w = [[0.0; 4]; 4];
        for (r, axis) in rows.iter().enumerate() {
            w[r][..3].copy_from_slice(axis);
            w[r][3] = -dot(*axis, eye);
        }
        w[3][3] = 1.0;
        Self {
            world_to_camera: w,
            fx: focal,
            fy: focal,
            cx: (f64::from(width) - 1.0) / 2.0,
            cy: (f64::from(height) - 1.0) / 2.0,
            width,
            height,
            near: Self::DEFAULT_NEAR,
        }
    }

    fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err("zero image size".into());
        }
        if !(self.near > 0.0) {
            return Err("near clip must be positive".into());
        }
        let w = &self.world_to_camera;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| w[i][k] * w[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err("rotation block is not orthonormal".into());
                }
            }
        }
        if w.iter().flatten().any(|v| !v.is_finite()) || ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err("non-finite parameter".into());
        }
        Ok(())
    }

    fn to_camera_space(&self, p: [f64; 3]) -> [f64; 3] {
        let w = &self.world_to_camera;
        std::array::from_fn(|r| w[r][0] * p[0] + w[r][1] * p[1] + w[r][2] * p[2] + w[r][3])
    }
}

pub fn parse_cameras(json: &str) -> Result<Vec<Camera>, SplatError> {
    let raw: Vec<CameraJson> = serde_json::from_str(json)?;
    raw.into_iter()
        .enumerate()
        .map(|(index, c)| {
            if c.world_to_camera.len() != 16 {
                return Err(SplatError::BadCamera {
                    index,
                    detail: format!("world_to_camera has {} entries", c.world_to_camera.len()),
                });
            }
            let cam = Camera {
                world_to_camera: std::array::from_fn(|r| std::array::from_fn(|k| c.world_to_camera[4 * r + k])),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                near: c.near.unwrap_or(Camera::DEFAULT_NEAR),
            };
            cam.validate().map_err(|detail| SplatError::BadCamera { index, detail })?;
            Ok(cam)
        })
        .collect()
}

pub fn cameras_to_json(cams: &[Camera]) -> String {
    let raw: Vec<CameraJson> = cams
        .iter()
        .map(|c| CameraJson {
            world_to_camera: c.world_to_camera.iter().flatten().copied().collect(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: Some(c.near),
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("plain data")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Projected covariance before dilation, `[a, b, c]` for `[[a, b], [b, c]]`.
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
}

pub fn covariance3d(rotation: [f64; 4], scale: [f64; 3]) -> Mat3 {
    let r = crate::transform::quat_to_rotation(rotation);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| r[i][k] * scale[k] * scale[k] * r[j][k]).sum();
        }
    }
    m
}

/// Perspective projection of one Gaussian; `None` when at or behind the near plane.
pub fn project(g: &ActivatedGaussian, cam: &Camera) -> Option<Splat2D> {
    let t = cam.to_camera_space(g.position);
    if t[2] <= cam.near {
        return None;
    }
    let (tx, ty, tz) = (t[0], t[1], t[2]);
    let j = [
        [cam.fx / tz, 0.0, -cam.fx * tx / (tz * tz)],
        [0.0, cam.fy / tz, -cam.fy * ty / (tz * tz)],
    ];
    let sigma = covariance3d(g.rotation, g.scale);
    let w = &cam.world_to_camera;
    // T = J * W_rot, cov2d = T Sigma T^T
    let mut t_mat = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            t_mat[r][c] = (0..3).map(|k| j[r][k] * w[k][c]).sum();
        }
    }
    let mut ts = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            ts[r][c] = (0..3).map(|k| t_mat[r][k] * sigma[k][c]).sum();
        }
    }
    let e = |r: usize, c: usize| (0..3).map(|k| ts[r][k] * t_mat[c][k]).sum::<f64>();
    Some(Splat2D {
        mean2d: [cam.fx * tx / tz + cam.cx, cam.fy * ty / tz + cam.cy],
        cov2d: [e(0, 0), e(0, 1), e(1, 1)],
        depth: tz,
        opacity: g.opacity,
    })
}

pub fn base_color(dc: [f64; 3]) -> [f64; 3] {
    dc.map(|c| (0.5 + SH_C0 * c).max(0.0))
}

/// RGB image, row-major, values unclamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

struct Prepared {
    index: usize,
    mean: [f64; 2],
    conic: [f64; 3],
    radius: f64,
    depth: f64,
    opacity: f64,
    color: [f64; 3],
}

fn prepare(cloud: &GaussianCloud, cam: &Camera) -> Vec<Prepared> {
    let mut out: Vec<Prepared> = (0..cloud.len())
        .filter_map(|i| {
            let g = cloud.activate(i).expect("index in range");
            let s = project(&g, cam)?;
            let a = s.cov2d[0] + DILATION;
            let b = s.cov2d[1];
            let c = s.cov2d[2] + DILATION;
            let det = a * c - b * b;
            assert!(det > 0.0, "dilated covariance must be positive definite");
            let mid = 0.5 * (a + c);
            let lambda = mid + (mid * mid - det).max(0.0).sqrt();
            Some(Prepared {
                index: i,
                mean: s.mean2d,
                conic: [c / det, -b / det, a / det],
                radius: 3.0 * lambda.sqrt(),
                depth: s.depth,
                opacity: s.opacity,
                color: base_color(g.sh_dc),
            })
        })
        .collect();
    out.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
    out
}

/// Renders `cloud` and returns the image together with each Gaussian's
/// transmittance-weighted alpha summed over all pixels.
pub fn render(cloud: &GaussianCloud, cam: &Camera) -> (Image, Vec<f64>) {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut color = vec![0.0f64; 3 * w * h];
    let mut trans = vec![1.0f64; w * h];
    let mut accum = vec![0.0f64; cloud.len()];
    for p in prepare(cloud, cam) {
        let x0 = (p.mean[0] - p.radius).ceil().max(0.0);
        let x1 = (p.mean[0] + p.radius).floor().min(w as f64 - 1.0);
        let y0 = (p.mean[1] - p.radius).ceil().max(0.0);
        let y1 = (p.mean[1] + p.radius).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let mut acc = 0.0;
        for y in y0 as usize..=y1 as usize {
            let dy = y as f64 - p.mean[1];
            for x in x0 as usize..=x1 as usize {
                let dx = x as f64 - p.mean[0];
                let power = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                if power > 9.0 {
                    continue;
                }
                let alpha = p.opacity * (-0.5 * power).exp();
                if alpha < MIN_ALPHA {
                    continue;
                }
                let px = y * w + x;
                let weight = trans[px] * alpha;
                acc += weight;
                for k in 0..3 {
                    color[3 * px + k] += weight * p.color[k];
                }
                trans[px] *= 1.0 - alpha;
            }
        }
        accum[p.index] = acc;
    }
    for (px, t) in trans.iter().enumerate() {
        for k in 0..3 {
            color[3 * px + k] += t;
        }
    }
    (
        Image {
            width: cam.width,
            height: cam.height,
            data: color,
        },
        accum,
    )
}

/// View-dependent score: render accumulation summed over cameras.
pub fn view_dependent_importance(cloud: &GaussianCloud, cams: &[Camera]) -> Result<Vec<f64>, SplatError> {
    if cams.is_empty() {
        return Err(SplatError::NoCameras);
    }
    let per_cam: Vec<Vec<f64>> = cams.par_iter().map(|c| render(cloud, c).1).collect();
    let mut total = vec![0.0; cloud.len()];
    for acc in &per_cam {
        for (t, a) in total.iter_mut().zip(acc) {
            *t += a;
        }
    }
    Ok(total)
}

/// Ascending nearest-rank value at rank `ceil(0.9 N)`.
pub fn quantile90(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (9 * v.len()).div_ceil(10).max(1);
    v[rank - 1]
}

/// Volume score `clamp(V / q90(V), 0, 1)^beta` with `V` the product of the
/// activated scales.
pub fn view_independent_importance(cloud: &GaussianCloud, beta: f64) -> Vec<f64> {
    if cloud.is_empty() {
        return Vec::new();
    }
    let vol: Vec<f64> = cloud
        .log_scales
        .iter()
        .map(|s| s.iter().map(|&v| f64::from(v)).sum::<f64>().exp())
        .collect();
    let q = quantile90(&vol);
    vol.iter()
        .map(|&v| {
            let n = if q > 0.0 { (v / q).clamp(0.0, 1.0) } else { 1.0 };
            n.powf(beta)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub i_d: Vec<f64>,
    pub i_i: Vec<f64>,
    pub i_g: Vec<f64>,
}

/// Joint score `I_d * I_i`; without cameras `I_d` is all ones.
pub fn importance(cloud: &GaussianCloud, cams: &[Camera], beta: f64) -> ImportanceScores {
    let i_d = if cams.is_empty() {
        vec![1.0; cloud.len()]
    } else {
        view_dependent_importance(cloud, cams).expect("cameras present")
    };
    let i_i = view_independent_importance(cloud, beta);
    let i_g = i_d.iter().zip(&i_i).map(|(a, b)| a * b).collect();
    ImportanceScores { i_d, i_i, i_g }
}

/// Number of Gaussians kept at reserve ratio `tau`.
pub fn keep_count(n: usize, tau: f64) -> usize {
    ((tau * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Keeps the `ceil(tau N)` highest-scoring Gaussians (ties to lower index),
/// preserving their original order.
pub fn prune(cloud: &GaussianCloud, scores: &[f64], tau: f64) -> Result<(GaussianCloud, Vec<usize>), SplatError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SplatError::BadTau(tau));
    }
    if scores.len() != cloud.len() {
        return Err(SplatError::ScoreLength {
            scores: scores.len(),
            n: cloud.len(),
        });
    }
    let keep = crate::vq::top_indices(scores, keep_count(cloud.len(), tau));
    Ok((cloud.select(&keep), keep))
}

/// Cumulative share of total importance held by the least important `x%`.
pub fn importance_cdf(scores: &[f64]) -> Result<Vec<(f64, f64)>, SplatError> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(SplatError::ZeroScores);
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out = Vec::with_capacity(s.len() + 1);
    out.push((0.0, 0.0));
    let mut acc = 0.0;
    for (i, v) in s.iter().enumerate() {
        acc += v;
        out.push((100.0 * (i + 1) as f64 / n, 100.0 * acc / total));
    }
    Ok(out)
}

/// PSNR on images clamped to `[0, 1]`; infinite for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, SplatError> {
    if a.width != b.width || a.height != b.height {
        return Err(SplatError::ImageSize);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.clamp(0.0, 1.0) - y.clamp(0.0, 1.0)).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_camera() -> Camera {
        Camera {
            world_to_camera: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
            fx: 50.0,
            fy: 50.0,
            cx: 15.0,
            cy: 15.0,
            width: 31,
            height: 31,
            near: 0.01,
        }
    }

    fn one(pos: [f32; 3], log_scale: f32, logit: f32) -> GaussianCloud {
        let mut c = GaussianCloud::zeros(1, 0);
        c.positions[0] = pos;
        c.log_scales[0] = [log_scale; 3];
        c.opacity_logits[0] = logit;
        c
    }

    #[test]
    fn projection_on_axis() {
        let g = one([0.0, 0.0, 4.0], 0.0, 0.0).activate(0).unwrap();
        let s = project(&g, &axis_camera()).unwrap();
        assert_eq!(s.mean2d, [15.0, 15.0]);
        let f = (50.0f64 / 4.0).powi(2);
        assert!((s.cov2d[0] - f).abs() < 1e-9 && s.cov2d[1].abs() < 1e-12 && (s.cov2d[2] - f).abs() < 1e-9);
        let behind = one([0.0, 0.0, -1.0], 0.0, 0.0).activate(0).unwrap();
        assert!(project(&behind, &axis_camera()).is_none());
    }

    #[test]
    fn empty_cloud_is_white() {
        let (img, acc) = render(&GaussianCloud::zeros(0, 0), &axis_camera());
        assert!(acc.is_empty());
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn stacked_pair_transmittance() {
        let mut c = one([0.0, 0.0, 4.0], -3.0, 0.0);
        c = c.select(&[0, 0]);
        let (_, acc) = render(&c, &axis_camera());
        // front alpha per pixel a, back a(1 - a) with a <= 0.5
        assert!(acc[0] > acc[1] && acc[1] >= 0.5 * acc[0]);
    }

    #[test]
    fn quantile_and_volume_score() {
        let mut c = GaussianCloud::zeros(10, 0);
        for i in 0..10 {
            c.log_scales[i] = [((i + 1) as f32).ln(), 0.0, 0.0];
        }
        assert!((quantile90(&(1..=10).map(f64::from).collect::<Vec<_>>()) - 9.0).abs() < 1e-12);
        let s = view_independent_importance(&c, 1.0);
        for i in 0..10 {
            let want = ((i + 1) as f64 / 9.0).min(1.0);
            assert!((s[i] - want).abs() < 1e-6);
        }
        assert!(view_independent_importance(&c, 0.0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prune_top_half() {
        let c = GaussianCloud::zeros(4, 0);
        let (out, kept) = prune(&c, &[4.0, 3.0, 2.0, 1.0], 0.5).unwrap();
        assert_eq!(kept, vec![0, 1]);
        assert_eq!(out.len(), 2);
        assert!(prune(&c, &[1.0; 4], 1.5).is_err());
        assert_eq!(keep_count(10, 0.3), 3);
        assert_eq!(keep_count(7, 1.0), 7);
    }

    #[test]
    fn cdf_points() {
        let cdf = importance_cdf(&[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(cdf[3], (75.0, 0.0));
        assert_eq!(cdf[4], (100.0, 100.0));
        assert!(importance_cdf(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn camera_json_round_trip() {
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 100.0, 64, 48);
        let parsed = parse_cameras(&cameras_to_json(&[cam])).unwrap();
        assert_eq!(parsed[0], cam);
        assert!(parse_cameras("[{\"world_to_camera\":[1],\"fx\":1,\"fy\":1,\"cx\":0,\"cy\":0,\"width\":1,\"height\":1}]").is_err());
    }
}
