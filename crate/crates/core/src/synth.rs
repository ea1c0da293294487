//! Deterministic synthetic scenes: clustered Gaussians with smooth color
//! fields and a ring of cameras looking at the cloud centroid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::model::{sh_rest_len, GaussianCloud};
use crate::splat::Camera;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub sh_degree: u8,
    pub clusters: usize,
    pub cameras: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 100_000,
            seed: 0,
            sh_degree: 3,
            clusters: 24,
            cameras: 6,
            width: 128,
            height: 96,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn scene(cfg: &SynthConfig) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.clusters.max(1);
    let clusters: Vec<([f64; 3], f64, f64)> = (0..k)
        .map(|_| {
            let center = loop {
                let p: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.8..0.8));
                if p.iter().map(|v| v * v).sum::<f64>() <= 0.64 {
                    break p;
                }
            };
            (center, rng.gen_range(0.08..0.25), rng.gen_range(-3.3..-2.6))
        })
        .collect();
    let d = sh_rest_len(cfg.sh_degree);
    let freq: Vec<[f64; 4]> = (0..d)
        .map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0)))
        .collect();
    let mut cloud = GaussianCloud::zeros(cfg.n, cfg.sh_degree);
    for i in 0..cfg.n {
        let (center, radius, log_s) = clusters[rng.gen_range(0..k)];
        let p: [f64; 3] = std::array::from_fn(|a| center[a] + radius * normal(&mut rng));
        cloud.positions[i] = p.map(|v| v as f32);
        let q: [f64; 4] = std::array::from_fn(|_| normal(&mut rng));
        let len = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let q = q.map(|v| v / len);
        let q = if q[0] < 0.0 { q.map(|v| -v) } else { q };
        cloud.quaternions[i] = q.map(|v| v as f32);
        cloud.log_scales[i] = std::array::from_fn(|_| (log_s + 0.2 * normal(&mut rng)) as f32);
        cloud.opacity_logits[i] = (1.0 + 1.2 * normal(&mut rng)) as f32;
        cloud.sh_dc[i] = std::array::from_fn(|c| {
            let phase = c as f64 * 2.1;
            (0.9 * (2.0 * p[0] + phase).sin() + 0.6 * (3.0 * p[1] - phase).cos() + 0.4 * (2.5 * p[2]).sin()
                + 0.05 * normal(&mut rng)) as f32
        });
        for (t, f) in freq.iter().enumerate() {
            let degree = ((t / 3) as f64 + 1.0).sqrt().floor();
            let amp = 0.25 / (1.0 + degree);
            let v = amp * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + f[3]).sin() + 0.02 * normal(&mut rng);
            cloud.sh_rest[i * d + t] = v as f32;
        }
    }
    Scene {
        cameras: ring_cameras(&cloud, cfg),
        cloud,
    }
}

/// Cameras on a ring around the centroid, alternating above and below it.
pub fn ring_cameras(cloud: &GaussianCloud, cfg: &SynthConfig) -> Vec<Camera> {
    let n = cloud.len().max(1) as f64;
    let centroid: [f64; 3] =
        std::array::from_fn(|a| cloud.positions.iter().map(|p| f64::from(p[a])).sum::<f64>() / n);
    (0..cfg.cameras)
        .map(|c| {
            let angle = std::f64::consts::TAU * c as f64 / cfg.cameras as f64;
            let lift = if c % 2 == 0 { 0.6 } else { -0.6 };
            let eye = [
                centroid[0] + 3.5 * angle.cos(),
                centroid[1] + lift,
                centroid[2] + 3.5 * angle.sin(),
            ];
            let focal = 110.0 * f64::from(cfg.width) / 128.0;
            Camera::look_at(eye, centroid, [0.0, 1.0, 0.0], focal, cfg.width, cfg.height)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splat::project;

    #[test]
    fn deterministic_and_valid() {
        let cfg = SynthConfig {
            n: 300,
            seed: 9,
            ..SynthConfig::default()
        };
        let a = scene(&cfg);
        let b = scene(&cfg);
        assert_eq!(a.cloud, b.cloud);
        a.cloud.validate().unwrap();
        assert_eq!(a.cloud.rest_dim(), 45);
    }

    #[test]
    fn cameras_see_centroid() {
        let s = scene(&SynthConfig {
            n: 1,
            ..SynthConfig::default()
        });
        assert_eq!(s.cloud.len(), 1);
        for cam in &s.cameras {
            let g = s.cloud.activate(0).unwrap();
            let p = project(&g, cam).unwrap();
            assert!((p.mean2d[0] - cam.cx).abs() < 1e-6 && (p.mean2d[1] - cam.cy).abs() < 1e-6);
        }
    }
}
