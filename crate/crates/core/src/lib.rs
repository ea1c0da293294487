//! Size-aware post-training compression for 3D Gaussian Splatting models.
//!
//! The pipeline prunes a cloud by importance, voxelizes it into an octree,
//! transforms the per-Gaussian attributes with RAHT, quantizes them in groups
//! with searched bit-widths, clusters the higher-order SH coefficients and
//! entropy-codes everything into one container. [`search::search`] picks the
//! reserve ratio and the bit-width matrix for a byte budget.
//!
//! ```
//! use gscodec::codec::{decode, PrepareConfig, PreparedScene};
//! use gscodec::quant::BitWidthMatrix;
//! use gscodec::synth::{scene, SynthConfig};
//! use gscodec::transform::{TransformPlan, CHANNEL_COUNT};
//!
//! let s = scene(&SynthConfig { n: 500, sh_degree: 1, ..SynthConfig::default() });
//! let scores = vec![1.0; s.cloud.len()];
//! let cfg = PrepareConfig { blocks: 4, ..PrepareConfig::default() };
//! let prep = PreparedScene::new(&s.cloud, &scores, 1.0, &cfg, None).unwrap();
//! let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 4, 12);
//! let plan = TransformPlan::from_channel_bits(&[12; CHANNEL_COUNT]);
//! let bytes = prep.encode(&plan, &q, 0).unwrap().bytes;
//! assert_eq!(decode(&bytes).unwrap().cloud.len(), prep.leaf_count());
//! ```

pub mod bytes;
pub mod codec;
pub mod container;
pub mod entropy;
pub mod geometry;
pub mod model;
pub mod quant;
pub mod search;
pub mod splat;
pub mod synth;
pub mod transform;
pub mod vq;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pruning.md")]
    mod pruning {}
    #[doc = include_str!("../../../book/src/octree.md")]
    mod octree {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    mod quantization {}
    #[doc = include_str!("../../../book/src/entropy.md")]
    mod entropy {}
    #[doc = include_str!("../../../book/src/sh_vq.md")]
    mod sh_vq {}
    #[doc = include_str!("../../../book/src/search.md")]
    mod search {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
