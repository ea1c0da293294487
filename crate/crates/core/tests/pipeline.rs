//! Encoder, decoder and search on small synthetic scenes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use gscodec::codec::{self, PrepareConfig, PreparedScene};
use gscodec::quant::{BitWidthMatrix, NormKind};
use gscodec::search::{self, SearchConfig, SizeModel, TauStatus};
use gscodec::splat;
use gscodec::synth::{self, Scene, SynthConfig};
use gscodec::transform::{self, Channel, TransformPlan, CHANNEL_COUNT};
use gscodec::vq::KMeansConfig;

fn small_scene(n: usize, seed: u64) -> Scene {
    synth::scene(&SynthConfig {
        n,
        seed,
        ..SynthConfig::default()
    })
}

fn small_cfg(blocks: usize) -> PrepareConfig {
    PrepareConfig {
        blocks,
        kmeans: KMeansConfig {
            k: 32,
            ..KMeansConfig::default()
        },
        ..PrepareConfig::default()
    }
}

fn prepared(n: usize, seed: u64, tau: f64, blocks: usize) -> (Scene, PreparedScene) {
    let s = small_scene(n, seed);
    let scores = splat::importance(&s.cloud, &s.cameras, splat::DEFAULT_BETA).i_g;
    let prep = PreparedScene::new(&s.cloud, &scores, tau, &small_cfg(blocks), None).unwrap();
    (s, prep)
}

#[test]
fn decoded_error_within_loss_table() {
    let (_, prep) = prepared(3000, 1, 0.8, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let rows: Vec<Vec<u8>> = (0..CHANNEL_COUNT)
            .map(|_| (0..7).map(|_| rng.gen_range(0..=16u8)).collect())
            .collect();
        let q = BitWidthMatrix { rows };
        let widths: [u8; CHANNEL_COUNT] = q.channel_max().try_into().unwrap();
        let plan = TransformPlan::from_channel_bits(&widths);
        let enc = prep.encode(&plan, &q, 0).unwrap();
        let dec = codec::decode(&enc.bytes).unwrap();
        assert_eq!(dec.cloud.len(), prep.leaf_count());
        assert_eq!(dec.grid.keys, prep.grid.keys);
        let table = prep.loss(&plan);
        let reference = transform::raw_channels(&prep.cloud);
        let decoded = transform::raw_channels(&dec.cloud);
        // angles can wrap, so only the unbounded channels are compared in value space
        for ch in Channel::ALL.into_iter().filter(|c| !(1..=3).contains(&c.id())) {
            let c = ch.id();
            let predicted = table.omega[c]
                .iter()
                .zip(&q.rows[c])
                .map(|(o, &b)| o[b as usize].powi(2))
                .sum::<f64>()
                .sqrt();
            let actual = NormKind::L2.of(reference[c].iter().zip(&decoded[c]).map(|(a, b)| a - b));
            // f32 storage of the decoded attributes and the DC adds a little
            let slack = 1e-5 * (reference[c].len() as f64).sqrt() * reference[c].iter().fold(1.0f64, |m, v| m.max(v.abs()));
            assert!(actual <= predicted + slack, "{ch:?}: {actual} > {predicted}");
        }
    }
}

#[test]
fn container_round_trip_is_stable() {
    let (_, prep) = prepared(2000, 3, 1.0, 5);
    let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 5, 10);
    let plan = TransformPlan::from_channel_bits(&[10; CHANNEL_COUNT]);
    let enc = prep.encode(&plan, &q, 40).unwrap();
    let a = codec::decode(&enc.bytes).unwrap();
    let b = codec::decode(&enc.bytes).unwrap();
    assert_eq!(gscodec::model::save_ply(&a.cloud), gscodec::model::save_ply(&b.cloud));
    assert_eq!(a.info.codebook_retained, 40);
    assert_eq!(a.info.q, q.rows);
    assert_eq!(codec::inspect(&enc.bytes).unwrap(), a.info);
    assert_eq!(enc.sizes.total, enc.bytes.len());
}

#[test]
fn golden_container_hash() {
    let (_, prep) = prepared(1500, 42, 0.9, 6);
    let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 6, 9);
    let plan = TransformPlan::from_channel_bits(&[9; CHANNEL_COUNT]);
    let enc = prep.encode(&plan, &q, 10).unwrap();
    let digest = Sha256::digest(&enc.bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, GOLDEN);
}

const GOLDEN: &str = "488c5c3611ed4e2774ceea285e67fa3d31127092949a52a940dd00990e86df8a";

#[test]
fn corrupted_containers_never_panic() {
    let (_, prep) = prepared(800, 4, 1.0, 3);
    let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 3, 6);
    let enc = prep.encode(&TransformPlan::all_raht(), &q, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..400 {
        let mut bytes = enc.bytes.clone();
        for _ in 0..rng.gen_range(1..4) {
            let i = rng.gen_range(0..bytes.len());
            bytes[i] ^= 1 << rng.gen_range(0..8);
        }
        let _ = codec::decode(&bytes);
    }
    for cut in (0..enc.bytes.len()).step_by(37) {
        assert!(codec::decode(&enc.bytes[..cut]).is_err());
    }
    let mut bad = enc.bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        codec::decode(&bad),
        Err(codec::CodecError::Container(gscodec::container::ContainerError::BadMagic))
    ));
}

#[test]
fn size_estimator_is_affine() {
    let (_, prep) = prepared(2000, 6, 1.0, 8);
    let plan = TransformPlan::from_channel_bits(&[12; CHANNEL_COUNT]);
    let model = SizeModel::new(&prep, &plan, 1234.0, -56.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut random_q = || BitWidthMatrix {
        rows: (0..CHANNEL_COUNT).map(|_| (0..8).map(|_| rng.gen_range(0..=8u8)).collect()).collect(),
    };
    let (a, b) = (random_q(), random_q());
    let mut direct = 0.0;
    for i in 0..CHANNEL_COUNT {
        for j in 0..8 {
            direct += model.p[i][j] * (f64::from(a.get(i, j)) - f64::from(b.get(i, j)));
        }
    }
    assert!((model.estimate(&a) - model.estimate(&b) - direct).abs() < 1e-6);
    let doubled = BitWidthMatrix {
        rows: a.rows.iter().map(|r| r.iter().map(|&v| 2 * v).collect()).collect(),
    };
    let c = model.const_bytes + model.s_delta;
    assert!(((model.estimate(&doubled) - c) - 2.0 * (model.estimate(&a) - c)).abs() < 1e-6);
}

#[test]
fn entropy_coded_payload_roughly_doubles() {
    let (_, prep) = prepared(4000, 8, 1.0, 10);
    let e8 = prep
        .encode(&TransformPlan::from_channel_bits(&[8; CHANNEL_COUNT]), &BitWidthMatrix::uniform(CHANNEL_COUNT, 10, 8), 0)
        .unwrap();
    let e16 = prep
        .encode(&TransformPlan::from_channel_bits(&[16; CHANNEL_COUNT]), &BitWidthMatrix::uniform(CHANNEL_COUNT, 10, 16), 0)
        .unwrap();
    let ratio = e16.sizes.group_payload as f64 / e8.sizes.group_payload as f64;
    assert!((1.5..=2.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn allocation_respects_budget_and_monotone_loss() {
    let (_, prep) = prepared(3000, 9, 0.7, 6);
    let mut last = 0.0;
    for budget in [40_000u64, 80_000, 160_000, 320_000] {
        let a = search::allocate(&prep, budget).unwrap();
        let part = prep.partition(&a.plan);
        let bits: u64 = (0..CHANNEL_COUNT)
            .map(|c| (0..6).map(|j| part.layouts[c].block_len(j) as u64 * u64::from(a.q.get(c, j))).sum::<u64>())
            .sum();
        assert!(bits <= budget);
        let omega = search::aggregate_quality(&prep.loss(&a.plan), &a.q);
        // halving the budget never lowers the loss at a fixed ratio
        if last > 0.0 {
            assert!(omega <= last * (1.0 + 1e-9), "{omega} > {last}");
        }
        last = omega;
    }
}

#[test]
fn slack_budget_takes_full_ratio_and_sixteen_bits() {
    let s = small_scene(2500, 10);
    let scores = splat::importance(&s.cloud, &s.cameras, splat::DEFAULT_BETA).i_g;
    let cfg = small_cfg(4);
    let prep = PreparedScene::new(&s.cloud, &scores, 1.0, &cfg, None).unwrap();
    let full = prep
        .encode(&TransformPlan::all_raht(), &BitWidthMatrix::uniform(CHANNEL_COUNT, 4, 16), 0)
        .unwrap();
    let mut scfg = SearchConfig::new(full.sizes.total as u64 + 3000);
    scfg.prepare = cfg;
    let out = search::search(&s.cloud, &s.cameras, &scfg).unwrap();
    assert_eq!(out.report.chosen_tau, 1.0);
    assert!(out.report.q.iter().flatten().all(|&b| b == 16));
    let chosen = out.report.per_tau.iter().find(|d| d.tau == 1.0).unwrap();
    assert_eq!(chosen.iterations, 1);
    assert!(out.report.relative_error < 0.05);
    assert!(out.encoded.retained > 0);
}

#[test]
fn search_report_shape_and_determinism() {
    let s = small_scene(3000, 11);
    let mut cfg = SearchConfig::new(45_000);
    cfg.prepare = small_cfg(9);
    let a = search::search(&s.cloud, &s.cameras, &cfg).unwrap();
    let b = search::search(&s.cloud, &s.cameras, &cfg).unwrap();
    assert_eq!(a.encoded.bytes, b.encoded.bytes);
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    assert_eq!(a.report.q.len(), CHANNEL_COUNT);
    assert!(a.report.q.iter().all(|r| r.len() == 9));
    assert_eq!(a.report.per_tau.len(), SearchConfig::DEFAULT_TAU_GRID.len());
    assert!(a.report.relative_error < 0.05);
    let winner = a.report.per_tau.iter().find(|d| d.tau == a.report.chosen_tau).unwrap();
    assert_eq!(winner.status, TauStatus::Converged);
    // minimal loss among the converged ratios
    for d in &a.report.per_tau {
        if let Some(o) = d.omega {
            assert!(a.report.omega <= o);
        }
    }
    let dec = codec::decode(&a.encoded.bytes).unwrap();
    assert_eq!(dec.info.q, a.report.q);
}

#[test]
fn tiny_budget_is_infeasible_with_closest_size() {
    let s = small_scene(1000, 12);
    let mut cfg = SearchConfig::new(1024);
    cfg.prepare = small_cfg(4);
    match search::search(&s.cloud, &s.cameras, &cfg) {
        Err(search::SearchError::Infeasible { budget, closest }) => {
            assert_eq!(budget, 1024);
            assert!(closest > 1024);
        }
        other => panic!("expected infeasible, got {:?}", other.map(|o| o.report.achieved_bytes)),
    }
}

#[test]
fn pruning_without_cameras_uses_volume_score() {
    let s = small_scene(1200, 13);
    let scores = splat::importance(&s.cloud, &[], splat::DEFAULT_BETA);
    assert!(scores.i_d.iter().all(|&v| v == 1.0));
    assert_eq!(scores.i_g, scores.i_i);
    let (kept, idx) = splat::prune(&s.cloud, &scores.i_g, 0.5).unwrap();
    assert_eq!(kept.len(), 600);
    let threshold = idx.iter().map(|&i| scores.i_g[i]).fold(f64::INFINITY, f64::min);
    let dropped = (0..s.cloud.len()).filter(|i| !idx.contains(i));
    assert!(dropped.into_iter().all(|i| scores.i_g[i] <= threshold));
}

#[test]
fn reference_stats_on_lossless_widths() {
    let (s, prep) = prepared(1500, 14, 1.0, 4);
    let q = BitWidthMatrix::uniform(CHANNEL_COUNT, 4, 16);
    let enc = prep.encode(&TransformPlan::all_raht(), &q, prep.leaf_count()).unwrap();
    let dec = codec::decode(&enc.bytes).unwrap();
    let stats = codec::reference_stats(&s.cloud, &dec, NormKind::Linf).unwrap();
    assert_eq!(stats.matched, prep.leaf_count());
    for c in 3..CHANNEL_COUNT {
        assert!(stats.channel_max_abs[c] < 1e-3, "channel {c}: {}", stats.channel_max_abs[c]);
    }
}
