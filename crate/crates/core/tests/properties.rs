use std::collections::BTreeMap;

use proptest::prelude::*;
use sparseffn::ffn::{ffn_backward, ffn_forward_train, FfnWeights, Variant};
use sparseffn::formats::{
    dense_to_twell, dense_to_twell_with, hybrid_to_dense_matrix, twell_pack_words, twell_to_dense, twell_to_hybrid,
    twell_unpack_words, HybridCapacity, HybridMatrix, PackPredicate, TwellConfig,
};
use sparseffn::infer::{
    down_project_twell, ffn_forward_infer, fused_up_down_with, gate_project_twell, hilbert_schedule, UpProjection,
};
use sparseffn::statkit::{ActivationLog, LogRecord, StatsAccumulator};
use sparseffn::tensor::{matmul_dense, matmul_dense_with, randn, rel_error, round_bf16, transpose_dense, Precision};
use sparseffn::train_kernels::{
    dense_to_hybrid_matmul, hybrid_elementwise_mul, hybrid_to_dense_matmul_probed, hybrid_transpose,
    hybrid_transpose_with,
};
use sparseffn::trainer::reinit_dead_columns;
use sparseffn::{DenseMatrix, Error, Probe, SeededRng};

/// Non-negative matrix where each entry is positive with probability
/// `density`.
fn sparse_matrix(rows: usize, cols: usize, density: f64, seed: u64) -> DenseMatrix<f32> {
    let mut rng = SeededRng::new(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.uniform() < density {
            (rng.uniform() * 4.0) as f32 + 1e-3
        } else {
            0.0
        }
    })
}

fn max_tile_count(d: &DenseMatrix<f32>, t: usize) -> usize {
    (0..d.rows())
        .flat_map(|r| d.row(r).chunks(t).map(|c| c.iter().filter(|v| **v > 0.0).count()))
        .max()
        .unwrap_or(0)
}

fn tile_strategy() -> impl Strategy<Value = (usize, usize)> {
    // (tile width, compression)
    prop_oneof![
        Just((4, 1)),
        Just((4, 2)),
        Just((8, 2)),
        Just((16, 4)),
        Just((64, 8)),
        Just((64, 2))
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn twell_round_trip_and_capacity_rule(
        rows in 0usize..24,
        tiles in 1usize..5,
        (t, c) in tile_strategy(),
        density in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let d = sparse_matrix(rows, tiles * t, density, seed);
        let cfg = TwellConfig::new(t, c).unwrap();
        let worst = max_tile_count(&d, t);
        match dense_to_twell(&d, cfg) {
            Ok(tw) => {
                prop_assert!(worst <= t / c);
                tw.validate().unwrap();
                prop_assert_eq!(twell_to_dense(&tw).unwrap(), d.clone());
                prop_assert_eq!(tw.total_nnz(), d.count_positive());
                match twell_pack_words(&tw.clone()) {
                    Ok(p) => {
                        prop_assert!(worst < t / c);
                        prop_assert_eq!(twell_unpack_words(&p).unwrap().total_nnz(), d.count_positive());
                    }
                    Err(Error::OverflowTile { .. }) => prop_assert_eq!(worst, t / c),
                    Err(Error::InvalidConfig { .. }) => prop_assert!(t / c < 2),
                    Err(e) => prop_assert!(false, "unexpected {e}"),
                }
            }
            Err(Error::OverflowTile { count, capacity, .. }) => {
                prop_assert!(worst > t / c);
                prop_assert_eq!(capacity, t / c);
                prop_assert!(count > capacity);
            }
            Err(e) => prop_assert!(false, "unexpected {e}"),
        }
    }

    #[test]
    fn hybrid_routing_partitions_rows(
        rows in 1usize..40,
        cols in 1usize..48,
        density in 0.0f64..1.0,
        ell_width in 0usize..12,
        dense_cap in 0usize..8,
        seed in any::<u64>(),
    ) {
        let d = sparse_matrix(rows, cols, density, seed);
        let h = HybridMatrix::from_dense(&d, HybridCapacity::new(ell_width, dense_cap), PackPredicate::Positive);
        let p = h.pattern();
        let wants_dense: Vec<bool> = (0..rows).map(|r| d.row(r).iter().filter(|v| **v > 0.0).count() > ell_width).collect();
        prop_assert_eq!(p.routing(), &wants_dense[..]);
        let n_dense = wants_dense.iter().filter(|b| **b).count();
        prop_assert_eq!(p.overflowed(), n_dense > dense_cap);
        prop_assert!(p.dense_row_count() <= dense_cap || p.overflowed());
        prop_assert_eq!(p.total_nnz(), d.count_positive());
        if !p.overflowed() {
            h.validate().unwrap();
            prop_assert_eq!(hybrid_to_dense_matrix(&h).unwrap(), d);
        }
    }

    #[test]
    fn twell_to_hybrid_is_lossless_with_room(
        rows in 1usize..30,
        tiles in 1usize..4,
        density in 0.0f64..0.5,
        ell_width in 0usize..16,
        seed in any::<u64>(),
    ) {
        let d = sparse_matrix(rows, tiles * 16, density, seed);
        let Ok(tw) = dense_to_twell(&d, TwellConfig::new(16, 1).unwrap()) else { unreachable!() };
        let (h, _) = twell_to_hybrid(&tw, ell_width, rows, false);
        prop_assert!(!h.overflowed());
        prop_assert_eq!(hybrid_to_dense_matrix(&h).unwrap(), d);
    }

    #[test]
    fn transpose_is_exact_and_an_involution(
        rows in 1usize..32,
        cols in 1usize..32,
        density in 0.0f64..1.0,
        ell_width in 0usize..10,
        seed in any::<u64>(),
    ) {
        let d = sparse_matrix(rows, cols, density, seed);
        let cap = HybridCapacity::new(ell_width, rows.max(cols));
        let h = HybridMatrix::from_dense(&d, cap, PackPredicate::Positive);
        let t = hybrid_transpose_with(&h, cap);
        prop_assert!(!t.overflowed());
        prop_assert_eq!(hybrid_to_dense_matrix(&t).unwrap(), transpose_dense(&d));
        prop_assert_eq!(hybrid_to_dense_matrix(&hybrid_transpose(&t)).unwrap(), d.clone());

        // Without backup rows the transpose flags exactly the wide columns.
        let tight = hybrid_transpose_with(&h, HybridCapacity::new(ell_width, 0));
        let wide_cols = (0..cols).filter(|&j| (0..rows).filter(|&i| d.get(i, j) > 0.0).count() > ell_width).count();
        prop_assert_eq!(tight.overflowed(), wide_cols > 0);
    }

    #[test]
    fn hybrid_kernels_match_dense_oracles(
        m in 1usize..24,
        n in 1usize..40,
        k in 1usize..12,
        density in 0.0f64..1.0,
        ell_width in 0usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed ^ 0x5eed);
        let d = sparse_matrix(m, n, density, seed);
        let h = HybridMatrix::from_dense(&d, HybridCapacity::new(ell_width, m), PackPredicate::Positive);

        let b = randn::<f32>(n, k, 1.0, &mut rng);
        let probe = Probe::new();
        let y = hybrid_to_dense_matmul_probed(&h, &b, Some(&probe)).unwrap();
        prop_assert!(rel_error(&y, &matmul_dense(&d, &b).unwrap()) <= 1e-5);
        let sparse_nnz: usize = (0..m).filter(|&r| !h.pattern().is_dense_row(r)).map(|r| h.sparse_row(r).0.len()).sum();
        let dense_rows = h.pattern().dense_row_count();
        prop_assert_eq!(probe.macs() as usize, k * sparse_nnz + dense_rows * n * k);

        let a = randn::<f32>(m, k, 1.0, &mut rng);
        let w = randn::<f32>(k, n, 1.0, &mut rng);
        let s = dense_to_hybrid_matmul(&a, &w, &h).unwrap();
        prop_assert!(s.shares_pattern(&h));
        let mask = d.map(|v| (v > 0.0) as u8 as f32);
        let want = sparseffn::tensor::hadamard(&matmul_dense(&a, &w).unwrap(), &mask).unwrap();
        prop_assert!(rel_error(&hybrid_to_dense_matrix(&s).unwrap(), &want) <= 1e-5);

        let e = hybrid_elementwise_mul(&s, &h).unwrap();
        let want = sparseffn::tensor::hadamard(&hybrid_to_dense_matrix(&s).unwrap(), &d).unwrap();
        prop_assert!(rel_error(&hybrid_to_dense_matrix(&e).unwrap(), &want) <= 1e-5);
    }

    #[test]
    fn fused_path_work_and_split_invariance(
        m in 1usize..20,
        k_per in 1usize..5,
        tiles in 1usize..4,
        shift in -2.0f64..2.0,
        split in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let (k, n) = (k_per * split, 16 * tiles);
        let x = randn::<f32>(m, k, 1.0, &mut rng);
        let w_g = randn::<f32>(k, n, 1.0, &mut rng).map(|v| v + shift as f32);
        let w_u = randn::<f32>(k, n, 1.0, &mut rng);
        let w_d = randn::<f32>(n, k, 1.0, &mut rng);
        let cfg = TwellConfig::new(16, 1).unwrap();
        let h_g = gate_project_twell(&x, &w_g, cfg).unwrap();
        let probe = Probe::new();
        let y = fused_up_down_with(&x, &h_g, &UpProjection::new(&w_u), &w_d, Precision::F32, Some(&probe)).unwrap();
        prop_assert_eq!(probe.macs() as usize, 2 * k * h_g.total_nnz());
        let w = FfnWeights::gated(w_g, w_u, w_d.clone()).unwrap();
        prop_assert!(rel_error(&y, &sparseffn::infer::ffn_forward_dense(&x, &w).unwrap()) <= 1e-5);
        prop_assert_eq!(down_project_twell(&h_g, &w_d, split).unwrap(), down_project_twell(&h_g, &w_d, 1).unwrap());
    }

    #[test]
    fn hilbert_schedule_is_a_bijection(gm in 0usize..80, gn in 0usize..80) {
        let s = hilbert_schedule(gm, gn);
        prop_assert!(s.is_bijection());
        prop_assert_eq!(s.len(), gm * gn);
    }

    #[test]
    fn identity_matmul_is_exact_in_every_mode(rows in 0usize..20, cols in 0usize..20, seed in any::<u64>()) {
        let a = randn::<f32>(rows, cols, 3.0, &mut SeededRng::new(seed));
        prop_assert_eq!(matmul_dense(&a, &DenseMatrix::identity(cols)).unwrap(), a.clone());
        prop_assert_eq!(matmul_dense(&DenseMatrix::identity(rows), &a).unwrap(), a.clone());
        let ab = a.round_bf16();
        prop_assert_eq!(matmul_dense_with(&ab, &DenseMatrix::identity(cols), Precision::Bf16Emulated).unwrap(), ab);
    }

    #[test]
    fn bf16_mode_rounds_the_f32_result(m in 1usize..10, k in 1usize..40, n in 1usize..10, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let a = randn::<f32>(m, k, 1.0, &mut rng);
        let b = randn::<f32>(k, n, 1.0, &mut rng);
        let full = matmul_dense(&a, &b).unwrap();
        let half = matmul_dense_with(&a, &b, Precision::Bf16Emulated).unwrap();
        prop_assert_eq!(half, full.map(round_bf16));
    }

    #[test]
    fn reinit_leaves_live_columns_bitwise(
        rows in 1usize..10,
        dead in proptest::collection::vec(any::<bool>(), 1..20),
        lambda in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let w0 = randn::<f32>(rows, dead.len(), 1.0, &mut rng);
        let mut w = w0.clone();
        reinit_dead_columns(&mut w, &dead, lambda, 0.1, &mut rng);
        for (j, &d) in dead.iter().enumerate() {
            if !d {
                for i in 0..rows {
                    prop_assert_eq!(w.get(i, j).to_bits(), w0.get(i, j).to_bits());
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn training_and_inference_paths_agree(
        m in 1usize..40,
        k in 2usize..12,
        tiles in 1usize..4,
        sigma in 0.05f64..2.0,
        gated in any::<bool>(),
        ell_width in 0usize..16,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let variant = if gated { Variant::Gated } else { Variant::NonGated };
        let n = 16 * tiles;
        let w = FfnWeights::<f32>::init(variant, k, n, sigma, &mut rng);
        let x = randn::<f32>(m, k, 1.0, &mut rng);
        let cfg = TwellConfig::new(16, 1).unwrap();
        let (y, cache) = ffn_forward_train(&x, &w, cfg, ell_width, m).unwrap();
        prop_assert!(rel_error(&y, &ffn_forward_infer(&x, &w, cfg).unwrap()) <= 1e-5);

        // Gradients reach only hidden units on the forward pattern.
        let dy = randn::<f32>(m, k, 1.0, &mut rng);
        let g = ffn_backward(&cache, &dy, &w, 0.01).unwrap();
        for (j, active) in cache.active_columns().into_iter().enumerate() {
            if !active {
                prop_assert!(g.dw_d.row(j).iter().all(|v| *v == 0.0));
                prop_assert!((0..k).all(|i| g.dw_u.get(i, j) == 0.0));
                if let Some(dw_g) = &g.dw_g {
                    prop_assert!((0..k).all(|i| dw_g.get(i, j) == 0.0));
                }
            }
        }
    }

    #[test]
    fn nonzero_packing_round_trips_signed_data(
        rows in 1usize..16,
        density in 0.0f64..0.25,
        seed in any::<u64>(),
    ) {
        let mut rng = SeededRng::new(seed);
        let d = DenseMatrix::from_fn(rows, 64, |_, _| {
            if rng.uniform() < density { rng.normal() as f32 } else { 0.0 }
        });
        let tw = dense_to_twell_with(&d, TwellConfig::new(64, 2).unwrap(), PackPredicate::NonZero).unwrap();
        prop_assert_eq!(twell_to_dense(&tw).unwrap(), d.clone());
        prop_assert_eq!(tw.total_nnz(), d.count_nonzero());
    }
}

fn random_log(layers: usize, rows: usize, seed: u64) -> ActivationLog {
    let mut rng = SeededRng::new(seed);
    let mut log = ActivationLog::new(layers);
    for i in 0..rows {
        log.push(LogRecord {
            seq: (i / 8) as u32,
            pos: (i % 8) as u32,
            token: (rng.uniform() < 0.9).then(|| rng.below(12) as u32),
            counts: (0..layers).map(|_| rng.below(300) as u32).collect(),
        })
        .unwrap();
    }
    log
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_equal_brute_force(layers in 1usize..4, rows in 1usize..300, seed in any::<u64>()) {
        let log = random_log(layers, rows, seed);
        let acc = StatsAccumulator::from_log(&log).unwrap();
        let stats = acc.layer_stats().unwrap();
        for (l, s) in stats.iter().enumerate() {
            let sum: u64 = log.records.iter().map(|r| r.counts[l] as u64).sum();
            prop_assert!((s.mean_nnz - sum as f64 / rows as f64).abs() <= 1e-12);
            prop_assert_eq!(s.max_nnz, log.records.iter().map(|r| r.counts[l]).max().unwrap());
        }
        let mut by_pos: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
        for r in &log.records {
            let e = by_pos.entry(r.pos).or_default();
            e.0 += r.counts.iter().map(|&c| c as u64).sum::<u64>();
            e.1 += 1;
        }
        let pos = acc.position_stats();
        prop_assert_eq!(pos.len(), by_pos.len());
        for (p, (k, (sum, n))) in pos.iter().zip(by_pos) {
            prop_assert_eq!(p.position, k);
            prop_assert_eq!(p.rows, n);
            prop_assert!((p.mean_nnz - sum as f64 / (n * layers as u64) as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn frequency_filter_keeps_frequent_tokens(rows in 1usize..300, min_freq in 0.0f64..0.3, seed in any::<u64>()) {
        let log = random_log(2, rows, seed);
        let acc = StatsAccumulator::from_log(&log).unwrap();
        let all = acc.token_extremes(0.0, usize::MAX);
        let kept = acc.token_extremes(min_freq, usize::MAX);
        let frequent: Vec<u32> = all.lowest.iter().filter(|t| t.frequency >= min_freq).map(|t| t.token).collect();
        let kept_ids: Vec<u32> = kept.lowest.iter().map(|t| t.token).collect();
        prop_assert_eq!(kept_ids, frequent);
        prop_assert!(kept.highest.iter().all(|t| t.frequency >= min_freq));
    }

    #[test]
    fn sharded_accumulators_merge_exactly(rows in 2usize..200, cut in 0.0f64..1.0, seed in any::<u64>()) {
        let log = random_log(3, rows, seed);
        let at = ((rows as f64) * cut) as usize;
        let mut a = StatsAccumulator::new(3);
        let mut b = StatsAccumulator::new(3);
        for r in &log.records[..at] { a.push(r).unwrap(); }
        for r in &log.records[at..] { b.push(r).unwrap(); }
        let merged = a.merge(b).unwrap();
        let whole = StatsAccumulator::from_log(&log).unwrap();
        prop_assert_eq!(merged.layer_stats().unwrap(), whole.layer_stats().unwrap());
        prop_assert_eq!(merged.position_stats(), whole.position_stats());
        prop_assert_eq!(merged.token_extremes(0.01, 5), whole.token_extremes(0.01, 5));
    }
}
