use super::*;
use crate::engine::ToyModelConfig;

fn env(max_new: usize) -> TrialEnv<f32> {
    let cfg = ToyModelConfig {
        max_new_tokens: max_new,
        ..ToyModelConfig::default()
    };
    TrialEnv {
        model: Arc::new(Model::build(&cfg).unwrap()),
        engine: EngineConfig {
            n_blocks: 128,
            block_size: 16,
            integrity: IntegrityConfig::disabled(),
        },
        prefix: synthetic_prefix(103, cfg.vocab_size, 7),
    }
}

fn geometry() -> KvGeometry {
    KvGeometry::new(2, 64, 16, 2, 16).unwrap()
}

#[test]
fn pick_target_stays_on_surface_and_value_side() {
    let surface: Vec<BlockId> = (0..6).collect();
    for seed in 0..200 {
        let s = pick_target(&surface, &geometry(), BitPosition::new(3).ok(), seed).unwrap();
        assert!(s.coord.block < 6);
        assert_eq!(s.coord.side, KvSide::Value);
        assert!(geometry().contains(&s.coord));
        assert_eq!(
            s,
            pick_target(&surface, &geometry(), BitPosition::new(3).ok(), seed).unwrap()
        );
    }
    assert!(matches!(
        pick_target(&[], &geometry(), None, 0),
        Err(FaultError::EmptySurface)
    ));
}

#[test]
fn pick_target_block_frequencies_uniform() {
    let surface = [10, 11, 12, 13, 14, 15];
    let n = 10_000;
    let mut counts = [0f64; 6];
    for seed in 0..n {
        let s = pick_target(&surface, &geometry(), None, derive_seed(seed, &[9])).unwrap();
        counts[s.coord.block - 10] += 1.0;
    }
    let expect = n as f64 / 6.0;
    let sd = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
    for c in counts {
        assert!((c - expect).abs() <= 3.0 * sd, "{counts:?}");
    }
    let chi2: f64 = counts.iter().map(|c| (c - expect).powi(2) / expect).sum();
    // 0.999 quantile of chi-square with 5 degrees of freedom.
    assert!(chi2 < 20.515, "{chi2}");
}

#[test]
fn inject_flips_in_place_and_is_an_involution() {
    let mut store = KvStore::new(geometry()).unwrap();
    let spec = pick_target(&[3], &geometry(), BitPosition::new(15).ok(), 1).unwrap();
    store.write(&spec.coord, Bf16Pattern::ONE).unwrap();
    let snapshot = store.clone();
    assert_eq!(
        inject(&mut store, &spec).unwrap(),
        (Bf16Pattern::ONE, Bf16Pattern(0xBF80))
    );
    let diffs: usize = (0..2)
        .map(|l| {
            store
                .layer(l)
                .iter()
                .zip(snapshot.layer(l))
                .filter(|(a, b)| a != b)
                .count()
        })
        .sum();
    assert_eq!(diffs, 1);
    inject(&mut store, &spec).unwrap();
    assert_eq!(store.read(&spec.coord).unwrap(), Bf16Pattern::ONE);
    let control = InjectionSpec { bit: None, ..spec };
    assert_eq!(
        inject(&mut store, &control).unwrap(),
        (Bf16Pattern::ONE, Bf16Pattern::ONE)
    );
}

#[test]
fn synthetic_workload_ranges() {
    for seed in 0..100 {
        let s = synthetic_suffix(256, seed);
        assert!((SUFFIX_LEN_MIN..=SUFFIX_LEN_MAX).contains(&s.len()));
        assert!(s.iter().all(|&t| (1..256).contains(&t)));
    }
    assert_eq!(synthetic_prefix(103, 256, 1), synthetic_prefix(103, 256, 1));
    assert_ne!(synthetic_prefix(103, 256, 1), synthetic_prefix(103, 256, 2));
    assert_ne!(derive_seed(1, &[1, 2]), derive_seed(1, &[2, 1]));
}

#[test]
fn control_trials_never_diverge() {
    let e = env(16);
    for (i, n_c) in [1, 2, 4].into_iter().enumerate() {
        let t = run_trial(&e, None, n_c, i as u64).unwrap();
        assert_eq!(t.metrics.tcr, 0.0);
        assert_eq!(t.metrics.category, Category::NoEffect);
        assert_eq!(t.before, t.after);
        assert_eq!(t.outputs.len(), n_c);
    }
}

#[test]
fn trials_are_reproducible() {
    let e = env(16);
    let a = run_trial(&e, BitPosition::new(13).ok(), 2, 42).unwrap();
    let b = run_trial(&e, BitPosition::new(13).ok(), 2, 42).unwrap();
    assert_eq!(a, b);
    let c = run_trial(&e, BitPosition::new(2).ok(), 2, 42).unwrap();
    assert_eq!(a.spec.coord, c.spec.coord);
    assert_eq!(a.baselines, c.baselines);
}

#[test]
fn non_finite_injection_collapses_every_request() {
    let e = env(16);
    let seed = (0..500)
        .find(|&s| {
            let mut engine = e.new_engine().unwrap();
            let surface = e.warm_up(&mut engine, &e.prefix, s).unwrap();
            let g = *engine.store().geometry();
            let spec = pick_target(&surface, &g, None, derive_seed(s, &[STREAM_COORD])).unwrap();
            engine.store().read(&spec.coord).unwrap().biased_exponent() == 127
        })
        .expect("some element in [1, 2)");
    let t = run_trial(&e, BitPosition::new(14).ok(), 3, seed).unwrap();
    assert!(!t.after.is_finite());
    assert_eq!(t.degenerate_outputs, 3);
    assert_eq!(t.metrics.category, Category::Collapse);
}

#[test]
fn selective_group_b_is_untouched() {
    let e = env(16);
    let b = synthetic_prefix(103, 256, 99);
    for seed in 0..3 {
        let r = run_selective_trial(&e, &b, BitPosition::new(14).ok(), 2, seed).unwrap();
        assert_eq!(r.group_b.tcr, 0.0);
    }
    assert!(matches!(
        run_selective_trial(&e, &e.prefix.clone(), None, 2, 0),
        Err(FaultError::SharedPrefix)
    ));
}

#[test]
fn persistence_accounting() {
    let e = env(8);
    let run = run_persistence(&e, BitPosition::new(14).ok(), 20, &[5, 10, 20], 3).unwrap();
    assert_eq!(run.indicators.len(), 20);
    let recount = run.indicators.iter().filter(|&&c| c).count() as u32;
    assert_eq!(run.total(), recount);
    assert_eq!(run.survival.len(), 3);
    assert!(run.survival.iter().all(|s| s.block_present));
    assert_eq!(run.corrupted_serves, 20);
    assert!(run.detections.is_empty());
}

#[test]
fn checksums_stop_persistence() {
    let e = env(8).with_integrity(IntegrityConfig::checksums());
    let run = run_persistence(&e, BitPosition::new(14).ok(), 10, &[5, 10], 3).unwrap();
    assert_eq!(run.total(), 0);
    assert_eq!(run.corrupted_serves, 0);
    assert_eq!(run.detections.len(), 1);
    assert!(run.survival.iter().all(|s| !s.block_present));
}

#[test]
fn ttl_caps_corrupted_serves() {
    let e = env(8).with_integrity(IntegrityConfig::disabled().with_ttl(4));
    let run = run_persistence(&e, BitPosition::new(14).ok(), 12, &[], 5).unwrap();
    // The warm-up seal leaves the block with no hits, so four serves remain.
    assert_eq!(run.corrupted_serves, 4);
}

#[test]
fn replay_between_cycles_is_caught_before_serve() {
    let e = env(8).with_integrity(IntegrityConfig::checksums());
    for p in [0u8, 6, 14, 15] {
        let r = run_replay(
            &e,
            BitPosition::new(p).ok(),
            3,
            3,
            InjectionWindow::BetweenCycles,
            11,
        )
        .unwrap();
        assert_eq!(r.affected, 0, "bit {p}");
        assert_eq!(r.detected, 1);
        assert_eq!(r.false_positives, 0);
        assert!(r.detected_before_serve);
        assert!(r.post_recompute_equal);
    }
}

#[test]
fn replay_in_toctou_window_is_bounded_by_one_batch() {
    let e = env(8).with_integrity(IntegrityConfig::checksums());
    let r = run_replay(
        &e,
        BitPosition::new(14).ok(),
        3,
        4,
        InjectionWindow::AfterVerify,
        11,
    )
    .unwrap();
    assert!(r.affected <= 3);
    assert_eq!(r.detected, 1);
    assert!(r.post_recompute_equal);
}

#[test]
fn exhaustive_sweep_small() {
    let g = KvGeometry::new(1, 2, 2, 1, 2).unwrap();
    let r = exhaustive_sweep(g, 1).unwrap();
    assert_eq!(r.elements, 16);
    assert_eq!(r.flips, 256);
    assert_eq!(r.detected, 256);
    assert_eq!(r.collateral_mismatches, 0);
    assert_eq!(r.residual_mismatches, 0);
}

#[test]
fn control_arm_counts_hits() {
    let r = run_control_arm(&env(4), 60, 2).unwrap();
    assert!(r.verified_hits >= 60);
    assert_eq!(r.mismatches, 0);
    assert_eq!(r.requests, 10);
}

#[test]
fn private_site_stays_off_the_prefix_and_within_one_request() {
    let e = env(16);
    let mut engine = e.new_engine().unwrap();
    let surface = e.warm_up(&mut engine, &e.prefix, 0).unwrap();
    assert_eq!(surface.len(), 6);
    for seed in 0..20 {
        let t = run_trial_at(
            &e,
            InjectionSite::Private,
            BitPosition::new(14).ok(),
            3,
            seed,
        )
        .unwrap();
        let mut engine = e.new_engine().unwrap();
        let prefix_blocks = e.warm_up(&mut engine, &e.prefix, seed).unwrap();
        assert!(!prefix_blocks.contains(&t.spec.coord.block));
        let changed = t
            .baselines
            .iter()
            .zip(&t.outputs)
            .filter(|(b, o)| b != o)
            .count();
        assert!(changed <= 1, "seed {seed}: {changed}");
        assert_eq!(
            t,
            run_trial_at(
                &e,
                InjectionSite::Private,
                BitPosition::new(14).ok(),
                3,
                seed
            )
            .unwrap()
        );
    }
    let c = run_trial_at(&e, InjectionSite::Private, None, 2, 5).unwrap();
    assert_eq!(c.metrics.tcr, 0.0);
    assert_eq!(
        run_trial_at(&e, InjectionSite::Prefix, BitPosition::new(3).ok(), 2, 5).unwrap(),
        run_trial(&e, BitPosition::new(3).ok(), 2, 5).unwrap()
    );
}
