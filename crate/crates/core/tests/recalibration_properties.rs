mod common;

use std::collections::BTreeSet;

use common::{bbox, dataset};
use debias_core::layout::LayoutEntry;
use debias_core::recalibration::{
    layout_rng, materialize_bbox, recalibrate_batch, recalibrate_layout, sample_size_position,
    size_position_policy,
};
use debias_core::{BinningConfig, Layout, LayoutPriors, Provenance, RecalibConfig, RsTable};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn grid(rs: &[f64; 9]) -> RsTable {
    let rows = rs.chunks(3).map(|r| r.to_vec()).collect();
    RsTable::from_scores(0.5, &[rows, vec![vec![0.1; 3]; 3]]).unwrap()
}

fn seed_layout() -> (Layout, debias_core::Dataset) {
    let ds = dataset(
        &[(
            1,
            640,
            480,
            vec![
                (0, bbox(10.0, 10.0, 30.0, 40.0)),
                (1, bbox(200.0, 100.0, 360.0, 300.0)),
                (0, bbox(500.0, 300.0, 600.0, 380.0)),
                (1, bbox(100.0, 350.0, 150.0, 400.0)),
            ],
        )],
        2,
    );
    (Layout::from_image(&ds.images[0]), ds)
}

proptest! {
    #[test]
    fn lowering_a_score_never_lowers_its_probability(
        rs in prop::array::uniform9(0.0f64..1.0),
        bin in 0usize..9,
        drop in 0.0f64..1.0,
        tau in 0.0f64..8.0,
    ) {
        let before = size_position_policy(0, &grid(&rs), tau, 0.01);
        let mut lowered = rs;
        lowered[bin] *= drop;
        let after = size_position_policy(0, &grid(&lowered), tau, 0.01);
        prop_assert!(after[bin] >= before[bin] * (1.0 - 1e-12));
        prop_assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recalibration_keeps_classes_and_bins(seed in any::<u64>(), tau in 0.0f64..4.0) {
        let (layout, ds) = seed_layout();
        let priors = LayoutPriors::from_dataset(&ds);
        let table = grid(&[0.0, 0.1, 0.2, 0.3, 0.0, 0.5, 0.05, 0.01, 0.9]);
        let cfg = RecalibConfig { tau, rng_seed: seed, recalib_fraction: 1.0, ..Default::default() };
        let mut rng = layout_rng(seed, layout.image_id);
        let out = recalibrate_layout(&layout, &priors, &ds.binning, &table, &cfg, &mut rng).unwrap();
        out.layout.validate(2).unwrap();

        let moved: Vec<&LayoutEntry> =
            out.layout.entries.iter().filter(|e| e.provenance == Provenance::Moved).collect();
        for e in &moved {
            let src = layout
                .entries
                .iter()
                .find(|s| s.source_instance_id == e.source_instance_id)
                .unwrap();
            prop_assert_eq!(src.class_id, e.class_id);
        }
        let injected = out.layout.entries.iter().filter(|e| e.provenance == Provenance::Injected).count();
        prop_assert!(injected <= cfg.max_new_instances);
        let seeds_left = out.layout.entries.iter().filter(|e| e.provenance == Provenance::Seed).count();
        prop_assert_eq!(seeds_left, 0);
        prop_assert!(out.layout.len() <= layout.len() + cfg.max_new_instances);
    }
}

#[test]
fn moved_boxes_land_in_their_sampled_bins() {
    let (_, ds) = seed_layout();
    let priors = LayoutPriors::from_dataset(&ds);
    let table = grid(&[0.3; 9]);
    let cfg = RecalibConfig::default();
    let binning = BinningConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for _ in 0..2000 {
        let (s, u) = sample_size_position(0, &table, &cfg, &mut rng);
        match materialize_bbox(0, s, u, 240.0, &priors, &binning, &mut rng, 640, 480) {
            Ok(b) => {
                assert!(b.fits_within(640, 480));
                assert_eq!(binning.size_bin(b.area()), s);
                assert_eq!(binning.pos_bin(b.center().0, 640), u);
            }
            Err(_) => failures += 1,
        }
    }
    assert_eq!(failures, 0);
}

#[test]
fn identity_configuration_passes_seeds_through() {
    let (layout, ds) = seed_layout();
    let cfg = RecalibConfig {
        recalib_fraction: 0.0,
        max_new_instances: 0,
        ..Default::default()
    };
    let out = recalibrate_batch(std::slice::from_ref(&layout), &LayoutPriors::from_dataset(&ds), &ds.binning, &grid(&[0.2; 9]), &cfg);
    let out = out.into_iter().next().unwrap().unwrap();
    assert_eq!(out.layout, layout);
    assert_eq!(out.placement_failures, 0);
}

#[test]
fn batch_is_deterministic_and_schedule_free() {
    let (layout, ds) = seed_layout();
    let seeds: Vec<Layout> = (0..32)
        .map(|i| Layout {
            image_id: i,
            ..layout.clone()
        })
        .collect();
    let priors = LayoutPriors::from_dataset(&ds);
    let table = grid(&[0.0, 0.1, 0.2, 0.3, 0.0, 0.5, 0.05, 0.01, 0.9]);
    let cfg = RecalibConfig {
        rng_seed: 99,
        ..Default::default()
    };
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| recalibrate_batch(&seeds, &priors, &ds.binning, &table, &cfg))
            .into_iter()
            .map(|r| r.unwrap())
            .collect::<Vec<_>>()
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
    let sequential: Vec<_> = seeds
        .iter()
        .map(|s| {
            let mut rng = layout_rng(99, s.image_id);
            recalibrate_layout(s, &priors, &ds.binning, &table, &cfg, &mut rng).unwrap()
        })
        .collect();
    assert_eq!(one, sequential);
}

#[test]
fn uniform_policy_over_many_runs() {
    let mut seed = Layout::new(1, 640, 480);
    seed.push(0, bbox(300.0, 220.0, 340.0, 260.0));
    let ds = dataset(&[(1, 640, 480, vec![(0, bbox(300.0, 220.0, 340.0, 260.0))])], 2);
    let priors = LayoutPriors::from_dataset(&ds);
    let table = grid(&[0.0, 0.1, 0.2, 0.3, 0.0, 0.5, 0.05, 0.01, 0.9]);
    let binning = BinningConfig::default();

    let runs = 10_000;
    let mut counts = [0usize; 9];
    for run in 0..runs {
        let cfg = RecalibConfig {
            tau: 0.0,
            sigma_y: Some(0.0),
            recalib_fraction: 1.0,
            max_new_instances: 0,
            rng_seed: run,
            ..Default::default()
        };
        let mut rng = layout_rng(cfg.rng_seed, seed.image_id);
        let out = recalibrate_layout(&seed, &priors, &binning, &table, &cfg, &mut rng).unwrap();
        assert_eq!(out.placement_failures, 0);
        let e = &out.layout.entries[0];
        assert_eq!(e.class_id, 0);
        assert!((e.bbox.center().1 - 240.0).abs() < 1e-9);
        let s = binning.size_bin(e.bbox.area());
        let u = binning.pos_bin(e.bbox.center().0, 640);
        counts[s * 3 + u] += 1;
    }
    let expected = runs as f64 / 9.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new(8.0).unwrap().sf(chi2);
    assert!(p > 0.01, "chi2 = {chi2}, p = {p}, counts = {counts:?}");
}

#[test]
fn injected_classes_come_from_the_table() {
    let (layout, ds) = seed_layout();
    let priors = LayoutPriors::from_dataset(&ds);
    let table = grid(&[0.2; 9]);
    let cfg = RecalibConfig {
        max_new_instances: 5,
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for s in 0..200 {
        let mut rng = layout_rng(s, 1);
        let out = recalibrate_layout(&layout, &priors, &ds.binning, &table, &cfg, &mut rng).unwrap();
        for e in out.layout.entries.iter().filter(|e| e.provenance == Provenance::Injected) {
            seen.insert(e.class_id);
        }
    }
    assert_eq!(seen, BTreeSet::from([0, 1]));
}
