//! End-to-end checks that partitioned training over the worker process is
//! indistinguishable from the in-process loop.

use layerscope::data::gen_synthetic;
use layerscope::enclave::{
    monolithic_baseline, run_partitioned_training, sweep_cuts, PartitionPlan, WORKER_ENV,
};
use layerscope::model::Model;
use layerscope::train::TrainConfig;
use layerscope::Dataset;

fn point_worker_at_build() {
    std::env::set_var(WORKER_ENV, env!("CARGO_BIN_EXE_layerscope-worker"));
}

fn small_setup() -> (Model, Dataset, TrainConfig) {
    let ds = gen_synthetic(3, 30, [1, 6, 6], 0.5, 7).unwrap();
    let model = Model::new("4C3-MP-8FC-3SM", [1, 6, 6], 11).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    };
    (model, ds, cfg)
}

#[test]
fn partitioned_matches_monolithic_bitwise_across_cuts() {
    point_worker_at_build();
    let (model, ds, cfg) = small_setup();
    let (mono, mono_hist, _) = monolithic_baseline(&model, &ds, &cfg).unwrap();
    let mono_params = mono.export_params();

    // Every cut of the 4-layer stack plus the cost-only region.
    for cut in [4usize, 3, 2, 1, 0] {
        let plan = PartitionPlan::new(cut).with_batch_size(cfg.batch_size);
        let out = run_partitioned_training(&model, &plan, &ds, &cfg).unwrap();
        let params = out.model.export_params();
        assert_eq!(params.len(), mono_params.len());
        for (i, (a, b)) in params.iter().zip(&mono_params).enumerate() {
            assert!(a.bits_eq(b), "cut {cut}: param tensor {i} differs");
        }
        assert_eq!(out.history.len(), mono_hist.len());
        for (h, g) in out.history.iter().zip(&mono_hist) {
            assert_eq!(h.mean_loss.to_bits(), g.mean_loss.to_bits(), "cut {cut}");
            assert_eq!(h.accuracy.to_bits(), g.accuracy.to_bits(), "cut {cut}");
        }
        assert_eq!(out.crossings_per_batch, 2, "cut {cut}");
        assert!(out.boundary_bytes_per_batch > 0, "cut {cut}");
    }
}

#[test]
fn cut_past_stack_degenerates_to_monolithic() {
    point_worker_at_build();
    let (model, ds, cfg) = small_setup();
    let (mono, _, _) = monolithic_baseline(&model, &ds, &cfg).unwrap();

    let plan = PartitionPlan::new(5).with_batch_size(cfg.batch_size);
    let out = run_partitioned_training(&model, &plan, &ds, &cfg).unwrap();
    assert_eq!(out.crossings_per_batch, 0);
    assert_eq!(out.boundary_bytes_per_batch, 0);
    assert_eq!(out.account.total_bytes, 0);
    for (a, b) in out.model.export_params().iter().zip(mono.export_params()) {
        assert!(a.bits_eq(&b));
    }
}

#[test]
fn seeded_rerun_of_partitioned_training_is_bitwise_stable() {
    point_worker_at_build();
    let (model, ds, cfg) = small_setup();
    let plan = PartitionPlan::new(2).with_batch_size(cfg.batch_size);
    let a = run_partitioned_training(&model, &plan, &ds, &cfg).unwrap();
    let b = run_partitioned_training(&model, &plan, &ds, &cfg).unwrap();
    for (x, y) in a.model.export_params().iter().zip(b.model.export_params()) {
        assert!(x.bits_eq(&y));
    }
    assert_eq!(a.boundary_bytes_per_batch, b.boundary_bytes_per_batch);
}

#[test]
fn sweep_covers_every_cut_and_orders_from_the_back() {
    point_worker_at_build();
    let (model, ds, cfg) = small_setup();
    let report = sweep_cuts(&model, &ds, &cfg, 16 * 1024 * 1024).unwrap();

    // All four cuts of this tiny model fit the default budget.
    assert_eq!(report.reports.len(), 4);
    assert!(report.skipped.is_empty());
    let cuts: Vec<usize> = report.reports.iter().map(|r| r.cut_index).collect();
    assert_eq!(cuts, vec![3, 2, 1, 0]);
    let labels: Vec<&str> = report
        .reports
        .iter()
        .map(|r| r.cut_label.as_str())
        .collect();
    assert_eq!(labels, vec!["SM1", "FC1", "MP1", "C1"]);

    for r in &report.reports {
        assert!(r.wall_time_monolithic_s > 0.0);
        assert!(r.wall_time_partitioned_s > 0.0);
        assert!(r.overhead_fraction.is_finite());
        assert_eq!(r.crossings_per_batch, 2);
        assert!(r.boundary_bytes_per_batch > 0);
    }
    // Moving the cut toward the input can only grow the secure footprint.
    for w in report.reports.windows(2) {
        assert!(w[0].memory_account.total_bytes <= w[1].memory_account.total_bytes);
    }

    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 1 + report.reports.len());
}

#[test]
fn sweep_records_skipped_cuts_under_a_tight_budget() {
    point_worker_at_build();
    let (model, ds, cfg) = small_setup();
    let full = sweep_cuts(&model, &ds, &cfg, 16 * 1024 * 1024).unwrap();
    let boundary = full.reports[1].memory_account.total_bytes;

    let tight = sweep_cuts(&model, &ds, &cfg, boundary).unwrap();
    assert_eq!(tight.reports.len(), 2, "cuts 3 and 2 fit {boundary} bytes");
    assert_eq!(tight.skipped.len(), 2);
    for s in &tight.skipped {
        assert!(s.total_bytes > boundary);
        assert_eq!(s.budget_bytes, boundary);
    }
    // Skipped cuts never appear in the CSV.
    assert_eq!(tight.to_csv().lines().count(), 1 + 2);
}
