//! The whole desk pipeline through the high-level command API, in a
//! temporary directory: gen-data, train-teacher, distill, train-satic,
//! decode, eval, bench.
//!
//! Run with: cargo run --example full_pipeline

use satic::pipeline::{
    cmd_bench, cmd_decode, cmd_distill, cmd_eval, cmd_gen_data, cmd_train_satic,
    cmd_train_teacher, RunConfig,
};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let teacher_run = dir.path().join("runs/teacher");
    let satic_run = dir.path().join("runs/satic-k2");

    cmd_gen_data(&data, 60, 7).unwrap();

    // Short schedules keep this example quick; the defaults in RunConfig
    // are the full desk recipe.
    let quick = RunConfig {
        epochs_xe: 4,
        epochs_sc: 0,
        warmup: 100,
        lr: 1e-3,
        ..RunConfig::default()
    };
    cmd_train_teacher(&data, &teacher_run, quick.clone()).unwrap();

    cmd_distill(&data, &teacher_run, 5).unwrap();

    let satic_cfg = RunConfig {
        k: 2,
        seqkd: true,
        weight_init: true,
        epochs_sc: 1,
        ..quick
    };
    cmd_train_satic(&data, &satic_run, satic_cfg, Some(&teacher_run)).unwrap();

    cmd_decode(&data, &satic_run, "test", Some(1), 16).unwrap();
    let report = cmd_eval(&data, &satic_run, "test", Some(1)).unwrap();
    println!("\nfinal test CIDEr-D: {:.3}", report.cider_d);

    cmd_bench(&data, &satic_run, &[1, 2, 4], &[1, 4], 1, 6, 1).unwrap();

    println!("\nrun directory layout:");
    for entry in ["config.json", "checkpoints", "logs/metrics.jsonl", "reports"] {
        println!("  {} exists: {}", entry, satic_run.join(entry).exists());
    }
}
