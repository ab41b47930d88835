//! End-to-end demo: generate a synthetic stream, train the pipeline, and
//! print the per-interval metric series plus a final summary.
//!
//! Usage: `cargo run --release -p cvrkit --example train_report -- \
//!     [events_per_interval] [intervals] [mode] [contaminate]`
//! where `mode` is one of `rff`, `linear`, `off` and `contaminate` is
//! `0` or `1`.

use cvrkit::{
    gen_synthetic, CodeMode, GeneratorConfig, Pipeline, PipelineConfig, Schema, TrainFlags,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let events_per_interval: usize = args.get(1).map_or(20_000, |a| a.parse().unwrap());
    let intervals: usize = args.get(2).map_or(10, |a| a.parse().unwrap());
    let code_mode = match args.get(3).map(String::as_str) {
        None | Some("rff") => CodeMode::Rff,
        Some("linear") => CodeMode::Linear,
        Some("off") => CodeMode::Off,
        Some(other) => panic!("unknown mode {other}"),
    };
    let contaminate = args.get(4).map_or(false, |a| a == "1");

    let schema = Schema::default_synthetic();
    let gen_config = GeneratorConfig {
        events_per_interval,
        intervals,
        ..GeneratorConfig::default()
    };
    let stream = gen_synthetic(&gen_config, 7).expect("generator config is valid");

    let pipeline_config = PipelineConfig {
        code_mode,
        ..PipelineConfig::default()
    };
    let mut pipeline = Pipeline::new(&schema, &pipeline_config).expect("pipeline config is valid");
    println!(
        "encoder params: {}  uniform recloss: {:.4}",
        pipeline.ae.encoder_param_count(),
        schema.uniform_recloss()
    );

    let start = std::time::Instant::now();
    let artifacts = pipeline
        .run_stream(&stream, &TrainFlags { contaminate })
        .expect("training succeeds");
    println!("trained {intervals} intervals in {:.1?}", start.elapsed());

    println!("interval  recloss  recl_rand  gen     diff     randratio  | logloss  auc     calib");
    for (m, e) in artifacts.metrics.iter().zip(&artifacts.evals) {
        println!(
            "{:>8}  {:<7.4}  {:<9.3}  {:<6.4}  {:<7.4}  {:<9.2e}  | {:<7.4}  {:<6.4}  {:.4}",
            m.interval_id,
            m.recloss,
            m.recloss_rand,
            m.gen,
            m.diff,
            m.randratio,
            e.logloss,
            e.auc.unwrap_or(f64::NAN),
            e.calibration.unwrap_or(f64::NAN),
        );
    }
    if let Some(overall) = artifacts.overall_logloss() {
        println!("overall progressive logloss: {overall:.5}");
    }
}
