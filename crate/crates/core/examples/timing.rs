//! Times one training run on synthetic data shaped like a 16-variable
//! benchmark split.

use std::time::Instant;

use spgm::fixtures::two_cluster_data;
use spgm::learn::WeightMode;
use spgm::workflow::{train, RunConfig};
use spgm::{Dataset, DatasetTriple};

fn main() {
    let all = two_cluster_data(16, 16181 + 2157 + 3236, 1);
    let rows: Vec<Vec<u8>> = (0..all.len()).map(|i| all.row(i).to_vec()).collect();
    let split = |r: std::ops::Range<usize>| Dataset::from_rows(&rows[r]).expect("rows");
    let triple = DatasetTriple {
        name: "synthetic".into(),
        train: split(0..16181),
        valid: split(16181..18338),
        test: split(18338..rows.len()),
    };
    let args: Vec<String> = std::env::args().collect();
    let config = RunConfig {
        fine_tune: args.iter().any(|a| a == "--fine-tune"),
        weight_mode: if args.iter().any(|a| a == "--em") {
            WeightMode::Em
        } else {
            WeightMode::MiProportional
        },
        ..RunConfig::default()
    };
    let start = Instant::now();
    let out = train(&triple, &config).expect("training succeeds");
    println!("{}", out.metrics.to_json_line());
    eprintln!("wall time {:.1}s", start.elapsed().as_secs_f64());
}
