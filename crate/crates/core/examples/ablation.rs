//! A shortened ablation: every component row, self-training, and a threshold
//! sweep, written as CSV and a summary table.
//!
//! `cargo run --release --example ablation -- /tmp/datr_ablation`

use std::path::PathBuf;

use datr::ablation::{run_ablation, AblationConfig};
use datr::synthetic::{build_benchmark, FogPreset, SceneSpec};
use datr::train::{TrainConfig, TrainData};

fn main() -> datr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "datr_ablation".into()));
    let bench = build_benchmark(&SceneSpec::default(), &FogPreset::Heavy.params(), 64, 32, 0, &out.join("data"))?;
    let config = AblationConfig {
        train: TrainConfig {
            burn_in_epochs: 3,
            mutual_epochs: 1,
            ..Default::default()
        },
        thresholds: vec![0.2, 0.5],
    };
    let data = TrainData::load(&bench, &config.train)?;
    let report = run_ablation(&config, &data, &out.join("runs"))?;
    print!("{}", report.summary());
    println!("\n{}", report.to_csv());
    Ok(())
}
