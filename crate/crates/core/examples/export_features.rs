//! Dumps object-query embeddings from both domains as CSV for plotting
//! elsewhere.

use std::path::PathBuf;

use candle_core::DType;
use datr::eval::export_query_features;
use datr::params::ModelParams;
use datr::synthetic::{build_benchmark, Dataset, FogPreset, SceneSpec};
use datr::train::{DatrModel, TrainConfig};

fn main() -> datr::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "features.csv".into()));
    let dir = std::env::temp_dir().join("datr_export_example");
    let bench = build_benchmark(&SceneSpec::default(), &FogPreset::Heavy.params(), 1, 4, 0, &dir)?;
    let src = Dataset::load(&bench.source_val)?;
    let tgt = Dataset::load(&bench.target_val)?;
    let config = TrainConfig::default();
    let model = DatrModel::build(&config.detector, &ModelParams::new(), 0, DType::F32)?;
    let rows = export_query_features(&model.detector, &[&src, &tgt], &out, 2)?;
    let text = std::fs::read_to_string(&out).expect("just written");
    println!("{rows} rows in {}", out.display());
    for line in text.lines().take(3) {
        println!("{}...", &line[..line.len().min(80)]);
    }
    Ok(())
}
