//! Burn-in then mutual learning on a small benchmark, with per-epoch mAP.
//!
//! `cargo run --release --example train_small -- /tmp/datr_small`

use std::path::PathBuf;

use datr::synthetic::{build_benchmark, FogPreset, SceneSpec};
use datr::train::{train, TrainConfig, TrainData};

fn main() -> datr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "datr_small".into()));
    let bench = build_benchmark(&SceneSpec::default(), &FogPreset::Heavy.params(), 96, 32, 0, &out.join("data"))?;
    let config = TrainConfig {
        burn_in_epochs: 4,
        mutual_epochs: 2,
        ..Default::default()
    };
    let data = TrainData::load(&bench, &config)?;
    let summary = train(&config, &data, &out.join("run"), None)?;
    for m in &summary.metrics {
        println!(
            "epoch {:>2} {:<8} det {:.3} adv {:.3}/{:.3} con {:.3} unsup {:.3} mAP {:.4}",
            m.epoch,
            m.stage.name(),
            m.losses.detection,
            m.losses.adv_backbone,
            m.losses.adv_prototype,
            m.losses.contrastive,
            m.losses.unsup,
            m.teacher_map.unwrap_or(m.map)
        );
    }
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}
