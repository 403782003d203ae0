//! mAP@0.5 on hand-made detections, then on a freshly initialised detector.

use datr::detector::boxes::BBox;
use datr::detector::loss::GroundTruth;
use datr::eval::{average_precision, evaluate_detections, evaluate_map, EvalOptions, ScoredBox};
use datr::synthetic::{build_benchmark, Dataset, FogPreset, SceneSpec};
use datr::train::{DatrModel, TrainConfig};
use candle_core::DType;

fn main() -> datr::Result<()> {
    println!("hit then miss: AP {}", average_precision(&[true, false], 1));
    println!("miss then hit: AP {}", average_precision(&[false, true], 1));

    let g = BBox::new(0.5, 0.5, 0.3, 0.3);
    let gts = vec![GroundTruth { boxes: vec![g], labels: vec![1] }];
    let dets = vec![vec![
        ScoredBox { class: 1, score: 0.7, bbox: BBox::new(0.52, 0.5, 0.3, 0.3) },
        ScoredBox { class: 0, score: 0.9, bbox: g },
    ]];
    let (aps, map) = evaluate_detections(&dets, &gts, 2, 0.5)?;
    println!("per-class {aps:?}, mAP {map}");

    let dir = std::env::temp_dir().join("datr_eval_example");
    let bench = build_benchmark(&SceneSpec::default(), &FogPreset::Heavy.params(), 1, 16, 0, &dir)?;
    let val = Dataset::load(&bench.target_val)?;
    let config = TrainConfig::default();
    let model = DatrModel::build(&config.detector, &datr::params::ModelParams::new(), 0, DType::F32)?;
    let report = evaluate_map(&model.detector, &val, &EvalOptions::default())?;
    println!("{}", report.to_json());
    Ok(())
}
