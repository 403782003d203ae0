//! EMA teacher updates and confidence-filtered pseudo-labels.

use datr::detector::DetectorConfig;
use datr::params::{ema_update, ModelParams};
use datr::synthetic::{generate_scene, SceneSpec};
use datr::train::{generate_pseudo_labels, DatrModel};
use candle_core::DType;

fn main() -> datr::Result<()> {
    let config = DetectorConfig::default();
    let student_params = ModelParams::new();
    let student = DatrModel::build(&config, &student_params, 0, DType::F32)?;
    let teacher_params = ModelParams::new();
    let teacher = DatrModel::build(&config, &teacher_params, 1, DType::F32)?;

    let gap = |t: &ModelParams| -> datr::Result<f64> {
        let mut sq = 0.0;
        for ((_, a), (_, b)) in t.tensors().iter().zip(student_params.tensors()) {
            sq += (a - b)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        }
        Ok(sq.sqrt())
    };
    let g0 = gap(&teacher_params)?;
    for i in 1..=300 {
        ema_update(&teacher_params, &student_params, 0.99)?;
        if i % 100 == 0 {
            println!("step {i}: distance ratio {:.6} (0.99^{i} = {:.6})", gap(&teacher_params)? / g0, 0.99f64.powi(i));
        }
    }

    let images: Vec<_> = (0..2).map(|s| generate_scene(s, &SceneSpec::default())).collect::<datr::Result<_>>()?;
    for threshold in [0.005, 0.01, 0.02] {
        let labels = generate_pseudo_labels(&teacher.detector, &images, threshold)?;
        let n: usize = labels.iter().map(|l| l.boxes.len()).sum();
        println!("threshold {threshold}: {n} pseudo-labels from an untrained teacher");
    }
    let _ = student;
    Ok(())
}
