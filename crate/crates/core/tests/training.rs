use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use datr::cpa::PrototypeFilter;
use datr::detector::loss::GroundTruth;
use datr::detector::{images_to_tensor, DetectorConfig};
use datr::eval::{evaluate_map, export_query_features, EvalOptions};
use datr::synthetic::{build_benchmark, Dataset, FogPreset, SceneSpec};
use datr::train::{
    generate_pseudo_labels, train, Checkpoint, Stage, TrainConfig, TrainData, Trainer, CHECKPOINT_FILE, METRICS_FILE,
};
use datr::Error;

fn spec() -> SceneSpec {
    SceneSpec {
        image_size: (32, 32),
        num_objects_range: (1, 2),
        shape_classes: vec!["circle".into(), "square".into(), "triangle".into()],
        min_object_size: 8.0,
        max_object_size: 14.0,
        max_overlap_iou: 0.05,
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        detector: DetectorConfig {
            image_size: (32, 32),
            num_classes: 3,
            hidden_dim: 16,
            num_queries: 6,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_dim: 32,
            backbone_widths: [8, 16, 16, 16],
        },
        batch_size: 4,
        burn_in_epochs: 2,
        mutual_epochs: 2,
        learning_rate: 1e-3,
        mutual_learning_rate: 1e-3,
        ema_alpha: 0.9,
        pseudo_threshold: 0.1,
        ..Default::default()
    }
}

fn data(dir: &Path) -> TrainData {
    let bench = build_benchmark(&spec(), &FogPreset::Heavy.params(), 12, 6, 4, dir).unwrap();
    TrainData::load(&bench, &config()).unwrap()
}

fn tensors_equal(a: &Tensor, b: &Tensor) -> bool {
    let a = a.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    let b = b.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    a == b
}

#[test]
fn teacher_starts_as_exact_copy_and_never_gets_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let mut t = Trainer::new(config()).unwrap();
    t.run_epoch(&d.source_train, &d.target_train).unwrap();
    t.start_mutual_stage().unwrap();
    let student = t.student_params().tensors();
    let teacher = t.teacher_params().unwrap().tensors();
    assert_eq!(student.len(), teacher.len());
    for ((ns, s), (nt, tt)) in student.iter().zip(&teacher) {
        assert_eq!(ns, nt);
        assert!(tensors_equal(s, tt), "{ns}");
    }

    let src = &d.source_train.images[..4];
    let tgt = &d.target_train.images[..4];
    let pseudo: Vec<GroundTruth> = generate_pseudo_labels(&t.teacher().unwrap().detector, tgt, 0.1)
        .unwrap()
        .iter()
        .map(GroundTruth::from)
        .collect();
    let losses = t.compute_losses(src, tgt, Some(&pseudo), Stage::Mutual).unwrap();
    let grads = losses.total.backward().unwrap();
    for (name, var) in t.teacher_params().unwrap().named_vars() {
        assert!(grads.get(var.as_tensor()).is_none(), "teacher {name} received a gradient");
    }
    assert!(t.student_params().named_vars().iter().any(|(_, v)| grads.get(v.as_tensor()).is_some()));
}

#[test]
fn zero_weights_reduce_to_the_plain_objectives() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let src = &d.source_train.images[..3];
    let tgt = &d.target_train.images[..3];
    let plain = TrainConfig {
        backbone_align: false,
        cpa: false,
        das: false,
        ..config()
    };
    let base = Trainer::new(plain).unwrap().compute_losses(src, tgt, None, Stage::BurnIn).unwrap().breakdown;
    assert_eq!(base.adv_backbone, 0.0);
    assert_eq!(base.adv_prototype, 0.0);
    assert_eq!(base.contrastive, 0.0);
    assert_eq!(base.total, base.detection);

    let zeroed = TrainConfig {
        lambda_a: 0.0,
        lambda_c: 0.0,
        ..config()
    };
    let z = Trainer::new(zeroed).unwrap().compute_losses(src, tgt, None, Stage::BurnIn).unwrap().breakdown;
    assert!(z.adv_backbone > 0.0 && z.adv_prototype > 0.0);
    assert!((z.total - base.total).abs() <= 1e-5 * base.total, "{} vs {}", z.total, base.total);

    let no_unsup = TrainConfig {
        lambda_unsup: 0.0,
        ..config()
    };
    let t = Trainer::new(no_unsup).unwrap();
    let pseudo: Vec<GroundTruth> = src.iter().map(GroundTruth::from).collect();
    let m = t.compute_losses(src, tgt, Some(&pseudo), Stage::Mutual).unwrap().breakdown;
    let b = t.compute_losses(src, tgt, None, Stage::BurnIn).unwrap().breakdown;
    assert_eq!(m.total, b.total);
    assert_eq!(m.unsup, 0.0);
}

#[test]
fn identical_teacher_and_tiny_threshold_label_with_own_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let mut t = Trainer::new(config()).unwrap();
    t.start_mutual_stage().unwrap();
    let imgs = &d.target_train.images[..2];
    let from_teacher = generate_pseudo_labels(&t.teacher().unwrap().detector, imgs, 1e-6).unwrap();
    let from_student = generate_pseudo_labels(&t.student().detector, imgs, 1e-6).unwrap();
    assert_eq!(from_teacher, from_student);
    // Every query clears a near-zero threshold unless its box is degenerate.
    let n: usize = from_student.iter().map(|p| p.boxes.len()).sum();
    assert!(n > 0 && n <= 2 * 6);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(&dir.path().join("data"));
    let cfg = config();
    let straight = train(&cfg, &d, &dir.path().join("a"), None).unwrap();
    assert_eq!(straight.metrics.len(), 4);

    let half = TrainConfig {
        mutual_epochs: 0,
        burn_in_epochs: 2,
        ..cfg.clone()
    };
    let b = dir.path().join("b");
    train(&half, &d, &b, None).unwrap();
    // Resume past the stage boundary from the burn-in checkpoint.
    let resumed = train(&cfg, &d, &b, Some(&b.join(CHECKPOINT_FILE))).unwrap();
    assert_eq!(resumed.metrics.len(), 2);
    let a_log = fs::read_to_string(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let b_log = fs::read_to_string(b.join(METRICS_FILE)).unwrap();
    assert_eq!(a_log, b_log);
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(&dir.path().join("data"));
    let cfg = TrainConfig {
        burn_in_epochs: 0,
        mutual_epochs: 0,
        ..config()
    };
    let out = dir.path().join("run");
    let s = train(&cfg, &d, &out, None).unwrap();
    assert!(s.metrics.is_empty());
    let ckpt = Checkpoint::read(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.epoch, 0);
    assert!(ckpt.group("teacher").is_empty());
    assert!(!out.join(METRICS_FILE).exists() || fs::read_to_string(out.join(METRICS_FILE)).unwrap().is_empty());
}

#[test]
fn resume_refuses_a_different_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.safetensors");
    Trainer::new(config()).unwrap().save_checkpoint(&path).unwrap();
    let mut other = config();
    other.detector.hidden_dim = 24;
    match Trainer::resume(other, &path) {
        Err(Error::Checkpoint { message, .. }) => assert!(message.contains("fingerprint")),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint accepted"),
    }
}

#[test]
fn filter_variants_train() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    for filter in [PrototypeFilter::Confidence { threshold: 0.05 }, PrototypeFilter::Matching] {
        let cfg = TrainConfig {
            prototype_filter: filter,
            burn_in_epochs: 1,
            mutual_epochs: 1,
            ..config()
        };
        let mut t = Trainer::new(cfg).unwrap();
        let b = t.run_epoch(&d.source_train, &d.target_train).unwrap();
        assert!(b.total.is_finite());
        let b = t.run_epoch(&d.source_train, &d.target_train).unwrap();
        assert!(b.total.is_finite());
    }
}

#[test]
fn evaluation_and_export_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = data(dir.path());
    let t = Trainer::new(config()).unwrap();
    let det = &t.student().detector;
    let a = evaluate_map(det, &d.target_val, &EvalOptions::default()).unwrap();
    let b = evaluate_map(det, &d.target_val, &EvalOptions::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let empty = Dataset {
        images: Vec::new(),
        ..d.target_val.clone()
    };
    assert!(evaluate_map(det, &empty, &EvalOptions::default()).is_err());

    let csv = dir.path().join("f.csv");
    let rows = export_query_features(det, &[&d.target_val], &csv, 2).unwrap();
    assert_eq!(rows, 2 * 6);
    let x = images_to_tensor(&d.target_val.images[..2], DType::F32, &Device::Cpu).unwrap();
    let z = det.encode_decode(&det.backbone_forward(&x).unwrap()).unwrap();
    let emb = z.0.flatten_to(1).unwrap().to_vec2::<f32>().unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    for (line, want) in text.lines().skip(1).zip(&emb) {
        let got: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - *w as f64).abs() <= 5e-7, "{g} vs {w}");
        }
    }
}
