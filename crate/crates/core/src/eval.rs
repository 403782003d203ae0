//! Mean average precision at a fixed IoU threshold and query-feature export.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::detector::boxes::BBox;
use crate::detector::loss::GroundTruth;
use crate::detector::{argmax_row, images_to_tensor, Detector};
use crate::error::{Error, Result};
use crate::synthetic::Dataset;

/// One scored box of one class in one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub class: usize,
    pub score: f32,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    pub score_floor: f32,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_floor: 0.05,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    /// `None` when the class has no ground truth in the dataset.
    pub ap: Option<f64>,
    pub num_ground_truth: usize,
    pub num_detections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map: f64,
    pub per_class: Vec<ClassReport>,
    pub iou_threshold: f64,
    pub score_floor: f32,
    pub num_images: usize,
    pub config_fingerprint: String,
    pub checkpoint: Option<String>,
}

impl EvalReport {
    pub fn per_class_ap(&self) -> Vec<Option<f64>> {
        self.per_class.iter().map(|c| c.ap).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// All-point interpolated AP from detections sorted by descending score,
/// each flagged true or false positive.
pub fn average_precision(sorted_hits: &[bool], num_ground_truth: usize) -> f64 {
    if num_ground_truth == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(sorted_hits.len());
    let mut recall = Vec::with_capacity(sorted_hits.len());
    let mut tp = 0usize;
    for (i, &hit) in sorted_hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_ground_truth as f64);
    }
    // Precision envelope: best precision at any equal or higher recall.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Greedy matching of one class's detections: in descending score order each
/// detection takes the unmatched ground truth with the highest IoU, if that
/// IoU reaches the threshold. Returns hit flags in the sorted order.
fn match_class(
    detections: &[Vec<ScoredBox>],
    ground_truth: &[GroundTruth],
    class: usize,
    iou_threshold: f64,
) -> (Vec<bool>, usize) {
    let mut ranked: Vec<(f32, usize, BBox)> = detections
        .iter()
        .enumerate()
        .flat_map(|(img, dets)| {
            dets.iter()
                .filter(|d| d.class == class)
                .map(move |d| (d.score, img, d.bbox))
        })
        .collect();
    // Stable sort keeps image/query order among equal scores.
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = ground_truth.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let num_gt = ground_truth
        .iter()
        .map(|g| g.labels.iter().filter(|&&l| l == class).count())
        .sum();
    let hits = ranked
        .iter()
        .map(|(_, img, bbox)| {
            let gt = &ground_truth[*img];
            let mut best: Option<(usize, f64)> = None;
            for (j, (g, &label)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
                if label != class || used[*img][j] {
                    continue;
                }
                let iou = bbox.iou(g);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, num_gt)
}

/// Per-class AP (`None` for classes without ground truth) and the mean over
/// classes that have ground truth.
pub fn evaluate_detections(
    detections: &[Vec<ScoredBox>],
    ground_truth: &[GroundTruth],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<(Vec<Option<f64>>, f64)> {
    if detections.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} detection lists for {} images",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut aps = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        let (hits, num_gt) = match_class(detections, ground_truth, c, iou_threshold);
        aps.push((num_gt > 0).then(|| average_precision(&hits, num_gt)));
    }
    let valid: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    Ok((aps, map))
}

/// Every (query, class) pair scoring at least `score_floor`, per image.
pub fn predict_detections(detector: &Detector, dataset: &Dataset, opts: &EvalOptions) -> Result<Vec<Vec<ScoredBox>>> {
    let device = Device::Cpu;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.images.chunks(opts.batch_size.max(1)) {
        let x = images_to_tensor(chunk, DType::F32, &device)?;
        let preds = detector.forward(&x)?.predictions;
        let scores = preds.scores()?;
        let boxes = preds.box_list()?;
        for (s_img, b_img) in scores.iter().zip(&boxes) {
            let mut dets = Vec::new();
            for (s_q, b) in s_img.iter().zip(b_img) {
                for (class, &score) in s_q.iter().enumerate() {
                    if score >= opts.score_floor {
                        dets.push(ScoredBox { class, score, bbox: *b });
                    }
                }
            }
            out.push(dets);
        }
    }
    Ok(out)
}

/// mAP of `detector` on `dataset`.
pub fn evaluate_map(detector: &Detector, dataset: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
    }
    let detections = predict_detections(detector, dataset, opts)?;
    let gts: Vec<GroundTruth> = dataset.images.iter().map(GroundTruth::from).collect();
    let c = dataset.num_classes();
    let (aps, map) = evaluate_detections(&detections, &gts, c, opts.iou_threshold)?;
    let per_class = (0..c)
        .map(|k| ClassReport {
            name: dataset.categories[k].clone(),
            ap: aps[k],
            num_ground_truth: gts.iter().map(|g| g.labels.iter().filter(|&&l| l == k).count()).sum(),
            num_detections: detections.iter().map(|d| d.iter().filter(|s| s.class == k).count()).sum(),
        })
        .collect();
    Ok(EvalReport {
        map,
        per_class,
        iou_threshold: opts.iou_threshold,
        score_floor: opts.score_floor,
        num_images: dataset.len(),
        config_fingerprint: detector.config().fingerprint(),
        checkpoint: None,
    })
}

/// Writes one CSV row per query: `domain,class,score,e0..e{d-1}`, where class
/// and score come from the best-scoring class. At most `max_images` images are
/// taken from each dataset.
pub fn export_query_features(detector: &Detector, datasets: &[&Dataset], path: &Path, max_images: usize) -> Result<usize> {
    let d = detector.config().hidden_dim;
    let mut out = String::new();
    out.push_str("domain,class,score");
    for i in 0..d {
        out.push_str(&format!(",e{i}"));
    }
    out.push('\n');
    let mut rows = 0;
    for dataset in datasets {
        let subset = dataset.subset(max_images);
        for chunk in subset.images.chunks(32) {
            let x = images_to_tensor(chunk, DType::F32, &Device::Cpu)?;
            let feats = detector.backbone_forward(&x)?;
            let z = detector.encode_decode(&feats)?;
            let preds = detector.predict_heads(&z)?;
            let scores = preds.scores()?;
            let emb = z.0.to_dtype(DType::F32)?.to_vec3::<f32>()?;
            for (s_img, e_img) in scores.iter().zip(&emb) {
                for (s_q, e_q) in s_img.iter().zip(e_img) {
                    let c = argmax_row(s_q);
                    out.push_str(&format!("{},{},{:.6}", dataset.domain.name(), c, s_q[c]));
                    for v in e_q {
                        out.push_str(&format!(",{v:.6}"));
                    }
                    out.push('\n');
                    rows += 1;
                }
            }
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(boxes: &[BBox], labels: &[usize]) -> GroundTruth {
        GroundTruth {
            boxes: boxes.to_vec(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn true_then_false_and_swapped() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        let miss = BBox::new(0.1, 0.1, 0.05, 0.05);
        let gts = vec![gt(&[g], &[0])];
        let dets = vec![vec![
            ScoredBox { class: 0, score: 0.9, bbox: g },
            ScoredBox { class: 0, score: 0.8, bbox: miss },
        ]];
        let (_, map) = evaluate_detections(&dets, &gts, 1, 0.5).unwrap();
        assert_eq!(map, 1.0);
        let swapped = vec![vec![
            ScoredBox { class: 0, score: 0.8, bbox: g },
            ScoredBox { class: 0, score: 0.9, bbox: miss },
        ]];
        let (_, map) = evaluate_detections(&swapped, &gts, 1, 0.5).unwrap();
        assert_eq!(map, 0.5);
    }

    #[test]
    fn no_predictions_is_zero_and_classes_without_gt_are_skipped() {
        let gts = vec![gt(&[BBox::new(0.5, 0.5, 0.2, 0.2)], &[1])];
        let (aps, map) = evaluate_detections(&[vec![]], &gts, 3, 0.5).unwrap();
        assert_eq!(aps, vec![None, Some(0.0), None]);
        assert_eq!(map, 0.0);
    }

    #[test]
    fn each_ground_truth_used_once() {
        let g = BBox::new(0.5, 0.5, 0.2, 0.2);
        let gts = vec![gt(&[g], &[0])];
        let dets = vec![vec![
            ScoredBox { class: 0, score: 0.9, bbox: g },
            ScoredBox { class: 0, score: 0.8, bbox: g },
        ]];
        let (aps, _) = evaluate_detections(&dets, &gts, 1, 0.5).unwrap();
        assert_eq!(aps[0], Some(1.0));
    }
}
