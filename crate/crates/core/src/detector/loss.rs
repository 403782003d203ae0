//! Set-prediction loss: sigmoid focal classification over every query and
//! class, L1 and GIoU box terms over Hungarian-matched pairs.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::boxes::{giou_tensor, BBox};
use super::layers::softplus;
use super::matcher::{match_image, MatchCostWeights, MatchResult};
use super::Predictions;
use crate::error::{Error, Result};
use crate::synthetic::AnnotatedImage;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Ground truth (or pseudo-labels) for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

impl From<&AnnotatedImage> for GroundTruth {
    fn from(img: &AnnotatedImage) -> Self {
        Self {
            boxes: img.boxes.clone(),
            labels: img.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Scalar loss components, each normalized by the number of ground-truth boxes.
#[derive(Debug, Clone)]
pub struct DetectionLoss {
    pub classification: Tensor,
    pub box_l1: Tensor,
    pub box_giou: Tensor,
}

impl DetectionLoss {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = ((&self.classification * w.class)? + (&self.box_l1 * w.l1)?)?;
        Ok((t + (&self.box_giou * w.giou)?)?)
    }

    /// `(classification, box_l1, box_giou)` as plain numbers.
    pub fn values(&self) -> Result<(f64, f64, f64)> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok((v(&self.classification)?, v(&self.box_l1)?, v(&self.box_giou)?))
    }
}

/// Per-image minimum-cost assignment of queries to ground truth.
pub fn hungarian_match(
    predictions: &Predictions,
    ground_truth: &[GroundTruth],
    weights: &MatchCostWeights,
) -> Result<MatchResult> {
    let probs = predictions.scores()?;
    let boxes = predictions.box_list()?;
    if probs.len() != ground_truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} ground-truth records",
            probs.len(),
            ground_truth.len()
        )));
    }
    let per_image = probs
        .iter()
        .zip(&boxes)
        .zip(ground_truth)
        .map(|((p, b), gt)| match_image(p, b, &gt.boxes, &gt.labels, weights))
        .collect();
    Ok(MatchResult { per_image })
}

/// Elementwise sigmoid focal loss for logits `x` and {0,1} targets `t`.
pub fn sigmoid_focal(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    let ce = (softplus(logits)? - (logits * targets)?)?;
    let one_minus_t = targets.affine(-1.0, 1.0)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &one_minus_t)?)?;
    let modulator = p_t.affine(-1.0, 1.0)?.powf(FOCAL_GAMMA)?;
    let alpha_t = targets.affine(2.0 * FOCAL_ALPHA - 1.0, 1.0 - FOCAL_ALPHA)?;
    Ok(((ce * modulator)? * alpha_t)?)
}

pub fn detection_loss(
    predictions: &Predictions,
    ground_truth: &[GroundTruth],
    matches: &MatchResult,
) -> Result<DetectionLoss> {
    let (b, n, c) = predictions.class_logits.dims3()?;
    let dtype = predictions.class_logits.dtype();
    let device = predictions.class_logits.device();
    let num_gt: usize = ground_truth.iter().map(|g| g.boxes.len()).sum();
    let norm = num_gt.max(1) as f64;

    let mut target = vec![0f32; b * n * c];
    let mut rows = Vec::new();
    let mut gt_boxes = Vec::new();
    for (img, pairs) in matches.per_image.iter().enumerate() {
        for &(q, g) in pairs {
            let label = ground_truth[img].labels[g];
            if label >= c {
                return Err(Error::InvalidInput(format!("label {label} >= {c} classes")));
            }
            target[(img * n + q) * c + label] = 1.0;
            rows.push((img * n + q) as u32);
            gt_boxes.extend_from_slice(&ground_truth[img].boxes[g].to_array());
        }
    }
    let target = Tensor::from_vec(target, (b, n, c), device)?.to_dtype(dtype)?;
    let classification = (sigmoid_focal(&predictions.class_logits, &target)?.sum_all()? / norm)?;

    let zero = Tensor::zeros((), dtype, device)?;
    if rows.is_empty() {
        // Keep the box outputs in the graph so gradient stores stay uniform.
        let tie = (predictions.boxes.sum_all()? * 0.0)?;
        return Ok(DetectionLoss {
            classification,
            box_l1: (&zero + &tie)?,
            box_giou: (&zero + &tie)?,
        });
    }
    let k = rows.len();
    let idx = Tensor::from_vec(rows, k, device)?;
    let pred = predictions.boxes.reshape((b * n, 4))?.index_select(&idx, 0)?;
    let gt = Tensor::from_vec(gt_boxes, (k, 4), device)?.to_dtype(dtype)?;
    let box_l1 = ((&pred - &gt)?.abs()?.sum_all()? / norm)?;
    let box_giou = (giou_tensor(&pred, &gt)?.affine(-1.0, 1.0)?.sum_all()? / norm)?;
    Ok(DetectionLoss {
        classification,
        box_l1,
        box_giou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt_two() -> Vec<GroundTruth> {
        vec![GroundTruth {
            boxes: vec![BBox::new(0.3, 0.4, 0.2, 0.25), BBox::new(0.7, 0.6, 0.3, 0.2)],
            labels: vec![2, 0],
        }]
    }

    fn preds(logits: Vec<f64>, boxes: Vec<f64>, n: usize, c: usize) -> Predictions {
        Predictions {
            class_logits: Tensor::from_vec(logits, (1, n, c), &Device::Cpu).unwrap(),
            boxes: Tensor::from_vec(boxes, (1, n, 4), &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn exact_boxes_give_zero_box_terms() {
        let gt = gt_two();
        let mut boxes = vec![0.5; 4 * 4];
        boxes[4..8].copy_from_slice(&gt[0].boxes[1].to_array().map(|v| v as f64));
        boxes[12..16].copy_from_slice(&gt[0].boxes[0].to_array().map(|v| v as f64));
        let p = preds(vec![0.0; 4 * 3], boxes, 4, 3);
        let m = MatchResult {
            per_image: vec![vec![(1, 1), (3, 0)]],
        };
        let (cls, l1, g) = detection_loss(&p, &gt, &m).unwrap().values().unwrap();
        assert!(l1.abs() < 1e-7 && g.abs() < 1e-7, "{l1} {g}");
        assert!(cls > 0.0);
    }

    #[test]
    fn empty_gt_has_zero_box_terms() {
        let p = preds(vec![0.3; 5 * 3], vec![0.5; 5 * 4], 5, 3);
        let gt = vec![GroundTruth::default()];
        let m = hungarian_match(&p, &gt, &Default::default()).unwrap();
        assert_eq!(m.num_pairs(), 0);
        let (cls, l1, g) = detection_loss(&p, &gt, &m).unwrap().values().unwrap();
        assert_eq!((l1, g), (0.0, 0.0));
        assert!(cls > 0.0);
        let quiet = preds(vec![-30.0; 5 * 3], vec![0.5; 5 * 4], 5, 3);
        let (cls, _, _) = detection_loss(&quiet, &gt, &m).unwrap().values().unwrap();
        assert!(cls < 1e-12);
    }

    #[test]
    fn focal_matches_scalar_formula() {
        let xs = [-3.0f64, -0.2, 0.0, 1.7, 4.0];
        for &t in &[0.0f64, 1.0] {
            let x = Tensor::new(&xs, &Device::Cpu).unwrap();
            let tt = Tensor::new(&[t; 5], &Device::Cpu).unwrap();
            let got = sigmoid_focal(&x, &tt).unwrap().to_vec1::<f64>().unwrap();
            for (x, g) in xs.iter().zip(got) {
                let p = 1.0 / (1.0 + (-x).exp());
                let expect = if t == 1.0 {
                    -FOCAL_ALPHA * (1.0 - p).powi(2) * p.ln()
                } else {
                    -(1.0 - FOCAL_ALPHA) * p.powi(2) * (1.0 - p).ln()
                };
                assert!((g - expect).abs() < 1e-12, "{x} {t}: {g} vs {expect}");
            }
        }
    }

    #[test]
    fn gradient_wrt_boxes_matches_finite_differences() {
        let gt = gt_two();
        let (n, c) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..n * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let boxes: Vec<f64> = (0..n)
            .flat_map(|_| {
                [
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.3..0.7),
                    rng.random_range(0.2..0.5),
                    rng.random_range(0.2..0.5),
                ]
            })
            .collect();
        let m = MatchResult {
            per_image: vec![vec![(0, 1), (2, 0)]],
        };
        let loss_of = |logits: &Tensor, boxes: &Tensor| -> Tensor {
            let p = Predictions {
                class_logits: logits.clone(),
                boxes: boxes.clone(),
            };
            detection_loss(&p, &gt, &m)
                .unwrap()
                .total(&LossWeights::default())
                .unwrap()
        };
        let lv = Tensor::from_vec(logits.clone(), (1, n, c), &Device::Cpu).unwrap();
        let bv = Var::from_vec(boxes.clone(), (1, n, 4), &Device::Cpu).unwrap();
        let grads = loss_of(&lv, bv.as_tensor()).backward().unwrap();
        let analytic = grads.get(bv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..n * 4 {
            let eval = |delta: f64| {
                let mut b = boxes.clone();
                b[i] += delta;
                let bt = Tensor::from_vec(b, (1, n, 4), &Device::Cpu).unwrap();
                loss_of(&lv, &bt).to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-3,
                "coord {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }
}
