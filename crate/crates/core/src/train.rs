//! Two-stage training: a burn-in stage on labelled source data plus alignment
//! losses, then mean-teacher mutual learning with pseudo-labels on the target
//! domain.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cpa::{
    self, backbone_adversarial_loss, filter_queries_by_confidence, filter_queries_by_matching,
    prototype_adversarial_loss, prototypes_from, BackboneDiscriminator, ClassPrototypes, DomainLabel,
    PrototypeDiscriminator, PrototypeFilter,
};
use crate::das::{contrastive_loss, DatasetPrototypes};
use crate::detector::boxes::BBox;
use crate::detector::loss::{detection_loss, hungarian_match, GroundTruth, LossWeights};
use crate::detector::matcher::{MatchCostWeights, MatchResult};
use crate::detector::{argmax_row, images_to_tensor, Detector, DetectorConfig, DetectorOutput, Predictions};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, EvalOptions};
use crate::params::{ema_update, read_tensor_file, write_tensor_file, ModelParams};
use crate::synthetic::{epoch_order, AnnotatedImage, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub detector: DetectorConfig,
    /// Weight of the adversarial terms (prototype and backbone).
    pub lambda_a: f64,
    /// Weight of the contrastive memory term.
    pub lambda_c: f64,
    /// Weight of the pseudo-label detection loss in the mutual stage.
    pub lambda_unsup: f64,
    pub ema_alpha: f64,
    pub pseudo_threshold: f64,
    pub burn_in_epochs: usize,
    pub mutual_epochs: usize,
    /// Images per domain per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the burn-in stage after which the learning rate drops.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    /// Learning rate for the mutual stage.
    pub mutual_learning_rate: f64,
    pub weight_decay: f64,
    /// Maximum global gradient norm; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub backbone_align: bool,
    pub cpa: bool,
    pub das: bool,
    pub prototype_filter: PrototypeFilter,
    /// Divides the raw dot products of the contrastive loss.
    pub contrastive_temperature: f64,
    /// Flip and colour jitter for student inputs.
    pub augment: bool,
    /// Supervise intermediate decoder layers as well.
    pub aux_loss: bool,
    pub loss_weights: LossWeights,
    pub match_weights: MatchCostWeights,
    pub max_train_images: Option<usize>,
    pub max_eval_images: Option<usize>,
    pub eval_batch_size: usize,
    /// Score the teacher as well as the student after mutual-stage epochs.
    pub eval_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            lambda_a: 0.1,
            lambda_c: 0.1,
            lambda_unsup: 1.0,
            ema_alpha: 0.999,
            pseudo_threshold: 0.3,
            burn_in_epochs: 18,
            mutual_epochs: 6,
            batch_size: 8,
            learning_rate: 1e-3,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            mutual_learning_rate: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.1,
            seed: 0,
            backbone_align: true,
            cpa: true,
            das: true,
            prototype_filter: PrototypeFilter::None,
            contrastive_temperature: 1.0,
            augment: true,
            aux_loss: true,
            loss_weights: LossWeights::default(),
            match_weights: MatchCostWeights::default(),
            max_train_images: None,
            max_eval_images: None,
            eval_batch_size: 32,
            eval_teacher: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        if !(self.pseudo_threshold > 0.0 && self.pseudo_threshold < 1.0) {
            return bad(format!("pseudo_threshold {} outside (0, 1)", self.pseudo_threshold));
        }
        for (name, v) in [
            ("lambda_a", self.lambda_a),
            ("lambda_c", self.lambda_c),
            ("lambda_unsup", self.lambda_unsup),
            ("learning_rate", self.learning_rate),
            ("mutual_learning_rate", self.mutual_learning_rate),
            ("weight_decay", self.weight_decay),
            ("grad_clip", self.grad_clip),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.contrastive_temperature <= 0.0 {
            return bad("contrastive_temperature must be positive".into());
        }
        if let PrototypeFilter::Confidence { threshold } = self.prototype_filter {
            if !(threshold > 0.0 && threshold < 1.0) {
                return bad(format!("prototype filter threshold {threshold} outside (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        config.validate()?;
        Ok(config)
    }

    fn needs_target_forward(&self, stage: Stage) -> bool {
        self.backbone_align || self.cpa || self.das || stage == Stage::Mutual
    }

    fn needs_prototypes(&self) -> bool {
        self.cpa || self.das
    }

    /// Learning rate for a 1-based epoch.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch > self.burn_in_epochs {
            return self.mutual_learning_rate;
        }
        let decay_after = (self.lr_decay_at * self.burn_in_epochs as f64).floor() as usize;
        if epoch > decay_after {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn stage_of(&self, epoch: usize) -> Stage {
        match epoch {
            0 => Stage::Init,
            e if e <= self.burn_in_epochs => Stage::BurnIn,
            _ => Stage::Mutual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    BurnIn,
    Mutual,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::BurnIn => "burn_in",
            Stage::Mutual => "mutual",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [Stage::Init, Stage::BurnIn, Stage::Mutual].into_iter().find(|st| st.name() == s)
    }
}

/// Scalar value of every loss term; disabled terms stay at 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub det_class: f64,
    pub det_l1: f64,
    pub det_giou: f64,
    pub detection: f64,
    pub unsup: f64,
    pub adv_prototype: f64,
    pub adv_backbone: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Pseudo-labels per target image.
    pub pseudo_labels: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.det_class += o.det_class * s;
        self.det_l1 += o.det_l1 * s;
        self.det_giou += o.det_giou * s;
        self.detection += o.detection * s;
        self.unsup += o.unsup * s;
        self.adv_prototype += o.adv_prototype * s;
        self.adv_backbone += o.adv_backbone * s;
        self.contrastive += o.contrastive * s;
        self.total += o.total * s;
        self.pseudo_labels += o.pseudo_labels * s;
    }
}

/// Detector plus the two discriminators, all drawing weights from one store.
#[derive(Debug, Clone)]
pub struct DatrModel {
    pub detector: Detector,
    pub prototype_disc: PrototypeDiscriminator,
    pub backbone_disc: BackboneDiscriminator,
}

impl DatrModel {
    /// Builds the model over `params`, creating any missing tensor from `seed`.
    pub fn build(config: &DetectorConfig, params: &ModelParams, seed: u64, dtype: DType) -> Result<Self> {
        let vb = params.var_builder(seed, dtype);
        let w = config.backbone_widths;
        Ok(Self {
            detector: Detector::new(config, vb.pp("detector"))?,
            prototype_disc: PrototypeDiscriminator::new(config.hidden_dim, vb.pp("prototype_disc"))?,
            backbone_disc: BackboneDiscriminator::new(&[w[1], w[3]], vb.pp("backbone_disc"))?,
        })
    }
}

/// Adam with decoupled weight decay and global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter that has a gradient. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, params: &ModelParams, grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let vars = params.named_vars();
        let mut sq = 0.0;
        for (_, var) in &vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && norm > clip { clip / (norm + 1e-6) } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var) in &vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }

    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<_> = self.m.iter().map(|(k, t)| (format!("adam_m.{k}"), t.clone())).collect();
        out.extend(self.v.iter().map(|(k, t)| (format!("adam_v.{k}"), t.clone())));
        out
    }

    fn load_state(&mut self, tensors: &HashMap<String, Tensor>, dtype: DType) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam_m.") {
                self.m.insert(name.to_string(), t.to_dtype(dtype)?);
            } else if let Some(name) = k.strip_prefix("adam_v.") {
                self.v.insert(name.to_string(), t.to_dtype(dtype)?);
            }
        }
        Ok(())
    }
}

/// Confident teacher detections, kept when the best class score reaches
/// `threshold`. Boxes are clipped to the image.
pub fn pseudo_labels_from(predictions: &Predictions, threshold: f64, domain: DomainLabel, images: &[AnnotatedImage]) -> Result<Vec<AnnotatedImage>> {
    let scores = predictions.scores()?;
    let boxes = predictions.box_list()?;
    let mut out = Vec::with_capacity(images.len());
    for ((img, s_img), b_img) in images.iter().zip(&scores).zip(&boxes) {
        let mut labelled = AnnotatedImage {
            pixels: img.pixels.clone(),
            boxes: Vec::new(),
            labels: Vec::new(),
            scores: Some(Vec::new()),
            domain,
        };
        for (s, b) in s_img.iter().zip(b_img) {
            let c = argmax_row(s);
            if (s[c] as f64) < threshold {
                continue;
            }
            let [x0, y0, x1, y1] = b.to_xyxy();
            let clipped = BBox::from_xyxy(x0.max(0.0), y0.max(0.0), x1.min(1.0), y1.min(1.0));
            if !(clipped.w > 1e-4 && clipped.h > 1e-4) {
                continue;
            }
            labelled.boxes.push(clipped);
            labelled.labels.push(c);
            labelled.scores.as_mut().unwrap().push(s[c]);
        }
        out.push(labelled);
    }
    Ok(out)
}

/// Runs the teacher on clean target images and keeps detections whose best
/// class score reaches `threshold`. No gradient is recorded for the teacher.
pub fn generate_pseudo_labels(teacher: &Detector, images: &[AnnotatedImage], threshold: f64) -> Result<Vec<AnnotatedImage>> {
    pseudo_labels_with_dtype(teacher, images, threshold, DType::F32)
}

fn pseudo_labels_with_dtype(teacher: &Detector, images: &[AnnotatedImage], threshold: f64, dtype: DType) -> Result<Vec<AnnotatedImage>> {
    let x = images_to_tensor(images, dtype, &Device::Cpu)?;
    let preds = teacher.forward(&x)?.predictions.detach();
    pseudo_labels_from(&preds, threshold, DomainLabel::Target, images)
}

/// Horizontal flip with probability 1/2, then brightness and contrast jitter.
pub fn augment(img: &AnnotatedImage, rng: &mut ChaCha8Rng) -> AnnotatedImage {
    let mut out = img.clone();
    if rng.random_bool(0.5) {
        let (h, w) = (img.pixels.height, img.pixels.width);
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + (w - 1 - x)) * 3;
                let dst = (y * w + x) * 3;
                out.pixels.data[dst..dst + 3].copy_from_slice(&img.pixels.data[src..src + 3]);
            }
        }
        out.boxes = img.boxes.iter().map(BBox::flip_horizontal).collect();
    }
    let brightness: f32 = rng.random_range(-0.1..0.1);
    let contrast: f32 = rng.random_range(0.8..1.2);
    for v in &mut out.pixels.data {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
    out
}

fn mix(parts: &[u64]) -> u64 {
    // splitmix64 folded over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn split_output(out: &DetectorOutput, start: usize, len: usize) -> Result<DetectorOutput> {
    let n = |t: &Tensor| t.narrow(0, start, len);
    let p = |p: &Predictions| -> Result<Predictions> {
        Ok(Predictions {
            class_logits: n(&p.class_logits)?,
            boxes: n(&p.boxes)?,
        })
    };
    Ok(DetectorOutput {
        features: [n(&out.features[0])?, n(&out.features[1])?],
        queries: crate::detector::QueryEmbeddings(n(&out.queries.0)?, n(&out.queries.1)?),
        predictions: p(&out.predictions)?,
        aux_predictions: out.aux_predictions.iter().map(p).collect::<Result<_>>()?,
        proposals: p(&out.proposals)?,
    })
}

/// Outcome of one forward pass through the combined objective.
pub struct StepLosses {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
    /// Batch prototypes (detached) to fold into the memory after the update.
    pub prototypes: Option<(ClassPrototypes, ClassPrototypes)>,
}

/// Student, optional teacher, prototype memory and optimizer state.
pub struct Trainer {
    pub config: TrainConfig,
    dtype: DType,
    student_params: ModelParams,
    student: DatrModel,
    teacher: Option<(ModelParams, DatrModel)>,
    memory: DatasetPrototypes,
    adam: Adam,
    /// Completed epochs.
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_dtype(config, DType::F32)
    }

    pub fn with_dtype(config: TrainConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::new();
        let student = DatrModel::build(&config.detector, &params, config.seed, dtype)?;
        let memory = DatasetPrototypes::new(config.detector.num_classes, config.detector.hidden_dim);
        Ok(Self {
            adam: Adam::new(config.weight_decay),
            config,
            dtype,
            student_params: params,
            student,
            teacher: None,
            memory,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn stage(&self) -> Stage {
        self.config.stage_of(self.epoch)
    }

    pub fn student(&self) -> &DatrModel {
        &self.student
    }

    pub fn student_params(&self) -> &ModelParams {
        &self.student_params
    }

    pub fn teacher(&self) -> Option<&DatrModel> {
        self.teacher.as_ref().map(|(_, m)| m)
    }

    pub fn teacher_params(&self) -> Option<&ModelParams> {
        self.teacher.as_ref().map(|(p, _)| p)
    }

    pub fn memory(&self) -> &DatasetPrototypes {
        &self.memory
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// The model to report at the end of training: the teacher once one exists.
    pub fn final_model(&self) -> &DatrModel {
        self.teacher().unwrap_or(&self.student)
    }

    /// Clones the student into a fresh teacher.
    pub fn start_mutual_stage(&mut self) -> Result<()> {
        let params = self.student_params.deep_clone()?;
        let model = DatrModel::build(&self.config.detector, &params, self.config.seed, self.dtype)?;
        self.teacher = Some((params, model));
        Ok(())
    }

    fn prototypes_for(
        &self,
        out: &DetectorOutput,
        domain: DomainLabel,
        gt: Option<(&MatchResult, &[GroundTruth])>,
    ) -> Result<ClassPrototypes> {
        let c = self.config.detector.num_classes;
        let z = &out.queries.0;
        let (rows, classes) = match self.config.prototype_filter {
            PrototypeFilter::None => (z.clone(), cpa::all_queries(&out.predictions)?),
            PrototypeFilter::Confidence { threshold } => filter_queries_by_confidence(z, &out.predictions, threshold)?,
            PrototypeFilter::Matching => match gt {
                Some((m, g)) => filter_queries_by_matching(z, m, g)?,
                None => filter_queries_by_confidence(z, &out.predictions, self.config.pseudo_threshold)?,
            },
        };
        prototypes_from(&rows, &classes, c, domain)
    }

    fn supervised(&self, out: &DetectorOutput, gt: &[GroundTruth]) -> Result<(Tensor, MatchResult, (f64, f64, f64))> {
        let w = &self.config.loss_weights;
        let m = hungarian_match(&out.predictions, gt, &self.config.match_weights)?;
        let main = detection_loss(&out.predictions, gt, &m)?;
        let parts = main.values()?;
        let mut total = main.total(w)?;
        if self.config.aux_loss {
            for aux in out.aux_predictions.iter().chain([&out.proposals]) {
                let am = hungarian_match(aux, gt, &self.config.match_weights)?;
                total = (total + detection_loss(aux, gt, &am)?.total(w)?)?;
            }
        }
        Ok((total, m, parts))
    }

    /// Builds the full objective for one step without touching any state.
    /// `pseudo` carries target pseudo-labels in the mutual stage.
    pub fn compute_losses(
        &self,
        src: &[AnnotatedImage],
        tgt: &[AnnotatedImage],
        pseudo: Option<&[GroundTruth]>,
        stage: Stage,
    ) -> Result<StepLosses> {
        let cfg = &self.config;
        let use_target = cfg.needs_target_forward(stage) && !tgt.is_empty();
        let mut images: Vec<AnnotatedImage> = src.to_vec();
        if use_target {
            images.extend_from_slice(tgt);
        }
        let x = images_to_tensor(&images, self.dtype, &Device::Cpu)?;
        let out = self.student.detector.forward(&x)?;
        let out_src = split_output(&out, 0, src.len())?;
        let gt_src: Vec<GroundTruth> = src.iter().map(GroundTruth::from).collect();
        let (det, m_src, (c, l1, g)) = self.supervised(&out_src, &gt_src)?;
        let mut b = LossBreakdown {
            det_class: c,
            det_l1: l1,
            det_giou: g,
            detection: scalar(&det)?,
            ..Default::default()
        };
        let mut total = det;
        let mut prototypes = None;
        if use_target {
            let out_tgt = split_output(&out, src.len(), tgt.len())?;
            if stage == Stage::Mutual && cfg.lambda_unsup > 0.0 {
                if let Some(pl) = pseudo {
                    let (unsup, _, _) = self.supervised(&out_tgt, pl)?;
                    b.unsup = scalar(&unsup)?;
                    b.pseudo_labels = pl.iter().map(|p| p.boxes.len()).sum::<usize>() as f64 / pl.len().max(1) as f64;
                    total = (total + (unsup * cfg.lambda_unsup)?)?;
                }
            }
            if cfg.backbone_align {
                let adv = backbone_adversarial_loss(&self.student.backbone_disc, &out_src.features, &out_tgt.features)?;
                b.adv_backbone = scalar(&adv)?;
                total = (total + (adv * cfg.lambda_a)?)?;
            }
            if cfg.needs_prototypes() {
                let p_src = self.prototypes_for(&out_src, DomainLabel::Source, Some((&m_src, &gt_src)))?;
                let p_tgt = self.prototypes_for(&out_tgt, DomainLabel::Target, None)?;
                if cfg.cpa {
                    let adv = prototype_adversarial_loss(&self.student.prototype_disc, &p_src, &p_tgt)?;
                    b.adv_prototype = scalar(&adv)?;
                    total = (total + (adv * cfg.lambda_a)?)?;
                }
                if cfg.das && !self.memory.is_empty() {
                    let con = contrastive_loss(&p_src, &p_tgt, &self.memory, cfg.contrastive_temperature)?;
                    b.contrastive = scalar(&con)?;
                    total = (total + (con * cfg.lambda_c)?)?;
                }
                let detach = |p: ClassPrototypes| ClassPrototypes {
                    values: p.values.detach(),
                    ..p
                };
                prototypes = Some((detach(p_src), detach(p_tgt)));
            }
        }
        b.total = scalar(&total)?;
        Ok(StepLosses {
            total,
            breakdown: b,
            prototypes,
        })
    }

    fn apply(&mut self, losses: StepLosses, lr: f64, epoch: usize, step: usize) -> Result<LossBreakdown> {
        if !losses.breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                step,
                detail: format!("{:?}", losses.breakdown),
            });
        }
        let grads = losses.total.backward()?;
        self.adam.step(&self.student_params, &grads, lr, self.config.grad_clip)?;
        if self.config.das {
            if let Some((s, t)) = &losses.prototypes {
                self.memory.update(s)?;
                self.memory.update(t)?;
            }
        }
        Ok(losses.breakdown)
    }

    /// Supervised source loss plus alignment terms, one optimizer step, then
    /// the memory update.
    pub fn burn_in_step(&mut self, src: &[AnnotatedImage], tgt: &[AnnotatedImage], lr: f64) -> Result<LossBreakdown> {
        let losses = self.compute_losses(src, tgt, None, Stage::BurnIn)?;
        let epoch = self.epoch + 1;
        self.apply(losses, lr, epoch, 0)
    }

    /// Pseudo-labels from the teacher on `tgt_clean`, the full objective on
    /// the student (with `tgt_student`, the augmented view), one optimizer
    /// step, the memory update and finally the teacher EMA update.
    pub fn mutual_learning_step(
        &mut self,
        src: &[AnnotatedImage],
        tgt_clean: &[AnnotatedImage],
        rng: &mut ChaCha8Rng,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let teacher = &self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("mutual learning step without a teacher".into()))?
            .1;
        let labelled = pseudo_labels_with_dtype(&teacher.detector, tgt_clean, self.config.pseudo_threshold, self.dtype)?;
        let student_view: Vec<AnnotatedImage> = if self.config.augment {
            labelled.iter().map(|im| augment(im, rng)).collect()
        } else {
            labelled
        };
        let pseudo: Vec<GroundTruth> = student_view.iter().map(GroundTruth::from).collect();
        let losses = self.compute_losses(src, &student_view, Some(&pseudo), Stage::Mutual)?;
        let epoch = self.epoch + 1;
        let b = self.apply(losses, lr, epoch, 0)?;
        let (tp, _) = self.teacher.as_ref().unwrap();
        ema_update(tp, &self.student_params, self.config.ema_alpha)?;
        Ok(b)
    }

    /// One pass over the source training set, pairing each source batch with
    /// an equally sized target batch.
    pub fn run_epoch(&mut self, source: &Dataset, target: &Dataset) -> Result<LossBreakdown> {
        let epoch = self.epoch + 1;
        let stage = self.config.stage_of(epoch);
        if stage == Stage::Mutual && self.teacher.is_none() {
            self.start_mutual_stage()?;
        }
        let lr = self.config.learning_rate_at(epoch);
        let seed = self.config.seed;
        let src_order = epoch_order(source.len(), Some(mix(&[seed, epoch as u64, 0])));
        let tgt_order = epoch_order(target.len(), Some(mix(&[seed, epoch as u64, 1])));
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, epoch as u64, 2]));
        let bs = self.config.batch_size;
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for (step, chunk) in src_order.chunks(bs).enumerate() {
            let mut src: Vec<AnnotatedImage> = chunk.iter().map(|&i| source.images[i].clone()).collect();
            let tgt: Vec<AnnotatedImage> = (0..chunk.len())
                .map(|k| target.images[tgt_order[(step * bs + k) % tgt_order.len()]].clone())
                .collect();
            if self.config.augment {
                src = src.iter().map(|im| augment(im, &mut rng)).collect();
            }
            let b = match stage {
                Stage::Mutual => self.mutual_learning_step(&src, &tgt, &mut rng, lr),
                _ => {
                    let tgt: Vec<AnnotatedImage> = if self.config.augment {
                        tgt.iter().map(|im| augment(im, &mut rng)).collect()
                    } else {
                        tgt
                    };
                    self.burn_in_step(&src, &tgt, lr)
                }
            }
            .map_err(|e| match e {
                Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss { epoch, step, detail },
                other => other,
            })?;
            sum.add_scaled(&b, 1.0);
            steps += 1;
        }
        self.epoch = epoch;
        let mut mean = LossBreakdown::default();
        mean.add_scaled(&sum, 1.0 / steps.max(1) as f64);
        Ok(mean)
    }

    /// Student, teacher and optimizer state in one file, memory alongside.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .student_params
            .tensors()
            .into_iter()
            .map(|(k, t)| (format!("student.{k}"), t))
            .collect();
        if let Some((tp, _)) = &self.teacher {
            tensors.extend(tp.tensors().into_iter().map(|(k, t)| (format!("teacher.{k}"), t)));
        }
        tensors.extend(self.adam.state_tensors());
        let mut meta = BTreeMap::new();
        meta.insert("fingerprint".to_string(), self.config.detector.fingerprint());
        meta.insert("detector".to_string(), serde_json::to_string(&self.config.detector).expect("config serializes"));
        meta.insert("epoch".to_string(), self.epoch.to_string());
        meta.insert("stage".to_string(), self.stage().name().to_string());
        meta.insert("adam_step".to_string(), self.adam.step.to_string());
        write_tensor_file(path, &tensors, meta)?;
        self.memory.persist(&memory_path(path))
    }

    /// Restores a checkpoint written by [`Trainer::save_checkpoint`] into a
    /// trainer for `config`. The detector fingerprint must match.
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        let ckpt = Checkpoint::read(path)?;
        let expected = trainer.config.detector.fingerprint();
        if ckpt.fingerprint != expected {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("fingerprint {} does not match config {expected}", ckpt.fingerprint),
            });
        }
        trainer.student_params.load_tensors(&ckpt.group("student"), "student")?;
        let teacher = ckpt.group("teacher");
        if !teacher.is_empty() {
            let params = trainer.student_params.deep_clone()?;
            params.load_tensors(&teacher, "teacher")?;
            let model = DatrModel::build(&trainer.config.detector, &params, trainer.config.seed, trainer.dtype)?;
            trainer.teacher = Some((params, model));
        }
        trainer.adam.load_state(&ckpt.tensors, trainer.dtype)?;
        trainer.adam.step = ckpt.adam_step;
        trainer.epoch = ckpt.epoch;
        trainer.memory = DatasetPrototypes::restore(&memory_path(path))?;
        Ok(trainer)
    }
}

/// `<checkpoint>.memory` next to a checkpoint file.
pub fn memory_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".memory");
    PathBuf::from(s)
}

/// Parsed checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub detector: DetectorConfig,
    pub epoch: usize,
    pub stage: Stage,
    pub adam_step: u64,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let (tensors, meta) = read_tensor_file(path, &Device::Cpu)?;
        let bad = |m: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            message: m.to_string(),
        };
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(&format!("missing metadata field {k}")));
        Ok(Self {
            fingerprint: field("fingerprint")?.clone(),
            detector: serde_json::from_str(field("detector")?).map_err(|_| bad("unreadable detector config"))?,
            epoch: field("epoch")?.parse().map_err(|_| bad("bad epoch"))?,
            stage: Stage::parse(field("stage")?).ok_or_else(|| bad("bad stage"))?,
            adam_step: field("adam_step")?.parse().map_err(|_| bad("bad adam_step"))?,
            tensors,
        })
    }

    /// Tensors under `<prefix>.`, with the prefix removed.
    pub fn group(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(&p).map(|n| (n.to_string(), t.clone())))
            .collect()
    }

    /// Rebuilds a detector from the teacher weights when present, the student otherwise.
    pub fn load_model(&self, prefer_teacher: bool) -> Result<(DatrModel, &'static str)> {
        let teacher = self.group("teacher");
        let (group, which) = if prefer_teacher && !teacher.is_empty() {
            (teacher, "teacher")
        } else {
            (self.group("student"), "student")
        };
        let params = ModelParams::new();
        let model = DatrModel::build(&self.detector, &params, 0, DType::F32)?;
        params.load_tensors(&group, which)?;
        Ok((model, which))
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub learning_rate: f64,
    pub losses: LossBreakdown,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub teacher_per_class_ap: Option<Vec<Option<f64>>>,
    pub teacher_map: Option<f64>,
}

/// Training data, already decoded.
pub struct TrainData {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_val: Dataset,
}

impl TrainData {
    pub fn load(bench: &crate::synthetic::Benchmark, config: &TrainConfig) -> Result<Self> {
        let cap = |d: Dataset, n: Option<usize>| match n {
            Some(n) => d.subset(n),
            None => d,
        };
        Ok(Self {
            source_train: cap(Dataset::load(&bench.source_train)?, config.max_train_images),
            target_train: cap(Dataset::load(&bench.target_train)?, config.max_train_images),
            target_val: cap(Dataset::load(&bench.target_val)?, config.max_eval_images),
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
    pub burn_in_checkpoint: Option<PathBuf>,
    /// mAP of the final model (teacher if one exists) on target validation data.
    pub final_map: f64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const BURN_IN_CHECKPOINT_FILE: &str = "burn_in.safetensors";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Keeps only the log lines for epochs up to `epoch`.
fn truncate_log(path: &Path, epoch: usize) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else { return Ok(()) };
    let kept: String = text
        .lines()
        .filter(|l| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v.get("epoch").and_then(|e| e.as_u64()))
                .is_some_and(|e| e as usize <= epoch)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Trains for the configured number of epochs, writing into `out_dir`:
/// `checkpoint.safetensors` (+ `.memory`) every epoch, `burn_in.safetensors`
/// at the stage boundary, `metrics.jsonl` (one object per epoch) and
/// `timing.jsonl` (wall-clock seconds per epoch).
pub fn train(config: &TrainConfig, data: &TrainData, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.clone(), p)?,
        None => Trainer::new(config.clone())?,
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let timing_path = out_dir.join(TIMING_FILE);
    for p in [&metrics_path, &timing_path] {
        if resume.is_some() {
            truncate_log(p, trainer.epoch())?;
        } else if p.exists() {
            fs::remove_file(p).map_err(|e| Error::io(p, e))?;
        }
    }
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let burn_in_ckpt = out_dir.join(BURN_IN_CHECKPOINT_FILE);
    if trainer.epoch() == 0 {
        trainer.save_checkpoint(&ckpt)?;
    }
    let eval_opts = EvalOptions {
        batch_size: config.eval_batch_size,
        ..Default::default()
    };
    let total_epochs = config.burn_in_epochs + config.mutual_epochs;
    let mut metrics = Vec::new();
    let mut final_map = None;
    while trainer.epoch() < total_epochs {
        let started = Instant::now();
        let losses = trainer.run_epoch(&data.source_train, &data.target_train)?;
        let epoch = trainer.epoch();
        let stage = trainer.stage();
        let report = evaluate_map(&trainer.student().detector, &data.target_val, &eval_opts)?;
        let (teacher_ap, teacher_map) = match trainer.teacher() {
            Some(t) if config.eval_teacher => {
                let r = evaluate_map(&t.detector, &data.target_val, &eval_opts)?;
                (Some(r.per_class_ap()), Some(r.map))
            }
            _ => (None, None),
        };
        final_map = Some(teacher_map.unwrap_or(report.map));
        let m = EpochMetrics {
            epoch,
            stage,
            learning_rate: config.learning_rate_at(epoch),
            losses,
            per_class_ap: report.per_class_ap(),
            map: report.map,
            teacher_per_class_ap: teacher_ap,
            teacher_map,
        };
        trainer.save_checkpoint(&ckpt)?;
        if epoch == config.burn_in_epochs {
            trainer.save_checkpoint(&burn_in_ckpt)?;
        }
        append_line(&metrics_path, &serde_json::to_string(&m).expect("metrics serialize"))?;
        append_line(
            &timing_path,
            &serde_json::json!({"epoch": epoch, "seconds": started.elapsed().as_secs_f64()}).to_string(),
        )?;
        log::info!(
            "epoch {epoch} ({}) loss {:.4} det {:.4} mAP {:.4}{}",
            stage.name(),
            losses.total,
            losses.detection,
            report.map,
            teacher_map.map(|t| format!(" teacher mAP {t:.4}")).unwrap_or_default()
        );
        metrics.push(m);
    }
    let final_map = match final_map {
        Some(m) => m,
        None => evaluate_map(&trainer.final_model().detector, &data.target_val, &eval_opts)?.map,
    };
    Ok(TrainSummary {
        metrics,
        checkpoint: ckpt,
        burn_in_checkpoint: burn_in_ckpt.exists().then_some(burn_in_ckpt),
        final_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_scene, SceneSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            detector: DetectorConfig {
                image_size: (32, 32),
                num_classes: 2,
                hidden_dim: 16,
                num_queries: 6,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 2,
                ffn_dim: 32,
                backbone_widths: [8, 16, 16, 16],
            },
            batch_size: 2,
            augment: false,
            ..Default::default()
        }
    }

    fn scenes(n: usize, seed: u64) -> Vec<AnnotatedImage> {
        let spec = SceneSpec {
            image_size: (32, 32),
            num_objects_range: (1, 2),
            shape_classes: vec!["circle".into(), "square".into()],
            min_object_size: 8.0,
            max_object_size: 14.0,
            max_overlap_iou: 0.05,
        };
        (0..n).map(|i| generate_scene(seed + i as u64, &spec).unwrap()).collect()
    }

    #[test]
    fn overfits_two_images() {
        let mut cfg = tiny_config();
        cfg.backbone_align = false;
        cfg.cpa = false;
        cfg.das = false;
        cfg.learning_rate = 1e-3;
        let mut t = Trainer::new(cfg).unwrap();
        let src = scenes(2, 10);
        let first = t.burn_in_step(&src, &[], 1e-3).unwrap().total;
        let mut last = first;
        for _ in 0..99 {
            last = t.burn_in_step(&src, &[], 1e-3).unwrap().total;
        }
        assert!(last < 0.5 * first, "loss {first} -> {last}");
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::*;
    use crate::synthetic::{generate_scene, SceneSpec};

    #[test]
    fn whole_model_gradients_match_finite_differences() {
        let cfg = TrainConfig {
            detector: DetectorConfig {
                image_size: (32, 32),
                num_classes: 2,
                hidden_dim: 16,
                num_queries: 6,
                num_heads: 2,
                encoder_layers: 1,
                decoder_layers: 2,
                ffn_dim: 32,
                backbone_widths: [8, 16, 16, 16],
            },
            backbone_align: false,
            cpa: false,
            das: false,
            ..Default::default()
        };
        let spec = SceneSpec {
            image_size: (32, 32),
            num_objects_range: (1, 2),
            shape_classes: vec!["circle".into(), "square".into()],
            min_object_size: 8.0,
            max_object_size: 14.0,
            max_overlap_iou: 0.05,
        };
        let src: Vec<_> = (0..2).map(|i| generate_scene(i, &spec).unwrap()).collect();
        let mut t = Trainer::with_dtype(cfg, DType::F64).unwrap();
        t.student.detector.set_detach_references(false);
        // Zero-initialised biases sit exactly on ReLU kinks; move off them.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (_, var) in t.student_params().named_vars() {
            let noisy: Vec<f64> = var
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()
                .into_iter()
                .map(|v| v + 0.02 * (rng.random::<f64>() - 0.5))
                .collect();
            var.set(&Tensor::from_vec(noisy, var.shape(), &Device::Cpu).unwrap()).unwrap();
        }
        let loss = t.compute_losses(&src, &[], None, Stage::BurnIn).unwrap();
        let grads = loss.total.backward().unwrap();
        let eval = |t: &Trainer| t.compute_losses(&src, &[], None, Stage::BurnIn).unwrap().breakdown.total;
        let mut worst = 0.0f64;
        let mut worst_at = String::new();
        for (name, var) in t.student_params().named_vars() {
            let g = grads.get(var.as_tensor()).map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap());
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for idx in [0, base.len() / 2] {
                let h = 1e-5;
                let mut plus = base.clone();
                plus[idx] += h;
                var.set(&Tensor::from_vec(plus, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let lp = eval(&t);
                let mut minus = base.clone();
                minus[idx] -= h;
                var.set(&Tensor::from_vec(minus, var.shape(), &Device::Cpu).unwrap()).unwrap();
                let lm = eval(&t);
                var.set(&Tensor::from_vec(base.clone(), var.shape(), &Device::Cpu).unwrap()).unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let an = g.as_ref().map_or(0.0, |g| g[idx]);
                let err = (fd - an).abs() / (1.0 + fd.abs());
                if err > worst {
                    worst = err;
                    worst_at = format!("{name}[{idx}] fd {fd} analytic {an}");
                }
            }
        }
        assert!(worst < 1e-4, "worst {worst} at {worst_at}");
    }
}
