//! Class-wise prototype alignment.
//!
//! Query embeddings are grouped by predicted class into per-batch centroids,
//! and a small discriminator behind a gradient reversal layer tries to tell
//! source centroids from target ones. A patch discriminator does the same for
//! raw backbone features.

use candle_core::{CpuStorage, DType, Device, Layout, Module, Shape, Tensor, D};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::detector::layers::{softplus, Linear, Mlp};
use crate::detector::loss::GroundTruth;
use crate::detector::matcher::MatchResult;
use crate::detector::{argmax_row, Predictions};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainLabel {
    Source,
    Target,
}

impl DomainLabel {
    /// Discriminator label: 0 for source, 1 for target.
    pub fn value(self) -> u8 {
        match self {
            DomainLabel::Source => 0,
            DomainLabel::Target => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}

/// One-hot `(rows, C)` matrix of predicted categories.
#[derive(Debug, Clone)]
pub struct ClassMask {
    pub values: Tensor,
    /// Column sums.
    pub counts: Vec<usize>,
}

/// Builds the class mask for flattened per-query class indices.
pub fn build_class_mask(
    classes: &[usize],
    num_classes: usize,
    dtype: DType,
    device: &Device,
) -> Result<ClassMask> {
    let mut data = vec![0f32; classes.len() * num_classes];
    let mut counts = vec![0usize; num_classes];
    for (r, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(Error::InvalidInput(format!(
                "class index {c} out of range for {num_classes} classes"
            )));
        }
        data[r * num_classes + c] = 1.0;
        counts[c] += 1;
    }
    let values = Tensor::from_vec(data, (classes.len(), num_classes), device)?.to_dtype(dtype)?;
    Ok(ClassMask { values, counts })
}

/// Per-batch class centroids for one domain.
#[derive(Debug, Clone)]
pub struct ClassPrototypes {
    /// `(C, d)`; absent classes hold zero rows.
    pub values: Tensor,
    pub counts: Vec<usize>,
    pub present: Vec<bool>,
    pub domain: DomainLabel,
}

impl ClassPrototypes {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.present.len()).filter(|&c| self.present[c]).collect()
    }

    pub fn any_present(&self) -> bool {
        self.present.iter().any(|&p| p)
    }

    pub fn empty(num_classes: usize, dim: usize, dtype: DType, device: &Device, domain: DomainLabel) -> Result<Self> {
        Ok(Self {
            values: Tensor::zeros((num_classes, dim), dtype, device)?,
            counts: vec![0; num_classes],
            present: vec![false; num_classes],
            domain,
        })
    }

    pub fn values_f64(&self) -> Result<Vec<Vec<f64>>> {
        Ok(self.values.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

fn flatten_queries(z: &Tensor) -> Result<Tensor> {
    let d = z.dim(D::Minus1)?;
    Ok(z.reshape((z.elem_count() / d, d))?)
}

/// Prototypes as `maskᵀ · Z` followed by a per-row division by the class counts.
/// `z` may have any leading shape; its rows must line up with the mask rows.
pub fn extract_prototypes_batched(z: &Tensor, mask: &ClassMask, domain: DomainLabel) -> Result<ClassPrototypes> {
    let flat = flatten_queries(z)?;
    let (rows, d) = flat.dims2()?;
    let c = mask.counts.len();
    if mask.values.dim(0)? != rows {
        return Err(Error::InvalidInput(format!(
            "mask has {} rows, embeddings have {rows}",
            mask.values.dim(0)?
        )));
    }
    if rows == 0 {
        return ClassPrototypes::empty(c, d, flat.dtype(), flat.device(), domain);
    }
    let sums = mask.values.t()?.matmul(&flat)?;
    let denom: Vec<f64> = mask.counts.iter().map(|&n| n.max(1) as f64).collect();
    let denom = Tensor::from_vec(denom, (c, 1), flat.device())?.to_dtype(flat.dtype())?;
    Ok(ClassPrototypes {
        values: sums.broadcast_div(&denom)?,
        counts: mask.counts.clone(),
        present: mask.counts.iter().map(|&n| n > 0).collect(),
        domain,
    })
}

/// Reference implementation: a separate gather and mean for every class.
pub fn extract_prototypes_naive(
    z: &Tensor,
    classes: &[usize],
    num_classes: usize,
    domain: DomainLabel,
) -> Result<ClassPrototypes> {
    let flat = flatten_queries(z)?;
    let d = flat.dim(1)?;
    let mut rows = Vec::with_capacity(num_classes);
    let mut counts = vec![0; num_classes];
    for (c, count) in counts.iter_mut().enumerate() {
        let members: Vec<u32> = classes
            .iter()
            .enumerate()
            .filter(|(_, &k)| k == c)
            .map(|(i, _)| i as u32)
            .collect();
        *count = members.len();
        if members.is_empty() {
            rows.push(Tensor::zeros((1, d), flat.dtype(), flat.device())?);
        } else {
            let idx = Tensor::from_vec(members, *count, flat.device())?;
            rows.push(flat.index_select(&idx, 0)?.mean_keepdim(0)?);
        }
    }
    Ok(ClassPrototypes {
        values: Tensor::cat(&rows, 0)?,
        present: counts.iter().map(|&n| n > 0).collect(),
        counts,
        domain,
    })
}

/// Identity forward, negated gradient backward.
struct GradientReversal;

impl candle_core::CustomOp1 for GradientReversal {
    fn name(&self) -> &'static str {
        "gradient-reversal"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("gradient reversal expects contiguous input".into()))?;
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(v[start..end].to_vec()),
            CpuStorage::F64(v) => CpuStorage::F64(v[start..end].to_vec()),
            _ => candle_core::bail!("gradient reversal supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.neg()?))
    }
}

pub fn grl(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GradientReversal)?)
}

/// Per-prototype discriminator, `d -> 64 -> 64 -> 1`.
#[derive(Debug, Clone)]
pub struct PrototypeDiscriminator {
    mlp: Mlp,
}

pub const DISCRIMINATOR_HIDDEN: usize = 64;

impl PrototypeDiscriminator {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[dim, DISCRIMINATOR_HIDDEN, DISCRIMINATOR_HIDDEN, 1], vb)?,
        })
    }

    /// Built with a zero final layer, so every output starts at exactly 0.5.
    pub fn with_zero_output(dim: usize, vb: VarBuilder) -> Result<Self> {
        let h = DISCRIMINATOR_HIDDEN;
        Ok(Self {
            mlp: Mlp::from_layers(vec![
                Linear::new(dim, h, vb.pp("layers.0"))?,
                Linear::new(h, h, vb.pp("layers.1"))?,
                Linear::with_init(h, 1, Init::Const(0.0), Init::Const(0.0), vb.pp("layers.2"))?,
            ]),
        })
    }

    /// Logits, one per row of `(C, d)` input.
    pub fn logits(&self, values: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(values)?.squeeze(D::Minus1)?)
    }

    /// Probability of "target" for every row, present or not.
    pub fn forward(&self, prototypes: &ClassPrototypes) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.logits(&prototypes.values)?)?)
    }
}

fn present_rows(p: &ClassPrototypes) -> Result<Option<Tensor>> {
    let idx: Vec<u32> = p.present_indices().into_iter().map(|c| c as u32).collect();
    if idx.is_empty() {
        return Ok(None);
    }
    let n = idx.len();
    Ok(Some(p.values.index_select(&Tensor::from_vec(idx, n, p.values.device())?, 0)?))
}

/// `−Σ log(1−p)` over present source rows plus `−Σ log p` over present target
/// rows, with the prototypes passed through a gradient reversal layer.
pub fn prototype_adversarial_loss(
    disc: &PrototypeDiscriminator,
    src: &ClassPrototypes,
    tgt: &ClassPrototypes,
) -> Result<Tensor> {
    prototype_adversarial_loss_with(disc, src, tgt, true)
}

/// As [`prototype_adversarial_loss`], optionally without the reversal layer.
pub fn prototype_adversarial_loss_with(
    disc: &PrototypeDiscriminator,
    src: &ClassPrototypes,
    tgt: &ClassPrototypes,
    reverse: bool,
) -> Result<Tensor> {
    if src.num_classes() != tgt.num_classes() {
        return Err(Error::InvalidInput("prototype class counts differ".into()));
    }
    let mut loss = Tensor::zeros((), src.values.dtype(), src.values.device())?;
    for (protos, sign) in [(src, 1.0), (tgt, -1.0)] {
        if let Some(rows) = present_rows(protos)? {
            let rows = if reverse { grl(&rows)? } else { rows };
            let logits = (disc.logits(&rows)? * sign)?;
            loss = (loss + softplus(&logits)?.sum_all()?)?;
        }
    }
    Ok(loss)
}

/// Per-location discriminator over channels-last feature maps (a stack of
/// 1x1 convolutions).
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    mlp: Mlp,
}

impl PatchDiscriminator {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&[channels, DISCRIMINATOR_HIDDEN, 1], vb)?,
        })
    }

    pub fn with_zero_output(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::from_layers(vec![
                Linear::new(channels, DISCRIMINATOR_HIDDEN, vb.pp("layers.0"))?,
                Linear::with_init(DISCRIMINATOR_HIDDEN, 1, Init::Const(0.0), Init::Const(0.0), vb.pp("layers.1"))?,
            ]),
        })
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(features)?.squeeze(D::Minus1)?)
    }
}

/// One patch discriminator per backbone scale.
#[derive(Debug, Clone)]
pub struct BackboneDiscriminator {
    scales: Vec<PatchDiscriminator>,
}

impl BackboneDiscriminator {
    pub fn new(channels: &[usize], vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            scales: channels
                .iter()
                .enumerate()
                .map(|(i, &c)| PatchDiscriminator::new(c, vb.pp(format!("scale{i}"))))
                .collect::<Result<_>>()?,
        })
    }

    pub fn from_scales(scales: Vec<PatchDiscriminator>) -> Self {
        Self { scales }
    }
}

/// Per-location binary cross-entropy (source 0, target 1) averaged over every
/// location of both domains, then averaged over scales. Features pass through
/// a gradient reversal layer.
pub fn backbone_adversarial_loss(
    disc: &BackboneDiscriminator,
    features_src: &[Tensor],
    features_tgt: &[Tensor],
) -> Result<Tensor> {
    backbone_adversarial_loss_with(disc, features_src, features_tgt, true)
}

pub fn backbone_adversarial_loss_with(
    disc: &BackboneDiscriminator,
    features_src: &[Tensor],
    features_tgt: &[Tensor],
    reverse: bool,
) -> Result<Tensor> {
    if features_src.len() != disc.scales.len() || features_tgt.len() != disc.scales.len() {
        return Err(Error::InvalidInput("feature scale count does not match discriminator".into()));
    }
    let mut total: Option<Tensor> = None;
    for ((d, fs), ft) in disc.scales.iter().zip(features_src).zip(features_tgt) {
        if fs.dims()[1..] != ft.dims()[1..] {
            return Err(Error::InvalidInput("source and target feature shapes differ".into()));
        }
        let prep = |f: &Tensor| -> Result<Tensor> { if reverse { grl(f) } else { Ok(f.clone()) } };
        let ls = softplus(&d.logits(&prep(fs)?)?)?;
        let lt = softplus(&(d.logits(&prep(ft)?)? * -1.0)?)?;
        let n = (ls.elem_count() + lt.elem_count()) as f64;
        let term = ((ls.sum_all()? + lt.sum_all()?)? / n)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    let total = total.ok_or_else(|| Error::InvalidInput("no feature scales".into()))?;
    Ok((total / disc.scales.len() as f64)?)
}

/// How query embeddings are selected before prototype extraction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PrototypeFilter {
    /// All queries, classified by their argmax score.
    #[default]
    None,
    /// Queries whose best class score reaches the threshold.
    Confidence { threshold: f64 },
    /// Hungarian-matched queries with their ground-truth class (source
    /// domain); the target domain falls back to a confidence filter at the
    /// pseudo-label threshold.
    Matching,
}

/// Flattened argmax classes for every query.
pub fn all_queries(predictions: &Predictions) -> Result<Vec<usize>> {
    Ok(crate::detector::argmax_class(predictions)?
        .into_iter()
        .flatten()
        .collect())
}

fn select_rows(z: &Tensor, rows: Vec<u32>) -> Result<Tensor> {
    let flat = flatten_queries(z)?;
    let k = rows.len();
    if k == 0 {
        return Ok(Tensor::zeros((0, flat.dim(1)?), flat.dtype(), flat.device())?);
    }
    Ok(flat.index_select(&Tensor::from_vec(rows, k, flat.device())?, 0)?)
}

/// Keeps queries whose maximal class score is at least `tau`.
pub fn filter_queries_by_confidence(
    z: &Tensor,
    predictions: &Predictions,
    tau: f64,
) -> Result<(Tensor, Vec<usize>)> {
    let scores = predictions.scores()?;
    let n = scores.first().map_or(0, Vec::len);
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (b, img) in scores.iter().enumerate() {
        for (q, s) in img.iter().enumerate() {
            let c = argmax_row(s);
            if s[c] as f64 >= tau {
                rows.push((b * n + q) as u32);
                classes.push(c);
            }
        }
    }
    Ok((select_rows(z, rows)?, classes))
}

/// Keeps only matched queries, labelled with their matched ground-truth class.
pub fn filter_queries_by_matching(
    z: &Tensor,
    matches: &MatchResult,
    ground_truth: &[GroundTruth],
) -> Result<(Tensor, Vec<usize>)> {
    let n = z.dim(1)?;
    let mut rows = Vec::new();
    let mut classes = Vec::new();
    for (b, pairs) in matches.per_image.iter().enumerate() {
        for &(q, g) in pairs {
            rows.push((b * n + q) as u32);
            classes.push(ground_truth[b].labels[g]);
        }
    }
    Ok((select_rows(z, rows)?, classes))
}

/// Prototypes from a selected set of embeddings via the batched path.
pub fn prototypes_from(z: &Tensor, classes: &[usize], num_classes: usize, domain: DomainLabel) -> Result<ClassPrototypes> {
    let mask = build_class_mask(classes, num_classes, z.dtype(), z.device())?;
    extract_prototypes_batched(z, &mask, domain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use candle_nn::VarMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn vb(vm: &VarMap) -> VarBuilder<'_> {
        VarBuilder::from_varmap(vm, DType::F64, &Device::Cpu)
    }

    #[test]
    fn mask_small_case() {
        let m = build_class_mask(&[0, 2], 3, DType::F32, &dev()).unwrap();
        assert_eq!(m.values.to_vec2::<f32>().unwrap(), vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(m.counts, vec![1, 0, 1]);
        assert!(build_class_mask(&[3], 3, DType::F32, &dev()).is_err());
    }

    #[test]
    fn mask_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = rng.random_range(1..8);
            let classes: Vec<usize> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..c)).collect();
            let m = build_class_mask(&classes, c, DType::F64, &dev()).unwrap();
            let got = m.values.to_vec2::<f64>().unwrap();
            let mut hist = vec![0usize; c];
            for (r, &k) in classes.iter().enumerate() {
                for j in 0..c {
                    assert_eq!(got[r][j], if j == k { 1.0 } else { 0.0 });
                }
                hist[k] += 1;
            }
            assert_eq!(m.counts, hist);
        }
    }

    #[test]
    fn two_point_mean() {
        let z = Tensor::new(&[[[1f64, 0.0], [3.0, 0.0]]], &dev()).unwrap();
        let p = prototypes_from(&z, &[0, 0], 2, DomainLabel::Source).unwrap();
        assert_eq!(p.values.to_vec2::<f64>().unwrap(), vec![vec![2.0, 0.0], vec![0.0, 0.0]]);
        assert_eq!(p.counts, vec![2, 0]);
        assert_eq!(p.present, vec![true, false]);
        let naive = extract_prototypes_naive(&z, &[0, 0], 2, DomainLabel::Source).unwrap();
        assert_eq!(naive.values.to_vec2::<f64>().unwrap(), p.values.to_vec2::<f64>().unwrap());
    }

    #[test]
    fn one_query_per_class_is_verbatim() {
        let z = Tensor::new(&[[[0.25f64, -1.5], [7.0, 3.0], [0.1, 0.2]]], &dev()).unwrap();
        let p = prototypes_from(&z, &[2, 0, 1], 3, DomainLabel::Target).unwrap();
        assert_eq!(
            p.values.to_vec2::<f64>().unwrap(),
            vec![vec![7.0, 3.0], vec![0.1, 0.2], vec![0.25, -1.5]]
        );
    }

    #[test]
    fn grl_is_identity_forward_and_negates_gradient() {
        let x = Var::new(&[1.5f64, -2.0], &dev()).unwrap();
        let y = grl(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![1.5, -2.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        assert_eq!(g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![-1.0, -1.0]);
    }

    #[test]
    fn zero_discriminator_gives_half_and_two_ln2() {
        let vm = VarMap::new();
        let disc = PrototypeDiscriminator::with_zero_output(4, vb(&vm)).unwrap();
        let z = Tensor::new(&[[[1f64, 2.0, 3.0, 4.0]]], &dev()).unwrap();
        let src = prototypes_from(&z, &[1], 3, DomainLabel::Source).unwrap();
        let tgt = prototypes_from(&(&z * 2.0).unwrap(), &[2], 3, DomainLabel::Target).unwrap();
        for p in disc.forward(&src).unwrap().to_vec1::<f64>().unwrap() {
            assert_eq!(p, 0.5);
        }
        let l = prototype_adversarial_loss(&disc, &src, &tgt).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn no_present_class_gives_zero() {
        let vm = VarMap::new();
        let disc = PrototypeDiscriminator::new(4, vb(&vm)).unwrap();
        let e = ClassPrototypes::empty(3, 4, DType::F64, &dev(), DomainLabel::Source).unwrap();
        let l = prototype_adversarial_loss(&disc, &e, &e).unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn backbone_loss_ln2_at_half() {
        let vm = VarMap::new();
        let vbb = vb(&vm);
        let disc = BackboneDiscriminator::from_scales(vec![
            PatchDiscriminator::with_zero_output(3, vbb.pp("a")).unwrap(),
            PatchDiscriminator::with_zero_output(5, vbb.pp("b")).unwrap(),
        ]);
        let fs = [
            Tensor::ones((2, 4, 4, 3), DType::F64, &dev()).unwrap(),
            Tensor::ones((2, 2, 2, 5), DType::F64, &dev()).unwrap(),
        ];
        let l = backbone_adversarial_loss(&disc, &fs, &fs).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confidence_filter_boundary() {
        // Scores 0.4 and 0.6 in class 0.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let preds = Predictions {
            class_logits: Tensor::new(&[[[logit(0.4), -9.0], [logit(0.6), -9.0]]], &dev()).unwrap(),
            boxes: Tensor::zeros((1, 2, 4), DType::F64, &dev()).unwrap(),
        };
        let z = Tensor::new(&[[[1f64, 1.0], [2.0, 2.0]]], &dev()).unwrap();
        let (kept, classes) = filter_queries_by_confidence(&z, &preds, 0.5).unwrap();
        assert_eq!(kept.to_vec2::<f64>().unwrap(), vec![vec![2.0, 2.0]]);
        assert_eq!(classes, vec![0]);
        let (all, _) = filter_queries_by_confidence(&z, &preds, 1e-9).unwrap();
        assert_eq!(all.dim(0).unwrap(), 2);
    }

    #[test]
    fn matching_filter_keeps_matched_queries() {
        let z = Tensor::zeros((1, 20, 4), DType::F64, &dev()).unwrap();
        let gt = vec![GroundTruth {
            boxes: vec![crate::detector::boxes::BBox::new(0.5, 0.5, 0.1, 0.1); 3],
            labels: vec![2, 0, 2],
        }];
        let m = MatchResult {
            per_image: vec![vec![(1, 2), (4, 0), (9, 1)]],
        };
        let (kept, mut classes) = filter_queries_by_matching(&z, &m, &gt).unwrap();
        assert_eq!(kept.dim(0).unwrap(), 3);
        classes.sort_unstable();
        assert_eq!(classes, vec![0, 2, 2]);
        let empty = MatchResult { per_image: vec![vec![]] };
        let (kept, classes) = filter_queries_by_matching(&z, &empty, &[GroundTruth::default()]).unwrap();
        assert_eq!(kept.dim(0).unwrap(), 0);
        assert!(classes.is_empty());
    }
}
