//! Miniature query-based detector: backbone, transformer, prediction heads,
//! bipartite matching and the supervised set-prediction loss.

pub mod backbone;
pub mod boxes;
pub mod layers;
pub mod loss;
pub mod matcher;
pub mod transformer;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthetic::AnnotatedImage;
use backbone::Backbone;
use boxes::BBox;
use layers::{Linear, Mlp};
use transformer::{Transformer, TransformerDims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// (height, width); both must be multiples of 16.
    pub image_size: (usize, usize),
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub num_queries: usize,
    pub num_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub backbone_widths: [usize; 4],
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: (128, 128),
            num_classes: 4,
            hidden_dim: 64,
            num_queries: 20,
            num_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 128,
            backbone_widths: [32, 64, 128, 128],
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {h}x{w} must be a positive multiple of 16"
            )));
        }
        if self.num_classes == 0 || self.num_queries == 0 || self.decoder_layers == 0 {
            return Err(Error::InvalidConfig(
                "num_classes, num_queries and decoder_layers must be positive".into(),
            ));
        }
        if self.hidden_dim % self.num_heads != 0 || self.hidden_dim % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} must be divisible by num_heads {} and by 4",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Short digest of every architectural choice; checkpoints carry it.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Decoder outputs `Z` of shape `(B, N, d)` together with the `(B, N, 4)`
/// logit-space reference boxes the layer refined.
#[derive(Debug, Clone)]
pub struct QueryEmbeddings(pub Tensor, pub Tensor);

impl QueryEmbeddings {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        Ok(self.0.dims3()?)
    }
}

/// Raw head outputs: unbounded class logits `(B, N, C)` and sigmoid boxes `(B, N, 4)`.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub class_logits: Tensor,
    pub boxes: Tensor,
}

impl Predictions {
    /// Per-class sigmoid scores, `[image][query][class]`.
    pub fn scores(&self) -> Result<Vec<Vec<Vec<f32>>>> {
        Ok(candle_nn::ops::sigmoid(&self.class_logits)?
            .to_dtype(DType::F32)?
            .to_vec3::<f32>()?)
    }

    pub fn box_list(&self) -> Result<Vec<Vec<BBox>>> {
        let raw = self.boxes.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        Ok(raw
            .into_iter()
            .map(|img| img.into_iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect())
            .collect())
    }

    pub fn detach(&self) -> Self {
        Self {
            class_logits: self.class_logits.detach(),
            boxes: self.boxes.detach(),
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted category `C_n` for every query, `[image][query]`.
pub fn argmax_class(predictions: &Predictions) -> Result<Vec<Vec<usize>>> {
    let logits = predictions
        .class_logits
        .to_dtype(DType::F32)?
        .to_vec3::<f32>()?;
    Ok(logits
        .iter()
        .map(|img| img.iter().map(|q| argmax_row(q)).collect())
        .collect())
}

/// Stacks images into a `(B, H, W, 3)` tensor. Rejects non-finite pixels.
pub fn images_to_tensor(images: &[AnnotatedImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = (first.pixels.height, first.pixels.width);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.pixels.height != h || img.pixels.width != w {
            return Err(Error::InvalidInput("images in a batch differ in size".into()));
        }
        if !img.pixels.is_finite() {
            return Err(Error::InvalidInput("non-finite pixel values".into()));
        }
        data.extend_from_slice(&img.pixels.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct DetectorOutput {
    /// Backbone maps at strides 8 and 16, channels-last.
    pub features: [Tensor; 2],
    /// Final decoder embeddings.
    pub queries: QueryEmbeddings,
    pub predictions: Predictions,
    /// Predictions from earlier decoder layers, for auxiliary losses.
    pub aux_predictions: Vec<Predictions>,
    /// Dense per-token proposals `(B, Tk, ·)` that seeded the queries.
    pub proposals: Predictions,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Backbone,
    transformer: Transformer,
    class_head: Linear,
    box_head: Mlp,
}

impl Detector {
    #[cfg(test)]
    pub(crate) fn set_detach_references(&mut self, on: bool) {
        self.transformer.detach_references = on;
    }

    pub fn new(config: &DetectorConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.image_size;
        let widths = config.backbone_widths;
        let d = config.hidden_dim;
        let dims = TransformerDims {
            fine_channels: widths[1],
            coarse_channels: widths[3],
            fine_hw: (h / 8, w / 8),
            coarse_hw: (h / 16, w / 16),
            hidden: d,
            heads: config.num_heads,
            ffn: config.ffn_dim,
            queries: config.num_queries,
            classes: config.num_classes,
            encoder_layers: config.encoder_layers,
            decoder_layers: config.decoder_layers,
        };
        // Focal-loss prior: initial foreground probability of 0.01.
        let prior_bias = -((1.0f64 - 0.01) / 0.01).ln();
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            config: config.clone(),
            backbone: Backbone::new(&widths, vb.pp("backbone"))?,
            transformer: Transformer::new(dims, vb.pp("transformer"))?,
            class_head: Linear::with_init(
                d,
                config.num_classes,
                Init::Uniform {
                    lo: -bound,
                    up: bound,
                },
                Init::Const(prior_bias),
                vb.pp("class_head"),
            )?,
            box_head: Mlp::from_layers(vec![
                Linear::new(d, d, vb.pp("box_head.layers.0"))?,
                Linear::new(d, d, vb.pp("box_head.layers.1"))?,
                Linear::with_init(d, 4, Init::Const(0.0), Init::Const(0.0), vb.pp("box_head.layers.2"))?,
            ]),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn backbone_forward(&self, images: &Tensor) -> Result<[Tensor; 2]> {
        Ok(self.backbone.forward(images)?)
    }

    fn run_transformer(&self, features: &[Tensor; 2]) -> Result<(Vec<QueryEmbeddings>, Predictions)> {
        let offsets = |z: &Tensor| self.box_head.forward(z);
        let out = self.transformer.forward(&features[0], &features[1], &offsets)?;
        let layers = out.layers.into_iter().map(|(z, r)| QueryEmbeddings(z, r)).collect();
        let proposals = Predictions {
            class_logits: out.proposal_logits,
            boxes: out.proposal_boxes,
        };
        Ok((layers, proposals))
    }

    /// Embeddings after every decoder layer; the last one is `Z`.
    pub fn encode_decode_all(&self, features: &[Tensor; 2]) -> Result<Vec<QueryEmbeddings>> {
        Ok(self.run_transformer(features)?.0)
    }

    pub fn encode_decode(&self, features: &[Tensor; 2]) -> Result<QueryEmbeddings> {
        Ok(self
            .encode_decode_all(features)?
            .pop()
            .expect("at least one decoder layer"))
    }

    /// Linear class head and 3-layer box MLP. The box MLP predicts a logit-space
    /// offset from each query's reference box; it starts at zero.
    pub fn predict_heads(&self, z: &QueryEmbeddings) -> Result<Predictions> {
        let offsets = self.box_head.forward(&z.0)?;
        Ok(Predictions {
            class_logits: self.class_head.forward(&z.0)?,
            boxes: candle_nn::ops::sigmoid(&(offsets + &z.1)?)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<DetectorOutput> {
        let features = self.backbone_forward(images)?;
        let (mut layers, proposals) = self.run_transformer(&features)?;
        let queries = layers.pop().expect("at least one decoder layer");
        let predictions = self.predict_heads(&queries)?;
        let aux_predictions = layers
            .iter()
            .map(|z| self.predict_heads(z))
            .collect::<Result<Vec<_>>>()?;
        Ok(DetectorOutput {
            features,
            queries,
            predictions,
            aux_predictions,
            proposals,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            image_size: (32, 32),
            num_classes: 3,
            hidden_dim: 16,
            num_queries: 5,
            num_heads: 2,
            encoder_layers: 1,
            decoder_layers: 2,
            ffn_dim: 32,
            backbone_widths: [4, 8, 8, 8],
        }
    }

    fn build(config: &DetectorConfig) -> (VarMap, Detector) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let det = Detector::new(config, vb).unwrap();
        (vm, det)
    }

    fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * h * w * 3).map(|_| rng.random::<f64>()).collect();
        Tensor::from_vec(data, (b, h, w, 3), &Device::Cpu).unwrap()
    }

    #[test]
    fn backbone_strides() {
        let config = DetectorConfig::default();
        let vm = VarMap::new();
        let det = Detector::new(&config, VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu)).unwrap();
        let x = Tensor::zeros((1, 128, 128, 3), DType::F32, &Device::Cpu).unwrap();
        let [fine, coarse] = det.backbone_forward(&x).unwrap();
        assert_eq!(fine.dims(), &[1, 16, 16, 64]);
        assert_eq!(coarse.dims(), &[1, 8, 8, 128]);
        let all_finite = |t: &Tensor| {
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite())
        };
        assert!(all_finite(&fine) && all_finite(&coarse));
        let again = det.backbone_forward(&x).unwrap();
        assert_eq!(
            fine.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn query_shape_and_batch_independence() {
        let config = small_config();
        let (_vm, det) = build(&config);
        let x = random_images(2, 32, 32, 1);
        let z = det.encode_decode(&det.backbone_forward(&x).unwrap()).unwrap();
        assert_eq!(z.dims().unwrap(), (2, 5, 16));

        // Swapping the two images swaps their embeddings.
        let swapped = Tensor::cat(&[x.get(1).unwrap().unsqueeze(0).unwrap(), x.get(0).unwrap().unsqueeze(0).unwrap()], 0).unwrap();
        let zs = det.encode_decode(&det.backbone_forward(&swapped).unwrap()).unwrap();
        let a = z.0.to_vec3::<f64>().unwrap();
        let b = zs.0.to_vec3::<f64>().unwrap();
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);

        // Changing image 1 leaves image 0 untouched.
        let other = Tensor::cat(&[x.get(0).unwrap().unsqueeze(0).unwrap(), random_images(1, 32, 32, 9)], 0).unwrap();
        let zo = det.encode_decode(&det.backbone_forward(&other).unwrap()).unwrap();
        assert_eq!(zo.0.to_vec3::<f64>().unwrap()[0], a[0]);
    }

    #[test]
    fn heads_contract() {
        let config = small_config();
        let (_vm, det) = build(&config);
        let mut rng_vals = Vec::new();
        for i in 0..2 * 5 * 16 {
            rng_vals.push(((i * 37 % 23) as f64 - 11.0) * 3.0);
        }
        let refs = Tensor::zeros((2, 5, 4), DType::F64, &Device::Cpu).unwrap();
        let z = QueryEmbeddings(Tensor::from_vec(rng_vals, (2, 5, 16), &Device::Cpu).unwrap(), refs.clone());
        let p = det.predict_heads(&z).unwrap();
        assert_eq!(p.class_logits.dims(), &[2, 5, 3]);
        assert_eq!(p.boxes.dims(), &[2, 5, 4]);
        for v in p.boxes.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((0.0..=1.0).contains(&v));
        }
        let zeros = QueryEmbeddings(Tensor::zeros((1, 5, 16), DType::F64, &Device::Cpu).unwrap(), refs.narrow(0, 0, 1).unwrap());
        let p = det.predict_heads(&zeros).unwrap();
        let logits = p.class_logits.to_vec3::<f64>().unwrap();
        let boxes = p.boxes.to_vec3::<f64>().unwrap();
        for q in 1..5 {
            assert_eq!(logits[0][q], logits[0][0]);
            assert_eq!(boxes[0][q], boxes[0][0]);
        }
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax_row(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax_row(&[0.5, 0.5, 0.5]), 0);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f32> = (0..2 * 6 * 4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let logits = Tensor::from_vec(vals.clone(), (2, 6, 4), &Device::Cpu).unwrap();
        let preds = Predictions {
            boxes: Tensor::zeros((2, 6, 4), DType::F32, &Device::Cpu).unwrap(),
            class_logits: logits,
        };
        let got = argmax_class(&preds).unwrap();
        for b in 0..2 {
            for n in 0..6 {
                let row = &vals[(b * 6 + n) * 4..(b * 6 + n + 1) * 4];
                // scan oracle
                let mut best = 0;
                let mut best_v = f32::NEG_INFINITY;
                for (i, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = i;
                    }
                }
                assert_eq!(got[b][n], best);
            }
        }
    }

    #[test]
    fn non_finite_images_rejected() {
        let mut img = crate::synthetic::generate_scene(1, &Default::default()).unwrap();
        img.pixels.data[5] = f32::NAN;
        assert!(images_to_tensor(&[img], DType::F32, &Device::Cpu).is_err());
    }

    #[test]
    fn fingerprint_tracks_config() {
        let a = DetectorConfig::default();
        let mut b = a.clone();
        b.num_queries = 21;
        assert_eq!(a.fingerprint(), DetectorConfig::default().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
