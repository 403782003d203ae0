//! Encoder over the coarse feature level, top-down fusion into the fine level,
//! and an anchor-conditioned query decoder.

use candle_core::{DType, Module, Result, Tensor, D};
use candle_nn::{Init, VarBuilder};

use super::layers::{
    grid_position_encoding, inverse_sigmoid, sine_embed, LayerNorm, Linear, Mlp,
    MultiHeadAttention,
};

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: Mlp,
    norm2: LayerNorm,
}

impl EncoderLayer {
    fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(d, heads, vb.pp("attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            ffn: Mlp::new(&[d, ffn, d], vb.pp("ffn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
        })
    }

    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let qk = x.broadcast_add(pos)?;
        let x = self.norm1.forward(&(x + self.attn.forward(&qk, &qk, x)?)?)?;
        self.norm2.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: Mlp,
    norm3: LayerNorm,
}

impl DecoderLayer {
    fn new(d: usize, heads: usize, ffn: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(d, heads, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(d, vb.pp("norm1"))?,
            cross_attn: MultiHeadAttention::new(d, heads, vb.pp("cross_attn"))?,
            norm2: LayerNorm::new(d, vb.pp("norm2"))?,
            ffn: Mlp::new(&[d, ffn, d], vb.pp("ffn"))?,
            norm3: LayerNorm::new(d, vb.pp("norm3"))?,
        })
    }

    fn forward(
        &self,
        tgt: &Tensor,
        query_pos: &Tensor,
        memory_key: &Tensor,
        spatial_bias: &Tensor,
    ) -> Result<Tensor> {
        let q = tgt.broadcast_add(query_pos)?;
        let tgt = self
            .norm1
            .forward(&(tgt + self.self_attn.forward(&q, &q, tgt)?)?)?;
        let q = tgt.broadcast_add(query_pos)?;
        let tgt = self
            .norm2
            .forward(&(&tgt + self.cross_attn.forward_biased(&q, memory_key, memory_key, Some(spatial_bias))?)?)?;
        self.norm3.forward(&(&tgt + self.ffn.forward(&tgt)?)?)
    }
}

/// Shape hyperparameters the transformer needs.
#[derive(Debug, Clone, Copy)]
pub struct TransformerDims {
    pub fine_channels: usize,
    pub coarse_channels: usize,
    pub fine_hw: (usize, usize),
    pub coarse_hw: (usize, usize),
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub queries: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    dims: TransformerDims,
    fine_proj: Linear,
    coarse_proj: Linear,
    fine_norm: LayerNorm,
    coarse_norm: LayerNorm,
    top_down: Linear,
    level_embed: Tensor,
    fine_pos: Tensor,
    coarse_pos: Tensor,
    /// `(2, Tk)` normalized x (row 0) and y (row 1) of every memory token.
    memory_xy: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    query_content: Tensor,
    anchor_pos: Mlp,
    enc_proj: Linear,
    enc_norm: LayerNorm,
    enc_class: Linear,
    enc_box: Mlp,
    /// `(Tk, 4)` logit-space box centred on each memory token.
    proposal_base: Tensor,
    /// Off only in gradient checks, where the detached reference path would
    /// make finite differences disagree with backprop by construction.
    pub(crate) detach_references: bool,
}

/// Decoder states plus the dense per-token proposals the queries were seeded from.
#[derive(Debug, Clone)]
pub struct TransformerOutput {
    /// `(embeddings, reference logits)` after every decoder layer.
    pub layers: Vec<(Tensor, Tensor)>,
    /// `(B, Tk, C)` proposal class logits.
    pub proposal_logits: Tensor,
    /// `(B, Tk, 4)` proposal boxes, `cxcywh` in `[0, 1]`.
    pub proposal_boxes: Tensor,
}

/// Rows of `refs` for the `n` tokens per image with the highest best-class
/// logit; ties keep token order.
fn select_top(logits: &Tensor, refs: &Tensor, n: usize) -> Result<Tensor> {
    let (b, tk, _) = logits.dims3()?;
    let best = logits.max(D::Minus1)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    let mut idx = Vec::with_capacity(b * n);
    for (i, row) in best.iter().enumerate() {
        let mut order: Vec<usize> = (0..tk).collect();
        order.sort_by(|&x, &y| row[y].total_cmp(&row[x]));
        idx.extend(order[..n.min(tk)].iter().map(|&t| (i * tk + t) as u32));
    }
    let k = idx.len();
    let idx = Tensor::from_vec(idx, k, refs.device())?;
    refs.reshape((b * tk, 4))?.index_select(&idx, 0)?.reshape((b, k / b, 4))
}

/// Token-center coordinates of the fine grid followed by the coarse grid.
fn memory_xy(fine: (usize, usize), coarse: (usize, usize)) -> Vec<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (h, w) in [fine, coarse] {
        for y in 0..h {
            for x in 0..w {
                xs.push((x as f64 + 0.5) / w as f64);
                ys.push((y as f64 + 0.5) / h as f64);
            }
        }
    }
    xs.extend(ys);
    xs
}

/// Token-centred starting boxes: side 0.1 on the fine level, 0.2 on the coarse.
fn proposal_base(fine: (usize, usize), coarse: (usize, usize)) -> Vec<f64> {
    let mut out = Vec::new();
    for ((h, w), side) in [(fine, 0.1), (coarse, 0.2)] {
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) / w as f64;
                let cy = (y as f64 + 0.5) / h as f64;
                out.extend([cx, cy, side, side].map(inverse_sigmoid));
            }
        }
    }
    out
}

impl Transformer {
    pub fn new(dims: TransformerDims, vb: VarBuilder) -> Result<Self> {
        let d = dims.hidden;
        let (dtype, dev) = (vb.dtype(), vb.device().clone());
        let tk = dims.fine_hw.0 * dims.fine_hw.1 + dims.coarse_hw.0 * dims.coarse_hw.1;
        let prior_bias = -((1.0f64 - 0.01) / 0.01).ln();
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            dims,
            fine_proj: Linear::new(dims.fine_channels, d, vb.pp("fine_proj"))?,
            coarse_proj: Linear::new(dims.coarse_channels, d, vb.pp("coarse_proj"))?,
            fine_norm: LayerNorm::new(d, vb.pp("fine_norm"))?,
            coarse_norm: LayerNorm::new(d, vb.pp("coarse_norm"))?,
            top_down: Linear::new(d, d, vb.pp("top_down"))?,
            level_embed: vb.get_with_hints(
                (2, d),
                "level_embed",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.1,
                },
            )?,
            memory_xy: Tensor::from_vec(memory_xy(dims.fine_hw, dims.coarse_hw), (2, tk), &dev)?.to_dtype(dtype)?,
            fine_pos: grid_position_encoding(dims.fine_hw.0, dims.fine_hw.1, d, dtype, &dev)?,
            coarse_pos: grid_position_encoding(dims.coarse_hw.0, dims.coarse_hw.1, d, dtype, &dev)?,
            encoder: (0..dims.encoder_layers)
                .map(|i| EncoderLayer::new(d, dims.heads, dims.ffn, vb.pp(format!("encoder.{i}"))))
                .collect::<Result<_>>()?,
            decoder: (0..dims.decoder_layers)
                .map(|i| DecoderLayer::new(d, dims.heads, dims.ffn, vb.pp(format!("decoder.{i}"))))
                .collect::<Result<_>>()?,
            query_content: vb.get_with_hints(
                (dims.queries, d),
                "query_content",
                Init::Randn {
                    mean: 0.0,
                    stdev: 0.1,
                },
            )?,
            anchor_pos: Mlp::new(&[2 * d, d, d], vb.pp("anchor_pos"))?,
            enc_proj: Linear::new(d, d, vb.pp("enc_proj"))?,
            enc_norm: LayerNorm::new(d, vb.pp("enc_norm"))?,
            enc_class: Linear::with_init(
                d,
                dims.classes,
                Init::Uniform { lo: -bound, up: bound },
                Init::Const(prior_bias),
                vb.pp("enc_class"),
            )?,
            enc_box: Mlp::from_layers(vec![
                Linear::new(d, d, vb.pp("enc_box.layers.0"))?,
                Linear::new(d, d, vb.pp("enc_box.layers.1"))?,
                Linear::with_init(d, 4, Init::Const(0.0), Init::Const(0.0), vb.pp("enc_box.layers.2"))?,
            ]),
            proposal_base: Tensor::from_vec(proposal_base(dims.fine_hw, dims.coarse_hw), (tk, 4), &dev)?.to_dtype(dtype)?,
            detach_references: true,
        })
    }

    /// Runs the encoder, scores every memory token as a dense proposal, seeds
    /// the queries' reference boxes from the top-scoring proposals, then runs
    /// the decoder. `box_offsets` maps decoder output to logit-space box
    /// offsets; each layer's refined boxes (detached) are the next layer's
    /// references.
    pub fn forward(
        &self,
        fine: &Tensor,
        coarse: &Tensor,
        box_offsets: &dyn Fn(&Tensor) -> Result<Tensor>,
    ) -> Result<TransformerOutput> {
        let d = self.dims.hidden;
        let (b, fh, fw, _) = fine.dims4()?;
        let (_, ch, cw, _) = coarse.dims4()?;
        let fine_tokens = self
            .fine_norm
            .forward(&self.fine_proj.forward(fine)?.reshape((b, fh * fw, d))?)?;
        let mut coarse_tokens = self
            .coarse_norm
            .forward(&self.coarse_proj.forward(coarse)?.reshape((b, ch * cw, d))?)?;

        let coarse_pos = self.coarse_pos.broadcast_add(&self.level_embed.get(1)?)?;
        for layer in &self.encoder {
            coarse_tokens = layer.forward(&coarse_tokens, &coarse_pos)?;
        }

        // Top-down: nearest 2x upsample of the encoded coarse level into the fine level.
        let td = self
            .top_down
            .forward(&coarse_tokens)?
            .reshape((b, ch, 1, cw, 1, d))?
            .broadcast_as((b, ch, fh / ch, cw, fw / cw, d))?
            .contiguous()?
            .reshape((b, fh * fw, d))?;
        let fine_tokens = (fine_tokens + td)?;

        let memory = Tensor::cat(&[&fine_tokens, &coarse_tokens], 1)?;
        let fine_pos = self.fine_pos.broadcast_add(&self.level_embed.get(0)?)?;
        let memory_pos = Tensor::cat(&[&fine_pos, &coarse_pos], 0)?;
        let memory_key = memory.broadcast_add(&memory_pos)?;

        let enc = self.enc_norm.forward(&self.enc_proj.forward(&memory)?)?;
        let proposal_logits = self.enc_class.forward(&enc)?;
        let proposal_ref = self.enc_box.forward(&enc)?.broadcast_add(&self.proposal_base)?;
        let n = self.dims.queries;
        let stop = |t: Tensor| if self.detach_references { t.detach() } else { t };
        let mut reference = stop(select_top(&proposal_logits, &proposal_ref, n)?);
        let mut tgt: Option<Tensor> = None;
        let mut outputs = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let boxes = candle_nn::ops::sigmoid(&reference)?;
            let query_pos = self.anchor_pos.forward(&sine_embed(&boxes, d / 2)?)?;
            let spatial_bias = self.spatial_bias(&boxes)?;
            let input = match tgt.take() {
                Some(t) => t,
                None => self.query_content.broadcast_add(&query_pos)?,
            };
            let out = layer.forward(&input, &query_pos, &memory_key, &spatial_bias)?;
            let next = stop((box_offsets(&out)? + &reference)?);
            outputs.push((out.clone(), reference));
            reference = next;
            tgt = Some(out);
        }
        Ok(TransformerOutput {
            layers: outputs,
            proposal_logits,
            proposal_boxes: candle_nn::ops::sigmoid(&proposal_ref)?,
        })
    }

    /// Gaussian cross-attention prior centred on each reference box:
    /// `−((x − cx)² / w² + (y − cy)² / h²) / 2`, shape `(B, 1, N, Tk)`.
    fn spatial_bias(&self, boxes: &Tensor) -> Result<Tensor> {
        let kx = self.memory_xy.narrow(0, 0, 1)?;
        let ky = self.memory_xy.narrow(0, 1, 1)?;
        let col = |i: usize| boxes.narrow(2, i, 1);
        let dx = kx.broadcast_sub(&col(0)?)?.broadcast_div(&col(2)?)?;
        let dy = ky.broadcast_sub(&col(1)?)?.broadcast_div(&col(3)?)?;
        ((dx.sqr()? + dy.sqr()?)? * -0.5)?.unsqueeze(1)
    }

    pub fn hidden(&self) -> usize {
        self.dims.hidden
    }
}
