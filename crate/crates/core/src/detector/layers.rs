//! Small differentiable building blocks. Normalization and softmax are fused
//! CPU kernels with hand-written backward passes.

use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Module, Result, Shape, Tensor, WithDType, D,
};
use candle_nn::{Init, VarBuilder};

/// Fully connected layer applied over the last dimension of any-rank input.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = vb.get_with_hints(
            (out_dim, in_dim),
            "weight",
            Init::Uniform {
                lo: -bound,
                up: bound,
            },
        )?;
        let bias = vb.get_with_hints(
            out_dim,
            "bias",
            Init::Uniform {
                lo: -bound,
                up: bound,
            },
        )?;
        Ok(Self { weight, bias })
    }

    /// He-uniform weights and zero bias, for layers followed by a ReLU.
    pub fn kaiming(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Self> {
        let bound = (6.0 / in_dim as f64).sqrt();
        Self::with_init(in_dim, out_dim, Init::Uniform { lo: -bound, up: bound }, Init::Const(0.0), vb)
    }

    pub fn with_init(
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Init,
        vb: VarBuilder,
    ) -> Result<Self> {
        let weight = vb.get_with_hints((out_dim, in_dim), "weight", weight_init)?;
        let bias = vb.get_with_hints(out_dim, "bias", bias_init)?;
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dim(0).expect("rank-2 weight")
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / in_dim;
        let y = x
            .reshape((rows, in_dim))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        y.reshape(out_dims)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        normalize_last(x, self.eps)?
            .broadcast_mul(&self.gamma)?
            .broadcast_add(&self.beta)
    }
}

/// `(x - mean) / sqrt(var + eps)` over the last dimension, as one fused op.
pub fn normalize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Normalize { eps })
}

struct Normalize {
    eps: f64,
}

/// Input gradient of [`Normalize`]; arguments are the input and the output gradient.
struct NormalizeGrad {
    eps: f64,
}

fn row_stats<T: WithDType>(row: &[T], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn normalize_kernel<T: WithDType>(x: &[T], dim: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(dim) {
        let (mean, inv) = row_stats(row, eps);
        out.extend(row.iter().map(|v| T::from_f64((v.to_f64() - mean) * inv)));
    }
    out
}

/// `dx = inv · (g − mean(g) − x̂ · mean(g · x̂))` per row.
fn normalize_grad_kernel<T: WithDType>(x: &[T], g: &[T], dim: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let n = dim as f64;
    for (row, grow) in x.chunks_exact(dim).zip(g.chunks_exact(dim)) {
        let (mean, inv) = row_stats(row, eps);
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for (v, gv) in row.iter().zip(grow) {
            let xhat = (v.to_f64() - mean) * inv;
            g_mean += gv.to_f64();
            gx_mean += gv.to_f64() * xhat;
        }
        g_mean /= n;
        gx_mean /= n;
        out.extend(row.iter().zip(grow).map(|(v, gv)| {
            let xhat = (v.to_f64() - mean) * inv;
            T::from_f64(inv * (gv.to_f64() - g_mean - xhat * gx_mean))
        }));
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op expects contiguous input".into()))?;
    Ok(&v[a..b])
}

fn last_dim(l: &Layout) -> Result<usize> {
    l.shape()
        .dims()
        .last()
        .copied()
        .ok_or_else(|| candle_core::Error::Msg("fused op needs rank >= 1".into()))
}

impl CustomOp1 for Normalize {
    fn name(&self) -> &'static str {
        "normalize-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let dim = last_dim(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(normalize_kernel(contiguous_slice(v, l)?, dim, self.eps)),
            CpuStorage::F64(v) => CpuStorage::F64(normalize_kernel(contiguous_slice(v, l)?, dim, self.eps)),
            _ => candle_core::bail!("normalize supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad_res.contiguous()?, &NormalizeGrad { eps: self.eps })?))
    }
}

impl CustomOp2 for NormalizeGrad {
    fn name(&self) -> &'static str {
        "normalize-last-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dim = last_dim(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(normalize_grad_kernel(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dim, self.eps))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(normalize_grad_kernel(contiguous_slice(x, l1)?, contiguous_slice(g, l2)?, dim, self.eps))
            }
            _ => candle_core::bail!("normalize grad supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], vb: VarBuilder) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(w[0], w[1], vb.pp(format!("layers.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Linear>) -> Self {
        Self { layers }
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Multi-head scaled dot-product attention with separate query/key/value inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        assert_eq!(dim % heads, 0, "dim must be divisible by heads");
        Ok(Self {
            q: Linear::new(dim, dim, vb.pp("q"))?,
            k: Linear::new(dim, dim, vb.pp("k"))?,
            v: Linear::new(dim, dim, vb.pp("v"))?,
            out: Linear::new(dim, dim, vb.pp("out"))?,
            heads,
        })
    }

    /// `query: (B, Tq, d)`, `key`/`value: (B, Tk, d)` -> `(B, Tq, d)`.
    pub fn forward(&self, query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
        self.forward_biased(query, key, value, None)
    }

    /// As [`MultiHeadAttention::forward`], with a bias broadcastable to
    /// `(B, heads, Tq, Tk)` added to the attention logits before the softmax.
    pub fn forward_biased(&self, query: &Tensor, key: &Tensor, value: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, tq, d) = query.dims3()?;
        let tk = key.dim(1)?;
        let hd = d / self.heads;
        let split = |x: Tensor, t: usize| -> Result<Tensor> {
            x.reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = (split(self.q.forward(query)?, tq)? * (1.0 / (hd as f64).sqrt()))?;
        let k = split(self.k.forward(key)?, tk)?;
        let v = split(self.v.forward(value)?, tk)?;
        let logits = q.matmul(&k.t()?)?;
        let logits = match bias {
            Some(b) => logits.broadcast_add(b)?,
            None => logits,
        };
        let attn = softmax_last(&logits)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, tq, d))?;
        self.out.forward(&ctx)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Softmax)
}

struct Softmax;

fn softmax_kernel<T: WithDType>(x: &[T], dim: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(dim) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for v in row {
            let e = (v.to_f64() - max).exp();
            sum += e;
            out.push(T::from_f64(e));
        }
        for o in &mut out[start..] {
            *o = T::from_f64(o.to_f64() / sum);
        }
    }
    out
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let dim = last_dim(l)?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(softmax_kernel(contiguous_slice(v, l)?, dim)),
            CpuStorage::F64(v) => CpuStorage::F64(softmax_kernel(contiguous_slice(v, l)?, dim)),
            _ => candle_core::bail!("softmax supports f32 and f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    /// `dx = y ⊙ (g − Σ g ⊙ y)`.
    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> Result<Option<Tensor>> {
        let dot = (grad_res * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some((grad_res.broadcast_sub(&dot)? * res)?))
    }
}

/// `log(1 + exp(x))` without overflow: `max(x, 0) + log(1 + exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let neg_abs = (x.abs()? * -1.0)?;
    pos + (neg_abs.exp()? + 1.0)?.log()?
}

/// Sine/cosine encoding of normalized coordinates. Each of the `k` input
/// coordinates in the last dimension becomes `feats` features.
pub fn sine_embed(coords: &Tensor, feats: usize) -> Result<Tensor> {
    assert!(feats % 2 == 0);
    let dims = coords.dims().to_vec();
    let k = *dims.last().unwrap();
    let half = feats / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| 2.0 * std::f64::consts::PI * 10000f64.powf(-(i as f64) / half as f64) * 10.0)
        .collect();
    let freqs = Tensor::from_vec(freqs, half, coords.device())?.to_dtype(coords.dtype())?;
    let mut shape = dims.clone();
    shape.push(1);
    let scaled = coords.reshape(shape)?.broadcast_mul(&freqs)?;
    let emb = Tensor::cat(&[scaled.sin()?, scaled.cos()?], D::Minus1)?;
    let mut out = dims[..dims.len() - 1].to_vec();
    out.push(k * feats);
    emb.reshape(out)
}

/// Fixed 2D sine positional encoding for an `h x w` grid, shape `(h*w, d)`.
pub fn grid_position_encoding(h: usize, w: usize, d: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut coords = Vec::with_capacity(h * w * 2);
    for y in 0..h {
        for x in 0..w {
            coords.push((y as f64 + 0.5) / h as f64);
            coords.push((x as f64 + 0.5) / w as f64);
        }
    }
    let coords = Tensor::from_vec(coords, (h * w, 2), dev)?.to_dtype(dtype)?;
    sine_embed(&coords, d / 2)
}

/// `log(x / (1 - x))` with clamping away from 0 and 1.
pub fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-5, 1.0 - 1e-5);
    (x / (1.0 - x)).ln()
}
