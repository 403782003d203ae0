//! Four-block convolutional backbone working in channels-last layout.
//!
//! Each block downsamples with a non-overlapping patch convolution, then adds a
//! residual depthwise 3x3 + pointwise branch. Block strides are 4, 2, 2, 1, so
//! the second block yields stride-8 features and the fourth stride-16 features.

use candle_core::{CpuStorage, CustomOp2, Layout, Module, Result, Shape, Tensor, WithDType};
use candle_nn::{Init, VarBuilder};

use super::layers::Linear;

/// `k x k` convolution with stride `k`, expressed as a patch reshape plus matmul.
#[derive(Debug, Clone)]
struct PatchConv {
    proj: Linear,
    k: usize,
}

impl PatchConv {
    fn new(in_c: usize, out_c: usize, k: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: Linear::kaiming(in_c * k * k, out_c, vb)?,
            k,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let k = self.k;
        if k == 1 {
            return self.proj.forward(x);
        }
        let (oh, ow) = (h / k, w / k);
        // (b, oh, k, ow, k, c) -> (b, oh, ow, k, k, c)
        let patches = x
            .reshape((b * oh, k, ow, k * c))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, oh, ow, k * k * c))?;
        self.proj.forward(&patches)
    }
}

/// Per-channel 3x3 convolution with zero padding, channels-last.
#[derive(Debug, Clone)]
struct Depthwise3x3 {
    weight: Tensor, // (9, c), tap-major
    bias: Tensor,   // (c)
}

impl Depthwise3x3 {
    fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        let bound = 1.0 / 3.0;
        Ok(Self {
            weight: vb.get_with_hints((9, c), "weight", Init::Uniform { lo: -bound, up: bound })?,
            bias: vb.get_with_hints(c, "bias", Init::Const(0.0))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise3x3(x, &self.weight)?.broadcast_add(&self.bias)
    }
}

/// `(B, H, W, C)` input, `(9, C)` taps -> `(B, H, W, C)`.
pub fn depthwise3x3(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op2(&weight.contiguous()?, DepthwiseConv)
}

struct DepthwiseConv;
struct DepthwiseWeightGrad;

fn contiguous<'a, T>(v: &'a [T], l: &Layout) -> Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("depthwise conv expects contiguous tensors".into()))?;
    Ok(&v[a..b])
}

fn conv_kernel<T: WithDType>(x: &[T], w: &[T], (b, h, wd, c): (usize, usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); b * h * wd * c];
    for n in 0..b {
        for y in 0..h {
            for dy in 0..3 {
                let Some(yy) = (y + dy).checked_sub(1).filter(|&v| v < h) else { continue };
                for xo in 0..wd {
                    let o = &mut out[((n * h + y) * wd + xo) * c..][..c];
                    for dx in 0..3 {
                        let Some(xx) = (xo + dx).checked_sub(1).filter(|&v| v < wd) else { continue };
                        let i = &x[((n * h + yy) * wd + xx) * c..][..c];
                        let k = &w[(dy * 3 + dx) * c..][..c];
                        for ((o, &i), &k) in o.iter_mut().zip(i).zip(k) {
                            *o += i * k;
                        }
                    }
                }
            }
        }
    }
    out
}

/// `g[t, c] = Σ x[n, y+dy-1, x+dx-1, c] · grad[n, y, x, c]`.
fn weight_grad_kernel<T: WithDType>(x: &[T], g: &[T], (b, h, wd, c): (usize, usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); 9 * c];
    for n in 0..b {
        for y in 0..h {
            for dy in 0..3 {
                let Some(yy) = (y + dy).checked_sub(1).filter(|&v| v < h) else { continue };
                for xo in 0..wd {
                    let gr = &g[((n * h + y) * wd + xo) * c..][..c];
                    for dx in 0..3 {
                        let Some(xx) = (xo + dx).checked_sub(1).filter(|&v| v < wd) else { continue };
                        let i = &x[((n * h + yy) * wd + xx) * c..][..c];
                        let o = &mut out[(dy * 3 + dx) * c..][..c];
                        for ((o, &i), &gr) in o.iter_mut().zip(i).zip(gr) {
                            *o += i * gr;
                        }
                    }
                }
            }
        }
    }
    out
}

fn dims4(l: &Layout) -> Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp2 for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(conv_kernel(contiguous(x, l1)?, contiguous(w, l2)?, dims)),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(conv_kernel(contiguous(x, l1)?, contiguous(w, l2)?, dims)),
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        // The input gradient is the same convolution with the taps mirrored.
        let flip = Tensor::from_vec((0..9u32).rev().collect::<Vec<_>>(), 9, w.device())?;
        let grad_x = depthwise3x3(grad, &w.index_select(&flip, 0)?)?;
        let grad_w = x.apply_op2_no_bwd(&grad.contiguous()?, &DepthwiseWeightGrad)?;
        Ok((Some(grad_x), Some(grad_w)))
    }
}

impl CustomOp2 for DepthwiseWeightGrad {
    fn name(&self) -> &'static str {
        "depthwise3x3-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = dims4(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => CpuStorage::F32(weight_grad_kernel(contiguous(x, l1)?, contiguous(g, l2)?, dims)),
            (CpuStorage::F64(x), CpuStorage::F64(g)) => CpuStorage::F64(weight_grad_kernel(contiguous(x, l1)?, contiguous(g, l2)?, dims)),
            _ => candle_core::bail!("depthwise weight grad supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((9, dims.3))))
    }
}

#[derive(Debug, Clone)]
struct Block {
    down: PatchConv,
    dw: Depthwise3x3,
    pw: Linear,
}

impl Block {
    fn new(in_c: usize, out_c: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            down: PatchConv::new(in_c, out_c, stride, vb.pp("down"))?,
            dw: Depthwise3x3::new(out_c, vb.pp("dw"))?,
            pw: Linear::kaiming(out_c, out_c, vb.pp("pw"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = self.down.forward(x)?.relu()?;
        let branch = self.pw.forward(&self.dw.forward(&x)?.relu()?)?;
        (x + branch)?.relu()
    }
}

pub const BLOCK_STRIDES: [usize; 4] = [4, 2, 2, 1];

#[derive(Debug, Clone)]
pub struct Backbone {
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(widths: &[usize; 4], vb: VarBuilder) -> Result<Self> {
        let mut in_c = 3;
        let mut blocks = Vec::with_capacity(4);
        for (i, (&w, &s)) in widths.iter().zip(BLOCK_STRIDES.iter()).enumerate() {
            blocks.push(Block::new(in_c, w, s, vb.pp(format!("block{}", i + 1)))?);
            in_c = w;
        }
        Ok(Self { blocks })
    }

    /// `(B, H, W, 3)` -> `[(B, H/8, W/8, c2), (B, H/16, W/16, c4)]`.
    pub fn forward(&self, images: &Tensor) -> Result<[Tensor; 2]> {
        let x = (images - 0.5)?;
        let x = self.blocks[0].forward(&x)?;
        let fine = self.blocks[1].forward(&x)?;
        let x = self.blocks[2].forward(&fine)?;
        let coarse = self.blocks[3].forward(&x)?;
        Ok([fine, coarse])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    /// Same convolution from zero padding and nine shifted slices.
    fn depthwise_reference(x: &Tensor, w: &Tensor) -> Tensor {
        let (_, h, wd, _) = x.dims4().unwrap();
        let padded = x.pad_with_zeros(1, 1, 1).unwrap().pad_with_zeros(2, 1, 1).unwrap();
        let mut acc = x.zeros_like().unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let tap = padded.narrow(1, dy, h).unwrap().narrow(2, dx, wd).unwrap();
                acc = (acc + tap.broadcast_mul(&w.get(dy * 3 + dx).unwrap()).unwrap()).unwrap();
            }
        }
        acc
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn depthwise_matches_reference_with_gradients() {
        let x = Var::from_tensor(&rand_tensor(&[2, 5, 4, 3], 1)).unwrap();
        let w = Var::from_tensor(&rand_tensor(&[9, 3], 2)).unwrap();
        let probe = rand_tensor(&[2, 5, 4, 3], 3);
        let fast = depthwise3x3(&x, &w).unwrap();
        let slow = depthwise_reference(&x, &w);
        let diff = (&fast - &slow).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-12);
        let gf = (fast * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gs = (slow * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w] {
            let a = gf.get(v).unwrap();
            let b = gs.get(v).unwrap();
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d < 1e-12, "{d}");
        }
    }
}
