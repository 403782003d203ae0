//! Named parameter stores and checkpoint files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use safetensors::tensor::{Dtype as StDtype, TensorView};

use crate::error::{Error, Result};

/// Every learnable tensor of one model copy, addressed by a stable dotted name.
#[derive(Clone)]
pub struct ModelParams {
    varmap: VarMap,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("tensors", &self.names().len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::new()
    }
}

impl ModelParams {
    pub fn new() -> Self {
        Self { varmap: VarMap::new() }
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Builder that creates missing tensors from a seeded generator keyed by
    /// tensor name, so initial weights depend only on `(seed, name)`.
    /// Existing tensors are reused.
    pub fn var_builder(&self, seed: u64, dtype: DType) -> VarBuilder<'static> {
        let backend = SeededBackend {
            varmap: self.varmap.clone(),
            seed,
        };
        VarBuilder::from_backend(Box::new(backend), dtype, Device::Cpu)
    }

    /// `(name, var)` pairs sorted by name.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().expect("parameter lock");
        let mut out: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named_vars().into_iter().map(|(k, _)| k).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().expect("parameter lock").get(name).cloned()
    }

    pub fn num_elements(&self) -> usize {
        self.named_vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Independent copy with freshly allocated tensors.
    pub fn deep_clone(&self) -> Result<Self> {
        let out = Self::new();
        {
            let mut data = out.varmap.data().lock().expect("parameter lock");
            for (name, var) in self.named_vars() {
                data.insert(name, Var::from_tensor(&var.as_tensor().copy()?)?);
            }
        }
        Ok(out)
    }

    fn check_same_names(&self, other: &ModelParams) -> Result<()> {
        let a = self.names();
        let b = other.names();
        if a != b {
            let missing: Vec<_> = a.iter().filter(|n| !b.contains(n)).take(3).collect();
            let extra: Vec<_> = b.iter().filter(|n| !a.contains(n)).take(3).collect();
            return Err(Error::ParamMismatch(format!(
                "{} vs {} tensors; only in first: {missing:?}; only in second: {extra:?}",
                a.len(),
                b.len()
            )));
        }
        Ok(())
    }

    /// Overwrites every tensor with the value of the same name in `other`.
    pub fn copy_from(&self, other: &ModelParams) -> Result<()> {
        self.check_same_names(other)?;
        for ((_, dst), (_, src)) in self.named_vars().iter().zip(other.named_vars()) {
            dst.set(&src.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// Sets tensors from a name map; every parameter must be present with the same shape.
    pub fn load_tensors(&self, tensors: &HashMap<String, Tensor>, what: &str) -> Result<()> {
        for (name, var) in self.named_vars() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::ParamMismatch(format!("{what}: missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ParamMismatch(format!(
                    "{what}: {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<(String, Tensor)> {
        self.named_vars()
            .into_iter()
            .map(|(k, v)| (k, v.as_tensor().clone()))
            .collect()
    }
}

struct SeededBackend {
    varmap: VarMap,
    seed: u64,
}

fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    ChaCha8Rng::from_seed(digest.into())
}

fn init_values(init: Init, n: usize, rng: &mut ChaCha8Rng) -> candle_core::Result<Vec<f64>> {
    Ok(match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..=up)).collect(),
        Init::Randn { mean, stdev } => {
            let dist = Normal::new(mean, stdev).map_err(|e| candle_core::Error::Msg(e.to_string()))?;
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Kaiming { .. } => candle_core::bail!("kaiming init is not used by this crate"),
    })
}

impl SimpleBackend for SeededBackend {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let mut data = self.varmap.data().lock().expect("parameter lock");
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {:?}", var.shape(), s);
            }
            return var.as_tensor().to_dtype(dtype);
        }
        let values = init_values(h, s.elem_count(), &mut name_rng(self.seed, name))?;
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        candle_core::bail!("no shape known for {name}")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.varmap.data().lock().expect("parameter lock").contains_key(name)
    }
}

/// `θ_t ← α·θ_t + (1−α)·θ_s` for every named tensor. The result is clamped to
/// the interval spanned by the two inputs so rounding never leaves it.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("ema alpha {alpha} outside [0, 1]")));
    }
    teacher.check_same_names(student)?;
    for ((_, t), (_, s)) in teacher.named_vars().iter().zip(student.named_vars()) {
        let (tv, sv) = (t.as_tensor(), s.as_tensor());
        let mixed = ((tv * alpha)? + (sv * (1.0 - alpha))?)?;
        let lo = tv.minimum(sv)?;
        let hi = tv.maximum(sv)?;
        t.set(&mixed.maximum(&lo)?.minimum(&hi)?)?;
    }
    Ok(())
}

fn to_bytes(t: &Tensor) -> Result<(StDtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            StDtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            StDtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Writes named tensors plus string metadata as one safetensors file.
pub fn write_tensor_file(path: &Path, tensors: &[(String, Tensor)], metadata: BTreeMap<String, String>) -> Result<()> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let encoded: Vec<(String, StDtype, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(name, t)| {
            let (dtype, bytes) = to_bytes(t)?;
            Ok((name.clone(), dtype, t.dims().to_vec(), bytes))
        })
        .collect::<Result<_>>()?;
    let views = encoded
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| bad(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(views, Some(metadata.into_iter().collect()))
        .map_err(|e| bad(e.to_string()))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    // Write to a sibling temp file first so an interrupted run never leaves a torn checkpoint.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads every tensor and the metadata map of a safetensors file.
pub fn read_tensor_file(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    let bad = |message: String| Error::Checkpoint {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F32 => {
                let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, device)?
            }
            StDtype::F64 => {
                let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => return Err(bad(format!("unsupported dtype {other:?} for {name}"))),
        };
        out.insert(name, t);
    }
    Ok((out, meta.metadata().clone().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::{Init, VarBuilder};

    fn params(values: &[f64]) -> ModelParams {
        let p = ModelParams::new();
        let vb = VarBuilder::from_varmap(p.varmap(), DType::F64, &Device::Cpu);
        let t = vb.get_with_hints(values.len(), "w", Init::Const(0.0)).unwrap();
        let _ = t;
        p.get("w").unwrap().set(&Tensor::new(values, &Device::Cpu).unwrap()).unwrap();
        p
    }

    fn values(p: &ModelParams) -> Vec<f64> {
        p.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap()
    }

    #[test]
    fn ema_endpoints() {
        let s = params(&[0.0, 5.0, -2.0]);
        let t = params(&[1.0, 1.0, 1.0]);
        ema_update(&t, &s, 1.0).unwrap();
        assert_eq!(values(&t), vec![1.0, 1.0, 1.0]);
        ema_update(&t, &s, 0.999).unwrap();
        assert_eq!(values(&t)[0], 0.999);
        ema_update(&t, &s, 0.0).unwrap();
        assert_eq!(values(&t), values(&s));
    }

    #[test]
    fn ema_rejects_name_mismatch() {
        let a = params(&[1.0]);
        let b = ModelParams::new();
        let vb = VarBuilder::from_varmap(b.varmap(), DType::F64, &Device::Cpu);
        vb.get_with_hints(1, "other", Init::Const(0.0)).unwrap();
        assert!(matches!(ema_update(&a, &b, 0.5), Err(Error::ParamMismatch(_))));
    }

    #[test]
    fn deep_clone_is_independent() {
        let a = params(&[1.0, 2.0]);
        let b = a.deep_clone().unwrap();
        a.get("w").unwrap().set(&Tensor::new(&[9.0f64, 9.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(values(&b), vec![1.0, 2.0]);
    }

    #[test]
    fn seeded_builder_is_reproducible() {
        let build = |seed| {
            let p = ModelParams::new();
            let vb = p.var_builder(seed, DType::F32);
            vb.get_with_hints(5, "a.w", Init::Uniform { lo: -1.0, up: 1.0 }).unwrap();
            vb.get_with_hints(3, "b.w", Init::Randn { mean: 0.0, stdev: 1.0 }).unwrap();
            p
        };
        let v = |p: &ModelParams, n: &str| p.get(n).unwrap().as_tensor().to_vec1::<f32>().unwrap();
        let (a, b, c) = (build(1), build(1), build(2));
        assert_eq!(v(&a, "a.w"), v(&b, "a.w"));
        assert_eq!(v(&a, "b.w"), v(&b, "b.w"));
        assert_ne!(v(&a, "a.w"), v(&c, "a.w"));
    }

    #[test]
    fn tensor_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let t32 = Tensor::new(&[[1.5f32, -0.25], [3.0, 1e-30]], &Device::Cpu).unwrap();
        let t64 = Tensor::new(&[0.1f64, 0.2], &Device::Cpu).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("k".to_string(), "v".to_string());
        write_tensor_file(&path, &[("a".into(), t32.clone()), ("b".into(), t64.clone())], meta).unwrap();
        let (tensors, meta) = read_tensor_file(&path, &Device::Cpu).unwrap();
        assert_eq!(meta["k"], "v");
        assert_eq!(tensors["a"].to_vec2::<f32>().unwrap(), t32.to_vec2::<f32>().unwrap());
        assert_eq!(tensors["b"].to_vec1::<f64>().unwrap(), t64.to_vec1::<f64>().unwrap());
    }
}
