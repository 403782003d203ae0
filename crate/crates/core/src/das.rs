//! Dataset-level prototype memory and the cross-domain contrastive loss
//! computed against it.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};

use crate::cpa::ClassPrototypes;
use crate::error::{Error, Result};

/// Running class means over every query embedding folded in so far, from both
/// domains. Kept in `f64` on the host; it never receives gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPrototypes {
    values: Vec<f64>,
    counts: Vec<u64>,
    dim: usize,
}

const MAGIC: &[u8; 8] = b"DATRMEM\0";
const VERSION: u32 = 1;

impl DatasetPrototypes {
    pub fn new(num_classes: usize, dim: usize) -> Self {
        Self {
            values: vec![0.0; num_classes * dim],
            counts: vec![0; num_classes],
            dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.dim..(c + 1) * self.dim]
    }

    pub fn present(&self) -> Vec<bool> {
        self.counts.iter().map(|&n| n > 0).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&n| n == 0)
    }

    /// Folds one batch of prototypes in as a count-weighted mean. Classes
    /// absent from the batch are untouched.
    pub fn update(&mut self, batch: &ClassPrototypes) -> Result<()> {
        let rows = batch.values_f64()?;
        if rows.len() != self.num_classes() || rows.first().is_some_and(|r| r.len() != self.dim) {
            return Err(Error::InvalidInput(format!(
                "batch prototypes are {}x{}, memory is {}x{}",
                rows.len(),
                rows.first().map_or(0, Vec::len),
                self.num_classes(),
                self.dim
            )));
        }
        for (c, row) in rows.iter().enumerate() {
            let nb = batch.counts[c] as u64;
            if nb == 0 {
                continue;
            }
            let n = self.counts[c];
            let total = (n + nb) as f64;
            let dim = self.dim;
            for (m, &p) in self.values[c * dim..(c + 1) * dim].iter_mut().zip(row) {
                *m = (p * nb as f64 + *m * n as f64) / total;
            }
            self.counts[c] = n + nb;
        }
        Ok(())
    }

    /// `(C, d)` constant tensor of the current means.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (self.num_classes(), self.dim), device)?.to_dtype(dtype)?)
    }

    pub fn persist(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + self.counts.len() * 8 + self.values.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.num_classes() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for &n in &self.counts {
            buf.extend_from_slice(&n.to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn restore(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::MemoryFile {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 28 {
            return Err(bad(format!("file is {} bytes, too short for a header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("not a prototype memory file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("version {version}, expected {VERSION}")));
        }
        let c = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let expected = c
            .checked_mul(d)
            .and_then(|cd| cd.checked_add(c))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(28))
            .ok_or_else(|| bad("header sizes overflow".into()))?;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes for {c}x{d}, found {}", bytes.len())));
        }
        let words = |start: usize, n: usize| bytes[start..start + n * 8].chunks_exact(8).map(|w| <[u8; 8]>::try_from(w).unwrap());
        let counts = words(28, c).map(u64::from_le_bytes).collect();
        let values = words(28 + c * 8, c * d).map(f64::from_le_bytes).collect();
        Ok(Self { values, counts, dim: d })
    }
}

/// Returns a new memory with `batch` folded in.
pub fn memory_update(mem: &DatasetPrototypes, batch: &ClassPrototypes) -> Result<DatasetPrototypes> {
    let mut out = mem.clone();
    out.update(batch)?;
    Ok(out)
}

/// One domain's term: over classes `A` present in both the batch and the
/// memory, `−(1/|A|) Σ_i log softmax_j(P_j · M_i)` evaluated at `j = i`.
fn domain_term(protos: &ClassPrototypes, mem: &DatasetPrototypes, memory: &Tensor, temperature: f64) -> Result<Option<Tensor>> {
    let mem_present = mem.present();
    let active: Vec<u32> = (0..protos.num_classes())
        .filter(|&c| protos.present[c] && mem_present[c])
        .map(|c| c as u32)
        .collect();
    let k = active.len();
    if k == 0 {
        return Ok(None);
    }
    let idx = Tensor::from_vec(active, k, protos.values.device())?;
    let p = protos.values.index_select(&idx, 0)?;
    let m = memory.index_select(&idx, 0)?;
    // sim[i][j] = M_i · P_j
    let sim = (m.matmul(&p.t()?)? / temperature)?;
    let max = sim.max_keepdim(D::Minus1)?.detach();
    let shifted = sim.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let eye = Tensor::eye(k, sim.dtype(), sim.device())?;
    let diag = (shifted * eye)?.sum_keepdim(D::Minus1)?;
    let log_prob = (diag - lse)?;
    Ok(Some((log_prob.sum_all()? * (-1.0 / k as f64))?))
}

/// Cross-domain contrastive loss of both domains' batch prototypes against
/// the dataset memory. `temperature` divides the raw dot products; pass 1.0
/// for none. A domain with no eligible class contributes 0.
pub fn contrastive_loss(
    src: &ClassPrototypes,
    tgt: &ClassPrototypes,
    mem: &DatasetPrototypes,
    temperature: f64,
) -> Result<Tensor> {
    if src.num_classes() != mem.num_classes() || tgt.num_classes() != mem.num_classes() {
        return Err(Error::InvalidInput("prototype and memory class counts differ".into()));
    }
    let dtype = src.values.dtype();
    let device = src.values.device();
    let memory = mem.to_tensor(dtype, device)?;
    let mut loss = Tensor::zeros((), dtype, device)?;
    for protos in [src, tgt] {
        if let Some(term) = domain_term(protos, mem, &memory, temperature)? {
            loss = (loss + term)?;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpa::DomainLabel;

    fn protos(rows: &[&[f64]], counts: &[usize], domain: DomainLabel) -> ClassPrototypes {
        let d = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        ClassPrototypes {
            values: Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu).unwrap(),
            counts: counts.to_vec(),
            present: counts.iter().map(|&n| n > 0).collect(),
            domain,
        }
    }

    fn scalar(t: Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn first_update_copies() {
        let mut mem = DatasetPrototypes::new(2, 2);
        mem.update(&protos(&[&[1.0, 2.0], &[0.0, 0.0]], &[3, 0], DomainLabel::Source)).unwrap();
        assert_eq!(mem.row(0), &[1.0, 2.0]);
        assert_eq!(mem.counts(), &[3, 0]);
        assert_eq!(mem.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn single_class_is_zero() {
        let mut mem = DatasetPrototypes::new(3, 2);
        mem.update(&protos(&[&[1.0, 1.0], &[0.5, 2.0], &[0.0, 0.0]], &[1, 1, 0], DomainLabel::Source)).unwrap();
        let s = protos(&[&[4.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]], &[2, 0, 0], DomainLabel::Source);
        let t = protos(&[&[0.0, 0.0], &[9.0, -3.0], &[0.0, 0.0]], &[0, 5, 0], DomainLabel::Target);
        assert_eq!(scalar(contrastive_loss(&s, &t, &mem, 1.0).unwrap()), 0.0);
    }

    #[test]
    fn uniform_similarity_is_two_ln_c() {
        let mut mem = DatasetPrototypes::new(4, 3);
        let row: &[f64] = &[0.3, -0.2, 0.5];
        let p = protos(&[row, row, row, row], &[1, 1, 1, 1], DomainLabel::Source);
        mem.update(&p).unwrap();
        let l = scalar(contrastive_loss(&p, &p, &mem, 1.0).unwrap());
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_expanded_two_class_case() {
        let mut mem = DatasetPrototypes::new(2, 1);
        mem.update(&protos(&[&[3.0], &[-3.0]], &[1, 1], DomainLabel::Source)).unwrap();
        let s = protos(&[&[2.0], &[0.0]], &[1, 1], DomainLabel::Source);
        let t = protos(&[&[1.0], &[1.0]], &[1, 1], DomainLabel::Target);
        // Source rows: [6, 0] and [-6, 0]; target rows: [3, 3] and [-3, -3].
        let src = -0.5 * ((6.0 - (6f64.exp() + 1.0).ln()) + (0.0 - ((-6f64).exp() + 1.0).ln()));
        let tgt = -0.5 * ((3.0 - (2.0 * 3f64.exp()).ln()) + (-3.0 - (2.0 * (-3f64).exp()).ln()));
        let l = scalar(contrastive_loss(&s, &t, &mem, 1.0).unwrap());
        assert!((l - (src + tgt)).abs() < 1e-12, "{l} vs {}", src + tgt);
    }

    #[test]
    fn persist_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.bin");
        let mut mem = DatasetPrototypes::new(3, 2);
        mem.update(&protos(&[&[0.1, 1e-300], &[0.0, 0.0], &[-7.25, 3.0]], &[5, 0, u32::MAX as usize + 3], DomainLabel::Target))
            .unwrap();
        mem.persist(&path).unwrap();
        let back = DatasetPrototypes::restore(&path).unwrap();
        assert_eq!(back, mem);
        assert_eq!(back.counts()[2], u32::MAX as u64 + 3);

        fs::write(&path, b"").unwrap();
        assert!(DatasetPrototypes::restore(&path).is_err());

        mem.persist(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        fs::write(&path, bytes).unwrap();
        let err = DatasetPrototypes::restore(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }
}
