//! Versioned binary checkpoints for fitted models.
//!
//! Layout: the 8-byte magic `STGINCK1`, a little-endian `u32` format version,
//! a `u64` manifest length, the JSON manifest, then every parameter's values
//! as little-endian `f64` in manifest order. Nothing time-dependent is stored,
//! so saving the same model twice gives identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::NormalizationParams;
use crate::error::{Error, Result};
use crate::io::write_file;
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor2D;
use crate::train::FittedModel;

pub const MAGIC: &[u8; 8] = b"STGINCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelConfig,
    pub seed: u64,
    pub norm: NormalizationParams,
    pub window_length: usize,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn to_bytes(model: &FittedModel) -> Result<Vec<u8>> {
    let manifest = Manifest {
        model: model.params.config().clone(),
        seed: model.params.seed(),
        norm: model.norm,
        window_length: model.window_length,
        params: model
            .params
            .params()
            .iter()
            .map(|p| ParamEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols() })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * model.params.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.params() {
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("take returns exactly N bytes"))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<FittedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(r.array("version")?);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let len = u64::from_le_bytes(r.array("manifest length")?);
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest length overflows".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(r.take(len, "manifest")?).map_err(|e| Error::Checkpoint(format!("manifest: {e}")))?;
    let mut named = Vec::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        let count = entry.rows.checked_mul(entry.cols).ok_or_else(|| Error::Checkpoint("shape overflows".into()))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflows".into()))?, &entry.name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        named.push((entry.name.clone(), Tensor2D::from_vec(entry.rows, entry.cols, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if manifest.window_length == 0 {
        return Err(Error::Checkpoint("window length must be positive".into()));
    }
    let params = ModelParams::from_parts(manifest.model, manifest.seed, named)?;
    Ok(FittedModel { params, norm: manifest.norm, window_length: manifest.window_length })
}

pub fn save(model: &FittedModel, path: &Path) -> Result<()> {
    write_file(path, &to_bytes(model)?)
}

pub fn load(path: &Path) -> Result<FittedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormScheme;

    fn model() -> FittedModel {
        let params = ModelParams::init(&ModelConfig { gat_width: 3, hidden: 4, ..ModelConfig::default() }, 9).unwrap();
        let norm = NormalizationParams { scheme: NormScheme::MinMax, offset: 12.5, scale: 61.25 };
        FittedModel { params, norm, window_length: 24 }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.params.params().iter().zip(m.params.params()) {
            assert!(a.value.as_slice().iter().zip(b.value.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&model()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(Error::Checkpoint(_))));
    }
}
