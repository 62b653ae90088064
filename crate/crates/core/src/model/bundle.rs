//! Model bundle directory: `config.json`, `weights.bin`, `curve.csv`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Params, Tensor, TENSOR_NAMES};
use super::train::EpochRecord;
use super::{ModelConfig, ModelError, TrainConfig, TrainedModel};
use crate::features::BlockLayout;
use crate::scalar::{Real, Scalar};
use crate::util::sha256_hex;

pub const BUNDLE_VERSION: u32 = 1;
pub const WEIGHTS_MAGIC: &[u8; 8] = b"SDOHWTS\0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    /// Scalar type the model was trained in.
    pub scalar: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub layout: BlockLayout,
    pub tensors: Vec<TensorInfo>,
    pub selected_epoch: usize,
    pub weights_sha256: String,
}

/// Weights are stored as little-endian f64: magic, u32 version, u32 tensor
/// count, then per tensor a u16-length name, u8 rank, u32 dims, and values.
fn encode_weights<T: Real>(params: &Params<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + params.len() * 8);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for (name, t) in TENSOR_NAMES.iter().zip(&params.tensors) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&Scalar::to_f64(*v).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.at.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| ModelError::Corrupt("weights file is truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn decode_weights<T: Real>(
    bytes: &[u8],
    expected: &[Vec<usize>; 7],
) -> Result<Params<T>, ModelError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != WEIGHTS_MAGIC {
        return Err(ModelError::Corrupt("bad weights magic".into()));
    }
    let version = r.u32()?;
    if version != BUNDLE_VERSION {
        return Err(ModelError::Incompatible {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let count = r.u32()? as usize;
    if count != TENSOR_NAMES.len() {
        return Err(ModelError::LayoutMismatch(format!(
            "{count} tensors, expected {}",
            TENSOR_NAMES.len()
        )));
    }
    let mut params = Params::<T>::zeros(&super::Dims {
        buckets: 0,
        d_enc: 0,
        d_static: 0,
        c1: 0,
        c2: 0,
        kernel: 0,
        outputs: 0,
    });
    for (i, name) in TENSOR_NAMES.iter().enumerate() {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let got =
            std::str::from_utf8(r.take(len)?).map_err(|e| ModelError::Corrupt(e.to_string()))?;
        if got != *name {
            return Err(ModelError::LayoutMismatch(format!(
                "tensor {i} is `{got}`, expected `{name}`"
            )));
        }
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != expected[i] {
            return Err(ModelError::LayoutMismatch(format!(
                "`{name}` has shape {shape:?}, config implies {:?}",
                expected[i]
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Corrupt("tensor too large".into()))?,
        )?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(ModelError::Corrupt(format!("non-finite value in `{name}`")));
            }
            data.push(T::from_f64_lossy(v));
        }
        params.tensors[i] = Tensor { shape, data };
    }
    if r.at != bytes.len() {
        return Err(ModelError::Corrupt("trailing bytes after weights".into()));
    }
    Ok(params)
}

pub fn export_model<T: Real>(
    m: &TrainedModel<T>,
    dir: impl AsRef<Path>,
) -> Result<BundleManifest, ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let weights = encode_weights(&m.params);
    let manifest = BundleManifest {
        format_version: BUNDLE_VERSION,
        scalar: T::NAME.into(),
        model: m.config.clone(),
        train: m.train_config.clone(),
        layout: m.config.layout(),
        tensors: TENSOR_NAMES
            .iter()
            .zip(&m.params.tensors)
            .map(|(n, t)| TensorInfo {
                name: n.to_string(),
                shape: t.shape.clone(),
            })
            .collect(),
        selected_epoch: m.selected_epoch,
        weights_sha256: sha256_hex(&weights),
    };
    fs::write(dir.join("weights.bin"), &weights)?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    let mut w =
        csv::Writer::from_path(dir.join("curve.csv")).map_err(|e| ModelError::Io(e.into()))?;
    for rec in &m.curve {
        w.serialize(rec).map_err(|e| ModelError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(manifest)
}

pub fn import_model<T: Real>(dir: impl AsRef<Path>) -> Result<TrainedModel<T>, ModelError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("config.json"))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ModelError::Corrupt(format!("config.json: {e}")))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if version != BUNDLE_VERSION {
        return Err(ModelError::Incompatible {
            found: version,
            expected: BUNDLE_VERSION,
        });
    }
    let manifest: BundleManifest = serde_json::from_value(value)
        .map_err(|e| ModelError::Corrupt(format!("config.json: {e}")))?;
    manifest
        .model
        .validate()
        .map_err(|e| ModelError::LayoutMismatch(e.to_string()))?;
    let layout = manifest.model.layout();
    if manifest.layout != layout {
        return Err(ModelError::LayoutMismatch(format!(
            "recorded layout {:?} differs from the layout implied by the config {layout:?}",
            manifest.layout
        )));
    }
    let expected = manifest.model.dims().shapes();
    for (info, shape) in manifest.tensors.iter().zip(&expected) {
        if &info.shape != shape {
            return Err(ModelError::LayoutMismatch(format!(
                "`{}` recorded as {:?}, config implies {shape:?}",
                info.name, info.shape
            )));
        }
    }
    let weights = fs::read(dir.join("weights.bin"))?;
    if sha256_hex(&weights) != manifest.weights_sha256 {
        return Err(ModelError::Corrupt("weights checksum mismatch".into()));
    }
    let params = decode_weights(&weights, &expected)?;
    let mut rdr = csv::Reader::from_path(dir.join("curve.csv"))
        .map_err(|e| ModelError::Corrupt(e.to_string()))?;
    let curve = rdr
        .deserialize::<EpochRecord>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ModelError::Corrupt(format!("curve.csv: {e}")))?;
    Ok(TrainedModel {
        config: manifest.model,
        train_config: manifest.train,
        params,
        curve,
        selected_epoch: manifest.selected_epoch,
    })
}
