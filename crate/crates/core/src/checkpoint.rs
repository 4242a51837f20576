//! Named-tensor archive with a JSON manifest and SHA-256 checksums, used for
//! model checkpoints and cached datasets.
//!
//! Layout: magic, `u32` format version, `u64` header length, JSON header,
//! SHA-256 of the header, then each tensor's little-endian payload in
//! manifest order. Every integer is little-endian. Encoding is a pure
//! function of the archive contents, so save → load → save is byte-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DomainSpec, SegSample};
use crate::error::{CheckpointError, Error, Result};
use crate::sparsify::{adapter_inject, lora_inject, StrategyConfig};
use crate::tensor::Tensor;
use crate::unet::{build_unet, Extension, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"DGSTARC\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F64(_) => "f64",
            ArrayData::U8(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    pub fn u8(name: impl Into<String>, shape: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            name: name.into(),
            shape,
            data: ArrayData::U8(data),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.data {
            ArrayData::F64(v) => Tensor::new(self.shape.clone(), v.clone()),
            ArrayData::U8(_) => Err(CheckpointError::Dtype(format!("{} is u8, expected f64", self.name)).into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub metadata: Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<ManifestEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::shape(
                    "archive",
                    a.name.clone(),
                    format!("{:?}", a.shape),
                    a.data.len(),
                ));
            }
            let bytes = a.data.bytes();
            tensors.push(ManifestEntry {
                name: a.name.clone(),
                dtype: a.data.dtype().into(),
                shape: a.shape.clone(),
                offset: payload.len() as u64,
                length: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
            payload.extend_from_slice(&bytes);
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(PREFIX + header.len() + 32 + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let have = bytes.len() as u64;
        let truncated = |needed: usize| CheckpointError::Truncated {
            needed: needed as u64,
            have,
        };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                truncated(PREFIX)
            } else {
                CheckpointError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < PREFIX {
            return Err(truncated(PREFIX));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = usize::try_from(header_len)
            .ok()
            .and_then(|l| l.checked_add(PREFIX))
            .ok_or_else(|| CheckpointError::Manifest(format!("header length {header_len} is implausible")))?;
        let payload_start = header_end
            .checked_add(32)
            .ok_or_else(|| CheckpointError::Manifest("header length overflows".into()))?;
        if bytes.len() < payload_start {
            return Err(truncated(payload_start));
        }
        let header_bytes = &bytes[PREFIX..header_end];
        if Sha256::digest(header_bytes).as_slice() != &bytes[header_end..payload_start] {
            return Err(CheckpointError::Checksum("<manifest>".into()));
        }
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

        let payload = &bytes[payload_start..];
        let mut expected_offset = 0u64;
        let mut arrays = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let (size, dtype_ok) = match e.dtype.as_str() {
                "f64" => (8u64, true),
                "u8" => (1, true),
                _ => (0, false),
            };
            if !dtype_ok {
                return Err(CheckpointError::Dtype(e.dtype));
            }
            let numel = e.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            if numel.and_then(|n| n.checked_mul(size)) != Some(e.length) || e.offset != expected_offset {
                return Err(CheckpointError::Manifest(format!(
                    "inconsistent entry for `{}`",
                    e.name
                )));
            }
            let end = e.offset + e.length;
            if end > payload.len() as u64 {
                return Err(truncated(payload_start + end as usize));
            }
            let raw = &payload[e.offset as usize..end as usize];
            if hex(&Sha256::digest(raw)) != e.sha256 {
                return Err(CheckpointError::Checksum(e.name));
            }
            let data = match size {
                8 => ArrayData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                _ => ArrayData::U8(raw.to_vec()),
            };
            arrays.push(NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            });
            expected_offset = end;
        }
        if expected_offset != payload.len() as u64 {
            return Err(CheckpointError::Manifest(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            )));
        }
        Ok(Self {
            metadata: header.metadata,
            arrays,
        })
    }

    /// Writes through a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Structure needed to rebuild a model before loading its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExtensionSpec {
    Lora { rank: usize },
    Adapter { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub init_seed: u64,
    pub registry_digest: String,
    pub extension: Option<ExtensionSpec>,
    pub strategy: Option<StrategyConfig>,
    pub run_seed: Option<u64>,
}

impl CheckpointMeta {
    pub fn for_model(model: &Model) -> Self {
        Self {
            model: model.config().clone(),
            init_seed: model.seed(),
            registry_digest: model.registry_digest(),
            extension: model.extension().map(|e| match e {
                Extension::Lora { rank, .. } => ExtensionSpec::Lora { rank: *rank },
                Extension::Adapter { width, .. } => ExtensionSpec::Adapter { width: *width },
            }),
            strategy: None,
            run_seed: None,
        }
    }
}

pub fn checkpoint_archive(model: &Model, meta: &CheckpointMeta) -> Result<Archive> {
    if meta.registry_digest != model.registry_digest() {
        return Err(CheckpointError::Digest {
            expected: model.registry_digest(),
            found: meta.registry_digest.clone(),
        }
        .into());
    }
    Ok(Archive {
        metadata: serde_json::to_value(meta)?,
        arrays: model
            .registry()
            .iter()
            .zip(model.params())
            .map(|(m, p)| NamedArray::f64(m.name.clone(), p))
            .collect(),
    })
}

/// Rebuilds the architecture described by `archive` and loads its weights.
pub fn model_from_archive(archive: &Archive) -> Result<(Model, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_value(archive.metadata.clone())
        .map_err(|e| CheckpointError::Manifest(format!("checkpoint metadata: {e}")))?;
    let base = build_unet(&meta.model, meta.init_seed)?;
    let mut model = match meta.extension {
        None => base,
        Some(ExtensionSpec::Lora { rank }) => lora_inject(&base, rank, 0)?,
        Some(ExtensionSpec::Adapter { width }) => adapter_inject(&base, width, 0)?,
    };
    load_weights(&mut model, archive, &meta.registry_digest)?;
    Ok((model, meta))
}

/// Copies weights from `archive` into a model whose architecture must match.
pub fn load_weights(model: &mut Model, archive: &Archive, digest: &str) -> Result<()> {
    let expected = model.registry_digest();
    if digest != expected {
        return Err(CheckpointError::Digest {
            expected,
            found: digest.to_string(),
        }
        .into());
    }
    let names: Vec<(String, Vec<usize>)> = model
        .registry()
        .iter()
        .map(|m| (m.name.clone(), m.shape.clone()))
        .collect();
    for (i, (name, shape)) in names.into_iter().enumerate() {
        let a = archive
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if a.shape != shape {
            return Err(CheckpointError::TensorShape {
                name,
                expected: shape,
                found: a.shape.clone(),
            }
            .into());
        }
        model.params_mut()[i] = a.to_tensor()?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &CheckpointMeta) -> Result<()> {
    checkpoint_archive(model, meta)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    model_from_archive(&Archive::load(path)?)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    domain: String,
    seed: u64,
    count: usize,
    spec: DomainSpec,
}

pub fn dataset_archive(dataset: &Dataset, spec: &DomainSpec) -> Archive {
    let mut arrays = Vec::with_capacity(2 * dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        arrays.push(NamedArray::f64(format!("image.{i}"), &s.image));
        arrays.push(NamedArray::u8(
            format!("label.{i}"),
            vec![s.height(), s.width()],
            s.label.clone(),
        ));
    }
    let meta = DatasetMeta {
        domain: dataset.domain.clone(),
        seed: dataset.seed,
        count: dataset.len(),
        spec: spec.clone(),
    };
    Archive {
        metadata: serde_json::to_value(meta).expect("dataset metadata serializes"),
        arrays,
    }
}

pub fn dataset_from_archive(archive: &Archive) -> Result<(Dataset, DomainSpec)> {
    let meta: DatasetMeta = serde_json::from_value(archive.metadata.clone())
        .map_err(|e| CheckpointError::Manifest(format!("dataset metadata: {e}")))?;
    let mut samples = Vec::with_capacity(meta.count);
    for i in 0..meta.count {
        let find = |n: String| archive.get(&n).ok_or(CheckpointError::MissingTensor(n));
        let image = find(format!("image.{i}"))?.to_tensor()?;
        let label = match &find(format!("label.{i}"))?.data {
            ArrayData::U8(v) => v.clone(),
            ArrayData::F64(_) => return Err(CheckpointError::Dtype(format!("label.{i} is f64, expected u8")).into()),
        };
        if image.numel() != label.len() {
            return Err(CheckpointError::TensorShape {
                name: format!("label.{i}"),
                expected: image.shape().to_vec(),
                found: vec![label.len()],
            }
            .into());
        }
        samples.push(SegSample { image, label });
    }
    Ok((
        Dataset {
            domain: meta.domain,
            seed: meta.seed,
            samples,
        },
        meta.spec,
    ))
}

pub fn save_dataset(path: &Path, dataset: &Dataset, spec: &DomainSpec) -> Result<()> {
    dataset_archive(dataset, spec).save(path)
}

pub fn load_dataset(path: &Path) -> Result<(Dataset, DomainSpec)> {
    dataset_from_archive(&Archive::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_domain;

    fn small() -> Model {
        build_unet(
            &ModelConfig {
                base_width: 2,
                depth: 2,
                ..Default::default()
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn model_roundtrip_is_byte_exact() {
        let m = small();
        let meta = CheckpointMeta::for_model(&m);
        let bytes = checkpoint_archive(&m, &meta).unwrap().to_bytes().unwrap();
        let (back, meta2) = model_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(meta, meta2);
        let again = checkpoint_archive(&back, &meta2).unwrap().to_bytes().unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn extension_roundtrip() {
        let mut m = lora_inject(&small(), 1, 3).unwrap();
        let last = m.params().len() - 1;
        m.params_mut()[last].data_mut()[0] = 0.25;
        let bytes = checkpoint_archive(&m, &CheckpointMeta::for_model(&m))
            .unwrap()
            .to_bytes()
            .unwrap();
        let (back, _) = model_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert!(back.bit_eq(&m));
        assert_eq!(back.registry_digest(), m.registry_digest());
    }

    #[test]
    fn structural_errors() {
        let m = small();
        let bytes = checkpoint_archive(&m, &CheckpointMeta::for_model(&m))
            .unwrap()
            .to_bytes()
            .unwrap();
        assert_eq!(Archive::from_bytes(b"NOPE").unwrap_err(), CheckpointError::BadMagic);
        assert!(matches!(
            Archive::from_bytes(&bytes[..5]),
            Err(CheckpointError::Truncated { .. })
        ));
        assert!(matches!(
            Archive::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated { .. })
        ));
        let mut v = bytes.clone();
        v[8] = 7;
        assert_eq!(Archive::from_bytes(&v).unwrap_err(), CheckpointError::Version(7));
        let mut v = bytes.clone();
        let n = v.len();
        v[n - 1] ^= 0x40;
        assert!(matches!(Archive::from_bytes(&v), Err(CheckpointError::Checksum(_))));
    }

    #[test]
    fn digest_mismatch_is_reported() {
        let m = small();
        let mut meta = CheckpointMeta::for_model(&m);
        let archive = checkpoint_archive(&m, &meta).unwrap();
        meta.registry_digest = "0".repeat(64);
        assert!(matches!(
            checkpoint_archive(&m, &meta),
            Err(Error::Checkpoint(CheckpointError::Digest { .. }))
        ));
        let mut other = build_unet(
            &ModelConfig {
                base_width: 4,
                depth: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let digest = m.registry_digest();
        assert!(matches!(
            load_weights(&mut other, &archive, &digest),
            Err(Error::Checkpoint(CheckpointError::Digest { .. }))
        ));
    }

    #[test]
    fn dataset_roundtrip() {
        let spec = DomainSpec::near_domain(16);
        let ds = generate_domain(&spec, 4, 2).unwrap();
        let bytes = dataset_archive(&ds, &spec).to_bytes().unwrap();
        let (back, spec2) = dataset_from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(spec2, spec);
    }
}
