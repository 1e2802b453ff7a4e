//! On-disk model format: a directory holding `model.json` (manifest) and
//! `weights.bin` (little-endian f32, concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelIR, ParamSet, WeightTensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "model.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest<L> {
    format_version: u32,
    name: String,
    input_shape: [usize; 3],
    layers: Vec<L>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    layer: String,
    param: String,
    dims: Vec<usize>,
    /// byte offset into the weights blob
    offset: u64,
    /// element count
    len: usize,
}

fn tensor_entries(m: &ModelIR) -> Vec<TensorEntry> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for layer in m.layers() {
        for (param, _) in layer.op.param_shapes() {
            let t = &m.weights()[&layer.id][param];
            entries.push(TensorEntry {
                layer: layer.id.clone(),
                param: param.to_string(),
                dims: t.dims.clone(),
                offset,
                len: t.len(),
            });
            offset += 4 * t.len() as u64;
        }
    }
    entries
}

fn manifest_bytes(m: &ModelIR) -> Result<Vec<u8>> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: m.name.clone(),
        input_shape: m.input_shape,
        layers: m.layers().to_vec(),
        tensors: tensor_entries(m),
    };
    let mut bytes = serde_json::to_vec(&manifest)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Manifest and weights blob exactly as [`serialize`] writes them.
pub fn encode(m: &ModelIR) -> Result<(Vec<u8>, Vec<u8>)> {
    let manifest = manifest_bytes(m)?;
    let mut blob = Vec::with_capacity(4 * m.stored_elements());
    for layer in m.layers() {
        for (param, _) in layer.op.param_shapes() {
            for v in &m.weights()[&layer.id][param].data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok((manifest, blob))
}

/// Total bytes [`serialize`] would write for `m`.
pub fn serialized_size(m: &ModelIR) -> Result<u64> {
    Ok(manifest_bytes(m)?.len() as u64 + 4 * m.stored_elements() as u64)
}

/// Write through a temporary sibling file, then rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::arg(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn serialize(m: &ModelIR, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode(m)?;
    write_atomic(&dir.join(WEIGHTS_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(())
}

pub fn deserialize(dir: impl AsRef<Path>) -> Result<ModelIR> {
    let dir = dir.as_ref();
    let manifest_raw = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest<serde_json::Value> = serde_json::from_slice(&manifest_raw)
        .map_err(|e| Error::malformed(None, format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::malformed(
            None,
            format!("unsupported format version {}", manifest.format_version),
        ));
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, raw) in manifest.layers.into_iter().enumerate() {
        let id = raw
            .get("id")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .unwrap_or_else(|| format!("#{i}"));
        let layer: LayerSpec =
            serde_json::from_value(raw).map_err(|e| Error::malformed(Some(&id), e.to_string()))?;
        layers.push(layer);
    }

    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let mut weights: BTreeMap<String, ParamSet> = BTreeMap::new();
    let mut expected_end = 0u64;
    for entry in &manifest.tensors {
        if entry.dims.iter().product::<usize>() != entry.len {
            return Err(Error::shape(
                entry.layer.clone(),
                format!("tensor `{}` dims {:?} disagree with length {}", entry.param, entry.dims, entry.len),
            ));
        }
        let start = entry.offset as usize;
        let end = start + 4 * entry.len;
        if end > blob.len() {
            return Err(Error::shape(
                entry.layer.clone(),
                format!(
                    "tensor `{}` needs bytes {start}..{end} but the weights blob has {} bytes",
                    entry.param,
                    blob.len()
                ),
            ));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let previous = weights
            .entry(entry.layer.clone())
            .or_default()
            .insert(entry.param.clone(), WeightTensor { dims: entry.dims.clone(), data });
        if previous.is_some() {
            return Err(Error::malformed(
                Some(&entry.layer),
                format!("duplicate tensor `{}`", entry.param),
            ));
        }
        expected_end = expected_end.max(end as u64);
    }
    if expected_end != blob.len() as u64 {
        return Err(Error::malformed(
            None,
            format!("weights blob has {} bytes, manifest accounts for {expected_end}", blob.len()),
        ));
    }
    for layer in &layers {
        if !layer.op.param_shapes().is_empty() {
            weights.entry(layer.id.clone()).or_default();
        }
    }
    ModelIR::new(manifest.name, manifest.input_shape, layers, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_arch, ArchName};

    #[test]
    fn roundtrip_is_bitwise() {
        let m = build_arch(ArchName::TestnetSmall, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize(&m, dir.path()).unwrap();
        let back = deserialize(dir.path()).unwrap();
        assert_eq!(back.layers(), m.layers());
        for (id, params) in m.weights() {
            for (name, t) in params {
                let b = &back.weights()[id][name];
                assert_eq!(b.dims, t.dims);
                assert!(b.data.iter().zip(&t.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        assert_eq!(back.param_count(), m.param_count());
        let on_disk = fs::metadata(dir.path().join(MANIFEST_FILE)).unwrap().len()
            + fs::metadata(dir.path().join(WEIGHTS_FILE)).unwrap().len();
        assert_eq!(on_disk, serialized_size(&m).unwrap());
    }

    #[test]
    fn truncated_blob_names_layer() {
        let m = build_arch(ArchName::TestnetSmall, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize(&m, dir.path()).unwrap();
        let path = dir.path().join(WEIGHTS_FILE);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 1000]).unwrap();
        match deserialize(dir.path()) {
            Err(Error::Shape { layer, .. }) => assert!(!layer.is_empty()),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_names_layer() {
        let m = build_arch(ArchName::TestnetSmall, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        serialize(&m, dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        manifest["layers"][3]["kind"] = "dropout".into();
        let id = manifest["layers"][3]["id"].as_str().unwrap().to_string();
        fs::write(&path, serde_json::to_vec(&manifest).unwrap()).unwrap();
        match deserialize(dir.path()) {
            Err(Error::Malformed { layer: Some(l), msg }) => {
                assert_eq!(l, id);
                assert!(msg.contains("dropout"), "{msg}");
            }
            other => panic!("expected malformed error, got {other:?}"),
        }
    }
}
