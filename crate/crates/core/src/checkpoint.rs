//! Model checkpoints: a JSON manifest plus one raw parameter blob.
//!
//! `manifest.json` records the variant configuration, the construction seed
//! and, per stored tensor in construction order, its name, shape, element
//! offset into `params.bin` and whether it is trainable. `params.bin` holds
//! every tensor as little-endian `f64`, concatenated in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{build_variant, GazeModel, ModelVariant};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub variant: ModelVariant,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(model: &GazeModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut blob = Vec::new();
    let mut offset = 0;
    for (_, p) in model.params.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            trainable: p.trainable,
        });
        offset += p.value.numel();
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        variant: model.variant.clone(),
        seed: model.seed,
        tensors,
    };
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(Error::io(&path))?;
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text + "\n").map_err(Error::io(&path))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path,
            reason: format!("format version {} is not {FORMAT_VERSION}", m.format_version),
        });
    }
    Ok(m)
}

/// Rebuilds the stored model and restores every tensor.
pub fn load(dir: &Path) -> Result<GazeModel> {
    let manifest = read_manifest(dir)?;
    let mut model = build_variant(&manifest.variant, manifest.seed)?;
    restore(&mut model, &manifest, dir)?;
    Ok(model)
}

/// Overwrites `model`'s tensors with a checkpoint of the same architecture.
/// Differences in configuration are reported field by field.
pub fn load_into(model: &mut GazeModel, dir: &Path) -> Result<()> {
    let manifest = read_manifest(dir)?;
    let ours = serde_json::to_value(&model.variant).expect("configs serialize");
    let theirs = serde_json::to_value(&manifest.variant).expect("configs serialize");
    let mut diffs = Vec::new();
    json_diff("", &ours, &theirs, &mut diffs);
    if !diffs.is_empty() {
        return Err(Error::Mismatch(diffs));
    }
    restore(model, &manifest, dir)
}

fn restore(model: &mut GazeModel, manifest: &CheckpointManifest, dir: &Path) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format {
            path,
            reason: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    if manifest.tensors.len() != model.params.len() {
        return Err(Error::Mismatch(vec![format!(
            "tensor count: {} vs {}",
            model.params.len(),
            manifest.tensors.len()
        )]));
    }
    let ids: Vec<_> = model.params.ids().collect();
    for (id, entry) in ids.into_iter().zip(&manifest.tensors) {
        let p = model.params.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(Error::Mismatch(vec![format!(
                "tensor {}: {:?} vs {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )]));
        }
        let n = p.value.numel();
        let slice = values.get(entry.offset..entry.offset + n).ok_or_else(|| Error::Format {
            path: path.clone(),
            reason: format!("tensor {} extends past the end of the file", entry.name),
        })?;
        model.params.set(id, Tensor::new(entry.shape.clone(), slice.to_vec())?)?;
    }
    Ok(())
}

/// Collects `path: ours vs theirs` for every differing leaf.
fn json_diff(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                json_diff(&sub, x.get(k).unwrap_or(&Value::Null), y.get(k).unwrap_or(&Value::Null), out);
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_diff(&format!("{path}[{i}]"), u, v, out);
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::VariantTag;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for tag in VariantTag::ALL {
            let mut model = build_variant(&ModelVariant::toy(tag, 32), 3).unwrap();
            // non-default state buffers and awkward values must survive too
            let id = model.params.ids().last().unwrap();
            model.params.value_mut(id).data_mut()[0] = -1.0 / 3.0;
            let sub = dir.path().join(tag.name());
            save(&model, &sub).unwrap();
            let back = load(&sub).unwrap();
            assert_eq!(back.variant, model.variant);
            for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
                assert_eq!(a.name, b.name);
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&a.value), bits(&b.value));
            }
        }
    }

    #[test]
    fn manifest_offsets_are_cumulative() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 0).unwrap();
        save(&model, dir.path()).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        let mut off = 0;
        for e in &m.tensors {
            assert_eq!(e.offset, off);
            off += e.shape.iter().product::<usize>();
        }
        assert_eq!(fs::metadata(dir.path().join(PARAMS_FILE)).unwrap().len() as usize, off * 8);
    }

    #[test]
    fn width_mismatch_lists_the_fields() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_variant(&ModelVariant::toy(VariantTag::Pure, 32), 0).unwrap();
        save(&model, dir.path()).unwrap();
        let mut other = ModelVariant::toy(VariantTag::Pure, 32);
        other.transformer_mut().unwrap().width = 8;
        let mut target = build_variant(&other, 0).unwrap();
        match load_into(&mut target, dir.path()) {
            Err(Error::Mismatch(fields)) => {
                assert_eq!(fields, vec!["transformer.width: 8 vs 16".to_string()]);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn variant_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save(&build_variant(&ModelVariant::toy(VariantTag::Pure, 32), 0).unwrap(), dir.path()).unwrap();
        let mut target = build_variant(&ModelVariant::toy(VariantTag::Hybrid, 32), 0).unwrap();
        let err = load_into(&mut target, dir.path()).unwrap_err();
        assert!(err.to_string().contains("variant: \"hybrid\" vs \"pure\""), "{err}");
    }

    #[test]
    fn load_into_matching_model_copies_values() {
        let dir = tempfile::tempdir().unwrap();
        let v = ModelVariant::toy(VariantTag::ConvBaseline, 32);
        let src = build_variant(&v, 1).unwrap();
        save(&src, dir.path()).unwrap();
        let mut dst = build_variant(&v, 2).unwrap();
        load_into(&mut dst, dir.path()).unwrap();
        for ((_, a), (_, b)) in src.params.iter().zip(dst.params.iter()) {
            assert_eq!(a.value, b.value);
        }
    }
}
