//! Checkpoint persistence: a JSON manifest plus one little-endian f32 blob.
//!
//! The manifest lists `{name, shape, offset, length}` per parameter (offsets
//! and lengths in bytes); the blob concatenates the raw values in manifest
//! order. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Shape};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
}

/// An in-memory checkpoint: named tensors in a fixed order.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub entries: Vec<(String, Shape, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_params(params: &[&Parameter]) -> Checkpoint {
        crate::nn::check_unique_names(params);
        Checkpoint {
            entries: params
                .iter()
                .map(|p| (p.name().to_string(), p.shape(), p.tensor().data().clone()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&(String, Shape, Vec<f32>)> {
        self.entries.iter().find(|(n, _, _)| n == name)
    }

    /// Keep only entries whose name passes the filter (e.g. to strip the
    /// adaptation-only branches before a bare-detector deployment).
    pub fn retain<F: FnMut(&str) -> bool>(&self, mut keep: F) -> Checkpoint {
        Checkpoint {
            entries: self
                .entries
                .iter()
                .filter(|(n, _, _)| keep(n))
                .cloned()
                .collect(),
        }
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.entries.iter().any(|(n, _, _)| n.starts_with(prefix))
    }

    /// Write `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut blob: Vec<u8> = Vec::new();
        let mut manifest = Manifest { params: Vec::new() };
        for (name, shape, data) in &self.entries {
            let offset = blob.len() as u64;
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            manifest.params.push(ManifestEntry {
                name: name.clone(),
                shape: [shape.n, shape.c, shape.h, shape.w],
                offset,
                length: (data.len() * 4) as u64,
            });
        }
        fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(stem.with_extension("bin"), blob)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Checkpoint> {
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
        let blob = fs::read(stem.with_extension("bin"))?;
        let mut entries = Vec::new();
        for e in &manifest.params {
            let shape = Shape::new(e.shape[0], e.shape[1], e.shape[2], e.shape[3]);
            let end = e.offset + e.length;
            if end as usize > blob.len() {
                return Err(Error::Checkpoint(format!(
                    "blob truncated: '{}' needs bytes {}..{} of {}",
                    e.name,
                    e.offset,
                    end,
                    blob.len()
                )));
            }
            if e.length as usize != shape.count() * 4 {
                return Err(Error::Checkpoint(format!(
                    "length {} of '{}' does not match shape {}",
                    e.length, e.name, shape
                )));
            }
            let bytes = &blob[e.offset as usize..end as usize];
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            entries.push((e.name.clone(), shape, data));
        }
        Ok(Checkpoint { entries })
    }

    /// Strict load into a model's parameters: every model parameter must be
    /// present with a matching shape, and every checkpoint entry must be
    /// consumed.
    pub fn apply_to(&self, params: &[&Parameter]) -> Result<()> {
        use std::collections::BTreeMap;
        let mut by_name: BTreeMap<&str, &(String, Shape, Vec<f32>)> =
            self.entries.iter().map(|e| (e.0.as_str(), e)).collect();
        for p in params {
            let entry = by_name.remove(p.name()).ok_or_else(|| {
                Error::Checkpoint(format!("parameter '{}' missing from checkpoint", p.name()))
            })?;
            if entry.1 != p.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for '{}': checkpoint {} vs model {}",
                    p.name(),
                    entry.1,
                    p.shape()
                )));
            }
            p.load_values(&entry.2);
        }
        if !by_name.is_empty() {
            let extra: Vec<&str> = by_name.keys().copied().collect();
            return Err(Error::Checkpoint(format!(
                "unknown parameters in checkpoint: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> Vec<Parameter> {
        vec![
            Parameter::new("a.weight", Shape::new(2, 1, 1, 1), vec![1.25, -3.5]),
            Parameter::new("b.bias", Shape::new(1, 3, 1, 1), vec![0.0, 0.5, f32::MIN_POSITIVE]),
        ]
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let params = sample_params();
        let refs: Vec<&Parameter> = params.iter().collect();
        let ck = Checkpoint::from_params(&refs);
        let s1 = dir.path().join("one");
        ck.save(&s1).unwrap();
        let loaded = Checkpoint::load(&s1).unwrap();
        let s2 = dir.path().join("two");
        loaded.save(&s2).unwrap();
        assert_eq!(
            fs::read(s1.with_extension("bin")).unwrap(),
            fs::read(s2.with_extension("bin")).unwrap()
        );
        assert_eq!(
            fs::read(s1.with_extension("json")).unwrap(),
            fs::read(s2.with_extension("json")).unwrap()
        );
    }

    #[test]
    fn truncated_blob_fails_without_partial_load() {
        let dir = tempfile::tempdir().unwrap();
        let params = sample_params();
        let refs: Vec<&Parameter> = params.iter().collect();
        Checkpoint::from_params(&refs).save(&dir.path().join("ck")).unwrap();
        let bin = dir.path().join("ck.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        let err = Checkpoint::load(&dir.path().join("ck")).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn unknown_name_is_listed() {
        let params = sample_params();
        let refs: Vec<&Parameter> = params.iter().collect();
        let ck = Checkpoint::from_params(&refs);
        let only_a = [&params[0]];
        let err = ck.apply_to(&only_a).unwrap_err();
        assert!(err.to_string().contains("b.bias"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_parameter() {
        let params = sample_params();
        let refs: Vec<&Parameter> = params.iter().collect();
        let ck = Checkpoint::from_params(&refs);
        let other = [
            Parameter::new("a.weight", Shape::new(1, 2, 1, 1), vec![0.0, 0.0]),
            Parameter::new("b.bias", Shape::new(1, 3, 1, 1), vec![0.0; 3]),
        ];
        let other_refs: Vec<&Parameter> = other.iter().collect();
        let err = ck.apply_to(&other_refs).unwrap_err();
        assert!(err.to_string().contains("a.weight"), "{err}");
    }
}
