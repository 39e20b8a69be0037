//! Named-parameter checkpoint files.
//!
//! A checkpoint is a JSON document `{"format": "bvme-checkpoint-v1",
//! "params": {name: {"shape": [...], "values": [...]}}}` with names sorted
//! (BTreeMap), so identical parameters serialize to identical bytes.
//! Values round-trip exactly: serde_json emits the shortest decimal that
//! parses back to the same f64.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BvmeError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "bvme-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub format: String,
    pub params: BTreeMap<String, ParamEntry>,
}

impl Checkpoint {
    /// Snapshot of named tensors.
    pub fn from_named(named: &[(String, Tensor)]) -> Checkpoint {
        let params = named
            .iter()
            .map(|(name, t)| (name.clone(), ParamEntry { shape: t.shape(), values: t.to_vec() }))
            .collect();
        Checkpoint { format: CHECKPOINT_FORMAT.to_string(), params }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| BvmeError::Io(format!("checkpoint serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| BvmeError::Io(format!("checkpoint parse: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(BvmeError::Config(format!(
                "unsupported checkpoint format '{}', expected '{CHECKPOINT_FORMAT}'",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    /// Writes stored values back into named tensors. The name sets and the
    /// per-name shapes must match exactly.
    pub fn restore(&self, named: &[(String, Tensor)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(BvmeError::Contract(format!(
                "checkpoint holds {} parameters, model has {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let entry = self
                .params
                .get(name)
                .ok_or_else(|| BvmeError::Contract(format!("checkpoint missing parameter '{name}'")))?;
            if entry.shape != t.shape() {
                return Err(BvmeError::dimension(
                    "checkpoint restore",
                    format!("parameter '{name}': checkpoint shape {:?}, model shape {:?}", entry.shape, t.shape()),
                ));
            }
            t.set_values(&entry.values)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named_pair() -> Vec<(String, Tensor)> {
        vec![
            ("layer.w".to_string(), Tensor::param(&[2, 2], vec![0.1, -0.25, 1e-17, 3.5]).unwrap()),
            ("layer.b".to_string(), Tensor::param(&[2], vec![0.0, -0.0625]).unwrap()),
        ]
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let named = named_pair();
        let ckpt = Checkpoint::from_named(&named);
        let json = ckpt.to_json().unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        for (name, t) in &named {
            let entry = &back.params[name];
            for (a, b) in entry.values.iter().zip(t.to_vec()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn identical_params_serialize_identically() {
        let a = Checkpoint::from_named(&named_pair()).to_json().unwrap();
        let b = Checkpoint::from_named(&named_pair()).to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let named = named_pair();
        let ckpt = Checkpoint::from_named(&named);

        let renamed = vec![
            ("other.w".to_string(), Tensor::param(&[2, 2], vec![0.0; 4]).unwrap()),
            ("layer.b".to_string(), Tensor::param(&[2], vec![0.0; 2]).unwrap()),
        ];
        assert!(ckpt.restore(&renamed).is_err());

        let misshapen = vec![
            ("layer.w".to_string(), Tensor::param(&[4], vec![0.0; 4]).unwrap()),
            ("layer.b".to_string(), Tensor::param(&[2], vec![0.0; 2]).unwrap()),
        ];
        assert!(ckpt.restore(&misshapen).is_err());

        let target = named_pair();
        for (_, t) in &target {
            t.set_values(&vec![9.0; t.len()]).unwrap();
        }
        ckpt.restore(&target).unwrap();
        assert_eq!(target[0].1.to_vec(), named[0].1.to_vec());
    }

    #[test]
    fn save_and_load_via_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let ckpt = Checkpoint::from_named(&named_pair());
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);
    }

    #[test]
    fn load_rejects_unknown_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"format":"v0","params":{}}"#).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
