//! Checkpoint container, run configuration and report files.

mod config;
mod safetensors;

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use config::{load_config, EditSection, RunConfig};
pub use safetensors::{
    checkpoint_bytes, checkpoint_from_bytes, from_bytes, load_checkpoint, read_tensors,
    save_checkpoint, to_bytes, write_atomic, write_tensors, Dtype, TensorFile, TensorRecord,
};

use crate::capture::ActivationMatrix;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes activation matrices as `H/<set>/<layer>` tensors. Row keys are
/// stored as `H/<set>/rows`, one (anchor, latent, step) triple per row.
pub fn dump_activations(path: &Path, sets: &[(&str, &[ActivationMatrix])]) -> Result<()> {
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    for (name, mats) in sets {
        for m in mats.iter() {
            owned.push((format!("H/{name}/{}", m.layer), m.data.clone()));
        }
        if let Some(first) = mats.first() {
            let keys: Vec<f64> = first
                .row_index
                .iter()
                .flat_map(|k| [k.anchor as f64, k.latent as f64, k.step as f64])
                .collect();
            owned.push((
                format!("H/{name}/rows"),
                Matrix::from_vec(first.row_index.len(), 3, keys)?,
            ));
        }
    }
    let refs: Vec<(String, &Matrix)> = owned.iter().map(|(n, m)| (n.clone(), m)).collect();
    let mut meta = BTreeMap::new();
    meta.insert("format".to_string(), "erasure-lab/activations".to_string());
    write_tensors(path, &refs, Dtype::F64, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{capture_set, AnchorSet, CaptureConfig};
    use crate::engine::{init_model, EngineConfig, Vocabulary};

    #[test]
    fn activation_dump_names() {
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let v = Vocabulary::builtin();
        let set = AnchorSet::forget("f", vec![v.parse_prompt("a photo of pikachu").unwrap()]).unwrap();
        let cfg = CaptureConfig {
            n_lat: 2,
            steps: 3,
            ..Default::default()
        };
        let mats = capture_set(&ckpt, &set, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.st");
        dump_activations(&path, &[("forget", &mats)]).unwrap();
        let f = read_tensors(&path).unwrap();
        assert_eq!(f.tensors.len(), 5);
        assert_eq!(f.tensors["H/forget/1"], mats[1].data);
        assert_eq!(f.tensors["H/forget/rows"].row(5), &[0.0, 1.0, 2.0]);
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        write_json(&path, &vec![1.5, 2.0]).unwrap();
        let back: Vec<f64> = read_json(&path).unwrap();
        assert_eq!(back, vec![1.5, 2.0]);
    }
}
