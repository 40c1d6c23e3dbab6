//! Per-layer activation matrices from anchor prompts.
//!
//! Every anchor is sampled with `n_lat` latents for `T` steps. Each captured
//! `S x d` post-attention activation is mean-pooled over its spatial axis
//! into one row, so a layer's matrix holds `|anchors| · n_lat · T` rows in
//! (anchor, latent, step) order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ModelCheckpoint, Prompt};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorRole {
    Forget,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub name: String,
    pub role: AnchorRole,
    pub prompts: Vec<Prompt>,
}

impl AnchorSet {
    pub fn new(name: impl Into<String>, role: AnchorRole, prompts: Vec<Prompt>) -> Result<Self> {
        let name = name.into();
        if role == AnchorRole::Forget && prompts.is_empty() {
            return Err(Error::EmptyAnchors(name));
        }
        Ok(Self { name, role, prompts })
    }

    pub fn forget(name: impl Into<String>, prompts: Vec<Prompt>) -> Result<Self> {
        Self::new(name, AnchorRole::Forget, prompts)
    }

    pub fn retain(name: impl Into<String>, prompts: Vec<Prompt>) -> Self {
        Self {
            name: name.into(),
            role: AnchorRole::Retain,
            prompts,
        }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptureConfig {
    /// Latents per anchor.
    pub n_lat: usize,
    /// Denoising steps per trajectory.
    pub steps: usize,
    pub base_seed: u64,
    /// Added to every latent seed of a retain set.
    pub retain_seed_offset: u64,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            n_lat: 10,
            steps: 10,
            base_seed: 0,
            retain_seed_offset: 1000,
        }
    }
}

impl CaptureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lat == 0 {
            return Err(Error::ValidationError {
                key: "capture.n_lat".into(),
                reason: "must be at least 1".into(),
            });
        }
        if self.steps == 0 {
            return Err(Error::ValidationError {
                key: "capture.steps".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Latent seed for one (anchor, latent) trajectory.
    pub fn latent_seed(&self, role: AnchorRole, anchor: usize, latent: usize) -> u64 {
        let base = self.base_seed + (anchor * self.n_lat + latent) as u64;
        match role {
            AnchorRole::Forget => base,
            AnchorRole::Retain => base + self.retain_seed_offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowKey {
    pub anchor: usize,
    pub latent: usize,
    pub step: usize,
}

/// Stacked, spatially pooled activations of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMatrix {
    pub layer: usize,
    pub data: Matrix,
    pub row_index: Vec<RowKey>,
}

impl ActivationMatrix {
    pub fn width(&self) -> usize {
        self.data.cols()
    }

    pub fn rows(&self) -> usize {
        self.data.rows()
    }
}

/// Mean over the spatial axis of an `S x d` activation.
pub fn spatial_mean(a: &Matrix) -> Vec<f64> {
    a.column_mean()
}

/// Pooled rows for a single trajectory: `[layer][step]`.
pub(crate) fn pooled_trajectory(
    ckpt: &ModelCheckpoint,
    prompt: &Prompt,
    latent_seed: u64,
    steps: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let (_, cap) = ckpt.sample_with_capture(prompt, latent_seed, steps)?;
    Ok(cap
        .iter()
        .map(|per_step| per_step.iter().map(spatial_mean).collect())
        .collect())
}

/// Builds one activation matrix per layer from an anchor set.
pub fn capture_set(
    ckpt: &ModelCheckpoint,
    anchors: &AnchorSet,
    cfg: &CaptureConfig,
) -> Result<Vec<ActivationMatrix>> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchors(anchors.name.clone()));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..anchors.len())
        .flat_map(|a| (0..cfg.n_lat).map(move |l| (a, l)))
        .collect();
    let results: Vec<Vec<Vec<Vec<f64>>>> = jobs
        .par_iter()
        .map(|&(a, l)| {
            let seed = cfg.latent_seed(anchors.role, a, l);
            pooled_trajectory(ckpt, &anchors.prompts[a], seed, cfg.steps)
        })
        .collect::<Result<_>>()?;

    let row_index: Vec<RowKey> = jobs
        .iter()
        .flat_map(|&(anchor, latent)| (0..cfg.steps).map(move |step| RowKey { anchor, latent, step }))
        .collect();

    ckpt.config
        .layers
        .iter()
        .enumerate()
        .map(|(layer, spec)| {
            let mut data = Vec::with_capacity(row_index.len() * spec.d);
            for traj in &results {
                for row in &traj[layer] {
                    data.extend_from_slice(row);
                }
            }
            Ok(ActivationMatrix {
                layer,
                data: Matrix::from_vec(row_index.len(), spec.d, data)?,
                row_index: row_index.clone(),
            })
        })
        .collect()
}

/// Token-mean of the text encoding of every anchor, one row per prompt.
pub fn capture_text_features(ckpt: &ModelCheckpoint, anchors: &AnchorSet) -> Result<Matrix> {
    if anchors.is_empty() {
        return Err(Error::EmptyAnchors(anchors.name.clone()));
    }
    let rows = anchors
        .prompts
        .iter()
        .map(|p| Ok(ckpt.text_encode(p)?.column_mean()))
        .collect::<Result<Vec<_>>>()?;
    Matrix::from_rows(&rows)
}

/// Concatenates the layer matrices column-wise into one feature row per
/// (anchor, latent, step).
pub fn concat_layers(mats: &[ActivationMatrix]) -> Result<Matrix> {
    let refs: Vec<&Matrix> = mats.iter().map(|m| &m.data).collect();
    Matrix::hstack(&refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_model, EngineConfig, Vocabulary};

    #[test]
    fn seed_schedule() {
        let cfg = CaptureConfig::default();
        assert_eq!(cfg.latent_seed(AnchorRole::Forget, 0, 0), 0);
        assert_eq!(cfg.latent_seed(AnchorRole::Forget, 2, 3), 23);
        assert_eq!(cfg.latent_seed(AnchorRole::Retain, 2, 3), 1023);
    }

    #[test]
    fn empty_anchor_sets_are_rejected() {
        assert!(matches!(AnchorSet::forget("f", vec![]), Err(Error::EmptyAnchors(_))));
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let empty = AnchorSet::retain("r", vec![]);
        assert!(capture_set(&ckpt, &empty, &CaptureConfig::default()).is_err());
        assert!(capture_text_features(&ckpt, &empty).is_err());
    }

    #[test]
    fn one_anchor_one_latent_one_step() {
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let v = Vocabulary::builtin();
        let set = AnchorSet::forget("f", vec![v.parse_prompt("a photo of pikachu").unwrap()]).unwrap();
        let cfg = CaptureConfig {
            n_lat: 1,
            steps: 1,
            ..Default::default()
        };
        let mats = capture_set(&ckpt, &set, &cfg).unwrap();
        assert_eq!(mats.len(), 4);
        for (m, spec) in mats.iter().zip(&ckpt.config.layers) {
            assert_eq!(m.data.shape(), (1, spec.d));
        }
    }

    #[test]
    fn text_features_duplicate_rows() {
        let ckpt = init_model(&EngineConfig::default()).unwrap();
        let v = Vocabulary::builtin();
        let p = v.parse_prompt("art by claude_monet").unwrap();
        let set = AnchorSet::forget("f", vec![p.clone(), p]).unwrap();
        let m = capture_text_features(&ckpt, &set).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(0), m.row(1));
    }
}
