use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seed of the default engine. Chosen so that the default concepts are well
/// separated in feature space under the default initialization.
pub const DEFAULT_ENGINE_SEED: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn numel(&self) -> usize {
        self.channels * self.positions()
    }
}

impl Default for LatentShape {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
        }
    }
}

/// One cross-attention layer: post-attention width `d` at `spatial` image
/// positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub d: usize,
    pub spatial: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Text embedding width.
    pub d_text: usize,
    pub layers: Vec<LayerSpec>,
    pub latent: LatentShape,
    pub heads: usize,
    /// Default number of denoising steps.
    pub steps: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            layers: vec![
                LayerSpec { d: 16, spatial: 64 },
                LayerSpec { d: 32, spatial: 16 },
                LayerSpec { d: 32, spatial: 16 },
                LayerSpec { d: 16, spatial: 64 },
            ],
            latent: LatentShape::default(),
            heads: 4,
            steps: 10,
            seed: DEFAULT_ENGINE_SEED,
        }
    }
}

impl EngineConfig {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Number of 2x2 downsamplings between the full latent grid and `spatial`.
    pub(crate) fn level_of(&self, spatial: usize) -> Option<u32> {
        let (mut h, mut w) = (self.latent.height, self.latent.width);
        let mut level = 0;
        loop {
            if h * w == spatial {
                return Some(level);
            }
            if h % 2 != 0 || w % 2 != 0 || h * w < spatial {
                return None;
            }
            h /= 2;
            w /= 2;
            level += 1;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigError(msg));
        if self.d_text == 0 {
            return bad("d_text must be positive".into());
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.latent.channels == 0 || self.latent.height == 0 || self.latent.width == 0 {
            return bad(format!("degenerate latent shape {:?}", self.latent));
        }
        if self.layers.is_empty() {
            return bad("at least one cross-attention layer is required".into());
        }
        let mut prev_level = 0u32;
        for (i, l) in self.layers.iter().enumerate() {
            if l.d < self.heads || l.d % self.heads != 0 {
                return bad(format!("layer {i}: width {} not divisible into {} heads", l.d, self.heads));
            }
            if l.spatial == 0 {
                return bad(format!("layer {i}: spatial extent must be positive"));
            }
            let Some(level) = self.level_of(l.spatial) else {
                return bad(format!(
                    "layer {i}: spatial extent {} is not reachable from the {}x{} latent by 2x2 pooling",
                    l.spatial, self.latent.height, self.latent.width
                ));
            };
            if level.abs_diff(prev_level) > 1 {
                return bad(format!("layer {i}: resolution jumps more than one level"));
            }
            prev_level = level;
        }
        Ok(())
    }
}
