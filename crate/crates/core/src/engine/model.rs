//! The miniature text-conditioned denoiser.
//!
//! A latent of `channels x height x width` is lifted to features, passed
//! through a stack of residual cross-attention layers that follow a
//! down/mid/up resolution path, and projected back to a noise estimate. The
//! prompt reaches the network only through the key and value projections of
//! those layers. Sampling applies `x ← x − η·f(x, t, text)` for `T` steps with
//! `t` running from 1 down to `1/T`, then reads pooled features of the final
//! latent with one more pass at `t = 0`, minus the same pass with the
//! conditioning removed.
//!
//! Concept embeddings share one "noun" direction. Each layer's query bias
//! points at the keys of that direction and is gated by `1 − t`, so attention
//! settles on the concept token as denoising proceeds. The noun direction is
//! projected out of every value map, which keeps the shared component out of
//! what the layers write and leaves concepts distinguishable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::attention::cross_attention;
use crate::engine::config::EngineConfig;
use crate::engine::vocab::{Prompt, Vocabulary, NUM_CONCEPTS};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Step size of the fixed-rate update.
pub const STEP_SIZE: f64 = 0.1;
/// Number of sinusoidal timestep features.
pub const TIME_FEATURES: usize = 8;
/// Scale of concept-token embedding rows.
pub const CONCEPT_GAIN: f64 = 1.5;
/// Scale of template and context word embedding rows.
pub const WORD_GAIN: f64 = 2.0;
/// Weight of the direction shared by every concept embedding.
pub const NOUN_SHARE: f64 = 3.0;
/// Norm of the query bias relative to `√d`.
pub const QUERY_BIAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// d x d
    pub w_q: Matrix,
    /// 1 x d query bias.
    pub b_q: Matrix,
    /// d x d_text
    pub w_k: Matrix,
    /// d x d_text
    pub w_v: Matrix,
    /// d x d
    pub w_o: Matrix,
    /// d x d_prev, present when the width changes from the previous layer.
    pub w_trans: Option<Matrix>,
}

/// All engine weights plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: EngineConfig,
    /// vocab x d_text
    pub embedding: Matrix,
    /// d_text x d_text
    pub mixing: Matrix,
    /// d_0 x channels
    pub w_in: Matrix,
    /// d_0 x TIME_FEATURES
    pub w_time: Matrix,
    pub layers: Vec<LayerWeights>,
    /// channels x d_last
    pub w_out: Matrix,
    /// d_text x d_last
    pub w_read: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    /// positions x channels
    pub final_latent: Matrix,
    /// Pooled final features, length d_text.
    pub feature_summary: Vec<f64>,
}

/// Per-layer (K, V) for one prompt.
pub type TextConditioning = Vec<(Matrix, Matrix)>;

/// Captured post-attention activations: `[layer][step]`, each `S x d`.
pub type CapturedActivations = Vec<Vec<Matrix>>;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn fan_in_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    gaussian(rng, rows, cols, 1.0 / (cols as f64).sqrt())
}

pub fn init_model(cfg: &EngineConfig) -> Result<ModelCheckpoint> {
    cfg.validate()?;
    let vocab = Vocabulary::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let de = cfg.d_text;

    let mut embedding = gaussian(&mut rng, vocab.len(), de, 1.0);
    let noun = gaussian(&mut rng, 1, de, 1.0).into_vec();
    for r in NUM_CONCEPTS..vocab.len() {
        embedding.row_mut(r).iter_mut().for_each(|x| *x *= WORD_GAIN);
    }
    for r in 0..NUM_CONCEPTS {
        embedding
            .row_mut(r)
            .iter_mut()
            .zip(&noun)
            .for_each(|(x, u)| *x = CONCEPT_GAIN * (*x + NOUN_SHARE * u));
    }
    let mixing = fan_in_init(&mut rng, de, de);
    let mixed_noun = mixing.matvec(&noun)?;
    let noun_norm = mixed_noun.iter().map(|x| x * x).sum::<f64>().sqrt();
    let unit_noun: Vec<f64> = mixed_noun.iter().map(|x| x / noun_norm).collect();
    let d0 = cfg.layers[0].d;
    let w_in = fan_in_init(&mut rng, d0, cfg.latent.channels);
    let w_time = fan_in_init(&mut rng, d0, TIME_FEATURES);

    let mut layers = Vec::with_capacity(cfg.layers.len());
    let mut prev_d = d0;
    for spec in &cfg.layers {
        let d = spec.d;
        let w_trans = (d != prev_d).then(|| fan_in_init(&mut rng, d, prev_d));
        let w_q = fan_in_init(&mut rng, d, d);
        let w_k = fan_in_init(&mut rng, d, de);
        let mut w_v = fan_in_init(&mut rng, d, de);
        let wn = w_v.matvec(&unit_noun)?;
        for r in 0..d {
            for c in 0..de {
                w_v[(r, c)] -= wn[r] * unit_noun[c];
            }
        }
        let w_o = fan_in_init(&mut rng, d, d);
        let key_dir = w_k.matvec(&mixed_noun)?;
        let key_norm = key_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gain = QUERY_BIAS * (d as f64).sqrt() / key_norm;
        let b_q = Matrix::from_fn(1, d, |_, j| key_dir[j] * gain);
        layers.push(LayerWeights {
            w_q,
            b_q,
            w_k,
            w_v,
            w_o,
            w_trans,
        });
        prev_d = d;
    }
    let w_out = fan_in_init(&mut rng, cfg.latent.channels, prev_d);
    let w_read = fan_in_init(&mut rng, de, prev_d);

    Ok(ModelCheckpoint {
        config: cfg.clone(),
        embedding,
        mixing,
        w_in,
        w_time,
        layers,
        w_out,
        w_read,
    })
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for k in 0..TIME_FEATURES / 2 {
        let w = std::f64::consts::PI * (1u32 << k) as f64 / 2.0;
        f[2 * k] = (w * t).sin();
        f[2 * k + 1] = (w * t).cos();
    }
    f
}

/// Average-pools a `(h*w) x d` grid by 2x2.
fn downsample(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (h2, w2) = (h / 2, w / 2);
    let d = x.cols();
    let mut out = Matrix::zeros(h2 * w2, d);
    for r in 0..h2 {
        for c in 0..w2 {
            let o = out.row_mut(r * w2 + c);
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let src = x.row((2 * r + dr) * w + 2 * c + dc);
                for (a, b) in o.iter_mut().zip(src) {
                    *a += 0.25 * b;
                }
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling of a `(h*w) x d` grid.
fn upsample(x: &Matrix, h: usize, w: usize) -> Matrix {
    let (h2, w2) = (h * 2, w * 2);
    let mut out = Matrix::zeros(h2 * w2, x.cols());
    for r in 0..h2 {
        for c in 0..w2 {
            out.row_mut(r * w2 + c).copy_from_slice(x.row((r / 2) * w + c / 2));
        }
    }
    out
}

impl ModelCheckpoint {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("text/embedding".into(), &self.embedding),
            ("text/mixing".into(), &self.mixing),
            ("input/w_in".into(), &self.w_in),
            ("input/w_time".into(), &self.w_time),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers/{i}/w_q"), &l.w_q));
            out.push((format!("layers/{i}/b_q"), &l.b_q));
            out.push((format!("layers/{i}/w_k"), &l.w_k));
            out.push((format!("layers/{i}/w_v"), &l.w_v));
            out.push((format!("layers/{i}/w_o"), &l.w_o));
            if let Some(t) = &l.w_trans {
                out.push((format!("layers/{i}/w_trans"), t));
            }
        }
        out.push(("output/w_out".into(), &self.w_out));
        out.push(("output/w_read".into(), &self.w_read));
        out
    }

    /// Rebuilds a checkpoint from named tensors, checking every shape
    /// against `config`.
    pub fn from_tensors(config: EngineConfig, mut tensors: BTreeMap<String, Matrix>) -> Result<Self> {
        config.validate()?;
        let vocab = Vocabulary::builtin().len();
        let de = config.d_text;
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Matrix> {
            let m = tensors
                .remove(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
            if m.shape() != shape {
                return Err(Error::DimError(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    m.shape(),
                    shape
                )));
            }
            Ok(m)
        };
        let d0 = config.layers[0].d;
        let embedding = take("text/embedding", (vocab, de))?;
        let mixing = take("text/mixing", (de, de))?;
        let w_in = take("input/w_in", (d0, config.latent.channels))?;
        let w_time = take("input/w_time", (d0, TIME_FEATURES))?;
        let mut layers = Vec::new();
        let mut prev_d = d0;
        for (i, spec) in config.layers.iter().enumerate() {
            let d = spec.d;
            let w_trans = if d != prev_d {
                Some(take(&format!("layers/{i}/w_trans"), (d, prev_d))?)
            } else {
                None
            };
            layers.push(LayerWeights {
                w_q: take(&format!("layers/{i}/w_q"), (d, d))?,
                b_q: take(&format!("layers/{i}/b_q"), (1, d))?,
                w_k: take(&format!("layers/{i}/w_k"), (d, de))?,
                w_v: take(&format!("layers/{i}/w_v"), (d, de))?,
                w_o: take(&format!("layers/{i}/w_o"), (d, d))?,
                w_trans,
            });
            prev_d = d;
        }
        let w_out = take("output/w_out", (config.latent.channels, prev_d))?;
        let w_read = take("output/w_read", (de, prev_d))?;
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::DimError(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            config,
            embedding,
            mixing,
            w_in,
            w_time,
            layers,
            w_out,
            w_read,
        })
    }

    /// Token embeddings through the mixing matrix: one `d_text` row per
    /// token.
    pub fn text_encode(&self, prompt: &Prompt) -> Result<Matrix> {
        let tokens = prompt.tokens();
        if tokens.is_empty() {
            return Err(Error::VocabError("empty prompt".into()));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size()) {
            return Err(Error::VocabError(format!("token id {bad} outside vocabulary")));
        }
        let rows: Vec<&[f64]> = tokens.iter().map(|&t| self.embedding.row(t as usize)).collect();
        Matrix::from_rows(&rows)?.matmul_t(&self.mixing)
    }

    /// Keys and values of every layer for a prompt.
    pub fn text_conditioning(&self, prompt: &Prompt) -> Result<TextConditioning> {
        let x = self.text_encode(prompt)?;
        self.layers
            .iter()
            .map(|l| Ok((x.matmul_t(&l.w_k)?, x.matmul_t(&l.w_v)?)))
            .collect()
    }

    /// A single zero key/value token per layer: the denoiser with all
    /// conditioning removed.
    fn null_conditioning(&self) -> TextConditioning {
        self.config
            .layers
            .iter()
            .map(|l| (Matrix::zeros(1, l.d), Matrix::zeros(1, l.d)))
            .collect()
    }

    fn grid_at(&self, level: u32) -> (usize, usize) {
        (self.config.latent.height >> level, self.config.latent.width >> level)
    }

    fn resample(&self, h: Matrix, from: u32, to: u32) -> Matrix {
        let mut h = h;
        let mut level = from;
        while level < to {
            let (gh, gw) = self.grid_at(level);
            h = downsample(&h, gh, gw);
            level += 1;
        }
        while level > to {
            let (gh, gw) = self.grid_at(level);
            h = upsample(&h, gh, gw);
            level -= 1;
        }
        h
    }

    /// One denoiser evaluation. Returns the noise estimate and the final
    /// full-resolution hidden state; pushes each layer's post-attention
    /// activation into `capture` when given.
    pub fn denoise(
        &self,
        cond: &TextConditioning,
        x: &Matrix,
        t: f64,
        mut capture: Option<&mut Vec<Matrix>>,
    ) -> Result<(Matrix, Matrix)> {
        let cfg = &self.config;
        let tf = time_features(t);
        let tb = self.w_time.matvec(&tf)?;
        let mut h = x.matmul_t(&self.w_in)?;
        for r in 0..h.rows() {
            for (v, b) in h.row_mut(r).iter_mut().zip(&tb) {
                *v = (*v + b).tanh();
            }
        }
        let mut level = 0;
        for (i, (spec, lw)) in cfg.layers.iter().zip(&self.layers).enumerate() {
            let target = cfg.level_of(spec.spatial).expect("validated config");
            h = self.resample(h, level, target);
            level = target;
            if let Some(t) = &lw.w_trans {
                h = h.matmul_t(t)?;
            }
            let mut q = h.matmul_t(&lw.w_q)?;
            let gate = 1.0 - t;
            for r in 0..q.rows() {
                for (a, b) in q.row_mut(r).iter_mut().zip(lw.b_q.row(0)) {
                    *a += gate * b;
                }
            }
            let (k, v) = &cond[i];
            let attn = cross_attention(&q, k, v, cfg.heads)?;
            let out = attn.matmul_t(&lw.w_o)?;
            if let Some(buf) = capture.as_deref_mut() {
                buf.push(attn);
            }
            h = h.add(&out)?;
        }
        let h = self.resample(h, level, 0);
        let eps = h.matmul_t(&self.w_out)?;
        Ok((eps, h))
    }

    pub fn initial_latent(&self, latent_seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
        gaussian(&mut rng, self.config.latent.positions(), self.config.latent.channels, 1.0)
    }

    fn run(
        &self,
        prompt: &Prompt,
        latent_seed: u64,
        steps: usize,
        mut capture: Option<&mut CapturedActivations>,
    ) -> Result<GenerationOutput> {
        if steps == 0 {
            return Err(Error::ConfigError("sampling needs at least one step".into()));
        }
        let cond = self.text_conditioning(prompt)?;
        if let Some(c) = capture.as_deref_mut() {
            *c = vec![Vec::with_capacity(steps); self.layers.len()];
        }
        let mut x = self.initial_latent(latent_seed);
        let mut step_buf = Vec::with_capacity(self.layers.len());
        for i in 0..steps {
            let t = 1.0 - i as f64 / steps as f64;
            step_buf.clear();
            let want = capture.is_some();
            let (eps, _) = self.denoise(&cond, &x, t, want.then_some(&mut step_buf))?;
            if let Some(c) = capture.as_deref_mut() {
                for (layer, a) in step_buf.drain(..).enumerate() {
                    c[layer].push(a);
                }
            }
            for (xv, e) in x.as_mut_slice().iter_mut().zip(eps.as_slice()) {
                *xv -= STEP_SIZE * e;
            }
        }
        let (_, hidden) = self.denoise(&cond, &x, 0.0, None)?;
        let (_, base) = self.denoise(&self.null_conditioning(), &x, 0.0, None)?;
        let pooled: Vec<f64> = hidden
            .column_mean()
            .iter()
            .zip(base.column_mean())
            .map(|(c, u)| c - u)
            .collect();
        let feature_summary = self.w_read.matvec(&pooled)?;
        Ok(GenerationOutput {
            final_latent: x,
            feature_summary,
        })
    }

    pub fn sample(&self, prompt: &Prompt, latent_seed: u64, steps: usize) -> Result<GenerationOutput> {
        self.run(prompt, latent_seed, steps, None)
    }

    /// Same trajectory as [`sample`](Self::sample), additionally returning
    /// every layer's `S x d` post-attention activation at every step.
    pub fn sample_with_capture(
        &self,
        prompt: &Prompt,
        latent_seed: u64,
        steps: usize,
    ) -> Result<(GenerationOutput, CapturedActivations)> {
        let mut cap = Vec::new();
        let out = self.run(prompt, latent_seed, steps, Some(&mut cap))?;
        Ok((out, cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resampling_round_trip_shapes() {
        let x = Matrix::from_fn(64, 3, |i, j| (i * 3 + j) as f64);
        let d = downsample(&x, 8, 8);
        assert_eq!(d.shape(), (16, 3));
        // top-left 2x2 block of column 0: 0, 3, 24, 27
        assert_eq!(d[(0, 0)], (0.0 + 3.0 + 24.0 + 27.0) / 4.0);
        let u = upsample(&d, 4, 4);
        assert_eq!(u.shape(), (64, 3));
        assert_eq!(u.row(9), d.row(0));
    }

    #[test]
    fn time_features_are_bounded() {
        for t in [0.0, 0.5, 1.0] {
            assert!(time_features(t).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
