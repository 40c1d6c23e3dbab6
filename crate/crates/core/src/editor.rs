//! The closed-form edit: capture, per-layer bases, erasure operators, and
//! the key/value weight update. Also the text-space baseline, which builds a
//! single operator from text features and applies it on the right.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capture::{capture_set, capture_text_features, ActivationMatrix, AnchorSet, CaptureConfig};
use crate::engine::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::linalg::{
    apply_edit_left, apply_edit_right, basis_from_rows, erasure_operator, min_principal_angle_deg,
    projector_of, ErasureOperator, Matrix,
};
use crate::REPORT_SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditMode {
    Activation,
    Text,
}

impl EditMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "activation" => Ok(Self::Activation),
            "text" => Ok(Self::Text),
            other => Err(Error::ConfigError(format!("unknown edit mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub tau_f: f64,
    pub tau_r: f64,
    pub capture: CaptureConfig,
    pub mode: EditMode,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            tau_f: 0.95,
            tau_r: 0.95,
            capture: CaptureConfig::default(),
            mode: EditMode::Activation,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, tau) in [("edit.tau_f", self.tau_f), ("edit.tau_r", self.tau_r)] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(Error::ValidationError {
                    key: key.into(),
                    reason: format!("{tau} is outside (0, 1]"),
                });
            }
        }
        self.capture.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub dim: usize,
    pub forget_rank: usize,
    pub retain_rank: usize,
    pub forget_explained_variance: f64,
    pub retain_explained_variance: Option<f64>,
    /// `‖E − I‖_F`
    pub operator_distance: f64,
    /// Smallest principal angle between forget and retain spans, degrees.
    pub overlap_angle_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub schema_version: u32,
    pub mode: EditMode,
    pub layers: Vec<LayerReport>,
    pub forget_anchors: usize,
    pub retain_anchors: usize,
    pub config: EditConfig,
    pub wall_clock_ms: u64,
}

/// Erasure operator for one feature space from stacked forget rows and
/// optional retain rows.
pub fn layer_operator(
    layer: usize,
    h_f: &Matrix,
    h_r: Option<&Matrix>,
    tau_f: f64,
    tau_r: f64,
) -> Result<(ErasureOperator, LayerReport)> {
    let b_f = basis_from_rows(h_f, tau_f)?;
    let p_f = projector_of(&b_f)?;
    let (e, retain_ev, angle) = match h_r {
        None => (erasure_operator(&p_f, None)?, None, None),
        Some(h_r) => {
            if h_r.cols() != h_f.cols() {
                return Err(Error::DimError(format!(
                    "layer {layer}: forget width {} vs retain width {}",
                    h_f.cols(),
                    h_r.cols()
                )));
            }
            let b_r = basis_from_rows(h_r, tau_r)?;
            let p_r = projector_of(&b_r)?;
            let angle = min_principal_angle_deg(&b_f, &b_r)?;
            (erasure_operator(&p_f, Some(&p_r))?, Some(b_r.explained_variance), Some(angle))
        }
    };
    let report = LayerReport {
        layer,
        dim: e.dim,
        forget_rank: b_f.rank(),
        retain_rank: e.retain_rank,
        forget_explained_variance: b_f.explained_variance,
        retain_explained_variance: retain_ev,
        operator_distance: e.distance_from_identity(),
        overlap_angle_deg: angle,
    };
    Ok((e, report))
}

/// Per-layer operators from already captured activation matrices. Used by
/// [`pure_edit`] and for replaying an edit on fixed `H` matrices.
pub fn activation_operators(
    h_f: &[ActivationMatrix],
    h_r: Option<&[ActivationMatrix]>,
    tau_f: f64,
    tau_r: f64,
) -> Result<Vec<(ErasureOperator, LayerReport)>> {
    if let Some(h_r) = h_r {
        if h_r.len() != h_f.len() {
            return Err(Error::DimError(format!(
                "{} forget layers vs {} retain layers",
                h_f.len(),
                h_r.len()
            )));
        }
    }
    h_f.par_iter()
        .enumerate()
        .map(|(i, f)| layer_operator(i, &f.data, h_r.map(|r| &r[i].data), tau_f, tau_r))
        .collect()
}

/// Copy of `ckpt` with `W_K ← E·W_K` and `W_V ← E·W_V` at every layer.
pub fn apply_activation_operators(ckpt: &ModelCheckpoint, ops: &[ErasureOperator]) -> Result<ModelCheckpoint> {
    if ops.len() != ckpt.layers.len() {
        return Err(Error::DimError(format!(
            "{} operators for {} layers",
            ops.len(),
            ckpt.layers.len()
        )));
    }
    let mut out = ckpt.clone();
    for (lw, e) in out.layers.iter_mut().zip(ops) {
        lw.w_k = apply_edit_left(e, &lw.w_k)?;
        lw.w_v = apply_edit_left(e, &lw.w_v)?;
    }
    Ok(out)
}

/// Copy of `ckpt` with `W_K ← W_K·E` and `W_V ← W_V·E` at every layer.
pub fn apply_text_operator(ckpt: &ModelCheckpoint, e_text: &ErasureOperator) -> Result<ModelCheckpoint> {
    let mut out = ckpt.clone();
    for lw in &mut out.layers {
        lw.w_k = apply_edit_right(&lw.w_k, e_text)?;
        lw.w_v = apply_edit_right(&lw.w_v, e_text)?;
    }
    Ok(out)
}

fn check_forget(a_f: &AnchorSet) -> Result<()> {
    if a_f.is_empty() {
        return Err(Error::EmptyAnchors(a_f.name.clone()));
    }
    Ok(())
}

fn finish_report(
    mode: EditMode,
    layers: Vec<LayerReport>,
    a_f: &AnchorSet,
    a_r: &AnchorSet,
    cfg: &EditConfig,
    start: Instant,
) -> EditReport {
    EditReport {
        schema_version: REPORT_SCHEMA_VERSION,
        mode,
        layers,
        forget_anchors: a_f.len(),
        retain_anchors: a_r.len(),
        config: EditConfig { mode, ..*cfg },
        wall_clock_ms: start.elapsed().as_millis() as u64,
    }
}

/// Activation-space edit. An empty retain set gives `E = I − P_F` per layer.
/// Activations are captured from `ckpt`, which is left untouched.
pub fn pure_edit(
    ckpt: &ModelCheckpoint,
    a_f: &AnchorSet,
    a_r: &AnchorSet,
    cfg: &EditConfig,
) -> Result<(ModelCheckpoint, EditReport)> {
    let start = Instant::now();
    check_forget(a_f)?;
    cfg.validate()?;
    let h_f = capture_set(ckpt, a_f, &cfg.capture)?;
    let h_r = if a_r.is_empty() {
        None
    } else {
        Some(capture_set(ckpt, a_r, &cfg.capture)?)
    };
    let results = activation_operators(&h_f, h_r.as_deref(), cfg.tau_f, cfg.tau_r)?;
    let (ops, layers): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let edited = apply_activation_operators(ckpt, &ops)?;
    Ok((edited, finish_report(EditMode::Activation, layers, a_f, a_r, cfg, start)))
}

/// The `d_e x d_e` operator of the text-space baseline.
pub fn text_operator(
    ckpt: &ModelCheckpoint,
    a_f: &AnchorSet,
    a_r: &AnchorSet,
    tau_f: f64,
    tau_r: f64,
) -> Result<(ErasureOperator, LayerReport)> {
    check_forget(a_f)?;
    let t_f = capture_text_features(ckpt, a_f)?;
    let t_r = if a_r.is_empty() {
        None
    } else {
        Some(capture_text_features(ckpt, a_r)?)
    };
    layer_operator(0, &t_f, t_r.as_ref(), tau_f, tau_r)
}

/// Text-space baseline: one shared operator right-multiplied into every
/// layer's key and value projections.
pub fn text_basis_edit(
    ckpt: &ModelCheckpoint,
    a_f: &AnchorSet,
    a_r: &AnchorSet,
    cfg: &EditConfig,
) -> Result<(ModelCheckpoint, EditReport)> {
    let start = Instant::now();
    cfg.validate()?;
    let (e, base) = text_operator(ckpt, a_f, a_r, cfg.tau_f, cfg.tau_r)?;
    let edited = apply_text_operator(ckpt, &e)?;
    let layers = (0..ckpt.layers.len())
        .map(|layer| LayerReport { layer, ..base.clone() })
        .collect();
    Ok((edited, finish_report(EditMode::Text, layers, a_f, a_r, cfg, start)))
}

/// Dispatches on `cfg.mode`.
pub fn run_edit(
    ckpt: &ModelCheckpoint,
    a_f: &AnchorSet,
    a_r: &AnchorSet,
    cfg: &EditConfig,
) -> Result<(ModelCheckpoint, EditReport)> {
    match cfg.mode {
        EditMode::Activation => pure_edit(ckpt, a_f, a_r, cfg),
        EditMode::Text => text_basis_edit(ckpt, a_f, a_r, cfg),
    }
}
