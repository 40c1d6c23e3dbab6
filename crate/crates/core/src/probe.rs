//! Binary probing of a basis: a logistic classifier trained in the span of
//! anchor features, then scored on held-out prompts.

use serde::{Deserialize, Serialize};

use crate::capture::{capture_set, capture_text_features, concat_layers, AnchorRole, AnchorSet, CaptureConfig};
use crate::engine::{Category, Concept, ModelCheckpoint, Prompt, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::evaluation_group;
use crate::linalg::{basis_from_rows, Basis, Matrix};
use crate::REPORT_SCHEMA_VERSION;

/// Predictions within this distance of 0.5 on every training row mark the
/// probe as degenerate.
const DEGENERATE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub tau: f64,
    pub learn_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            learn_rate: 0.1,
            iterations: 500,
            l2: 1e-4,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::ValidationError {
                key: key.into(),
                reason,
            })
        };
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("probe.tau", format!("{} is outside (0, 1]", self.tau));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return bad("probe.learn_rate", format!("{} must be positive", self.learn_rate));
        }
        if self.iterations == 0 {
            return bad("probe.iterations", "must be at least 1".into());
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("probe.l2", format!("{} must be nonnegative", self.l2));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub basis: Basis,
    /// Projected coordinates are divided by these before the linear layer.
    pub scales: Vec<f64>,
    /// `k` coefficients followed by the bias.
    pub weights: Vec<f64>,
    /// Training loss before the first step and after each step.
    pub loss_history: Vec<f64>,
    pub degenerate: bool,
}

impl ProbeModel {
    fn logit(&self, coords: &[f64]) -> f64 {
        let k = coords.len();
        let z: f64 = coords
            .iter()
            .zip(&self.weights[..k])
            .zip(&self.scales)
            .map(|((x, w), s)| x * w / s)
            .sum();
        z + self.weights[k]
    }

    /// Positive-class probability of every row.
    pub fn predict(&self, features: &Matrix) -> Result<Vec<f64>> {
        let coords = self.basis.project_rows(features)?;
        Ok((0..coords.rows()).map(|r| sigmoid(self.logit(coords.row(r)))).collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    pos: &'a Matrix,
    neg: &'a Matrix,
    l2: f64,
}

impl Problem<'_> {
    /// Class-balanced regularized logistic loss and its gradient.
    fn loss_grad(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let k = w.len() - 1;
        let mut grad = vec![0.0; w.len()];
        let mut loss = 0.0;
        for (m, label) in [(self.pos, 1.0), (self.neg, 0.0)] {
            let n = m.rows() as f64;
            for r in 0..m.rows() {
                let x = m.row(r);
                let z: f64 = x.iter().zip(&w[..k]).map(|(a, b)| a * b).sum::<f64>() + w[k];
                loss += if label == 1.0 { softplus(-z) } else { softplus(z) } / (2.0 * n);
                let g = (sigmoid(z) - label) / (2.0 * n);
                for (gi, xi) in grad[..k].iter_mut().zip(x) {
                    *gi += g * xi;
                }
                grad[k] += g;
            }
        }
        for i in 0..k {
            loss += 0.5 * self.l2 * w[i] * w[i];
            grad[i] += self.l2 * w[i];
        }
        (loss, grad)
    }
}

/// Per-coordinate divisors: the class-balanced RMS of each coordinate,
/// enlarged when needed so the loss curvature stays below `1/learn_rate`.
/// With standardized coordinates the balanced second moment of `[x, 1]` has
/// trace `1 + k`, which bounds its largest eigenvalue, and the logistic
/// Hessian is at most a quarter of that plus `l2`.
fn coordinate_scales(p: &Matrix, n: &Matrix, cfg: &ProbeConfig) -> Vec<f64> {
    let k = p.cols();
    let mut rms = vec![0.0; k];
    for m in [p, n] {
        let w = 0.5 / m.rows() as f64;
        for r in 0..m.rows() {
            for (acc, v) in rms.iter_mut().zip(m.row(r)) {
                *acc += w * v * v;
            }
        }
    }
    let budget = 4.0 * (1.0 / cfg.learn_rate - cfg.l2) - 1.0;
    let shrink = if budget > 0.0 { (budget / k as f64).sqrt().min(1.0) } else { 1e-3 };
    rms.iter()
        .map(|v| {
            let s = v.sqrt();
            if s > 0.0 { s / shrink } else { 1.0 }
        })
        .collect()
}

/// Trains a probe in the span of `pos` rows at `cfg.tau`. Full-batch
/// gradient descent from zero.
pub fn train_probe(pos: &Matrix, neg: &Matrix, cfg: &ProbeConfig) -> Result<ProbeModel> {
    cfg.validate()?;
    if pos.rows() == 0 {
        return Err(Error::EmptyClass("positive"));
    }
    if neg.rows() == 0 {
        return Err(Error::EmptyClass("negative"));
    }
    if pos.cols() != neg.cols() {
        return Err(Error::DimError(format!(
            "positive width {} vs negative width {}",
            pos.cols(),
            neg.cols()
        )));
    }
    let basis = basis_from_rows(pos, cfg.tau)?;
    let p = basis.project_rows(pos)?;
    let n = basis.project_rows(neg)?;
    let scales = coordinate_scales(&p, &n, cfg);
    let standardize = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(r, c)] / scales[c]);
    let ps = standardize(&p);
    let ns = standardize(&n);
    let problem = Problem {
        pos: &ps,
        neg: &ns,
        l2: cfg.l2,
    };
    let mut w = vec![0.0; basis.rank() + 1];
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let (mut loss, mut grad) = problem.loss_grad(&w);
    history.push(loss);
    for _ in 0..cfg.iterations {
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= cfg.learn_rate * gi;
        }
        (loss, grad) = problem.loss_grad(&w);
        history.push(loss);
    }
    let mut model = ProbeModel {
        basis,
        scales,
        weights: w,
        loss_history: history,
        degenerate: false,
    };
    let train = Matrix::vstack(&[pos, neg])?;
    model.degenerate = model
        .predict(&train)?
        .iter()
        .all(|p| (p - 0.5).abs() < DEGENERATE_MARGIN);
    Ok(model)
}

/// Fraction of rows classified positive (probability above 0.5).
pub fn recall(model: &ProbeModel, eval_features: &Matrix) -> Result<f64> {
    if eval_features.rows() == 0 {
        return Err(Error::EmptyEval);
    }
    let probs = model.predict(eval_features)?;
    Ok(probs.iter().filter(|&&p| p > 0.5).count() as f64 / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSetup {
    /// Held-out natural prompts evaluated per concept.
    pub natural_prompts: usize,
    pub natural_seed: u64,
    /// Added to the capture base seed for evaluation trajectories.
    pub eval_seed_offset: u64,
}

impl Default for ProbeSetup {
    fn default() -> Self {
        Self {
            natural_prompts: 24,
            natural_seed: 3,
            eval_seed_offset: 50_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub basis_rank: usize,
    pub positives: usize,
    pub negatives: usize,
    pub eval_rows: usize,
    pub recall: f64,
    pub anchor_recall: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub schema_version: u32,
    pub concept: String,
    pub category: Category,
    pub recall_text: f64,
    pub recall_activation: f64,
    pub text: ArmReport,
    pub activation: ArmReport,
    pub config: ProbeConfig,
    pub capture: CaptureConfig,
    pub setup: ProbeSetup,
}

/// Trains and scores one arm. `pos`, `neg`, `eval` are feature rows in the
/// same space; `anchors` are the positive training rows scored again.
pub fn probe_arm(pos: &Matrix, neg: &Matrix, eval: &Matrix, cfg: &ProbeConfig) -> Result<ArmReport> {
    let model = train_probe(pos, neg, cfg)?;
    Ok(ArmReport {
        basis_rank: model.basis.rank(),
        positives: pos.rows(),
        negatives: neg.rows(),
        eval_rows: eval.rows(),
        recall: recall(&model, eval)?,
        anchor_recall: recall(&model, pos)?,
        degenerate: model.degenerate,
    })
}

fn activation_rows(ckpt: &ModelCheckpoint, set: &AnchorSet, cfg: &CaptureConfig) -> Result<Matrix> {
    concat_layers(&capture_set(ckpt, set, cfg)?)
}

/// Runs the text and activation arms with identical classes, threshold,
/// classifier and held-out prompts. Activation rows concatenate every
/// layer's pooled activation for one (prompt, latent, step).
pub fn probe_experiment(
    ckpt: &ModelCheckpoint,
    vocab: &Vocabulary,
    concept: Concept,
    category: Category,
    cfg: &ProbeConfig,
    capture: &CaptureConfig,
    setup: &ProbeSetup,
) -> Result<ProbeReport> {
    let positives = AnchorSet::forget("positive", vocab.template_prompts(concept, category))?;
    let neg_prompts: Vec<Prompt> = evaluation_group(vocab, concept)[1..]
        .iter()
        .flat_map(|c| vocab.template_prompts(*c, category))
        .collect();
    let negatives = AnchorSet::new("negative", AnchorRole::Retain, neg_prompts)?;
    let held_out = AnchorSet::forget(
        "natural",
        vocab.natural_prompts(concept, setup.natural_prompts, setup.natural_seed),
    )?;

    let text = probe_arm(
        &capture_text_features(ckpt, &positives)?,
        &capture_text_features(ckpt, &negatives)?,
        &capture_text_features(ckpt, &held_out)?,
        cfg,
    )?;

    let eval_capture = CaptureConfig {
        base_seed: capture.base_seed + setup.eval_seed_offset,
        ..*capture
    };
    let activation = probe_arm(
        &activation_rows(ckpt, &positives, capture)?,
        &activation_rows(ckpt, &negatives, capture)?,
        &activation_rows(ckpt, &held_out, &eval_capture)?,
        cfg,
    )?;

    Ok(ProbeReport {
        schema_version: REPORT_SCHEMA_VERSION,
        concept: vocab.name(concept.id).unwrap_or_default().to_string(),
        category,
        recall_text: text.recall,
        recall_activation: activation.recall,
        text,
        activation,
        config: *cfg,
        capture: *capture,
        setup: setup.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Matrix, Matrix) {
        let pos = Matrix::from_fn(10, 3, |i, j| match j {
            0 => 2.0 + 0.1 * i as f64,
            1 => 0.3 * (i as f64 - 4.5),
            _ => 0.05 * i as f64,
        });
        let neg = Matrix::from_fn(12, 3, |i, j| match j {
            0 => -1.0 - 0.1 * i as f64,
            1 => 0.2 * (i as f64 - 5.5),
            _ => -0.05 * i as f64,
        });
        (pos, neg)
    }

    #[test]
    fn separable_data_is_fit() {
        let (pos, neg) = separable();
        let m = train_probe(&pos, &neg, &ProbeConfig::default()).unwrap();
        assert_eq!(recall(&m, &pos).unwrap(), 1.0);
        assert_eq!(recall(&m, &neg).unwrap(), 0.0);
        assert!(!m.degenerate);
        assert!(m.loss_history.last().unwrap() < &m.loss_history[0]);
    }

    #[test]
    fn identical_classes_are_degenerate() {
        let (pos, _) = separable();
        let m = train_probe(&pos, &pos, &ProbeConfig::default()).unwrap();
        assert!(m.degenerate);
        for p in m.predict(&pos).unwrap() {
            assert!((p - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn errors() {
        let (pos, neg) = separable();
        let empty = Matrix::zeros(0, 3);
        assert!(matches!(train_probe(&empty, &neg, &ProbeConfig::default()), Err(Error::EmptyClass(_))));
        assert!(matches!(train_probe(&pos, &empty, &ProbeConfig::default()), Err(Error::EmptyClass(_))));
        assert!(matches!(
            train_probe(&pos, &Matrix::zeros(3, 2), &ProbeConfig::default()),
            Err(Error::DimError(_))
        ));
        let m = train_probe(&pos, &neg, &ProbeConfig::default()).unwrap();
        assert!(matches!(recall(&m, &empty), Err(Error::EmptyEval)));
        assert!(matches!(recall(&m, &Matrix::zeros(2, 4)), Err(Error::DimError(_))));
    }
}
