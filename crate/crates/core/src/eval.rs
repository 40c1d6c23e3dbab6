//! Forgetting and retention metrics on the toy engine.
//!
//! Generations are scored by cosine-threshold detectors calibrated on the
//! unedited model. Quality is the Fréchet distance between Gaussian fits of
//! `feature_summary` populations, and the summary is a harmonic mean of the
//! converted metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{Category, Concept, ModelCheckpoint, Prompt, Vocabulary, CONCEPTS_PER_CATEGORY};
use crate::error::{Error, Result};
use crate::linalg::{cosine, sqrt_psd, Matrix};
use crate::REPORT_SCHEMA_VERSION;

/// Minimum number of (prompt, seed) pairs a detector is calibrated on.
pub const MIN_CALIBRATION_PAIRS: usize = 16;

/// Concepts of a category that form its evaluation group.
pub const GROUP_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub concept: String,
    pub signature: Vec<f64>,
    pub threshold: f64,
    /// Detection rate on the calibration positives at `threshold`.
    pub detection_rate: f64,
    /// Detection rate on the calibration negatives at `threshold`.
    pub false_positive_rate: f64,
}

impl Detector {
    pub fn score(&self, features: &[f64]) -> f64 {
        cosine(features, &self.signature)
    }

    pub fn fires(&self, features: &[f64]) -> bool {
        self.score(features) >= self.threshold
    }

    /// Fraction of feature vectors on which the detector fires.
    pub fn rate(&self, features: &[Vec<f64>]) -> Result<f64> {
        if features.is_empty() {
            return Err(Error::EmptyEval);
        }
        let hits = features.iter().filter(|f| self.fires(f)).count();
        Ok(hits as f64 / features.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBounds {
    pub min_detection: f64,
    pub max_false_positive: f64,
}

impl Default for CalibrationBounds {
    fn default() -> Self {
        Self {
            min_detection: 0.9,
            max_false_positive: 0.1,
        }
    }
}

/// Every (prompt, seed) combination, prompt-major.
pub fn pairs(prompts: &[Prompt], seeds: &[u64]) -> Vec<(Prompt, u64)> {
    prompts
        .iter()
        .flat_map(|p| seeds.iter().map(move |&s| (p.clone(), s)))
        .collect()
}

/// `feature_summary` of every generation, in input order.
pub fn generate_features(ckpt: &ModelCheckpoint, pairs: &[(Prompt, u64)], steps: usize) -> Result<Vec<Vec<f64>>> {
    pairs
        .par_iter()
        .map(|(p, s)| Ok(ckpt.sample(p, *s, steps)?.feature_summary))
        .collect()
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let mut m = vec![0.0; d];
    for r in rows {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// Detector from precomputed baseline features. The signature is the mean of
/// `positives`; the threshold is the largest value that still detects at
/// least `min_detection` of them, accepted only if it keeps the false-positive
/// rate on `negatives` within bounds.
pub fn calibrate_from_features(
    concept: &str,
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    bounds: CalibrationBounds,
) -> Result<Detector> {
    if positives.len() < MIN_CALIBRATION_PAIRS {
        return Err(Error::SampleError(format!(
            "{} calibration samples for `{concept}`, need at least {MIN_CALIBRATION_PAIRS}",
            positives.len()
        )));
    }
    if negatives.is_empty() {
        return Err(Error::NoPeers);
    }
    let signature = mean_vector(positives);
    if signature.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateInput(format!("zero signature for `{concept}`")));
    }
    let mut scores: Vec<f64> = positives.iter().map(|f| cosine(f, &signature)).collect();
    scores.sort_by(f64::total_cmp);
    let n = scores.len();
    let need = (bounds.min_detection * n as f64 - 1e-9).ceil() as usize;
    let threshold = scores[n - need.clamp(1, n)];
    let mut det = Detector {
        concept: concept.to_string(),
        signature,
        threshold,
        detection_rate: 0.0,
        false_positive_rate: 0.0,
    };
    det.detection_rate = det.rate(positives)?;
    det.false_positive_rate = det.rate(negatives)?;
    if det.false_positive_rate > bounds.max_false_positive {
        return Err(Error::CalibrationInfeasible {
            concept: concept.to_string(),
            threshold,
            detection: det.detection_rate,
            false_positive: det.false_positive_rate,
        });
    }
    Ok(det)
}

/// Calibrates a detector on baseline generations of `prompts` (the concept)
/// against `negative_prompts` (other concepts of its group).
pub fn calibrate_detector(
    baseline: &ModelCheckpoint,
    concept: &str,
    prompts: &[Prompt],
    negative_prompts: &[Prompt],
    seeds: &[u64],
    steps: usize,
) -> Result<Detector> {
    let pos = generate_features(baseline, &pairs(prompts, seeds), steps)?;
    let neg = generate_features(baseline, &pairs(negative_prompts, seeds), steps)?;
    calibrate_from_features(concept, &pos, &neg, CalibrationBounds::default())
}

/// Detector hit rate over all (prompt, seed) generations.
pub fn target_proportion(
    ckpt: &ModelCheckpoint,
    detector: &Detector,
    prompts: &[Prompt],
    seeds: &[u64],
    steps: usize,
) -> Result<f64> {
    let feats = generate_features(ckpt, &pairs(prompts, seeds), steps)?;
    detector.rate(&feats)
}

/// Mean detection rate over peer concepts, each scored by its own detector on
/// its own prompts.
pub fn retention(
    ckpt: &ModelCheckpoint,
    detectors: &[Detector],
    peer_prompts: &[Vec<Prompt>],
    seeds: &[u64],
    steps: usize,
) -> Result<f64> {
    if detectors.is_empty() {
        return Err(Error::NoPeers);
    }
    if detectors.len() != peer_prompts.len() {
        return Err(Error::DimError(format!(
            "{} detectors for {} prompt lists",
            detectors.len(),
            peer_prompts.len()
        )));
    }
    let rates = detectors
        .iter()
        .zip(peer_prompts)
        .map(|(d, p)| target_proportion(ckpt, d, p, seeds, steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

fn covariance(x: &Matrix, mean: &[f64]) -> Matrix {
    let (n, d) = x.shape();
    let mut c = Matrix::zeros(d, d);
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in i..d {
                c[(i, j)] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = c[(i, j)] / denom;
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})` between the rows of `a` and `b`.
/// Each side needs at least twice as many rows as columns.
pub fn frechet_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(Error::DimError(format!(
            "populations of width {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let d = a.cols();
    for (side, m) in [("first", a), ("second", b)] {
        if m.rows() < 2 * d || m.rows() < 2 {
            return Err(Error::SampleError(format!(
                "{side} population has {} samples, need at least {}",
                m.rows(),
                (2 * d).max(2)
            )));
        }
    }
    let mu_a = a.column_mean();
    let mu_b = b.column_mean();
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let s_a = covariance(a, &mu_a);
    let s_b = covariance(b, &mu_b);
    // tr((Σ₁Σ₂)^{1/2}) = tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}), which stays symmetric.
    let r = sqrt_psd(&s_a)?;
    let inner = r.matmul(&s_b)?.matmul(&r)?;
    let cross = sqrt_psd(&inner)?.trace();
    Ok((mean_term + s_a.trace() + s_b.trace() - 2.0 * cross).max(0.0))
}

/// Fréchet distance between generations of two checkpoints on the same
/// (prompt, seed) pairs.
pub fn frechet_quality(
    ckpt_a: &ModelCheckpoint,
    ckpt_b: &ModelCheckpoint,
    prompts: &[Prompt],
    seeds: &[u64],
    steps: usize,
) -> Result<f64> {
    let p = pairs(prompts, seeds);
    let fa = generate_features(ckpt_a, &p, steps)?;
    let fb = generate_features(ckpt_b, &p, steps)?;
    if fa.is_empty() {
        return Err(Error::SampleError("no quality samples".into()));
    }
    frechet_distance(&Matrix::from_rows(&fa)?, &Matrix::from_rows(&fb)?)
}

/// Harmonic mean of `1 − target`, `retention`, `1 − attack` (when present)
/// and `exp(−quality/20)`. Any zero component gives 0.
pub fn harmonic_summary(target: f64, retention: f64, attack: Option<f64>, quality: f64) -> Result<f64> {
    let check = |key: &str, v: f64| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::ValidationError {
                key: key.into(),
                reason: format!("{v} is not a proportion"),
            })
        }
    };
    check("target", target)?;
    check("retention", retention)?;
    if let Some(a) = attack {
        check("attack", a)?;
    }
    if !(quality >= 0.0) {
        return Err(Error::ValidationError {
            key: "quality".into(),
            reason: format!("{quality} is negative"),
        });
    }
    let mut parts = vec![1.0 - target, retention, (-quality / 20.0).exp()];
    if let Some(a) = attack {
        parts.push(1.0 - a);
    }
    if parts.iter().any(|&p| p <= 0.0) {
        return Ok(0.0);
    }
    Ok(parts.len() as f64 / parts.iter().map(|p| 1.0 / p).sum::<f64>())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// Natural prompts per concept for evaluation and for calibration.
    pub prompts_per_concept: usize,
    pub calibration_seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    /// Seed of the evaluation prompt bank.
    pub prompt_seed: u64,
    /// Seed of the calibration prompt bank.
    pub calibration_prompt_seed: u64,
    /// Concepts per other category used for the quality populations.
    pub quality_concepts: usize,
    pub quality_seeds: Vec<u64>,
    /// Denoising steps for evaluation generations; 0 uses the engine default.
    pub steps: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            prompts_per_concept: 8,
            calibration_seeds: (500_000..500_004).collect(),
            eval_seeds: (600_000..600_004).collect(),
            prompt_seed: 11,
            calibration_prompt_seed: 12,
            quality_concepts: 6,
            quality_seeds: (700_000..700_006).collect(),
            steps: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::ValidationError {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if self.prompts_per_concept == 0 {
            return bad("suite.prompts_per_concept", "must be at least 1");
        }
        if self.eval_seeds.is_empty() {
            return bad("suite.eval_seeds", "must not be empty");
        }
        if self.prompts_per_concept * self.calibration_seeds.len() < MIN_CALIBRATION_PAIRS {
            return bad(
                "suite.calibration_seeds",
                "prompts_per_concept x calibration seeds must reach 16 pairs",
            );
        }
        if self.calibration_seeds.iter().any(|s| self.eval_seeds.contains(s)) {
            return bad("suite.eval_seeds", "must be disjoint from calibration_seeds");
        }
        if self.quality_concepts == 0 || self.quality_seeds.is_empty() {
            return bad("suite.quality_concepts", "quality populations must be nonempty");
        }
        if self.quality_concepts > CONCEPTS_PER_CATEGORY {
            return bad("suite.quality_concepts", "exceeds concepts per category");
        }
        Ok(())
    }

    pub fn steps_for(&self, ckpt: &ModelCheckpoint) -> usize {
        if self.steps == 0 {
            ckpt.config.steps
        } else {
            self.steps
        }
    }
}

/// The target and the other concepts of the first [`GROUP_SIZE`] in its
/// category, target first.
pub fn evaluation_group(vocab: &Vocabulary, target: Concept) -> Vec<Concept> {
    let mut group = vec![target];
    group.extend(
        vocab
            .concepts_in(target.category)
            .into_iter()
            .filter(|c| *c != target)
            .take(GROUP_SIZE - 1),
    );
    group
}

/// Concepts of the other categories used for the quality populations.
pub fn quality_concepts(vocab: &Vocabulary, target: Concept, per_category: usize) -> Vec<Concept> {
    Category::ALL
        .iter()
        .filter(|c| **c != target.category)
        .flat_map(|c| {
            vocab
                .concepts_in(*c)
                .into_iter()
                .rev()
                .take(per_category)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub target: f64,
    pub retention: f64,
    /// Always absent on the toy engine; kept so reports share the full schema.
    pub attack: Option<f64>,
    /// Fréchet distance to the baseline model on general prompts (toy features).
    pub quality: f64,
    pub h_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub schema_version: u32,
    pub concept: String,
    pub category: Category,
    pub peers: Vec<String>,
    pub baseline: MetricReport,
    pub edited: MetricReport,
    pub detectors: Vec<Detector>,
    pub suite: SuiteConfig,
}

/// Detectors for every concept of the target's group, calibrated on the
/// baseline. Index 0 is the target.
pub fn calibrate_group(
    baseline: &ModelCheckpoint,
    vocab: &Vocabulary,
    target: Concept,
    suite: &SuiteConfig,
) -> Result<Vec<Detector>> {
    suite.validate()?;
    let steps = suite.steps_for(baseline);
    let group = evaluation_group(vocab, target);
    let feats = group
        .iter()
        .map(|c| {
            let prompts = vocab.natural_prompts(*c, suite.prompts_per_concept, suite.calibration_prompt_seed);
            generate_features(baseline, &pairs(&prompts, &suite.calibration_seeds), steps)
        })
        .collect::<Result<Vec<_>>>()?;
    group
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let negatives: Vec<Vec<f64>> = feats
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, f)| f.iter().cloned())
                .collect();
            calibrate_from_features(
                vocab.name(c.id).unwrap_or_default(),
                &feats[i],
                &negatives,
                CalibrationBounds::default(),
            )
        })
        .collect()
}

/// Target, retention and quality of one checkpoint against calibrated
/// detectors.
pub fn measure(
    baseline: &ModelCheckpoint,
    ckpt: &ModelCheckpoint,
    vocab: &Vocabulary,
    target: Concept,
    detectors: &[Detector],
    suite: &SuiteConfig,
) -> Result<MetricReport> {
    let steps = suite.steps_for(baseline);
    let group = evaluation_group(vocab, target);
    let prompts: Vec<Vec<Prompt>> = group
        .iter()
        .map(|c| vocab.natural_prompts(*c, suite.prompts_per_concept, suite.prompt_seed))
        .collect();
    let t = target_proportion(ckpt, &detectors[0], &prompts[0], &suite.eval_seeds, steps)?;
    let r = retention(ckpt, &detectors[1..], &prompts[1..], &suite.eval_seeds, steps)?;
    let quality_prompts: Vec<Prompt> = quality_concepts(vocab, target, suite.quality_concepts)
        .into_iter()
        .flat_map(|c| vocab.natural_prompts(c, 2, suite.prompt_seed))
        .collect();
    let q = if std::ptr::eq(baseline, ckpt) {
        0.0
    } else {
        frechet_quality(baseline, ckpt, &quality_prompts, &suite.quality_seeds, steps)?
    };
    Ok(MetricReport {
        target: t,
        retention: r,
        attack: None,
        quality: q,
        h_mean: harmonic_summary(t, r, None, q)?,
    })
}

/// Baseline and edited metrics for erasing `target`.
pub fn run_benchmark(
    baseline: &ModelCheckpoint,
    edited: &ModelCheckpoint,
    vocab: &Vocabulary,
    target: Concept,
    suite: &SuiteConfig,
) -> Result<BenchmarkReport> {
    let detectors = calibrate_group(baseline, vocab, target, suite)?;
    let base = measure(baseline, baseline, vocab, target, &detectors, suite)?;
    let edit = measure(baseline, edited, vocab, target, &detectors, suite)?;
    Ok(BenchmarkReport {
        schema_version: REPORT_SCHEMA_VERSION,
        concept: vocab.name(target.id).unwrap_or_default().to_string(),
        category: target.category,
        peers: detectors[1..].iter().map(|d| d.concept.clone()).collect(),
        baseline: base,
        edited: edit,
        detectors,
        suite: suite.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_perfect_and_zero() {
        assert!((harmonic_summary(0.0, 1.0, Some(0.0), 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(harmonic_summary(1.0, 0.5, None, 3.0).unwrap(), 0.0);
        assert!(harmonic_summary(1.2, 0.5, None, 3.0).is_err());
        assert!(harmonic_summary(0.2, 0.5, None, -1.0).is_err());
    }

    #[test]
    fn frechet_identical_and_shifted() {
        let a = Matrix::from_fn(40, 3, |i, j| ((i * 7 + j * 13) % 11) as f64 * 0.3 - (j as f64));
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
        let delta = [0.5, -1.0, 2.0];
        let b = Matrix::from_fn(40, 3, |i, j| a[(i, j)] + delta[j]);
        let expect: f64 = delta.iter().map(|d| d * d).sum();
        assert!((frechet_distance(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn frechet_needs_samples() {
        let a = Matrix::zeros(5, 3);
        let b = Matrix::zeros(10, 3);
        assert!(matches!(frechet_distance(&a, &b), Err(Error::SampleError(_))));
    }

    #[test]
    fn calibration_threshold_detects_ninety_percent() {
        let pos: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, 0.05 * i as f64]).collect();
        let neg: Vec<Vec<f64>> = (0..20).map(|i| vec![-0.2 * i as f64, 1.0]).collect();
        let d = calibrate_from_features("x", &pos, &neg, CalibrationBounds::default()).unwrap();
        assert!(d.detection_rate >= 0.9);
        assert!(d.false_positive_rate <= 0.1);
        let raised = Detector {
            threshold: d.threshold + 0.01,
            ..d.clone()
        };
        assert!(raised.rate(&pos).unwrap() <= d.rate(&pos).unwrap());
    }

    #[test]
    fn calibration_reports_infeasible() {
        let pos: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, 0.01 * i as f64]).collect();
        let err = calibrate_from_features("x", &pos, &pos, CalibrationBounds::default()).unwrap_err();
        assert!(matches!(err, Error::CalibrationInfeasible { .. }));
    }

    #[test]
    fn group_has_target_first_and_nine_peers() {
        let v = Vocabulary::builtin();
        let c = v.concept("pikachu").unwrap();
        let g = evaluation_group(&v, c);
        assert_eq!(g.len(), GROUP_SIZE);
        assert_eq!(g[0], c);
        assert!(g[1..].iter().all(|p| p.category == c.category && *p != c));
    }
}
