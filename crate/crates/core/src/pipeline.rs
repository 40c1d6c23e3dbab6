//! Anchor construction and the ablation sweeps built from capture, editor
//! and eval.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::capture::AnchorSet;
use crate::editor::{run_edit, EditConfig, EditMode};
use crate::engine::{Category, Concept, ModelCheckpoint, Prompt, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{calibrate_group, evaluation_group, measure, Detector, MetricReport, SuiteConfig};

/// Prompt-bank seed for natural forget anchors in the forget sweep.
pub const FORGET_PROMPT_SEED: u64 = 21;

/// The concept's prompt templates filled with its name.
pub fn forget_anchors(vocab: &Vocabulary, concept: Concept, templates: Category) -> Result<AnchorSet> {
    let name = vocab.name(concept.id).unwrap_or_default();
    AnchorSet::forget(name, vocab.template_prompts(concept, templates))
}

/// Concepts available for retain anchors, in order of use: the evaluation
/// peers, the rest of the category, then the other categories.
pub fn retain_pool(vocab: &Vocabulary, target: Concept) -> Vec<Concept> {
    let group = evaluation_group(vocab, target);
    let mut pool: Vec<Concept> = group[1..].to_vec();
    pool.extend(
        vocab
            .concepts_in(target.category)
            .into_iter()
            .filter(|c| !group.contains(c)),
    );
    for cat in Category::ALL {
        if cat != target.category {
            pool.extend(vocab.concepts_in(cat));
        }
    }
    pool
}

/// `count` retain anchors: whole template sets of pool concepts, truncated
/// to `count`. Requests beyond the pool are capped.
pub fn retain_anchors(vocab: &Vocabulary, target: Concept, templates: Category, count: usize) -> AnchorSet {
    let prompts: Vec<Prompt> = retain_pool(vocab, target)
        .into_iter()
        .flat_map(|c| vocab.template_prompts(c, templates))
        .take(count)
        .collect();
    AnchorSet::retain("retain", prompts)
}

/// Default retain set: every template of each evaluation peer.
pub fn default_retain(vocab: &Vocabulary, target: Concept, templates: Category) -> AnchorSet {
    let per = templates.templates().len();
    retain_anchors(vocab, target, templates, (evaluation_group(vocab, target).len() - 1) * per)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Forget,
    Retain,
    Steps,
    Latents,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forget" => Ok(Self::Forget),
            "retain" => Ok(Self::Retain),
            "steps" => Ok(Self::Steps),
            "latents" => Ok(Self::Latents),
            other => Err(Error::ValidationError {
                key: "axis".into(),
                reason: format!("unknown sweep axis `{other}`"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Forget => "forget",
            Self::Retain => "retain",
            Self::Steps => "steps",
            Self::Latents => "latents",
        }
    }

    pub fn default_values(self) -> Vec<usize> {
        match self {
            Self::Forget => vec![6, 15, 30, 50],
            Self::Retain => vec![0, 36, 54, 120, 180],
            Self::Steps => vec![1, 10],
            Self::Latents => vec![1, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: usize,
    pub mode: EditMode,
    pub forget_anchors: usize,
    pub retain_anchors: usize,
    pub steps: usize,
    pub n_lat: usize,
    pub target: f64,
    pub retention: f64,
    pub quality: f64,
    pub h_mean: f64,
}

/// Anchors and edit config for one sweep point.
pub fn sweep_point(
    vocab: &Vocabulary,
    target: Concept,
    axis: SweepAxis,
    value: usize,
    base: &EditConfig,
) -> Result<(AnchorSet, AnchorSet, EditConfig)> {
    let mut cfg = *base;
    let mut a_f = forget_anchors(vocab, target, target.category)?;
    let mut a_r = default_retain(vocab, target, target.category);
    match axis {
        SweepAxis::Forget => {
            let prompts = vocab.natural_prompts(target, value, FORGET_PROMPT_SEED);
            a_f = AnchorSet::forget(a_f.name, prompts)?;
        }
        SweepAxis::Retain => a_r = retain_anchors(vocab, target, target.category, value),
        SweepAxis::Steps => cfg.capture.steps = value,
        SweepAxis::Latents => cfg.capture.n_lat = value,
    }
    cfg.validate()?;
    Ok((a_f, a_r, cfg))
}

/// Edits and measures every (value, mode) point against detectors
/// calibrated once on the baseline.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    ckpt: &ModelCheckpoint,
    vocab: &Vocabulary,
    target: Concept,
    axis: SweepAxis,
    values: &[usize],
    modes: &[EditMode],
    base: &EditConfig,
    suite: &SuiteConfig,
) -> Result<Vec<SweepRow>> {
    let detectors: Vec<Detector> = calibrate_group(ckpt, vocab, target, suite)?;
    let mut rows = Vec::with_capacity(values.len() * modes.len());
    for &value in values {
        for &mode in modes {
            let (a_f, a_r, mut cfg) = sweep_point(vocab, target, axis, value, base)?;
            cfg.mode = mode;
            let (edited, _) = run_edit(ckpt, &a_f, &a_r, &cfg)?;
            let m: MetricReport = measure(ckpt, &edited, vocab, target, &detectors, suite)?;
            rows.push(SweepRow {
                axis,
                value,
                mode,
                forget_anchors: a_f.len(),
                retain_anchors: a_r.len(),
                steps: cfg.capture.steps,
                n_lat: cfg.capture.n_lat,
                target: m.target,
                retention: m.retention,
                quality: m.quality,
                h_mean: m.h_mean,
            });
        }
    }
    Ok(rows)
}

/// Least-squares slope of `y` against `x`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::ParseError(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn save_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, rows)?;
    crate::io::write_atomic(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retain_pool_starts_with_peers_and_covers_everything() {
        let v = Vocabulary::builtin();
        let t = v.concept("pikachu").unwrap();
        let pool = retain_pool(&v, t);
        assert_eq!(pool.len(), 59);
        assert_eq!(&pool[..9], &evaluation_group(&v, t)[1..]);
        assert!(!pool.contains(&t));
    }

    #[test]
    fn retain_counts() {
        let v = Vocabulary::builtin();
        let t = v.concept("pikachu").unwrap();
        for n in [0, 36, 54, 120, 180] {
            assert_eq!(retain_anchors(&v, t, t.category, n).len(), n);
        }
        assert_eq!(retain_anchors(&v, t, t.category, 10_000).len(), 59 * 6);
        assert_eq!(default_retain(&v, t, t.category).len(), 54);
    }

    #[test]
    fn slope_of_a_line() {
        assert!((slope(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]) - 2.0).abs() < 1e-12);
        assert_eq!(slope(&[1.0, 1.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let row = SweepRow {
            axis: SweepAxis::Retain,
            value: 36,
            mode: EditMode::Text,
            forget_anchors: 6,
            retain_anchors: 36,
            steps: 10,
            n_lat: 10,
            target: 0.5,
            retention: 0.75,
            quality: 1.25,
            h_mean: 0.6,
        };
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "axis,value,mode,forget_anchors,retain_anchors,steps,n_lat,target,retention,quality,h_mean\nretain,36,text,6,36,10,10,0.5,0.75,1.25,0.6\n"
        );
    }
}
