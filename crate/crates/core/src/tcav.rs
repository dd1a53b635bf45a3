//! Conceptual sensitivity, TCAV scores and their significance testing.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cav::{fit_cav, Cav, ProbeConfig};
use crate::dataset::ConceptSet;
use crate::error::{Error, Result};
use crate::math;
use crate::model::LayeredModel;
use crate::rng;
use crate::stats;
use crate::tensor::Tensor;

/// Sensitivity of one input's class logit to a concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub input_id: usize,
    pub class: usize,
    pub layer: String,
    pub concept: String,
    pub value: f64,
}

fn check_cav(model: &LayeredModel, layer: &str, cav: &Cav) -> Result<()> {
    if cav.layer != layer {
        return Err(Error::InvalidConfig(format!(
            "CAV `{}` was learned at layer `{}`, not `{layer}`",
            cav.concept, cav.layer
        )));
    }
    let width = model.width(layer)?;
    if cav.width() != width {
        return Err(Error::DimensionMismatch {
            expected: width,
            got: cav.width(),
        });
    }
    Ok(())
}

/// Gradient of the class logit with respect to the layer activation,
/// dotted with the CAV.
pub fn directional_derivative(
    model: &LayeredModel,
    layer: &str,
    cav: &Cav,
    class: usize,
    x: &Tensor,
) -> Result<f64> {
    check_cav(model, layer, cav)?;
    let a = model.activation_at(layer, x)?;
    let g = model.logit_grad_at(layer, class, &a)?;
    Ok(math::dot(g.data(), &cav.vector))
}

/// Directional derivatives for a batch of inputs.
pub fn sensitivities(
    model: &LayeredModel,
    layer: &str,
    cav: &Cav,
    class: usize,
    xs: &[&Tensor],
) -> Result<Vec<f64>> {
    check_cav(model, layer, cav)?;
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    let grads = class_gradients(model, layer, class, xs)?;
    Ok(project(&grads, &cav.vector))
}

pub fn sensitivity_records(
    model: &LayeredModel,
    layer: &str,
    cav: &Cav,
    class: usize,
    xs: &[&Tensor],
) -> Result<Vec<SensitivityRecord>> {
    let values = sensitivities(model, layer, cav, class, xs)?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Diverged { epoch: i });
    }
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, value)| SensitivityRecord {
            input_id: i,
            class,
            layer: layer.to_string(),
            concept: cav.concept.clone(),
            value,
        })
        .collect())
}

/// `[n, m]` gradients of the class logit at `layer`, one row per input.
pub fn class_gradients(
    model: &LayeredModel,
    layer: &str,
    class: usize,
    xs: &[&Tensor],
) -> Result<Tensor> {
    let acts = model.activations(layer, xs)?;
    model.logit_grads(layer, class, &acts)
}

fn project(grads: &Tensor, direction: &[f64]) -> Vec<f64> {
    (0..grads.shape()[0])
        .map(|i| math::dot(grads.row(i), direction))
        .collect()
}

/// Fraction of strictly positive sensitivities.
pub fn score_from_sensitivities(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptySelection("no class inputs to score".into()));
    }
    Ok(values.iter().filter(|&&s| s > 0.0).count() as f64 / values.len() as f64)
}

/// Fraction of the class inputs `xs` whose class logit increases along the CAV.
pub fn tcav_score(
    model: &LayeredModel,
    layer: &str,
    cav: &Cav,
    class: usize,
    xs: &[&Tensor],
) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySelection("no class inputs to score".into()));
    }
    score_from_sensitivities(&sensitivities(model, layer, cav, class, xs)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    /// Scores against a mean of 0.5.
    OneSample,
    /// Scores against those of CAVs learned between two random draws from
    /// the negative pool (Welch test).
    VersusRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignificanceConfig {
    pub runs: usize,
    pub alpha: f64,
    /// Bonferroni divisor.
    pub m: usize,
    /// Negatives drawn (without replacement) from the pool each run.
    pub negatives_per_run: usize,
    /// When set, positives are also subsampled each run; otherwise every
    /// run sees all of them.
    pub positives_per_run: Option<usize>,
    pub master_seed: u64,
    pub probe: ProbeConfig,
    pub mode: TestMode,
    /// Largest tolerated fraction of failed runs.
    pub max_failed_fraction: f64,
}

impl Default for SignificanceConfig {
    fn default() -> Self {
        SignificanceConfig {
            runs: 500,
            alpha: 0.05,
            m: 2,
            negatives_per_run: 30,
            positives_per_run: None,
            master_seed: 0,
            probe: ProbeConfig::default(),
            mode: TestMode::OneSample,
            max_failed_fraction: 0.1,
        }
    }
}

impl SignificanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 2 {
            return Err(Error::InvalidConfig("at least 2 runs are needed".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || self.m == 0 {
            return Err(Error::InvalidConfig(
                "alpha must lie in (0, 1) and m be positive".into(),
            ));
        }
        if self.negatives_per_run < 2 || self.positives_per_run.is_some_and(|p| p < 2) {
            return Err(Error::InvalidConfig(
                "each run needs at least 2 positives and 2 negatives".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.max_failed_fraction) {
            return Err(Error::InvalidConfig(
                "max_failed_fraction must lie in [0, 1]".into(),
            ));
        }
        self.probe.validate()
    }

    pub fn threshold(&self) -> f64 {
        self.alpha / self.m as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TcavReport {
    pub concept: String,
    pub class: usize,
    pub layer: String,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub p_value: f64,
    pub significant: bool,
    pub alpha: f64,
    pub m: usize,
    pub runs: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub failed_runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_scores: Option<Vec<f64>>,
}

impl TcavReport {
    /// Builds a one-sample report from finished scores.
    #[allow(clippy::too_many_arguments)]
    pub fn from_scores(
        concept: &str,
        class: usize,
        layer: &str,
        scores: Vec<f64>,
        alpha: f64,
        m: usize,
        master_seed: u64,
    ) -> Result<TcavReport> {
        let test = stats::one_sample_t_test(&scores, 0.5)?;
        Ok(TcavReport {
            concept: concept.to_string(),
            class,
            layer: layer.to_string(),
            mean: stats::mean(&scores),
            p_value: test.p_value,
            significant: test.p_value < alpha / m as f64,
            alpha,
            m,
            runs: scores.len(),
            master_seed,
            failed_runs: 0,
            baseline_scores: None,
            scores,
        })
    }

    /// Presentation marker for reports that failed the test.
    pub fn marker(&self) -> &'static str {
        if self.significant {
            ""
        } else {
            "*"
        }
    }
}

/// Precomputed activations for repeated CAV training and scoring.
#[derive(Clone, Debug)]
pub struct SignificanceInputs<'a> {
    pub concept: &'a str,
    pub layer: &'a str,
    pub class: usize,
    /// `[n_pos, m]` concept activations.
    pub positives: &'a Tensor,
    /// `[n_pool, m]` negative-pool activations.
    pub pool: &'a Tensor,
    /// `[n_x, m]` class-logit gradients at the class inputs.
    pub gradients: &'a Tensor,
}

const MAIN_STREAM: u64 = 0;
const BASELINE_STREAM: u64 = 1;

fn pick(n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > n {
        return Err(Error::InsufficientExamples {
            needed: size,
            got: n,
        });
    }
    let mut r = rng::seeded(seed);
    Ok(rand::seq::index::sample(&mut r, n, size).into_vec())
}

fn one_run(
    inputs: &SignificanceInputs<'_>,
    cfg: &SignificanceConfig,
    stream: u64,
    run: usize,
) -> Result<f64> {
    let run_seed = rng::derive_seed(rng::derive_seed(cfg.master_seed, stream), run as u64);
    let baseline = stream == BASELINE_STREAM;
    let (pos_source, n_pos_source) = if baseline {
        (inputs.pool, inputs.pool.shape()[0])
    } else {
        (inputs.positives, inputs.positives.shape()[0])
    };
    let pos_idx = match cfg.positives_per_run {
        Some(size) => pick(n_pos_source, size, rng::derive_seed(run_seed, 1))?,
        None if baseline => pick(
            n_pos_source,
            inputs.positives.shape()[0],
            rng::derive_seed(run_seed, 1),
        )?,
        None => (0..n_pos_source).collect(),
    };
    let neg_idx = pick(
        inputs.pool.shape()[0],
        cfg.negatives_per_run,
        rng::derive_seed(run_seed, 0),
    )?;
    let pos: Vec<&[f64]> = pos_idx.iter().map(|&i| pos_source.row(i)).collect();
    let neg: Vec<&[f64]> = neg_idx.iter().map(|&i| inputs.pool.row(i)).collect();
    let probe = ProbeConfig {
        seed: rng::derive_seed(run_seed, 2),
        ..cfg.probe.clone()
    };
    let cav = fit_cav(inputs.concept, "pool", inputs.layer, &pos, &neg, &probe)?;
    score_from_sensitivities(&project(inputs.gradients, &cav.vector))
}

fn run_all(
    inputs: &SignificanceInputs<'_>,
    cfg: &SignificanceConfig,
    stream: u64,
) -> Result<(Vec<f64>, usize)> {
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<f64>> = {
        use rayon::prelude::*;
        (0..cfg.runs)
            .into_par_iter()
            .map(|r| one_run(inputs, cfg, stream, r))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<f64>> = (0..cfg.runs)
        .map(|r| one_run(inputs, cfg, stream, r))
        .collect();

    let mut scores = Vec::with_capacity(cfg.runs);
    let mut failed = 0;
    let mut last_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(s) => scores.push(s),
            Err(e) => {
                failed += 1;
                last_error = Some(e);
            }
        }
    }
    if failed as f64 > cfg.max_failed_fraction * cfg.runs as f64 || scores.len() < 2 {
        return Err(Error::TooManyFailedRuns {
            failed,
            runs: cfg.runs,
            last_error: last_error.map(|e| e.to_string()).unwrap_or_default(),
        });
    }
    Ok((scores, failed))
}

/// Repeated CAV training on resampled negatives, scored on precomputed
/// gradients. Output does not depend on how runs are scheduled.
pub fn significance_from_activations(
    inputs: &SignificanceInputs<'_>,
    cfg: &SignificanceConfig,
) -> Result<TcavReport> {
    cfg.validate()?;
    let widths = [
        inputs.positives.shape(),
        inputs.pool.shape(),
        inputs.gradients.shape(),
    ];
    if widths.iter().any(|s| s.len() != 2) {
        return Err(Error::InvalidShape {
            shape: inputs.positives.shape().to_vec(),
            reason: "activation batches must be rank 2".into(),
        });
    }
    for s in &widths[1..] {
        if s[1] != widths[0][1] {
            return Err(Error::DimensionMismatch {
                expected: widths[0][1],
                got: s[1],
            });
        }
    }
    if inputs.pool.shape()[0] < cfg.negatives_per_run {
        return Err(Error::InsufficientExamples {
            needed: cfg.negatives_per_run,
            got: inputs.pool.shape()[0],
        });
    }

    let (scores, failed) = run_all(inputs, cfg, MAIN_STREAM)?;
    let mut report = TcavReport::from_scores(
        inputs.concept,
        inputs.class,
        inputs.layer,
        scores,
        cfg.alpha,
        cfg.m,
        cfg.master_seed,
    )?;
    report.runs = cfg.runs;
    report.failed_runs = failed;
    if cfg.mode == TestMode::VersusRandom {
        let (baseline, baseline_failed) = run_all(inputs, cfg, BASELINE_STREAM)?;
        let test = stats::welch_t_test(&report.scores, &baseline)?;
        report.p_value = test.p_value;
        report.significant = test.p_value < cfg.threshold();
        report.failed_runs += baseline_failed;
        report.baseline_scores = Some(baseline);
    }
    Ok(report)
}

/// Significance test of a concept's TCAV score for `class` at `layer`.
///
/// Each run retrains the CAV against negatives resampled from `pool` with a
/// seed derived from the master seed and the run index, then scores it on
/// `xs`. The scores are t-tested against 0.5 and judged significant when
/// `p < alpha / m`.
pub fn significance_test(
    model: &LayeredModel,
    layer: &str,
    positives: &ConceptSet,
    pool: &ConceptSet,
    class: usize,
    xs: &[&Tensor],
    cfg: &SignificanceConfig,
) -> Result<TcavReport> {
    cfg.validate()?;
    if xs.is_empty() {
        return Err(Error::EmptySelection("no class inputs to score".into()));
    }
    if class >= model.num_classes() {
        return Err(Error::ClassOutOfRange {
            class,
            num_classes: model.num_classes(),
        });
    }
    let pos = model.activations(layer, &positives.refs())?;
    let neg = model.activations(layer, &pool.refs())?;
    let grads = class_gradients(model, layer, class, xs)?;
    significance_from_activations(
        &SignificanceInputs {
            concept: &positives.name,
            layer,
            class,
            positives: &pos,
            pool: &neg,
            gradients: &grads,
        },
        cfg,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptShift {
    pub concept: String,
    pub class: usize,
    pub layer: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_b - mean_a`.
    pub delta: f64,
    pub ks: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionShift {
    pub threshold: f64,
    pub concepts: Vec<ConceptShift>,
}

impl DistributionShift {
    pub fn flagged(&self) -> impl Iterator<Item = &ConceptShift> {
        self.concepts.iter().filter(|c| c.flagged)
    }
}

type Grid<'a> = BTreeMap<(String, usize, String), &'a TcavReport>;

fn grid(reports: &[TcavReport]) -> Result<Grid<'_>> {
    let mut out = BTreeMap::new();
    for r in reports {
        if out
            .insert((r.concept.clone(), r.class, r.layer.clone()), r)
            .is_some()
        {
            return Err(Error::GridMismatch(format!(
                "duplicate report for concept `{}`, class {} at layer `{}`",
                r.concept, r.class, r.layer
            )));
        }
    }
    Ok(out)
}

/// Per-(concept, class, layer) mean deltas and KS statistics between two report
/// sets; entries whose KS statistic exceeds `threshold` are flagged.
pub fn score_distribution_compare(
    a: &[TcavReport],
    b: &[TcavReport],
    threshold: f64,
) -> Result<DistributionShift> {
    let (ga, gb) = (grid(a)?, grid(b)?);
    if ga.len() != gb.len() || ga.keys().zip(gb.keys()).any(|(x, y)| x != y) {
        let keys = |g: &Grid| {
            g.keys()
                .map(|(c, k, l)| format!("{c}/{k}@{l}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        return Err(Error::GridMismatch(format!(
            "[{}] vs [{}]",
            keys(&ga),
            keys(&gb)
        )));
    }
    let concepts = ga
        .iter()
        .zip(gb.values())
        .map(|(((concept, class, layer), ra), rb)| {
            let ks = stats::ks_statistic(&ra.scores, &rb.scores)?;
            let (mean_a, mean_b) = (stats::mean(&ra.scores), stats::mean(&rb.scores));
            Ok(ConceptShift {
                concept: concept.clone(),
                class: *class,
                layer: layer.clone(),
                mean_a,
                mean_b,
                delta: mean_b - mean_a,
                ks,
                flagged: ks > threshold,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DistributionShift {
        threshold,
        concepts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Params};
    use alloc::vec;

    fn linear_model(w: &[f64]) -> LayeredModel {
        // one dense layer producing logits [w.x, 0]
        let mut weight = Vec::new();
        for wi in w {
            weight.extend_from_slice(&[*wi, 0.0]);
        }
        LayeredModel::from_parts(
            vec![w.len()],
            vec![LayerSpec::dense("logits", 2)],
            vec![Some(Params {
                weight: Tensor::new(vec![w.len(), 2], weight).unwrap(),
                bias: Tensor::zeros(&[2]),
            })],
        )
        .unwrap()
    }

    fn cav(layer: &str, v: Vec<f64>) -> Cav {
        Cav {
            concept: "c".into(),
            negative_id: "n".into(),
            layer: layer.into(),
            vector: v,
            heldout_accuracy: 1.0,
            train_seed: 0,
            relative: false,
            provenance: String::new(),
        }
    }

    #[test]
    fn linear_head_sensitivity_is_weight_norm() {
        let w = [3.0, 4.0];
        let model = linear_model(&w);
        let c = cav("input", vec![0.6, 0.8]);
        for x in [[0.1, 0.2], [-3.0, 7.0]] {
            let s = directional_derivative(&model, "input", &c, 0, &Tensor::vector(x.to_vec()))
                .unwrap();
            assert!((s - 5.0).abs() < 1e-12);
        }
        let orth = cav("input", vec![0.8, -0.6]);
        let s = directional_derivative(&model, "input", &orth, 0, &Tensor::vector(vec![1.0, 1.0]))
            .unwrap();
        assert!(s.abs() < 1e-12);
    }

    #[test]
    fn wrong_width_or_layer() {
        let model = linear_model(&[1.0, 2.0]);
        let x = Tensor::vector(vec![0.0, 0.0]);
        let err =
            directional_derivative(&model, "input", &cav("input", vec![1.0]), 0, &x).unwrap_err();
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                expected: 2,
                got: 1
            }
        ));
        assert!(
            directional_derivative(&model, "input", &cav("logits", vec![1.0, 0.0]), 0, &x).is_err()
        );
    }

    #[test]
    fn score_counts_strict_positives() {
        assert_eq!(
            score_from_sensitivities(&[1.0, 2.0, 0.5, -1.0, -0.1]).unwrap(),
            0.6
        );
        assert_eq!(
            score_from_sensitivities(&[0.0, 0.0, 1.0, -1.0]).unwrap(),
            0.25
        );
        assert!(score_from_sensitivities(&[]).is_err());
    }

    #[test]
    fn report_significance_matches_threshold() {
        let r = TcavReport::from_scores("c", 0, "l", vec![1.0; 10], 0.05, 2, 0).unwrap();
        assert!(r.significant && r.p_value == 0.0);
        let r = TcavReport::from_scores("c", 0, "l", vec![0.5; 10], 0.05, 2, 0).unwrap();
        assert!(!r.significant && r.p_value == 1.0);
        assert_eq!(r.marker(), "*");
    }

    #[test]
    fn compare_identity_and_disjoint() {
        let a = TcavReport::from_scores("c", 0, "l", vec![0.9, 0.95, 0.92], 0.05, 2, 0).unwrap();
        let b = TcavReport::from_scores("c", 0, "l", vec![0.1, 0.12, 0.05], 0.05, 2, 0).unwrap();
        let same =
            score_distribution_compare(std::slice::from_ref(&a), std::slice::from_ref(&a), 0.5)
                .unwrap();
        assert_eq!(same.concepts[0].delta, 0.0);
        assert_eq!(same.flagged().count(), 0);
        let diff = score_distribution_compare(std::slice::from_ref(&a), &[b], 0.5).unwrap();
        assert_eq!(diff.concepts[0].ks, 1.0);
        assert_eq!(diff.flagged().count(), 1);
        let mut other = a.clone();
        other.concept = "d".into();
        assert!(matches!(
            score_distribution_compare(&[a], &[other], 0.5),
            Err(Error::GridMismatch(_))
        ));
    }
}
