//! Concept activation vectors: unit normals of linear boundaries between a
//! concept's layer activations and those of negative examples.
//!
//! The probe is L2-regularized logistic regression fit by full-batch
//! accelerated gradient descent (Nesterov momentum with gradient-based
//! restart) on centered features rescaled to unit mean squared norm.
//! Starting from zero, every iterate of the weight vector stays in the span
//! of the centered training rows, so the descent runs on the `n x n` Gram
//! matrix (dual coefficients) and costs `O(n^2)` per epoch whatever the
//! layer width. The CAV is the weight vector mapped back to activation
//! space and normalized; the intercept is only used for the probe's own
//! accuracy.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::ConceptSet;
use crate::error::{Error, Result};
use crate::math;
use crate::model::LayeredModel;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Upper bound on descent epochs.
    pub epochs: usize,
    /// Step size; `None` uses the inverse of the loss's smoothness bound.
    pub learning_rate: Option<f64>,
    pub l2: f64,
    /// Stop once the gradient norm (in rescaled feature units) drops below.
    pub tolerance: f64,
    pub heldout_fraction: f64,
    /// Seed of the stratified train/held-out split.
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 2000,
            learning_rate: None,
            l2: 1e-4,
            tolerance: 1e-6,
            heldout_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "heldout_fraction must lie in (0, 1)".into(),
            ));
        }
        if self.learning_rate.is_some_and(|lr| !(lr > 0.0))
            || !(self.l2 >= 0.0)
            || !(self.tolerance >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "learning_rate must be positive and l2 non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cav {
    pub concept: String,
    /// Which negative set (or run) the concept was contrasted with.
    pub negative_id: String,
    pub layer: String,
    /// Unit-norm direction in the layer's flattened activation space.
    pub vector: Vec<f64>,
    pub heldout_accuracy: f64,
    pub train_seed: u64,
    #[serde(default)]
    pub relative: bool,
    /// Provenance of the positive examples.
    #[serde(default)]
    pub provenance: String,
}

impl Cav {
    pub fn width(&self) -> usize {
        self.vector.len()
    }

    pub fn negated(&self) -> Cav {
        Cav {
            vector: self.vector.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

/// A fitted linear classifier in raw activation space.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn decision(&self, row: &[f64]) -> f64 {
        math::dot(&self.weights, row) + self.bias
    }

    pub fn probability(&self, row: &[f64]) -> f64 {
        math::sigmoid(self.decision(row))
    }

    /// Fits `labels` (true = positive) by gradient descent from zero.
    pub fn fit(rows: &[&[f64]], labels: &[bool], cfg: &ProbeConfig) -> Result<LinearProbe> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let m = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: bad.len(),
            });
        }
        let mut mean = vec![0.0; m];
        for r in rows {
            mean.iter_mut().zip(r.iter()).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, mu)| v - mu).collect())
            .collect();

        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let g = math::dot(&centered[i], &centered[j]);
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        let scale2 = (0..n).map(|i| gram[i * n + i]).sum::<f64>() / n as f64;
        // spread at the rounding level of the mean counts as none
        let magnitude2 = rows.iter().map(|r| math::dot(r, r)).sum::<f64>() / n as f64;
        if !(scale2 > 1e-300 && scale2 > 1e-20 * magnitude2) {
            return Err(Error::Inseparable("all activations are identical".into()));
        }
        gram.iter_mut().for_each(|g| *g /= scale2);

        let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
        let alpha = descend(&gram, &y, cfg);
        let (alpha, bias) = (&alpha[..n], alpha[n]);

        // w_raw = sum_i alpha_i (x_i - mean) / scale^2
        let mut weights = vec![0.0; m];
        for (a, row) in alpha.iter().zip(&centered) {
            if *a != 0.0 {
                weights
                    .iter_mut()
                    .zip(row)
                    .for_each(|(w, v)| *w += a * v / scale2);
            }
        }
        let bias = bias - math::dot(&weights, &mean);
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::Inseparable("probe weights are not finite".into()));
        }
        Ok(LinearProbe { weights, bias })
    }

    pub fn accuracy(&self, rows: &[&[f64]], labels: &[bool]) -> f64 {
        let hits = rows
            .iter()
            .zip(labels)
            .filter(|(r, &l)| (self.decision(r) > 0.0) == l)
            .count();
        hits as f64 / rows.len().max(1) as f64
    }
}

fn gram_mul(gram: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = math::dot(&gram[i * n..(i + 1) * n], v);
    }
}

/// Largest eigenvalue of the (symmetric, PSD) Gram matrix by power iteration.
fn top_eigenvalue(gram: &[f64], n: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| math::sin(i as f64 + 1.0)).collect();
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..50 {
        let nv = math::norm(&v);
        if nv == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        gram_mul(gram, &v, &mut w);
        lambda = math::dot(&v, &w);
        core::mem::swap(&mut v, &mut w);
    }
    lambda
}

/// Accelerated descent on the dual coefficients. `gram` is the rescaled
/// centered Gram matrix; returns `alpha` followed by the intercept.
fn descend(gram: &[f64], y: &[f64], cfg: &ProbeConfig) -> Vec<f64> {
    let n = y.len();
    let nf = n as f64;
    // Hessian of the mean loss is at most a quarter of the Gram spectrum
    // (the intercept column is orthogonal to the centered features)
    let smooth = 0.25 * (top_eigenvalue(gram, n) / nf).max(1.0) + cfg.l2;
    let lr = cfg.learning_rate.unwrap_or(1.0 / smooth);

    let (mut a, mut a_prev) = (vec![0.0; n], vec![0.0; n]);
    let (mut ka, mut ka_prev) = (vec![0.0; n], vec![0.0; n]);
    let (mut b, mut b_prev) = (0.0, 0.0);
    let mut t: f64 = 1.0;
    let (mut ya, mut kya) = (vec![0.0; n], vec![0.0; n]);
    let (mut g, mut kg) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..cfg.epochs {
        let t_next = (1.0 + math::sqrt(1.0 + 4.0 * t * t)) / 2.0;
        let beta = (t - 1.0) / t_next;
        for i in 0..n {
            ya[i] = a[i] + beta * (a[i] - a_prev[i]);
            kya[i] = ka[i] + beta * (ka[i] - ka_prev[i]);
        }
        let yb = b + beta * (b - b_prev);
        let mut gb = 0.0;
        for i in 0..n {
            let r = math::sigmoid(kya[i] + yb) - y[i];
            gb += r / nf;
            g[i] = r / nf + cfg.l2 * ya[i];
        }
        gram_mul(gram, &g, &mut kg);
        let grad_norm = math::sqrt((math::dot(&g, &kg) + gb * gb).max(0.0));
        if grad_norm < cfg.tolerance {
            a.copy_from_slice(&ya);
            b = yb;
            break;
        }
        // restart the momentum when the step points uphill
        let mut uphill = gb * (yb - lr * gb - b);
        for i in 0..n {
            let ka_new = kya[i] - lr * kg[i];
            uphill += g[i] * (ka_new - ka[i]);
            a_prev[i] = a[i];
            ka_prev[i] = ka[i];
            a[i] = ya[i] - lr * g[i];
            ka[i] = ka_new;
        }
        b_prev = b;
        b = yb - lr * gb;
        t = if uphill > 0.0 { 1.0 } else { t_next };
    }
    a.push(b);
    a
}

/// Stratified split into (train, heldout) index lists for `n_pos`
/// positives followed by `n_neg` negatives.
fn stratified_split(
    n_pos: usize,
    n_neg: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_pos + n_neg < 4 {
        return Err(Error::InsufficientExamples {
            needed: 4,
            got: n_pos + n_neg,
        });
    }
    if n_pos < 2 || n_neg < 2 {
        return Err(Error::InsufficientExamples {
            needed: 2,
            got: n_pos.min(n_neg),
        });
    }
    let mut r = rng::seeded(seed);
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (offset, count) in [(0, n_pos), (n_pos, n_neg)] {
        let mut idx: Vec<usize> = (offset..offset + count).collect();
        idx.shuffle(&mut r);
        let held = (math::round(count as f64 * fraction) as usize).clamp(1, count - 1);
        heldout.extend_from_slice(&idx[..held]);
        train.extend_from_slice(&idx[held..]);
    }
    Ok((train, heldout))
}

/// Fits a CAV from precomputed activation rows.
pub fn fit_cav(
    concept: &str,
    negative_id: &str,
    layer: &str,
    positives: &[&[f64]],
    negatives: &[&[f64]],
    cfg: &ProbeConfig,
) -> Result<Cav> {
    cfg.validate()?;
    let (train, heldout) = stratified_split(
        positives.len(),
        negatives.len(),
        cfg.heldout_fraction,
        cfg.seed,
    )?;
    let n_pos = positives.len();
    let row = |i: usize| {
        if i < n_pos {
            positives[i]
        } else {
            negatives[i - n_pos]
        }
    };
    let label = |i: usize| i < n_pos;

    let train_rows: Vec<&[f64]> = train.iter().map(|&i| row(i)).collect();
    let train_labels: Vec<bool> = train.iter().map(|&i| label(i)).collect();
    let probe = LinearProbe::fit(&train_rows, &train_labels, cfg)?;

    let norm = math::norm(&probe.weights);
    if !(norm > 0.0) {
        return Err(Error::Inseparable(format!(
            "probe for `{concept}` learned a zero direction"
        )));
    }
    let mut vector: Vec<f64> = probe.weights.iter().map(|w| w / norm).collect();

    // point toward the held-out positives
    let side_mean = |want: bool| {
        let proj: Vec<f64> = heldout
            .iter()
            .filter(|&&i| label(i) == want)
            .map(|&i| math::dot(&vector, row(i)))
            .collect();
        proj.iter().sum::<f64>() / proj.len() as f64
    };
    if side_mean(true) < side_mean(false) {
        vector.iter_mut().for_each(|v| *v = -*v);
    }

    let held_rows: Vec<&[f64]> = heldout.iter().map(|&i| row(i)).collect();
    let held_labels: Vec<bool> = heldout.iter().map(|&i| label(i)).collect();
    Ok(Cav {
        concept: concept.to_string(),
        negative_id: negative_id.to_string(),
        layer: layer.to_string(),
        vector,
        heldout_accuracy: probe.accuracy(&held_rows, &held_labels),
        train_seed: cfg.seed,
        relative: false,
        provenance: String::new(),
    })
}

fn check_shapes(model: &LayeredModel, sets: &[&ConceptSet]) -> Result<()> {
    for s in sets {
        if s.is_empty() {
            return Err(Error::EmptySelection(format!(
                "concept `{}` is empty",
                s.name
            )));
        }
        if s.example_shape() != model.input_shape() {
            return Err(Error::ShapeMismatch {
                op: "concept examples",
                lhs: model.input_shape().to_vec(),
                rhs: s.example_shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn rows(t: &Tensor) -> Vec<&[f64]> {
    (0..t.shape()[0]).map(|i| t.row(i)).collect()
}

/// Learns the CAV of `positives` against `negatives` at `layer`.
pub fn train_cav(
    model: &LayeredModel,
    layer: &str,
    positives: &ConceptSet,
    negatives: &ConceptSet,
    cfg: &ProbeConfig,
) -> Result<Cav> {
    check_shapes(model, &[positives, negatives])?;
    if positives.len() + negatives.len() < 4 {
        return Err(Error::InsufficientExamples {
            needed: 4,
            got: positives.len() + negatives.len(),
        });
    }
    let pos = model.activations(layer, &positives.refs())?;
    let neg = model.activations(layer, &negatives.refs())?;
    let mut cav = fit_cav(
        &positives.name,
        &negatives.name,
        layer,
        &rows(&pos),
        &rows(&neg),
        cfg,
    )?;
    cav.provenance = positives.provenance.clone();
    Ok(cav)
}

/// One CAV per concept, each contrasted with the union of the others.
pub fn train_relative_cav(
    model: &LayeredModel,
    layer: &str,
    concepts: &[ConceptSet],
    cfg: &ProbeConfig,
) -> Result<Vec<Cav>> {
    if concepts.len() < 2 {
        return Err(Error::InsufficientExamples {
            needed: 2,
            got: concepts.len(),
        });
    }
    check_shapes(model, &concepts.iter().collect::<Vec<_>>())?;
    let acts: Vec<Tensor> = concepts
        .iter()
        .map(|c| model.activations(layer, &c.refs()))
        .collect::<Result<_>>()?;
    concepts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let negatives: Vec<&[f64]> = acts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .flat_map(|(_, t)| rows(t))
                .collect();
            let others: Vec<&str> = concepts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, c)| c.name.as_str())
                .collect();
            let negative_id = format!("relative:{}", others.join("+"));
            let mut cav = fit_cav(
                &c.name,
                &negative_id,
                layer,
                &rows(&acts[i]),
                &negatives,
                cfg,
            )?;
            cav.relative = true;
            cav.provenance = c.provenance.clone();
            Ok(cav)
        })
        .collect()
}

/// Held-out probe accuracy at every probe-able layer, in network order.
pub fn probe_layers(
    model: &LayeredModel,
    positives: &ConceptSet,
    negatives: &ConceptSet,
    cfg: &ProbeConfig,
) -> Result<Vec<(String, f64)>> {
    model
        .probe_layers()
        .into_iter()
        .map(|layer| {
            let cav = train_cav(model, layer, positives, negatives, cfg)?;
            Ok((layer.to_string(), cav.heldout_accuracy))
        })
        .collect()
}

/// `size` examples drawn from `pool` without replacement.
pub fn resample_negatives(pool: &ConceptSet, size: usize, seed: u64) -> Result<ConceptSet> {
    if size > pool.len() || size == 0 {
        return Err(Error::InsufficientExamples {
            needed: size.max(1),
            got: pool.len(),
        });
    }
    let mut r = rng::seeded(seed);
    let picked = rand::seq::index::sample(&mut r, pool.len(), size);
    ConceptSet::new(
        format!("{}#{seed}", pool.name),
        picked.iter().map(|i| pool.examples[i].clone()).collect(),
        format!("{} resample size={size} seed={seed}", pool.provenance),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn blob(center: &[f64], noise: f64, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + r.gen_range(-noise..noise))
                    .collect()
            })
            .collect()
    }

    fn as_rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn axis_separable_case() {
        let mut e1 = vec![0.0; 6];
        e1[0] = 1.0;
        let neg_center: Vec<f64> = e1.iter().map(|v| -v).collect();
        let pos = blob(&e1, 0.05, 20, 1);
        let neg = blob(&neg_center, 0.05, 20, 2);
        let cav = fit_cav(
            "c",
            "n",
            "l",
            &as_rows(&pos),
            &as_rows(&neg),
            &ProbeConfig::default(),
        )
        .unwrap();
        assert!((math::norm(&cav.vector) - 1.0).abs() < 1e-9);
        assert!(math::cosine(&cav.vector, &e1) >= 0.99);
        assert_eq!(cav.heldout_accuracy, 1.0);

        let swapped = fit_cav(
            "n",
            "c",
            "l",
            &as_rows(&neg),
            &as_rows(&pos),
            &ProbeConfig::default(),
        )
        .unwrap();
        assert!(math::cosine(&cav.vector, &swapped.vector) <= -0.99);
    }

    #[test]
    fn too_few_examples() {
        let pos = blob(&[1.0, 0.0], 0.1, 2, 1);
        let neg = blob(&[-1.0, 0.0], 0.1, 1, 2);
        let err = fit_cav(
            "c",
            "n",
            "l",
            &as_rows(&pos),
            &as_rows(&neg),
            &ProbeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InsufficientExamples { .. }));
    }

    #[test]
    fn identical_activations_are_inseparable() {
        let same = vec![vec![0.5, 0.5]; 6];
        let err = fit_cav(
            "c",
            "n",
            "l",
            &as_rows(&same),
            &as_rows(&same),
            &ProbeConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Inseparable(_)));
    }

    #[test]
    fn deterministic_given_seed() {
        let pos = blob(&[1.0, 0.2, 0.0], 0.8, 15, 1);
        let neg = blob(&[-0.2, 0.0, 0.4], 0.8, 15, 2);
        let cfg = ProbeConfig {
            seed: 9,
            ..ProbeConfig::default()
        };
        let a = fit_cav("c", "n", "l", &as_rows(&pos), &as_rows(&neg), &cfg).unwrap();
        let b = fit_cav("c", "n", "l", &as_rows(&pos), &as_rows(&neg), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn descent_reaches_a_stationary_point() {
        // gradient of the regularized loss in rescaled feature space
        let pos = blob(&[0.3, 0.1, -0.2, 0.5], 1.0, 9, 4);
        let neg = blob(&[-0.1, 0.2, 0.4, -0.3], 1.0, 9, 5);
        let rows: Vec<&[f64]> = pos.iter().chain(&neg).map(|r| r.as_slice()).collect();
        let labels: Vec<bool> = (0..18).map(|i| i < 9).collect();
        let cfg = ProbeConfig::default();
        let probe = LinearProbe::fit(&rows, &labels, &cfg).unwrap();

        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..4)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let xc: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(a, b)| a - b).collect())
            .collect();
        let s = math::sqrt(xc.iter().map(|r| math::dot(r, r)).sum::<f64>() / n);
        let w: Vec<f64> = probe.weights.iter().map(|v| v * s).collect();
        let b = probe.bias + math::dot(&probe.weights, &mean);
        let mut gw: Vec<f64> = w.iter().map(|wi| cfg.l2 * wi).collect();
        let mut gb = 0.0;
        for (x, &l) in xc.iter().zip(&labels) {
            let xs: Vec<f64> = x.iter().map(|v| v / s).collect();
            let r = math::sigmoid(math::dot(&w, &xs) + b) - if l { 1.0 } else { 0.0 };
            gw.iter_mut().zip(&xs).for_each(|(g, v)| *g += r * v / n);
            gb += r / n;
        }
        let norm = math::sqrt(math::dot(&gw, &gw) + gb * gb);
        assert!(norm < 1e-5, "gradient norm {norm}");
    }

    #[test]
    fn resample_properties() {
        let examples: Vec<Tensor> = (0..50).map(|i| Tensor::vector(vec![i as f64])).collect();
        let pool = ConceptSet::new("pool", examples, "test").unwrap();
        let a = resample_negatives(&pool, 10, 1).unwrap();
        let b = resample_negatives(&pool, 10, 1).unwrap();
        let c = resample_negatives(&pool, 10, 2).unwrap();
        assert_eq!(a.examples, b.examples);
        assert_ne!(a.examples, c.examples);
        let all = resample_negatives(&pool, 50, 3).unwrap();
        let mut vals: Vec<f64> = all.examples.iter().map(|t| t.data()[0]).collect();
        assert_ne!(vals, (0..50).map(|i| i as f64).collect::<Vec<_>>());
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, (0..50).map(|i| i as f64).collect::<Vec<_>>());
        assert!(resample_negatives(&pool, 51, 0).is_err());
    }
}
