//! Tools for inspecting CAVs and the model: concept sorting, activation
//! maximization ("deep dream"), gradient saliency and targeted FGSM.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cav::Cav;
use crate::dataset::ConceptSet;
use crate::error::{Error, Result};
use crate::math;
use crate::model::LayeredModel;
use crate::rng;
use crate::tensor::Tensor;

/// Valid pixel intensities.
pub const PIXEL_MIN: f64 = 0.0;
pub const PIXEL_MAX: f64 = 1.0;

fn clip(v: f64) -> f64 {
    v.clamp(PIXEL_MIN, PIXEL_MAX)
}

fn check_width(model: &LayeredModel, cav: &Cav) -> Result<()> {
    let width = model.width(&cav.layer)?;
    if width != cav.width() {
        return Err(Error::DimensionMismatch {
            expected: width,
            got: cav.width(),
        });
    }
    Ok(())
}

/// Ranks `images` by cosine similarity between their activations at the
/// CAV's layer and the CAV, highest first; ties keep input order.
///
/// Refuses images whose provenance equals that of the CAV's training
/// positives.
pub fn sort_by_concept(
    model: &LayeredModel,
    cav: &Cav,
    images: &ConceptSet,
) -> Result<Vec<(usize, f64)>> {
    if !cav.provenance.is_empty() && cav.provenance == images.provenance {
        return Err(Error::ProvenanceOverlap(cav.provenance.clone()));
    }
    check_width(model, cav)?;
    let acts = model.activations(&cav.layer, &images.refs())?;
    let mut ranked: Vec<(usize, f64)> = (0..images.len())
        .map(|i| (i, math::cosine(acts.row(i), &cav.vector)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DreamStart {
    /// Uniform random pixels drawn from the config seed.
    Noise,
    Image(Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DreamConfig {
    pub steps: usize,
    pub step_size: f64,
    pub start: DreamStart,
    /// Largest integer pixel shift applied (cyclically) before each step.
    pub jitter: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for DreamConfig {
    fn default() -> Self {
        DreamConfig {
            steps: 60,
            step_size: 0.02,
            start: DreamStart::Noise,
            jitter: 1,
            l2: 1e-3,
            seed: 0,
        }
    }
}

impl DreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidConfig("dream needs at least one step".into()));
        }
        if !(self.step_size >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::InvalidConfig(
                "step_size and l2 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dream {
    pub image: Tensor,
    /// Objective before the first step and after every step.
    pub trace: Vec<f64>,
}

impl Dream {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn last(&self) -> f64 {
        self.trace[self.trace.len() - 1]
    }
}

/// Cyclic shift of an `[h, w, c]` image by `(dy, dx)`.
fn roll(x: &Tensor, dy: isize, dx: isize) -> Tensor {
    let s = x.shape();
    if s.len() != 3 || (dy == 0 && dx == 0) {
        return x.clone();
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        let ti = (i as isize + dy).rem_euclid(h as isize) as usize;
        for j in 0..w {
            let tj = (j as isize + dx).rem_euclid(w as isize) as usize;
            let (src, dst) = ((i * w + j) * c, (ti * w + tj) * c);
            out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// `v . f_layer(x)` and its input gradient.
fn concept_objective(model: &LayeredModel, cav: &Cav, x: &Tensor) -> Result<(f64, Tensor)> {
    model.input_gradient(&cav.layer, x, |tape, acts| {
        let shape = tape.value(acts)?.shape().to_vec();
        let v = tape.constant(Tensor::new(shape, cav.vector.clone())?);
        let prod = tape.mul(acts, v)?;
        tape.reduce_sum(prod)
    })
}

/// `v . f_layer(x) - l2 * |x|^2`.
pub fn dream_objective(model: &LayeredModel, cav: &Cav, x: &Tensor, l2: f64) -> Result<f64> {
    let acts = model.activation_at(&cav.layer, x)?;
    Ok(math::dot(acts.data(), &cav.vector) - l2 * math::dot(x.data(), x.data()))
}

/// Gradient ascent on the input toward the CAV direction.
///
/// Each step jitters the image by a random integer shift, takes the
/// gradient there, shifts it back, and moves by `step_size` along the
/// gradient normalized to unit mean magnitude. Pixels stay in range.
pub fn activation_maximize(model: &LayeredModel, cav: &Cav, cfg: &DreamConfig) -> Result<Dream> {
    cfg.validate()?;
    check_width(model, cav)?;
    let mut r = rng::seeded(cfg.seed);
    let mut x = match &cfg.start {
        DreamStart::Noise => {
            let n: usize = model.input_shape().iter().product();
            Tensor::new(
                model.input_shape().to_vec(),
                (0..n).map(|_| r.gen_range(PIXEL_MIN..PIXEL_MAX)).collect(),
            )?
        }
        DreamStart::Image(img) => {
            if img.shape() != model.input_shape() {
                return Err(Error::ShapeMismatch {
                    op: "dream start",
                    lhs: model.input_shape().to_vec(),
                    rhs: img.shape().to_vec(),
                });
            }
            if img
                .data()
                .iter()
                .any(|&v| !(PIXEL_MIN..=PIXEL_MAX).contains(&v))
            {
                return Err(Error::InvalidConfig(
                    "dream start image has pixels outside [0, 1]".into(),
                ));
            }
            img.clone()
        }
    };
    let mut trace = vec![dream_objective(model, cav, &x, cfg.l2)?];
    let j = cfg.jitter as isize;
    for step in 0..cfg.steps {
        let (dy, dx) = if j > 0 {
            (r.gen_range(-j..=j), r.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let (_, g) = concept_objective(model, cav, &roll(&x, dy, dx))?;
        let g = roll(&g, -dy, -dx);
        let grad: Vec<f64> = g
            .data()
            .iter()
            .zip(x.data())
            .map(|(gi, xi)| gi - 2.0 * cfg.l2 * xi)
            .collect();
        let scale = grad.iter().map(|v| v.abs()).sum::<f64>() / grad.len() as f64;
        if !scale.is_finite() {
            return Err(Error::DreamDiverged { step });
        }
        if scale > 0.0 && cfg.step_size > 0.0 {
            let data: Vec<f64> = x
                .data()
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| clip(xi + cfg.step_size * gi / scale))
                .collect();
            x = Tensor::new(x.shape().to_vec(), data)?;
        }
        let value = dream_objective(model, cav, &x, cfg.l2)?;
        if !value.is_finite() {
            return Err(Error::DreamDiverged { step });
        }
        trace.push(value);
    }
    Ok(Dream { image: x, trace })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saliency {
    /// `∂h_k/∂x`, shaped like the input.
    pub gradient: Tensor,
    /// Channel-summed absolute gradient (`[h, w]` for image inputs).
    pub magnitude: Tensor,
}

/// Vanilla gradient saliency of the class logit.
pub fn saliency_map(model: &LayeredModel, class: usize, x: &Tensor) -> Result<Saliency> {
    let gradient = model.logit_input_gradient(class, x)?;
    let magnitude = if gradient.rank() == 3 {
        let s = gradient.shape();
        let c = s[2];
        let data = gradient
            .data()
            .chunks(c)
            .map(|px| px.iter().map(|v| v.abs()).sum())
            .collect();
        Tensor::new(vec![s[0], s[1]], data)?
    } else {
        gradient.map(f64::abs)
    };
    Ok(Saliency {
        gradient,
        magnitude,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub target: usize,
}

impl AttackConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        if self.target >= num_classes {
            return Err(Error::ClassOutOfRange {
                class: self.target,
                num_classes,
            });
        }
        Ok(())
    }
}

/// One targeted fast-gradient-sign step: moves every pixel by `epsilon`
/// against the gradient of the target-class cross-entropy, then clips.
pub fn fgsm_attack(model: &LayeredModel, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate(model.num_classes())?;
    let (_, g) = model.loss_input_gradient(cfg.target, x)?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(xi, gi)| {
            let sign = if *gi > 0.0 {
                1.0
            } else if *gi < 0.0 {
                -1.0
            } else {
                0.0
            };
            clip(xi - cfg.epsilon * sign)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerSpec, Params};
    use alloc::string::String;

    fn pixel_model() -> LayeredModel {
        // logits = [5 * x[0,0,0], 0] on a 2x2x1 image
        let mut w = vec![0.0; 8];
        w[0] = 5.0;
        LayeredModel::from_parts(
            vec![2, 2, 1],
            vec![LayerSpec::flatten("flat"), LayerSpec::dense("logits", 2)],
            vec![
                None,
                Some(Params {
                    weight: Tensor::new(vec![4, 2], w).unwrap(),
                    bias: Tensor::zeros(&[2]),
                }),
            ],
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
    fn single_pixel_saliency() {
        let s = saliency_map(&pixel_model(), 0, &Tensor::full(&[2, 2, 1], 0.3)).unwrap();
        assert_eq!(s.magnitude.data(), &[5.0, 0.0, 0.0, 0.0]);
        assert_eq!(s.magnitude.shape(), &[2, 2]);
    }

    #[test]
    fn roll_round_trips() {
        let x = Tensor::new(vec![3, 2, 2], (0..12).map(f64::from).collect()).unwrap();
        let y = roll(&x, 1, -1);
        assert_ne!(x, y);
        assert_eq!(roll(&y, -1, 1), x);
        // pixel (0, 1) comes from (2, 0)
        assert_eq!(&y.data()[2..4], &[8.0, 9.0]);
    }

    #[test]
    fn zero_step_dream_is_identity() {
        let model = pixel_model();
        let start = Tensor::full(&[2, 2, 1], 0.25);
        let cfg = DreamConfig {
            steps: 1,
            step_size: 0.0,
            start: DreamStart::Image(start.clone()),
            ..DreamConfig::default()
        };
        let d = activation_maximize(&model, &cav("flat", vec![1.0, 0.0, 0.0, 0.0]), &cfg).unwrap();
        assert_eq!(d.image, start);
    }

    #[test]
    fn dream_raises_objective() {
        let model = pixel_model();
        let cfg = DreamConfig {
            jitter: 0,
            ..DreamConfig::default()
        };
        let d = activation_maximize(&model, &cav("flat", vec![0.0, 1.0, 0.0, 0.0]), &cfg).unwrap();
        assert!(d.last() > d.initial());
        assert!(d.image.data()[1] > 0.95);
    }

    #[test]
    fn fgsm_bounds() {
        let model = pixel_model();
        let x = Tensor::new(vec![2, 2, 1], vec![0.5, 0.0, 1.0, 0.2]).unwrap();
        let same = fgsm_attack(
            &model,
            &x,
            &AttackConfig {
                epsilon: 0.0,
                target: 0,
            },
        )
        .unwrap();
        assert_eq!(same, x);
        let adv = fgsm_attack(
            &model,
            &x,
            &AttackConfig {
                epsilon: 0.1,
                target: 0,
            },
        )
        .unwrap();
        // raising logit 0 lowers the loss, so pixel 0 moves up
        assert!((adv.data()[0] - 0.6).abs() < 1e-12);
        assert_eq!(&adv.data()[1..], &x.data()[1..]);
        assert!(fgsm_attack(
            &model,
            &x,
            &AttackConfig {
                epsilon: 0.1,
                target: 2
            }
        )
        .is_err());
    }

    #[test]
    fn sort_ranks_and_provenance() {
        let model = pixel_model();
        let imgs: Vec<Tensor> = [0.1, 0.9, 0.5]
            .iter()
            .map(|&v| Tensor::new(vec![2, 2, 1], vec![v, 1.0 - v, 0.0, 0.0]).unwrap())
            .collect();
        let set = ConceptSet::new("imgs", imgs, "elsewhere").unwrap();
        let mut c = cav("flat", vec![1.0, 0.0, 0.0, 0.0]);
        let ranked = sort_by_concept(&model, &c, &set).unwrap();
        assert_eq!(
            ranked.iter().map(|r| r.0).collect::<Vec<_>>(),
            vec![1, 2, 0]
        );
        c.provenance = "elsewhere".into();
        assert!(matches!(
            sort_by_concept(&model, &c, &set),
            Err(Error::ProvenanceOverlap(_))
        ));
    }
}
