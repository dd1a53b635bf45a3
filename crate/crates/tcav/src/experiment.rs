//! The controlled caption experiment: for each noise level `p`, generate
//! captioned data, train the reference toy net, measure how much each class
//! leans on captions (accuracy with and without them), then compare with
//! significance-tested TCAV scores of an image concept and a caption
//! concept per class.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tcav_core::dataset::{self, texture::TextureKind, DatasetSpec, LabeledDataset, Split};
use tcav_core::model::{LayeredModel, TrainConfig};
use tcav_core::rng::{self, derive_seed};
use tcav_core::tcav::{self, SignificanceConfig, TcavReport};

use crate::error::{Error, Result};
use crate::{checkpoint, store};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub noise_list: Vec<f64>,
    /// Dataset template; `noise_p` is replaced by each entry of `noise_list`.
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub model_seed: u64,
    pub layer: String,
    /// Examples per image and caption concept.
    pub concept_size: usize,
    pub pool_size: usize,
    /// Texture kinds mixed into the random negative pool.
    pub pool_kinds: Vec<TextureKind>,
    /// Caption-stripped training images added to each level's pool with the
    /// pixels above the caption band shuffled, as in the caption concept.
    pub pool_scrambled: usize,
    pub significance: SignificanceConfig,
    /// Master seed for the pool, caption shuffles and significance runs.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            noise_list: vec![0.0, 0.3, 0.7, 1.0],
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            model_seed: 1,
            layer: "relu2".into(),
            concept_size: 30,
            pool_size: 200,
            pool_kinds: vec![
                TextureKind::Dotted,
                TextureKind::Meshed,
                TextureKind::Solid,
                TextureKind::Noise,
            ],
            pool_scrambled: 200,
            significance: SignificanceConfig::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_list.is_empty() {
            return Err(Error::BadInput("noise list is empty".into()));
        }
        if let Some(p) = self.noise_list.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::BadInput(format!("noise level {p} outside [0, 1]")));
        }
        if self.concept_size < 2 {
            return Err(Error::BadInput("concept_size must be at least 2".into()));
        }
        self.dataset.validate()?;
        self.train.validate()?;
        self.significance.validate()?;
        Ok(())
    }
}

/// Which concept the caption-stripping proxy says a class relied on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reliance {
    Image,
    Caption,
}

/// Per-class one-vs-rest balanced accuracy, `(TPR + TNR) / 2`.
pub fn balanced_accuracy(pred: &[usize], labels: &[usize], class: usize) -> f64 {
    let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in pred.iter().zip(labels) {
        if l == class {
            pos += 1;
            tp += (p == class) as usize;
        } else {
            neg += 1;
            tn += (p != class) as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (rate(tp, pos) + rate(tn, neg)) / 2.0
}

/// A class relied on the image when stripping captions keeps at least
/// half of its above-chance balanced accuracy.
pub fn ground_truth(acc_clean: f64, acc_stripped: f64) -> Reliance {
    if acc_stripped - 0.5 >= 0.5 * (acc_clean - 0.5) {
        Reliance::Image
    } else {
        Reliance::Caption
    }
}

/// TCAV agrees with the proxy when the favoured concept scores strictly
/// higher; ties disagree.
pub fn consistent(truth: Reliance, tcavq_image: f64, tcavq_caption: f64) -> bool {
    match truth {
        Reliance::Image => tcavq_image > tcavq_caption,
        Reliance::Caption => tcavq_caption > tcavq_image,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub p: f64,
    pub class: usize,
    pub acc_clean: f64,
    pub acc_stripped: f64,
    pub tcavq_image: f64,
    pub tcavq_caption: f64,
    pub p_image: f64,
    pub p_caption: f64,
    pub consistent: bool,
    pub ground_truth: Reliance,
    pub significant_image: bool,
    pub significant_caption: bool,
}

impl SummaryRow {
    /// Whether the concept the proxy favours passed its significance test.
    pub fn winner_significant(&self) -> bool {
        match self.ground_truth {
            Reliance::Image => self.significant_image,
            Reliance::Caption => self.significant_caption,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseLevelResult {
    pub p: f64,
    pub heldout_accuracy: f64,
    pub stripped_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub reports: Vec<TcavReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub rows: Vec<SummaryRow>,
    pub levels: Vec<NoiseLevelResult>,
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "p",
    "class",
    "acc_clean",
    "acc_stripped",
    "tcavq_image",
    "tcavq_caption",
    "p_image",
    "p_caption",
    "consistent",
];

pub fn level_dir(p: f64) -> String {
    format!("p{p}")
}

fn heldout_predictions(
    model: &LayeredModel,
    ds: &LabeledDataset,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (xs, ys) = ds.split(Split::Heldout);
    Ok((model.classify_batch(&xs)?, ys))
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Runs every noise level. With `out`, writes `p<p>/model.cavm`,
/// `p<p>/level.json`, a report bundle per level, and `summary.csv` /
/// `summary.json`; returns the paths written alongside the results.
pub fn run(
    cfg: &ExperimentConfig,
    out: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<(Experiment, Vec<PathBuf>)> {
    cfg.validate()?;
    let mut written = Vec::new();
    let mut rows = Vec::new();
    let mut levels = Vec::new();
    let k = cfg.dataset.num_classes();
    let (h, w) = (cfg.dataset.height, cfg.dataset.width);
    let base_pool = dataset::random_pool(
        &cfg.pool_kinds,
        cfg.pool_size,
        derive_seed(cfg.seed, 1),
        h,
        w,
    )?;
    let band_px = cfg.dataset.band_start() * w;
    for (level, &p) in cfg.noise_list.iter().enumerate() {
        let spec = DatasetSpec {
            noise_p: p,
            ..cfg.dataset.clone()
        };
        progress(&format!(
            "p={p}: generating {} images",
            (spec.train_per_class + spec.heldout_per_class) * k
        ));
        let ds = dataset::generate_controlled(&spec)?;
        let stripped = dataset::strip_captions(&ds);
        let init = LayeredModel::reference_toy(spec.image_shape(), k, cfg.model_seed)?;
        let (xs, ys) = ds.split(Split::Train);
        progress(&format!("p={p}: training on {} images", xs.len()));
        let trained = init.train(&xs, &ys, &cfg.train)?;
        let model = trained.model;
        let (pred_clean, labels) = heldout_predictions(&model, &ds)?;
        let (pred_stripped, _) = heldout_predictions(&model, &stripped)?;
        let mut pool = base_pool.clone();
        let mut train_idx = stripped.indices(Some(Split::Train));
        train_idx.shuffle(&mut rng::stream(cfg.seed, 4));
        pool.examples
            .extend(
                train_idx
                    .iter()
                    .take(cfg.pool_scrambled)
                    .enumerate()
                    .map(|(j, &i)| {
                        dataset::shuffle_pixels(
                            &stripped.inputs[i],
                            band_px,
                            derive_seed(derive_seed(cfg.seed, 5), j as u64),
                        )
                    }),
            );

        let mut reports = Vec::with_capacity(2 * k);
        for class in 0..k {
            let image = dataset::concept_image_set(&ds, class, Some(cfg.concept_size))?;
            let caption = dataset::concept_caption_set(
                &ds,
                class,
                derive_seed(cfg.seed, 2),
                Some(cfg.concept_size),
            )?;
            let (xk, _) = ds.select(&ds.class_indices(class, Some(Split::Heldout)));
            let mut per_concept = Vec::with_capacity(2);
            for (c, concept) in [&image, &caption].into_iter().enumerate() {
                let cell = ((level * k + class) * 2 + c) as u64;
                let sig = SignificanceConfig {
                    master_seed: derive_seed(derive_seed(cfg.seed, 3), cell),
                    ..cfg.significance.clone()
                };
                progress(&format!(
                    "p={p}: class {class}: testing `{}` over {} runs",
                    concept.name, sig.runs
                ));
                per_concept.push(tcav::significance_test(
                    &model, &cfg.layer, concept, &pool, class, &xk, &sig,
                )?);
            }
            let (ri, rc) = (&per_concept[0], &per_concept[1]);
            let acc_clean = balanced_accuracy(&pred_clean, &labels, class);
            let acc_stripped = balanced_accuracy(&pred_stripped, &labels, class);
            let truth = ground_truth(acc_clean, acc_stripped);
            rows.push(SummaryRow {
                p,
                class,
                acc_clean,
                acc_stripped,
                tcavq_image: ri.mean,
                tcavq_caption: rc.mean,
                p_image: ri.p_value,
                p_caption: rc.p_value,
                consistent: consistent(truth, ri.mean, rc.mean),
                ground_truth: truth,
                significant_image: ri.significant,
                significant_caption: rc.significant,
            });
            reports.extend(per_concept);
        }

        let result = NoiseLevelResult {
            p,
            heldout_accuracy: accuracy(&pred_clean, &labels),
            stripped_accuracy: accuracy(&pred_stripped, &labels),
            loss_curve: trained.loss_curve,
            reports,
        };
        if let Some(out) = out {
            let dir = out.join(level_dir(p));
            store::create_dir(&dir)?;
            let model_path = dir.join("model.cavm");
            checkpoint::save(&model_path, &model)?;
            written.push(model_path);
            let level_path = dir.join("level.json");
            store::write_json(&level_path, &result)?;
            written.push(level_path);
            written.extend(store::save_report_bundle(
                dir.join("reports"),
                &result.reports,
            )?);
        }
        levels.push(result);
    }

    let experiment = Experiment {
        config: cfg.clone(),
        rows,
        levels,
    };
    if let Some(out) = out {
        let csv = out.join("summary.csv");
        store::save_table(&csv, &SUMMARY_HEADER, &summary_table(&experiment.rows))?;
        let json = out.join("summary.json");
        store::write_json(&json, &experiment.rows)?;
        written.extend([csv, json]);
    }
    Ok((experiment, written))
}

pub fn summary_table(rows: &[SummaryRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.p.to_string(),
                r.class.to_string(),
                r.acc_clean.to_string(),
                r.acc_stripped.to_string(),
                r.tcavq_image.to_string(),
                r.tcavq_caption.to_string(),
                r.p_image.to_string(),
                r.p_caption.to_string(),
                r.consistent.to_string(),
            ]
        })
        .collect()
}
