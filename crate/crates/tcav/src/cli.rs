//! Command-line front end. Every subcommand reads and writes the formats in
//! this crate and records a run manifest next to its outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tcav_core::cav::{self, ProbeConfig};
use tcav_core::dataset::{self, texture::TextureKind, DatasetSpec, LabeledDataset, Split};
use tcav_core::extras::{self, AttackConfig, DreamConfig, DreamStart};
use tcav_core::model::{LayeredModel, TrainConfig};
use tcav_core::tcav::{self as score, SignificanceConfig, TestMode};
use tcav_core::Tensor;

use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentConfig};
use crate::manifest::Recorder;
use crate::store::{self, CavDocument};
use crate::{checkpoint, ppm, tnsr};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "TCAV_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "tcav",
    version,
    about = "Testing with concept activation vectors on toy networks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the captioned controlled dataset.
    GenData(GenData),
    /// Generate procedural texture concept sets and a random pool.
    GenConcepts(GenConcepts),
    /// Train the reference toy network on a dataset.
    Train(Train),
    /// Evaluate a model, optionally with captions stripped.
    Eval(Eval),
    /// Learn a CAV (or a family of relative CAVs).
    LearnCav(LearnCav),
    /// Significance-tested TCAV scores.
    Tcav(Tcav),
    /// Rank images by cosine similarity to a CAV.
    Sort(Sort),
    /// Activation maximization along a CAV.
    Dream(Dream),
    /// Pixel saliency map for one class.
    Saliency(SaliencyCmd),
    /// Targeted FGSM on a dataset split.
    Attack(Attack),
    /// Held-out probe accuracy per layer.
    ProbeLayers(ProbeLayers),
    /// Compare two report sets for a TCAV score distribution shift.
    Compare(Compare),
    /// The end-to-end caption-noise experiment.
    Experiment(ExperimentCmd),
}

#[derive(Debug, Args)]
pub struct SeedArg {
    /// Master seed; overrides any seed in a config file.
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Heldout,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Heldout => Some(Split::Heldout),
            SplitArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Dataset spec JSON; missing fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Caption noise level, overriding the spec.
    #[arg(long)]
    pub noise_p: Option<f64>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenConcepts {
    /// Generator names (striped, dotted, meshed, checker, blobs, solid, noise, composite).
    #[arg(long, value_delimiter = ',', required = true)]
    pub names: Vec<String>,
    #[arg(long, default_value_t = dataset::DEFAULT_CONCEPT_SIZE)]
    pub n: usize,
    /// Image side length.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Size of the random pool written to `random/`; 0 skips it.
    #[arg(long, default_value_t = 0)]
    pub pool: usize,
    /// Kinds mixed into the pool; defaults to every kind not named above.
    #[arg(long, value_delimiter = ',')]
    pub pool_kinds: Vec<String>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub model: PathBuf,
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed for weight initialization; defaults to the training seed.
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[command(flatten)]
    pub seed: SeedArg,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    /// Paint over the caption band first (the ground-truth proxy).
    #[arg(long)]
    pub strip_captions: bool,
    /// JSON result file; printed to stdout as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LearnCav {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub layer: String,
    /// Positive concept directory.
    #[arg(long, required_unless_present = "relative")]
    pub positives: Option<PathBuf>,
    /// Negative concept directory.
    #[arg(long, required_unless_present = "relative")]
    pub negatives: Option<PathBuf>,
    /// Learn one CAV per `--concept`, each against the union of the others.
    #[arg(long, conflicts_with_all = ["positives", "negatives"])]
    pub relative: bool,
    #[arg(long = "concept")]
    pub concepts: Vec<PathBuf>,
    /// Probe config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// CAV JSON file, or a directory of them with `--relative`.
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the vector as a TNSR file.
    #[arg(long)]
    pub tnsr: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    OneSample,
    VersusRandom,
}

#[derive(Debug, Args)]
pub struct Tcav {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "layer", required = true)]
    pub layers: Vec<String>,
    /// Concept directories.
    #[arg(long = "concept", required = true)]
    pub concepts: Vec<PathBuf>,
    /// Random negative pool directory.
    #[arg(long)]
    pub pool: PathBuf,
    /// Dataset supplying the class inputs.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long = "class", required = true)]
    pub classes: Vec<usize>,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    /// Score the inputs the model assigns to each class instead of those
    /// labelled with it, as for attacked images.
    #[arg(long)]
    pub by_prediction: bool,
    /// Significance config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub negatives_per_run: Option<usize>,
    #[arg(long)]
    pub positives_per_run: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Sort {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cav: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    /// Images per row of the contact sheet.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Dream {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub cav: PathBuf,
    /// Dream config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub jitter: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    /// Start from this PPM instead of random noise.
    #[arg(long)]
    pub start: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyCmd {
    #[arg(long)]
    pub model: PathBuf,
    /// Input image (PPM).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Attack {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub target: usize,
    #[arg(long)]
    pub epsilon: f64,
    #[arg(long, value_enum, default_value_t = SplitArg::Heldout)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProbeLayers {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub positives: PathBuf,
    #[arg(long)]
    pub negatives: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub seed: SeedArg,
    /// CSV of layer, heldout_accuracy.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct Compare {
    /// Baseline report JSON.
    #[arg(long)]
    pub a: PathBuf,
    /// Suspicious report JSON.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentCmd {
    #[arg(long, value_delimiter = ',')]
    pub noise_list: Vec<f64>,
    /// Experiment config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub heldout_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub layer: Option<String>,
    #[command(flatten)]
    pub seed: SeedArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Suppress progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> Result<T> {
    match path {
        Some(p) => store::read_json(p),
        None => Ok(T::default()),
    }
}

/// `<file>.manifest.json` next to a file output.
fn sibling_manifest(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

fn dir_manifest(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => store::create_dir(p),
        _ => Ok(()),
    }
}

/// Inputs of `split` labelled `class`, or with `predicted`, those the model
/// assigns to it.
fn class_inputs<'a>(
    ds: &'a LabeledDataset,
    class: usize,
    split: SplitArg,
    predicted: Option<&[usize]>,
) -> Result<Vec<&'a Tensor>> {
    let k = ds.spec.num_classes();
    if class >= k {
        return Err(tcav_core::Error::ClassOutOfRange {
            class,
            num_classes: k,
        }
        .into());
    }
    let idx = match predicted {
        Some(pred) => ds
            .indices(split.split())
            .into_iter()
            .filter(|&i| pred[i] == class)
            .collect(),
        None => ds.class_indices(class, split.split()),
    };
    let (xs, _) = ds.select(&idx);
    if xs.is_empty() {
        let how = if predicted.is_some() {
            "classified as"
        } else {
            "of"
        };
        return Err(Error::BadInput(format!(
            "no inputs {how} class {class} in the {split:?} split"
        )));
    }
    Ok(xs)
}

/// Parses arguments and runs one command; returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                crate::error::EXIT_BAD_INPUT
            } else {
                crate::error::EXIT_OK
            };
        }
    };
    match run(cli.command) {
        Ok(()) => crate::error::EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::GenConcepts(a) => gen_concepts(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::LearnCav(a) => learn_cav(a),
        Command::Tcav(a) => tcav(a),
        Command::Sort(a) => sort(a),
        Command::Dream(a) => dream(a),
        Command::Saliency(a) => saliency(a),
        Command::Attack(a) => attack(a),
        Command::ProbeLayers(a) => probe_layers(a),
        Command::Compare(a) => compare(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn gen_data(a: GenData) -> Result<()> {
    let mut rec = Recorder::new("gen-data");
    let mut spec: DatasetSpec = config_or_default(&a.spec)?;
    if let Some(p) = &a.spec {
        rec.input(p)?;
    }
    if let Some(p) = a.noise_p {
        spec.noise_p = p;
    }
    if let Some(s) = a.seed.seed {
        spec.seed = s;
    }
    spec.validate()?;
    rec.config(&spec);
    rec.seed(spec.seed);
    let ds = dataset::generate_controlled(&spec)?;
    rec.outputs(store::save_dataset(&a.out, &ds)?);
    println!(
        "{} images, caption agreement {:.4} (expected {:.4})",
        ds.len(),
        ds.caption_agreement_rate(),
        1.0 - spec.noise_p
    );
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

fn parse_kinds(names: &[String]) -> Result<Vec<TextureKind>> {
    names
        .iter()
        .map(|n| Ok(n.parse::<TextureKind>()?))
        .collect()
}

#[derive(Serialize)]
struct GenConceptsEcho<'a> {
    names: &'a [String],
    n: usize,
    size: usize,
    pool: usize,
    pool_kinds: Vec<TextureKind>,
}

fn gen_concepts(a: GenConcepts) -> Result<()> {
    let mut rec = Recorder::new("gen-concepts");
    let seed = a.seed.seed.unwrap_or(0);
    let kinds = parse_kinds(&a.names)?;
    let pool_kinds = if a.pool_kinds.is_empty() {
        TextureKind::ALL
            .iter()
            .copied()
            .filter(|k| !kinds.contains(k))
            .collect()
    } else {
        parse_kinds(&a.pool_kinds)?
    };
    rec.config(&GenConceptsEcho {
        names: &a.names,
        n: a.n,
        size: a.size,
        pool: a.pool,
        pool_kinds: pool_kinds.clone(),
    });
    rec.seed(seed);
    let names: Vec<&str> = a.names.iter().map(String::as_str).collect();
    for set in dataset::generate_texture_concepts(&names, a.n, seed, a.size, a.size)? {
        rec.outputs(store::save_concept_dir(a.out.join(&set.name), &set)?);
    }
    if a.pool > 0 {
        let pool = dataset::random_pool(&pool_kinds, a.pool, seed, a.size, a.size)?;
        rec.outputs(store::save_concept_dir(a.out.join("random"), &pool)?);
    }
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct TrainEcho<'a> {
    train: &'a TrainConfig,
    init_seed: u64,
    architecture: &'static str,
}

fn train(a: Train) -> Result<()> {
    let mut rec = Recorder::new("train");
    let mut cfg: TrainConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let init_seed = a.init_seed.unwrap_or(cfg.seed);
    rec.config(&TrainEcho {
        train: &cfg,
        init_seed,
        architecture: "reference_toy",
    });
    rec.seed(cfg.seed);
    rec.input(&a.data)?;
    let ds = store::load_dataset(&a.data)?;
    let model =
        LayeredModel::reference_toy(ds.spec.image_shape(), ds.spec.num_classes(), init_seed)?;
    let (xs, ys) = ds.split(Split::Train);
    let trained = model.train(&xs, &ys, &cfg)?;
    ensure_parent(&a.model)?;
    checkpoint::save(&a.model, &trained.model)?;
    rec.output(&a.model);
    let curve = a.model.with_extension("loss.json");
    store::write_json(&curve, &trained.loss_curve)?;
    rec.output(curve);
    if let Some(last) = trained.loss_curve.last() {
        println!(
            "trained {} epochs, final loss {last:.5}",
            trained.loss_curve.len()
        );
    }
    rec.finish(sibling_manifest(&a.model))?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub count: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
}

#[derive(Debug, Serialize)]
pub struct EvalResult {
    pub split: SplitArg,
    pub stripped: bool,
    pub count: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
}

fn eval(a: Eval) -> Result<()> {
    let mut rec = Recorder::new("eval");
    rec.config(&serde_json::json!({ "split": a.split, "strip_captions": a.strip_captions }));
    rec.input(&a.data)?;
    rec.input(&a.model)?;
    let model = checkpoint::load(&a.model)?;
    let mut ds = store::load_dataset(&a.data)?;
    if a.strip_captions {
        ds = dataset::strip_captions(&ds);
    }
    let (xs, ys) = ds.select(&ds.indices(a.split.split()));
    if xs.is_empty() {
        return Err(Error::BadInput(format!("the {:?} split is empty", a.split)));
    }
    let pred = model.classify_batch(&xs)?;
    let correct = |idx: &[usize]| idx.iter().filter(|&&i| pred[i] == ys[i]).count();
    let all: Vec<usize> = (0..ys.len()).collect();
    let per_class = (0..ds.spec.num_classes())
        .map(|k| {
            let idx: Vec<usize> = all.iter().copied().filter(|&i| ys[i] == k).collect();
            ClassAccuracy {
                class: k,
                count: idx.len(),
                accuracy: correct(&idx) as f64 / idx.len().max(1) as f64,
                balanced_accuracy: experiment::balanced_accuracy(&pred, &ys, k),
            }
        })
        .collect();
    let result = EvalResult {
        split: a.split,
        stripped: a.strip_captions,
        count: ys.len(),
        accuracy: correct(&all) as f64 / ys.len() as f64,
        per_class,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&result).map_err(|e| Error::json("<stdout>", e))?
    );
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        store::write_json(out, &result)?;
        rec.output(out);
        rec.finish(sibling_manifest(out))?;
    }
    Ok(())
}

fn file_stem(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn learn_cav(a: LearnCav) -> Result<()> {
    let mut rec = Recorder::new("learn-cav");
    let mut cfg: ProbeConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    rec.config(&serde_json::json!({ "layer": a.layer, "relative": a.relative, "probe": cfg }));
    rec.seed(cfg.seed);
    rec.input(&a.model)?;
    let model = checkpoint::load(&a.model)?;
    if a.relative {
        if a.concepts.len() < 2 {
            return Err(Error::BadInput(
                "--relative needs at least two --concept directories".into(),
            ));
        }
        let mut sets = Vec::with_capacity(a.concepts.len());
        for c in &a.concepts {
            rec.input(c)?;
            sets.push(store::load_concept_dir(c)?);
        }
        let cavs = cav::train_relative_cav(&model, &a.layer, &sets, &cfg)?;
        store::create_dir(&a.out)?;
        for (i, c) in cavs.iter().enumerate() {
            let path = a
                .out
                .join(format!("{i:02}_{}.json", file_stem(&a.concepts[i])));
            store::save_cav(&path, &CavDocument::new(c, &cfg))?;
            println!("{}: heldout accuracy {:.3}", c.concept, c.heldout_accuracy);
            rec.output(path);
        }
        rec.finish(dir_manifest(&a.out))?;
        return Ok(());
    }
    let (pos_dir, neg_dir) = (a.positives.as_ref().unwrap(), a.negatives.as_ref().unwrap());
    rec.input(pos_dir)?;
    rec.input(neg_dir)?;
    let pos = store::load_concept_dir(pos_dir)?;
    let neg = store::load_concept_dir(neg_dir)?;
    let c = cav::train_cav(&model, &a.layer, &pos, &neg, &cfg)?;
    ensure_parent(&a.out)?;
    store::save_cav(&a.out, &CavDocument::new(&c, &cfg))?;
    rec.output(&a.out);
    if let Some(t) = &a.tnsr {
        ensure_parent(t)?;
        tnsr::save(t, &Tensor::vector(c.vector.clone()))?;
        rec.output(t);
    }
    println!(
        "{} vs {} at {}: heldout accuracy {:.3}",
        c.concept, c.negative_id, c.layer, c.heldout_accuracy
    );
    rec.finish(sibling_manifest(&a.out))?;
    Ok(())
}

fn tcav(a: Tcav) -> Result<()> {
    let mut rec = Recorder::new("tcav");
    let mut cfg: SignificanceConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if let Some(v) = a.runs {
        cfg.runs = v;
    }
    if let Some(v) = a.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = a.m {
        cfg.m = v;
    }
    if let Some(v) = a.negatives_per_run {
        cfg.negatives_per_run = v;
    }
    if a.positives_per_run.is_some() {
        cfg.positives_per_run = a.positives_per_run;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::OneSample => TestMode::OneSample,
            ModeArg::VersusRandom => TestMode::VersusRandom,
        };
    }
    if let Some(s) = a.seed.seed {
        cfg.master_seed = s;
    }
    cfg.validate()?;
    rec.config(&serde_json::json!({
        "layers": a.layers,
        "classes": a.classes,
        "split": a.split,
        "by_prediction": a.by_prediction,
        "significance": cfg,
    }));
    rec.seed(cfg.master_seed);
    for p in [&a.model, &a.pool, &a.data] {
        rec.input(p)?;
    }
    let model = checkpoint::load(&a.model)?;
    let pool = store::load_concept_dir(&a.pool)?;
    let ds = store::load_dataset(&a.data)?;
    let mut concepts = Vec::with_capacity(a.concepts.len());
    for c in &a.concepts {
        rec.input(c)?;
        concepts.push(store::load_concept_dir(c)?);
    }
    let predicted = if a.by_prediction {
        Some(model.classify_batch(&ds.inputs.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let mut reports = Vec::new();
    for &class in &a.classes {
        let xk = class_inputs(&ds, class, a.split, predicted.as_deref())?;
        for layer in &a.layers {
            for concept in &concepts {
                let r = score::significance_test(&model, layer, concept, &pool, class, &xk, &cfg)?;
                println!(
                    "class {class} {layer} {}: TCAV_Q {:.3}, p = {:.3e}{}",
                    r.concept,
                    r.mean,
                    r.p_value,
                    if r.significant {
                        ""
                    } else {
                        " (not significant)"
                    }
                );
                reports.push(r);
            }
        }
    }
    rec.outputs(store::save_report_bundle(&a.out, &reports)?);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

fn sort(a: Sort) -> Result<()> {
    let mut rec = Recorder::new("sort");
    rec.config(&serde_json::json!({ "top": a.top }));
    for p in [&a.model, &a.cav, &a.images] {
        rec.input(p)?;
    }
    let model = checkpoint::load(&a.model)?;
    let cav = store::load_cav(&a.cav)?.to_cav();
    let images = store::load_concept_dir(&a.images)?;
    let ranked = extras::sort_by_concept(&model, &cav, &images)?;
    store::create_dir(&a.out)?;
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .enumerate()
        .map(|(rank, (i, c))| vec![rank.to_string(), i.to_string(), c.to_string()])
        .collect();
    let table = a.out.join("ranking.csv");
    store::save_table(&table, &["rank", "index", "cosine"], &rows)?;
    // first row: most similar; second row: least similar, most dissimilar first
    let n = a.top.clamp(1, ranked.len());
    let mut picks: Vec<&Tensor> = ranked[..n]
        .iter()
        .map(|(i, _)| &images.examples[*i])
        .collect();
    picks.extend(
        ranked
            .iter()
            .rev()
            .take(n)
            .map(|(i, _)| &images.examples[*i]),
    );
    let sheet = ppm::contact_sheet(&picks, n).map_err(|r| Error::format(&a.out, r))?;
    let sheet_path = a.out.join("sheet.ppm");
    ppm::save(&sheet_path, &sheet)?;
    rec.outputs([table, sheet_path]);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct DreamTrace<'a> {
    initial: f64,
    last: f64,
    trace: &'a [f64],
}

fn dream(a: Dream) -> Result<()> {
    let mut rec = Recorder::new("dream");
    let mut cfg: DreamConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = a.jitter {
        cfg.jitter = v;
    }
    if let Some(v) = a.l2 {
        cfg.l2 = v;
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.start {
        rec.input(p)?;
        cfg.start = DreamStart::Image(ppm::load(p)?);
    }
    cfg.validate()?;
    rec.config(&serde_json::json!({
        "steps": cfg.steps,
        "step_size": cfg.step_size,
        "jitter": cfg.jitter,
        "l2": cfg.l2,
        "start": if a.start.is_some() { "image" } else { "noise" },
    }));
    rec.seed(cfg.seed);
    rec.input(&a.model)?;
    rec.input(&a.cav)?;
    let model = checkpoint::load(&a.model)?;
    let cav = store::load_cav(&a.cav)?.to_cav();
    let d = extras::activation_maximize(&model, &cav, &cfg)?;
    store::create_dir(&a.out)?;
    let image = a.out.join("dream.ppm");
    ppm::save(&image, &d.image)?;
    let raw = a.out.join("dream.tnsr");
    tnsr::save(&raw, &d.image)?;
    let trace = a.out.join("trace.json");
    store::write_json(
        &trace,
        &DreamTrace {
            initial: d.initial(),
            last: d.last(),
            trace: &d.trace,
        },
    )?;
    println!("objective {:.4} -> {:.4}", d.initial(), d.last());
    rec.outputs([image, raw, trace]);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

fn saliency(a: SaliencyCmd) -> Result<()> {
    let mut rec = Recorder::new("saliency");
    rec.config(&serde_json::json!({ "class": a.class }));
    rec.input(&a.model)?;
    rec.input(&a.input)?;
    let model = checkpoint::load(&a.model)?;
    let x = ppm::load(&a.input)?;
    let s = extras::saliency_map(&model, a.class, &x)?;
    store::create_dir(&a.out)?;
    let heat = a.out.join("saliency.ppm");
    ppm::save(&heat, &ppm::heatmap(&s.magnitude))?;
    let mag = a.out.join("magnitude.tnsr");
    tnsr::save(&mag, &s.magnitude)?;
    let grad = a.out.join("gradient.tnsr");
    tnsr::save(&grad, &s.gradient)?;
    rec.outputs([heat, mag, grad]);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

#[derive(Serialize)]
struct AttackSummary {
    epsilon: f64,
    target: usize,
    attempted: usize,
    flipped: usize,
    success_rate: f64,
}

fn attack(a: Attack) -> Result<()> {
    let mut rec = Recorder::new("attack");
    rec.config(&serde_json::json!({ "epsilon": a.epsilon, "target": a.target, "split": a.split }));
    rec.input(&a.model)?;
    rec.input(&a.data)?;
    let model = checkpoint::load(&a.model)?;
    let ds = store::load_dataset(&a.data)?;
    let cfg = AttackConfig {
        epsilon: a.epsilon,
        target: a.target,
    };
    cfg.validate(model.num_classes())?;
    let idx: Vec<usize> = ds
        .indices(a.split.split())
        .into_iter()
        .filter(|&i| ds.labels[i] != a.target)
        .collect();
    if idx.is_empty() {
        return Err(Error::BadInput("no non-target inputs to attack".into()));
    }
    let mut out = LabeledDataset {
        spec: ds.spec.clone(),
        inputs: Vec::with_capacity(idx.len()),
        labels: Vec::with_capacity(idx.len()),
        caption_labels: Vec::with_capacity(idx.len()),
        splits: Vec::with_capacity(idx.len()),
        texture_seeds: Vec::with_capacity(idx.len()),
        stripped: ds.stripped,
    };
    let mut flipped = 0;
    for &i in &idx {
        let adv = extras::fgsm_attack(&model, &ds.inputs[i], &cfg)?;
        flipped += (model.classify(&adv)? == a.target) as usize;
        out.inputs.push(adv);
        out.labels.push(ds.labels[i]);
        out.caption_labels.push(ds.caption_labels[i]);
        out.splits.push(ds.splits[i]);
        out.texture_seeds.push(ds.texture_seeds[i]);
    }
    rec.outputs(store::save_dataset(&a.out, &out)?);
    let summary = AttackSummary {
        epsilon: a.epsilon,
        target: a.target,
        attempted: idx.len(),
        flipped,
        success_rate: flipped as f64 / idx.len() as f64,
    };
    let path = a.out.join("attack.json");
    store::write_json(&path, &summary)?;
    println!(
        "{flipped} of {} inputs now classified as {}",
        idx.len(),
        a.target
    );
    rec.output(path);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}

fn probe_layers(a: ProbeLayers) -> Result<()> {
    let mut rec = Recorder::new("probe-layers");
    let mut cfg: ProbeConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    rec.config(&cfg);
    rec.seed(cfg.seed);
    for p in [&a.model, &a.positives, &a.negatives] {
        rec.input(p)?;
    }
    let model = checkpoint::load(&a.model)?;
    let pos = store::load_concept_dir(&a.positives)?;
    let neg = store::load_concept_dir(&a.negatives)?;
    let accs = cav::probe_layers(&model, &pos, &neg, &cfg)?;
    let rows: Vec<Vec<String>> = accs
        .iter()
        .map(|(l, v)| vec![l.clone(), v.to_string()])
        .collect();
    for (l, v) in &accs {
        println!("{l:>10} {v:.3}");
    }
    ensure_parent(&a.out)?;
    store::save_table(&a.out, &["layer", "heldout_accuracy"], &rows)?;
    rec.output(&a.out);
    rec.finish(sibling_manifest(&a.out))?;
    Ok(())
}

fn compare(a: Compare) -> Result<()> {
    let mut rec = Recorder::new("compare");
    rec.config(&serde_json::json!({ "threshold": a.threshold }));
    rec.input(&a.a)?;
    rec.input(&a.b)?;
    let ra = store::load_reports_json(&a.a)?;
    let rb = store::load_reports_json(&a.b)?;
    let shift = score::score_distribution_compare(&ra, &rb, a.threshold)?;
    for c in &shift.concepts {
        println!(
            "{} class {} {}: mean {:.3} -> {:.3}, KS {:.3}{}",
            c.concept,
            c.class,
            c.layer,
            c.mean_a,
            c.mean_b,
            c.ks,
            if c.flagged { " (flagged)" } else { "" }
        );
    }
    ensure_parent(&a.out)?;
    store::write_json(&a.out, &shift)?;
    rec.output(&a.out);
    rec.finish(sibling_manifest(&a.out))?;
    Ok(())
}

fn run_experiment(a: ExperimentCmd) -> Result<()> {
    let mut rec = Recorder::new("experiment");
    let mut cfg: ExperimentConfig = config_or_default(&a.config)?;
    if let Some(p) = &a.config {
        rec.input(p)?;
    }
    if !a.noise_list.is_empty() {
        cfg.noise_list = a.noise_list.clone();
    }
    if let Some(v) = a.runs {
        cfg.significance.runs = v;
    }
    if let Some(v) = a.train_per_class {
        cfg.dataset.train_per_class = v;
    }
    if let Some(v) = a.heldout_per_class {
        cfg.dataset.heldout_per_class = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = &a.layer {
        cfg.layer = v.clone();
    }
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    rec.config(&cfg);
    rec.seed(cfg.seed);
    store::create_dir(&a.out)?;
    let quiet = a.quiet;
    let (exp, written) = experiment::run(&cfg, Some(&a.out), |msg| {
        if !quiet {
            eprintln!("{msg}");
        }
    })?;
    println!("{}", experiment::SUMMARY_HEADER.join(","));
    for row in experiment::summary_table(&exp.rows) {
        println!("{}", row.join(","));
    }
    let agree = exp.rows.iter().filter(|r| r.consistent).count();
    println!("consistent in {agree} of {} cells", exp.rows.len());
    rec.outputs(written);
    rec.finish(dir_manifest(&a.out))?;
    Ok(())
}
