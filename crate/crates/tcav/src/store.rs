//! On-disk layouts: concept directories, dataset directories, CAV store
//! documents and TCAV report bundles.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use tcav_core::cav::{Cav, ProbeConfig};
use tcav_core::dataset::{ConceptSet, DatasetSpec, LabeledDataset, Split};
use tcav_core::tcav::TcavReport;
use tcav_core::{stats, Tensor};

use crate::error::{Error, Result};
use crate::{ppm, tnsr};

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::json(path, e))
}

/// Pretty-printed JSON with a trailing newline. Field order follows the
/// type definitions, so equal values always produce equal bytes.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(header).map_err(wrap)?;
    for r in rows {
        w.write_record(r).map_err(wrap)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// concept directories

pub const CONCEPT_META: &str = "concept.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ConceptMeta {
    name: String,
    provenance: String,
    count: usize,
}

/// Writes `0000.ppm`, `0001.ppm`, ... plus a small metadata file.
pub fn save_concept_dir(dir: impl AsRef<Path>, set: &ConceptSet) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let mut written = Vec::with_capacity(set.len() + 1);
    for (i, x) in set.examples.iter().enumerate() {
        let path = dir.join(format!("{i:04}.ppm"));
        ppm::save(&path, x)?;
        written.push(path);
    }
    let meta = ConceptMeta {
        name: set.name.clone(),
        provenance: set.provenance.clone(),
        count: set.len(),
    };
    let path = dir.join(CONCEPT_META);
    write_json(&path, &meta)?;
    written.push(path);
    Ok(written)
}

/// Reads every `.ppm` in `dir` in file-name order. The concept name and
/// provenance come from the metadata file when present, otherwise from the
/// directory name and path.
pub fn load_concept_dir(dir: impl AsRef<Path>) -> Result<ConceptSet> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::format(dir, "concept directory holds no .ppm images"));
    }
    let mut examples = Vec::with_capacity(files.len());
    for f in &files {
        let img = ppm::load(f)?;
        if let Some(first) = examples.first().map(|t: &Tensor| t.shape().to_vec()) {
            if img.shape() != first.as_slice() {
                return Err(Error::format(
                    f,
                    format!(
                        "image is {:?} but earlier images are {:?}",
                        img.shape(),
                        first
                    ),
                ));
            }
        }
        examples.push(img);
    }
    let meta_path = dir.join(CONCEPT_META);
    let (name, provenance) = if meta_path.exists() {
        let meta: ConceptMeta = read_json(&meta_path)?;
        (meta.name, meta.provenance)
    } else {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        (name, format!("dir {}", dir.display()))
    };
    Ok(ConceptSet::new(name, examples, provenance)?)
}

// dataset directories

pub const DATASET_MANIFEST: &str = "dataset.json";
pub const DATASET_INPUTS: &str = "inputs.tnsr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub count: usize,
    /// Fraction of images whose caption names their own class.
    pub agreement_rate: f64,
    pub stripped: bool,
    /// TNSR file holding every image stacked as `[count, h, w, 3]`.
    pub inputs: String,
    pub inputs_sha256: String,
    pub labels: Vec<usize>,
    pub caption_labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub texture_seeds: Vec<u64>,
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &LabeledDataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let refs: Vec<&Tensor> = ds.inputs.iter().collect();
    let stacked = Tensor::stack(&refs)?;
    let blob = tnsr::encode(&stacked);
    let blob_path = dir.join(DATASET_INPUTS);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        count: ds.len(),
        agreement_rate: ds.caption_agreement_rate(),
        stripped: ds.stripped,
        inputs: DATASET_INPUTS.into(),
        inputs_sha256: crate::manifest::sha256_hex(&blob),
        labels: ds.labels.clone(),
        caption_labels: ds.caption_labels.clone(),
        splits: ds.splits.clone(),
        texture_seeds: ds.texture_seeds.clone(),
    };
    let path = dir.join(DATASET_MANIFEST);
    write_json(&path, &manifest)?;
    Ok(vec![path, blob_path])
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let path = dir.join(DATASET_MANIFEST);
    let m: DatasetManifest = read_json(&path)?;
    let blob_path = dir.join(&m.inputs);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if crate::manifest::sha256_hex(&blob) != m.inputs_sha256 {
        return Err(Error::format(
            &blob_path,
            "digest does not match the dataset manifest",
        ));
    }
    let stacked = tnsr::decode(&blob).map_err(|r| Error::format(&blob_path, r))?;
    if stacked.shape().first() != Some(&m.count) {
        return Err(Error::format(
            &blob_path,
            format!(
                "expected {} images, found shape {:?}",
                m.count,
                stacked.shape()
            ),
        ));
    }
    let ds = LabeledDataset {
        spec: m.spec,
        inputs: stacked.unstack(),
        labels: m.labels,
        caption_labels: m.caption_labels,
        splits: m.splits,
        texture_seeds: m.texture_seeds,
        stripped: m.stripped,
    };
    ds.validate()
        .map_err(|e| Error::format(&path, e.to_string()))?;
    Ok(ds)
}

// CAV store

/// One CAV as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CavDocument {
    pub concept: String,
    pub negative_id: String,
    pub layer: String,
    pub m: usize,
    pub vector: Vec<f64>,
    pub heldout_accuracy: f64,
    pub train_seed: u64,
    #[serde(default)]
    pub relative: bool,
    #[serde(default)]
    pub provenance: String,
    pub probe_config: ProbeConfig,
}

impl CavDocument {
    pub fn new(cav: &Cav, probe_config: &ProbeConfig) -> Self {
        CavDocument {
            concept: cav.concept.clone(),
            negative_id: cav.negative_id.clone(),
            layer: cav.layer.clone(),
            m: cav.width(),
            vector: cav.vector.clone(),
            heldout_accuracy: cav.heldout_accuracy,
            train_seed: cav.train_seed,
            relative: cav.relative,
            provenance: cav.provenance.clone(),
            probe_config: probe_config.clone(),
        }
    }

    pub fn to_cav(&self) -> Cav {
        Cav {
            concept: self.concept.clone(),
            negative_id: self.negative_id.clone(),
            layer: self.layer.clone(),
            vector: self.vector.clone(),
            heldout_accuracy: self.heldout_accuracy,
            train_seed: self.train_seed,
            relative: self.relative,
            provenance: self.provenance.clone(),
        }
    }
}

pub fn save_cav(path: impl AsRef<Path>, doc: &CavDocument) -> Result<()> {
    write_json(path, doc)
}

pub fn load_cav(path: impl AsRef<Path>) -> Result<CavDocument> {
    let path = path.as_ref();
    let doc: CavDocument = read_json(path)?;
    if doc.m != doc.vector.len() {
        return Err(Error::format(
            path,
            format!(
                "m = {} but the vector has {} entries",
                doc.m,
                doc.vector.len()
            ),
        ));
    }
    Ok(doc)
}

// report bundles

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

pub fn bars_file(class: usize) -> String {
    format!("bars_class{class}.csv")
}

fn stddev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        0.0
    } else {
        stats::sample_variance(xs).sqrt()
    }
}

pub fn save_reports_json(path: impl AsRef<Path>, reports: &[TcavReport]) -> Result<()> {
    write_json(path, reports)
}

pub fn load_reports_json(path: impl AsRef<Path>) -> Result<Vec<TcavReport>> {
    read_json(path)
}

/// One row per (concept, class, layer).
pub fn save_reports_csv(path: impl AsRef<Path>, reports: &[TcavReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.concept.clone(),
                r.class.to_string(),
                r.layer.clone(),
                r.mean.to_string(),
                stddev(&r.scores).to_string(),
                r.p_value.to_string(),
                r.significant.to_string(),
                r.alpha.to_string(),
                r.m.to_string(),
                r.runs.to_string(),
                r.failed_runs.to_string(),
                r.master_seed.to_string(),
            ]
        })
        .collect();
    write_csv(
        path.as_ref(),
        &[
            "concept",
            "class",
            "layer",
            "mean",
            "stddev",
            "p_value",
            "significant",
            "alpha",
            "m",
            "runs",
            "failed_runs",
            "master_seed",
        ],
        &rows,
    )
}

/// Bar-chart data for one class: mean score with error bar per (concept,
/// layer); `marker` is `*` for bars that failed the significance test.
pub fn save_bars_csv(path: impl AsRef<Path>, reports: &[&TcavReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.concept.clone(),
                r.layer.clone(),
                r.mean.to_string(),
                stddev(&r.scores).to_string(),
                r.significant.to_string(),
                r.marker().to_string(),
            ]
        })
        .collect();
    write_csv(
        path.as_ref(),
        &[
            "concept",
            "layer",
            "mean",
            "stddev",
            "significant",
            "marker",
        ],
        &rows,
    )
}

/// Writes `report.json`, `report.csv` and one bars file per class present.
pub fn save_report_bundle(dir: impl AsRef<Path>, reports: &[TcavReport]) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let json = dir.join(REPORT_JSON);
    save_reports_json(&json, reports)?;
    let csv = dir.join(REPORT_CSV);
    save_reports_csv(&csv, reports)?;
    let mut written = vec![json, csv];
    let mut classes: Vec<usize> = reports.iter().map(|r| r.class).collect();
    classes.sort_unstable();
    classes.dedup();
    for k in classes {
        let path = dir.join(bars_file(k));
        let of_class: Vec<&TcavReport> = reports.iter().filter(|r| r.class == k).collect();
        save_bars_csv(&path, &of_class)?;
        written.push(path);
    }
    Ok(written)
}

/// Plain CSV with the given header; used for small tabular outputs.
pub fn save_table(path: impl AsRef<Path>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_csv(path.as_ref(), header, rows)
}
