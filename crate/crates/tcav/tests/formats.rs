//! On-disk formats: lossless round-trips and rejection of damaged files.

use proptest::prelude::*;
use tcav::store::{self, CavDocument};
use tcav::{checkpoint, ppm, tnsr, Error};
use tcav_core::cav::ProbeConfig;
use tcav_core::dataset::texture::{self, TextureKind};
use tcav_core::dataset::{generate_controlled, generate_texture_concepts};
use tcav_core::model::TrainConfig;
use tcav_core::tcav::TcavReport;
use tcav_core::{Cav, DatasetSpec, LayeredModel, Tensor};

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn f32_tensor() -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n).prop_map(
            move |d| Tensor::new(shape.clone(), d.into_iter().map(f64::from).collect()).unwrap(),
        )
    })
}

fn small_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        height: 16,
        width: 16,
        train_per_class: 4,
        heldout_per_class: 2,
        noise_p: 0.5,
        seed,
        ..DatasetSpec::default()
    }
}

fn cav(vector: Vec<f64>, seed: u64) -> Cav {
    Cav {
        concept: "striped".into(),
        negative_id: "random".into(),
        layer: "relu2".into(),
        vector,
        heldout_accuracy: 0.75,
        train_seed: seed,
        relative: seed.is_multiple_of(2),
        provenance: "concepts/striped".into(),
    }
}

fn report(scores: Vec<f64>, seed: u64) -> TcavReport {
    TcavReport::from_scores(
        "striped",
        (seed % 3) as usize,
        "relu2",
        scores,
        0.05,
        2,
        seed,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn tnsr_round_trips_f32_values(t in f32_tensor()) {
        let bytes = tnsr::encode(&t);
        prop_assert_eq!(bytes.len(), 8 + 4 * t.rank() + 4 * t.len());
        let back = tnsr::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(tnsr::encode(&back), bytes);
    }

    #[test]
    fn tnsr_rejects_every_truncation(t in f32_tensor(), cut in any::<prop::sample::Index>()) {
        let bytes = tnsr::encode(&t);
        let n = cut.index(bytes.len());
        prop_assert!(tnsr::decode(&bytes[..n]).is_err());
    }

    #[test]
    fn ppm_round_trips_byte_grid_images(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let img = Tensor::new(vec![h, w, 3], texture::render(TextureKind::Noise, seed, h, w)).unwrap();
        let bytes = ppm::encode(&img).unwrap();
        let back = ppm::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(ppm::encode(&back).unwrap(), bytes);
    }

    #[test]
    fn cav_documents_round_trip(vector in prop::collection::vec(-1e3f64..1e3, 1..40), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cav.json");
        let probe = ProbeConfig { seed, ..ProbeConfig::default() };
        let doc = CavDocument::new(&cav(vector, seed), &probe);
        store::save_cav(&path, &doc).unwrap();
        let back = store::load_cav(&path).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(back.to_cav(), doc.to_cav());
    }

    #[test]
    fn reports_round_trip(
        scores in prop::collection::vec(0.0f64..=1.0, 2..60),
        seed in any::<u64>(),
        baseline in prop::option::of(prop::collection::vec(0.0f64..=1.0, 2..60)),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports.json");
        let mut r = report(scores, seed);
        r.baseline_scores = baseline;
        let reports = vec![r.clone(), report(vec![0.25, 0.75, 1.0], seed ^ 1)];
        store::save_reports_json(&path, &reports).unwrap();
        prop_assert_eq!(store::load_reports_json(&path).unwrap(), reports);
    }
}

proptest! {
    #![proptest_config(config(20))]

    #[test]
    fn checkpoints_round_trip_trained_models(seed in any::<u64>(), epochs in 0usize..2) {
        let ds = generate_controlled(&small_spec(seed)).unwrap();
        let (xs, ys) = ds.split(tcav_core::dataset::Split::Train);
        let init = LayeredModel::reference_toy(ds.spec.image_shape(), 3, seed).unwrap();
        let cfg = TrainConfig { epochs, batch_size: 4, seed, ..TrainConfig::default() };
        let model = init.train(&xs, &ys, &cfg).unwrap().model;
        let bytes = checkpoint::encode(&model);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        for x in &xs {
            prop_assert_eq!(back.predict(x).unwrap(), model.predict(x).unwrap());
        }
    }

    #[test]
    fn datasets_round_trip(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_controlled(&DatasetSpec { noise_p: p, ..small_spec(seed) }).unwrap();
        store::save_dataset(dir.path(), &ds).unwrap();
        prop_assert_eq!(store::load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn concept_directories_round_trip(seed in any::<u64>(), n in 2usize..6) {
        let dir = tempfile::tempdir().unwrap();
        for set in generate_texture_concepts(&["striped", "solid"], n, seed, 10, 10).unwrap() {
            let path = dir.path().join(&set.name);
            store::save_concept_dir(&path, &set).unwrap();
            prop_assert_eq!(store::load_concept_dir(&path).unwrap(), set);
        }
    }
}

#[test]
fn epoch_zero_training_keeps_the_initialization() {
    let ds = generate_controlled(&small_spec(3)).unwrap();
    let (xs, ys) = ds.split(tcav_core::dataset::Split::Train);
    let init = LayeredModel::reference_toy(ds.spec.image_shape(), 3, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let trained = init.train(&xs, &ys, &cfg).unwrap();
    assert_eq!(
        checkpoint::encode(&trained.model),
        checkpoint::encode(&init)
    );
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let model = LayeredModel::reference_toy(vec![16, 16, 3], 3, 0).unwrap();
    let bytes = checkpoint::encode(&model);
    for cut in [0, 3, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"TNSR");
    assert!(checkpoint::decode(&magic).unwrap_err().contains("magic"));
    let mut version = bytes.clone();
    version[4] = 9;
    assert!(checkpoint::decode(&version).is_err());
    let mut long = bytes;
    long.push(0);
    assert!(checkpoint::decode(&long).is_err());
}

#[test]
fn dataset_blobs_are_checked_against_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_controlled(&small_spec(1)).unwrap();
    store::save_dataset(dir.path(), &ds).unwrap();
    let blob = dir.path().join(store::DATASET_INPUTS);
    let mut bytes = std::fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&blob, bytes).unwrap();
    let err = store::load_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Format { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn cav_width_must_match_its_vector() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cav.json");
    let mut doc = CavDocument::new(&cav(vec![0.6, 0.8], 1), &ProbeConfig::default());
    doc.m = 3;
    store::save_cav(&path, &doc).unwrap();
    assert!(store::load_cav(&path).is_err());
}

#[test]
fn report_csv_has_one_row_per_report() {
    let dir = tempfile::tempdir().unwrap();
    let reports = vec![
        report(vec![0.9, 0.8, 1.0], 0),
        report(vec![0.4, 0.6, 0.5], 1),
    ];
    let written = store::save_report_bundle(dir.path(), &reports).unwrap();
    assert!(written.iter().all(|p| p.exists()));
    let mut rdr = csv::Reader::from_path(dir.path().join(store::REPORT_CSV)).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[..4], ["concept", "class", "layer", "mean"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for (row, r) in rows.iter().zip(&reports) {
        assert_eq!(row[3].parse::<f64>().unwrap(), r.mean);
        assert_eq!(row[5].parse::<f64>().unwrap(), r.p_value);
    }
    assert_eq!(
        store::load_reports_json(dir.path().join(store::REPORT_JSON)).unwrap(),
        reports
    );
}
