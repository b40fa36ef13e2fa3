use gazetr::checkpoint;
use gazetr::data::{evaluate, generate_synthetic, read_dataset, write_dataset, DatasetManifest, SyntheticConfig};
use gazetr::error::Error;
use gazetr::models::{build_variant, ModelVariant, VariantTag};
use gazetr::train::{train_with, TrainOptions, TrainPlan};

fn config() -> SyntheticConfig {
    SyntheticConfig {
        samples: 48,
        subjects: 4,
        test_subjects: 1,
        seed: 11,
        ..SyntheticConfig::scaled_to(32)
    }
}

#[test]
fn disk_round_trip_preserves_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let data = generate_synthetic(&cfg).unwrap();
    let manifest = DatasetManifest::for_synthetic(&cfg);
    write_dataset(dir.path(), &data, &manifest, false).unwrap();
    let (back, m) = read_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
    assert_eq!(m, manifest);
    assert!(matches!(write_dataset(dir.path(), &data, &manifest, false), Err(Error::Exists(_))));
}

#[test]
fn train_save_load_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config();
    let data = generate_synthetic(&cfg).unwrap();
    let manifest = DatasetManifest::for_synthetic(&cfg);
    let (train_set, test) = (manifest.train_split(&data), manifest.test_split(&data));
    assert_eq!(train_set.len() + test.len(), data.len());

    let plan = TrainPlan {
        batch_size: 12,
        epochs: 3,
        warmup_epochs: 1,
        seed: 4,
        ..TrainPlan::default()
    };
    for tag in VariantTag::ALL {
        let mut model = build_variant(&ModelVariant::toy(tag, 32), 2).unwrap();
        let mut seen = Vec::new();
        let mut log = |r: &gazetr::train::EpochRecord| seen.push(r.epoch);
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().join(tag.name())),
            checkpoint_every: None,
            on_epoch: Some(&mut log),
        };
        let report = train_with(&mut model, &train_set, &plan, opts).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        assert_eq!(report.steps, 3 * train_set.len().div_ceil(12));
        let loaded = checkpoint::load(report.final_checkpoint.as_ref().unwrap()).unwrap();
        assert_eq!(evaluate(&loaded, &test).unwrap(), evaluate(&model, &test).unwrap(), "{tag}");
    }
}
