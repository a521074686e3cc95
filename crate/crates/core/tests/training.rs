use std::path::Path;

use oqc_core::config::ExperimentConfig;
use oqc_core::metrics::MechanismReport;
use oqc_core::train::runner::{read_json, run_experiment, train_seed, RunError, RunRecord};

const SMALL: &str = r#"
name = "smoke"
seeds = [0, 1, 2]

[backbone]
depth = 1
width = 16
heads = 2
patch = 4
image_size = 8

[variant.host]
kind = "mlp"

[variant.complement]
kind = "low_rank"
rank = 4

[optimizer]
epochs = 2
batch_size = 16
shard_size = 4

[dataset]
kind = "synthetic"
n_classes = 4
samples_per_class = 12
test_per_class = 4

[analysis]
max_samples = 16
batch_size = 8
"#;

fn config(text: &str, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml_str(text, Path::new("smoke.toml")).unwrap();
    c.output_dir = out.to_path_buf();
    c
}

#[test]
fn seeds_are_distinct_and_reruns_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL, dir.path());
    let first = run_experiment(&cfg, &mut |_| {}).unwrap();
    let records = first.records();
    assert_eq!(records.len(), 3);
    // Different seeds draw different parameters and batch orders.
    assert_ne!(records[0].train_loss, records[1].train_loss);
    assert_ne!(records[1].train_loss, records[2].train_loss);
    for r in &records {
        assert_eq!(r.steps, 2 * 3);
        assert_eq!(r.test_acc.len(), 2);
        assert!(r.train_loss.iter().all(|l| l.is_finite()));
        assert!((0.0..=1.0).contains(&r.best_test_acc));
        assert_eq!(r.best_test_acc, r.test_acc[r.best_epoch]);
    }

    let again = run_experiment(&cfg, &mut |_| {}).unwrap();
    let a: Vec<RunRecord> = records.iter().map(RunRecord::deterministic_view).collect();
    let b: Vec<RunRecord> = again.records().iter().map(RunRecord::deterministic_view).collect();
    assert_eq!(a, b);

    for seed in &cfg.seeds {
        let seed_dir = first.dir.join(seed.to_string());
        for f in ["record.json", "mechanism.json", "checkpoint.json"] {
            assert!(seed_dir.join(f).is_file(), "{f}");
        }
        let rec: RunRecord = read_json(&seed_dir.join("record.json")).unwrap();
        assert_eq!(rec.seed, *seed);
        let mech: MechanismReport = read_json(&seed_dir.join("mechanism.json")).unwrap();
        assert_eq!(mech.per_layer_overlap_post.len(), 1);
        assert!(mech.gate_mean.is_none());
    }
    for f in ["config.toml", "records.jsonl", "summary.csv", "mechanism.csv"] {
        assert!(first.dir.join(f).is_file(), "{f}");
    }
    assert_eq!(first.dir.file_name().unwrap().to_str().unwrap(), cfg.hash());
}

#[test]
fn f64_precision_trains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&SMALL.replace("seeds = [0, 1, 2]", "seeds = [5]\nprecision = \"f64\""), dir.path());
    let res = run_experiment(&cfg, &mut |_| {}).unwrap();
    let mech: MechanismReport = read_json(&res.dir.join("5").join("mechanism.json")).unwrap();
    assert!(mech.precision.contains("f64"), "{}", mech.precision);
}

#[test]
fn non_finite_loss_is_reported_with_its_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(SMALL, dir.path());
    let mut data = cfg.dataset.load(cfg.backbone.image_size).unwrap();
    data.train.images[0] = f32::NAN;
    let err = train_seed::<f32>(&cfg, cfg.backbone_config(data.n_classes), &data, 0, &mut |_| {})
        .err()
        .expect("NaN input must fail");
    match err {
        RunError::NonFiniteLoss { epoch, .. } => assert_eq!(epoch, 0),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn observer_sees_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&SMALL.replace("seeds = [0, 1, 2]", "seeds = [1]"), dir.path());
    let mut seen = Vec::new();
    run_experiment(&cfg, &mut |log| seen.push((log.seed, log.epoch))).unwrap();
    assert_eq!(seen, vec![(1, 0), (1, 1)]);
}
