use std::collections::BTreeMap;
use std::fs;

use sckd_core::checkpoint;
use sckd_core::config::{CsvSource, DatasetConfig, ExperimentConfig};
use sckd_core::data::{generate_synthetic, SyntheticConfig};
use sckd_core::experiment::{emit_embeddings, load_datasets, run_experiment, run_seed, Stat};
use sckd_core::model::ModelState;
use sckd_core::objective::{train_stage1, train_stage2};

fn quick_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.train.stage1_epochs = 5;
    config.train.stage2_epochs = 8;
    config.train.warmup_epochs = 2;
    config
}

#[test]
fn replica_stays_frozen_and_stage1_leaves_novel_head() {
    let config = quick_config();
    let (train, _) = load_datasets(&config, 3).unwrap();
    let model_config = config
        .model
        .model_config(train.feature_dim(), train.known_classes(), train.novel_classes());
    let mut model = ModelState::init(model_config, 3).unwrap();
    let novel_before = model.novel_head().clone();
    train_stage1(&mut model, &train, &config.train).unwrap();
    assert_eq!(model.novel_head(), &novel_before);

    let replica = model.snapshot_replica();
    model.install_replica(replica.clone()).unwrap();
    let encoder_before = model.encoder().clone();
    train_stage2(&mut model, &train, &config.train, &config.sckd).unwrap();
    assert_eq!(model.replica(), Some(&replica));
    assert_ne!(model.encoder(), &encoder_before);
}

#[test]
fn stage1_fits_separable_known_classes() {
    let (train, _) = generate_synthetic(&SyntheticConfig {
        separation: 10.0,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let config = ExperimentConfig::default();
    let model_config = config
        .model
        .model_config(train.feature_dim(), train.known_classes(), train.novel_classes());
    let mut model = ModelState::init(model_config, 0).unwrap();
    let log = train_stage1(&mut model, &train, &config.train).unwrap();
    assert!(log.last().unwrap().ce < log[0].ce);
    let out = model.forward(train.labeled().features()).unwrap();
    let hits = out
        .known_logits
        .argmax_rows()
        .iter()
        .zip(train.labeled().labels())
        .filter(|(p, y)| p == y)
        .count();
    assert!(hits as f64 >= 0.99 * train.labeled().len() as f64, "{hits}/{}", train.labeled().len());
}

#[test]
fn bundle_layout_and_aggregate_match_seed_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: vec![2, 5],
        output_dir: dir.path().to_path_buf(),
        ..quick_config()
    };
    let summary = run_experiment(&config, Some("seeds = [2, 5]\n")).unwrap();
    let out = dir.path();
    assert_eq!(fs::read_to_string(out.join("config.toml")).unwrap(), "seeds = [2, 5]\n");
    let resolved = ExperimentConfig::load(out.join("config.resolved.toml"), &[]).unwrap();
    assert_eq!(resolved, config);
    assert!(fs::read_to_string(out.join("status.json")).unwrap().contains("completed"));

    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in &config.seeds {
        let seed_dir = out.join(format!("seed_{seed}"));
        let metrics: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(seed_dir.join("metrics.json")).unwrap()).unwrap();
        for protocol in ["task_aware", "task_agnostic", "train_task_aware"] {
            for (name, value) in metrics[protocol].as_object().unwrap() {
                if let Some(v) = value.as_f64().filter(|_| !name.ends_with("_samples")) {
                    per_metric.entry(format!("{protocol}.{name}")).or_default().push(v);
                }
            }
        }
        let log = fs::read_to_string(seed_dir.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), config.train.stage2_epochs);
        let stage1 = fs::read_to_string(seed_dir.join("stage1_log.jsonl")).unwrap();
        assert_eq!(stage1.lines().count(), config.train.stage1_epochs);
        let model = checkpoint::load(seed_dir.join("checkpoint.bin")).unwrap();
        assert_eq!(model, run_seed(&config, *seed).unwrap().model);
    }

    let aggregate: BTreeMap<String, Stat> =
        serde_json::from_str(&fs::read_to_string(out.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(aggregate, summary.aggregate);
    assert_eq!(aggregate.len(), per_metric.len());
    for (name, values) in per_metric {
        let stat = aggregate[&name];
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        assert_eq!(stat.n, values.len());
        assert!((stat.mean - mean).abs() < 1e-12, "{name}");
        assert!((stat.std - var.sqrt()).abs() < 1e-12, "{name}");
    }
}

#[test]
fn embeddings_cover_every_sample_exactly() {
    let config = quick_config();
    let run = run_seed(&config, 0).unwrap();
    let (_, test) = load_datasets(&config, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.csv");
    let rows = emit_embeddings(&run.model, &test, &path).unwrap();
    assert_eq!(rows, test.len());

    let mut reader = csv::Reader::from_path(&path).unwrap();
    let header = reader.headers().unwrap().clone();
    let k = config.model.feature_dim;
    assert_eq!(header.len(), 3 + k);
    let features = run
        .model
        .encode(&test.labeled().features().vstack(test.unlabeled().features()).unwrap())
        .unwrap();
    let labels: Vec<usize> = test.labeled().labels().iter().chain(test.unlabeled().hidden_labels()).copied().collect();
    for (i, record) in reader.records().enumerate() {
        let record = record.unwrap();
        assert_eq!(record[0].parse::<usize>().unwrap(), i);
        assert_eq!(record[1].parse::<usize>().unwrap(), labels[i]);
        for j in 0..k {
            assert_eq!(record[3 + j].parse::<f64>().unwrap(), features[(i, j)]);
        }
    }
}

#[test]
fn csv_dataset_trains_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (train, _) = generate_synthetic(&SyntheticConfig {
        known_classes: 2,
        novel_classes: 2,
        samples_per_known_class: 30,
        samples_per_novel_class: 30,
        feature_dim: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let path = dir.path().join("data.csv");
    let mut writer = csv::Writer::from_path(&path).unwrap();
    writer.write_record(["a", "b", "c", "d", "species"]).unwrap();
    let parts = [
        (train.labeled().features(), train.labeled().labels()),
        (train.unlabeled().features(), train.unlabeled().hidden_labels()),
    ];
    for (offset, (features, labels)) in parts.into_iter().enumerate() {
        for (i, &y) in labels.iter().enumerate() {
            let mut record: Vec<String> = features.row(i).iter().map(|v| v.to_string()).collect();
            record.push(format!("class_{}", y + 2 * offset));
            writer.write_record(&record).unwrap();
        }
    }
    writer.flush().unwrap();

    let config = ExperimentConfig {
        dataset: DatasetConfig {
            synthetic: None,
            csv: Some(CsvSource {
                path,
                feature_columns: None,
                label_column: "species".into(),
                known_classes: vec!["class_0".into(), "class_1".into()],
                split_seed: 1,
            }),
        },
        output_dir: dir.path().join("out"),
        ..quick_config()
    };
    let (_, test) = load_datasets(&config, 0).unwrap();
    assert_eq!((test.known_classes(), test.novel_classes()), (2, 2));
    let summary = run_experiment(&config, None).unwrap();
    let m = &summary.seeds[0];
    assert!(m.task_aware.known_acc.unwrap() > 0.5);
    assert_eq!(m.task_aware.known_samples + m.task_aware.novel_samples, test.len());
}

#[test]
fn shipped_configs_load() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = ExperimentConfig::load(dir.join("default.toml"), &[]).unwrap();
    let expected = ExperimentConfig {
        seeds: vec![0, 1, 2, 3, 4],
        output_dir: "results/default".into(),
        ..ExperimentConfig::default()
    };
    assert_eq!(default, expected);
    let sweep = ExperimentConfig::load(dir.join("sweep.toml"), &[]).unwrap();
    assert_eq!(sweep.sweep.unwrap().novel_classes, vec![2, 5, 8]);
}
