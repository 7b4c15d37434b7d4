//! Multi-seed experiment orchestration, the class-count sweep and embedding
//! export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{generate_synthetic, load_csv, DiscoveryDataset, TEST_FRACTION};
use crate::eval::{evaluate_task_agnostic, evaluate_task_aware, joint_argmax, EvalReport, Protocol};
use crate::model::ModelState;
use crate::objective::{train_stage1, train_stage2_with, EpochLog, LossBreakdown, Stage1Epoch};
use crate::{Error, Result};

/// Train and test sets for one seed. Synthetic data is regenerated with the
/// generator seed offset by the run seed; CSV data uses its fixed split seed.
pub fn load_datasets(config: &ExperimentConfig, seed: u64) -> Result<(DiscoveryDataset, DiscoveryDataset)> {
    match (&config.dataset.synthetic, &config.dataset.csv) {
        (Some(synthetic), None) => {
            let mut synthetic = synthetic.clone();
            synthetic.seed = synthetic.seed.wrapping_add(seed);
            generate_synthetic(&synthetic)
        }
        (None, Some(csv)) => load_csv(&csv.path, &csv.schema())?.split(TEST_FRACTION, csv.split_seed),
        _ => Err(Error::Config("dataset: exactly one of `synthetic` or `csv` must be set".into())),
    }
}

/// Final metrics of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub task_aware: EvalReport,
    pub task_agnostic: EvalReport,
    /// Task-aware scores on the training set; the novel part is the
    /// clustering of the unlabeled training samples.
    pub train_task_aware: EvalReport,
    pub degenerate_batches: usize,
}

impl SeedMetrics {
    /// Flattened `(name, value)` pairs of every scalar metric.
    pub fn scalars(&self) -> Vec<(String, Option<f64>)> {
        let mut out = Vec::new();
        for (prefix, r) in [
            ("task_aware", &self.task_aware),
            ("task_agnostic", &self.task_agnostic),
            ("train_task_aware", &self.train_task_aware),
        ] {
            for (name, value) in [
                ("known_acc", r.known_acc),
                ("novel_cluster_acc", r.novel_cluster_acc),
                ("all_acc", r.all_acc),
                ("nmi", r.nmi),
                ("ari", r.ari),
            ] {
                out.push((format!("{prefix}.{name}"), value));
            }
        }
        out
    }
}

/// Everything produced by training one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub metrics: SeedMetrics,
    pub stage1: Vec<Stage1Epoch>,
    pub log: Vec<EpochLog>,
    pub steps: Vec<LossBreakdown>,
    pub model: ModelState,
}

fn eval_record(model: &ModelState, test: &DiscoveryDataset, config: &ExperimentConfig) -> Result<serde_json::Value> {
    let aware = evaluate_task_aware(model, test)?;
    let agnostic = evaluate_task_agnostic(model, test, config.eval.task_agnostic_mapping)?;
    serde_json::to_value(BTreeMap::from([("task_aware", aware), ("task_agnostic", agnostic)]))
        .map_err(|e| Error::Serde(e.to_string()))
}

/// Supervised stage, replica snapshot, discovery stage and final evaluation
/// for one seed. `sink` receives every discovery epoch as it finishes.
pub fn run_seed_with(
    config: &ExperimentConfig,
    seed: u64,
    sink: &mut dyn FnMut(&EpochLog) -> Result<()>,
) -> Result<SeedRun> {
    config.validate()?;
    let (train_set, test_set) = load_datasets(config, seed)?;
    let model_config = config.model.model_config(
        train_set.feature_dim(),
        train_set.known_classes(),
        train_set.novel_classes(),
    );
    let mut model = ModelState::init(model_config, seed)?;
    let train = crate::objective::TrainConfig {
        seed,
        ..config.train.clone()
    };
    let stage1 = train_stage1(&mut model, &train_set, &train)?;
    model.install_replica(model.snapshot_replica())?;
    let every = config.eval.every;
    let report = train_stage2_with(&mut model, &train_set, &train, &config.sckd, |entry, m| {
        if every > 0 && (entry.epoch + 1) % every == 0 {
            entry.eval = Some(eval_record(m, &test_set, config)?);
        }
        sink(entry)
    })?;
    let metrics = SeedMetrics {
        seed,
        task_aware: evaluate_task_aware(&model, &test_set)?,
        task_agnostic: evaluate_task_agnostic(&model, &test_set, config.eval.task_agnostic_mapping)?,
        train_task_aware: evaluate_task_aware(&model, &train_set)?,
        degenerate_batches: report.degenerate_batches,
    };
    Ok(SeedRun {
        metrics,
        stage1,
        log: report.epochs,
        steps: report.steps,
        model,
    })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    run_seed_with(config, seed, &mut |_| Ok(()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Mean and standard deviation of every scalar metric across seeds. Seeds
/// where a metric is absent are skipped for that metric.
pub fn aggregate(metrics: &[SeedMetrics]) -> BTreeMap<String, Stat> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for m in metrics {
        for (name, value) in m.scalars() {
            let entry = values.entry(name).or_default();
            if let Some(v) = value {
                entry.push(v);
            }
        }
    }
    values
        .into_iter()
        .filter_map(|(k, v)| Stat::of(&v).map(|s| (k, s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<SeedMetrics>,
    pub aggregate: BTreeMap<String, Stat>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn run_seed_to_dir(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedMetrics> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    let result = run_seed_with(config, seed, &mut |entry| {
        let line = serde_json::to_string(entry).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| Error::io(&log_path, e))
    });
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let run = match result {
        Ok(run) => run,
        Err(err) => {
            let status = BTreeMap::from([("status", "failed".to_string()), ("error", err.to_string())]);
            write_json(&dir.join("status.json"), &status)?;
            return Err(err);
        }
    };
    write_jsonl(&dir.join("stage1_log.jsonl"), &run.stage1)?;
    write_json(&dir.join("metrics.json"), &run.metrics)?;
    checkpoint::save(&run.model, dir.join("checkpoint.bin"))?;
    write_json(
        &dir.join("status.json"),
        &BTreeMap::from([("status", "completed".to_string())]),
    )?;
    Ok(run.metrics)
}

/// Runs every seed (in parallel) and writes the results bundle:
///
/// ```text
/// <output_dir>/config.toml            verbatim input (or the resolved config)
/// <output_dir>/config.resolved.toml   config after overrides and defaults
/// <output_dir>/seed_<s>/metrics.json, train_log.jsonl, stage1_log.jsonl,
///                       checkpoint.bin, status.json
/// <output_dir>/aggregate.json, status.json
/// ```
///
/// If any seed fails, completed seeds and partial logs stay on disk, the top
/// level status is `failed` and the first error is returned.
pub fn run_experiment(config: &ExperimentConfig, config_text: Option<&str>) -> Result<ExperimentSummary> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = config.to_toml()?;
    let verbatim = config_text.unwrap_or(&resolved);
    fs::write(out.join("config.toml"), verbatim).map_err(|e| Error::io(out.join("config.toml"), e))?;
    fs::write(out.join("config.resolved.toml"), &resolved)
        .map_err(|e| Error::io(out.join("config.resolved.toml"), e))?;

    let results: Vec<Result<SeedMetrics>> = config
        .seeds
        .par_iter()
        .map(|&seed| run_seed_to_dir(config, seed, &out.join(format!("seed_{seed}"))))
        .collect();
    let mut seeds = Vec::with_capacity(results.len());
    let mut failure = None;
    for (seed, result) in config.seeds.iter().zip(results) {
        match result {
            Ok(m) => seeds.push(m),
            Err(e) => {
                failure.get_or_insert((*seed, e));
            }
        }
    }
    let summary = ExperimentSummary {
        aggregate: aggregate(&seeds),
        seeds,
    };
    write_json(&out.join("aggregate.json"), &summary.aggregate)?;
    match failure {
        None => {
            write_json(&out.join("status.json"), &BTreeMap::from([("status", "completed".to_string())]))?;
            Ok(summary)
        }
        Some((seed, err)) => {
            write_json(
                &out.join("status.json"),
                &BTreeMap::from([
                    ("status", "failed".to_string()),
                    ("error", format!("seed {seed}: {err}")),
                ]),
            )?;
            Err(err)
        }
    }
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub known_classes: usize,
    pub novel_classes: usize,
    pub novel_fraction: f64,
    pub variant: String,
    pub protocol: Protocol,
    pub known_acc_mean: Option<f64>,
    pub known_acc_std: Option<f64>,
    pub novel_cluster_acc_mean: Option<f64>,
    pub novel_cluster_acc_std: Option<f64>,
    pub all_acc_mean: Option<f64>,
    pub all_acc_std: Option<f64>,
}

/// Name and config of each method run at every sweep point. The `baseline`
/// variant (β = 0) is always present.
pub fn sweep_variants(config: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut baseline = config.clone();
    baseline.sckd.beta = 0.0;
    vec![("sckd".to_string(), config.clone()), ("baseline".to_string(), baseline)]
}

/// Concrete configs of every sweep point in order of increasing novel
/// fraction, each paired with its novel class count.
pub fn sweep_points(config: &ExperimentConfig) -> Result<Vec<(usize, ExperimentConfig)>> {
    config.validate()?;
    let sweep = config
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep: section is required".into()))?;
    let synthetic = config
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| Error::Config("sweep: requires a synthetic dataset".into()))?;
    let mut counts = sweep.novel_classes.clone();
    counts.sort_unstable();
    counts.dedup();
    let per_class = sweep.sample_budget / sweep.total_classes;
    Ok(counts
        .into_iter()
        .map(|novel| {
            let mut c = config.clone();
            let mut s = synthetic.clone();
            s.known_classes = sweep.total_classes - novel;
            s.novel_classes = novel;
            s.samples_per_known_class = per_class;
            s.samples_per_novel_class = per_class;
            c.dataset.synthetic = Some(s);
            c.sweep = None;
            (novel, c)
        })
        .collect())
}

fn sweep_rows(known: usize, novel: usize, variant: &str, summary: &ExperimentSummary) -> Vec<SweepRow> {
    let get = |key: String| summary.aggregate.get(&key).copied();
    [Protocol::TaskAware, Protocol::TaskAgnostic]
        .into_iter()
        .map(|protocol| {
            let prefix = protocol.as_str();
            let known_acc = get(format!("{prefix}.known_acc"));
            let novel_acc = get(format!("{prefix}.novel_cluster_acc"));
            let all_acc = get(format!("{prefix}.all_acc"));
            SweepRow {
                known_classes: known,
                novel_classes: novel,
                novel_fraction: novel as f64 / (known + novel) as f64,
                variant: variant.to_string(),
                protocol,
                known_acc_mean: known_acc.map(|s| s.mean),
                known_acc_std: known_acc.map(|s| s.std),
                novel_cluster_acc_mean: novel_acc.map(|s| s.mean),
                novel_cluster_acc_std: novel_acc.map(|s| s.std),
                all_acc_mean: all_acc.map(|s| s.mean),
                all_acc_std: all_acc.map(|s| s.std),
            }
        })
        .collect()
}

/// Runs every sweep point under every variant and writes `sweep.csv` and
/// `sweep.json` to the output directory, with one bundle per point and
/// variant under `novel_<n>/<variant>/`.
pub fn run_sweep(config: &ExperimentConfig, config_text: Option<&str>) -> Result<Vec<SweepRow>> {
    let points = sweep_points(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(text) = config_text {
        fs::write(out.join("config.toml"), text).map_err(|e| Error::io(out.join("config.toml"), e))?;
    }
    let jobs: Vec<(usize, usize, String, ExperimentConfig)> = points
        .iter()
        .flat_map(|(novel, point)| {
            sweep_variants(point).into_iter().map(move |(name, mut c)| {
                c.output_dir = out.join(format!("novel_{novel}")).join(&name);
                (point.dataset.synthetic.as_ref().map_or(0, |s| s.known_classes), *novel, name, c)
            })
        })
        .collect();
    let summaries: Vec<Result<ExperimentSummary>> =
        jobs.par_iter().map(|(_, _, _, c)| run_experiment(c, None)).collect();
    let mut rows = Vec::new();
    for ((known, novel, name, _), summary) in jobs.iter().zip(summaries) {
        rows.extend(sweep_rows(*known, *novel, name, &summary?));
    }

    let csv_path = out.join("sweep.csv");
    let mut writer = csv::Writer::from_path(&csv_path).map_err(|e| Error::Serde(e.to_string()))?;
    for row in &rows {
        writer.serialize(row).map_err(|e| Error::Serde(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(&csv_path, e))?;
    write_json(&out.join("sweep.json"), &rows)?;
    Ok(rows)
}

/// Writes one CSV row per sample of `dataset`: labeled samples first, then
/// unlabeled ones. Columns are `sample_id, true_label, predicted_id,
/// f0..f(k-1)`; the prediction is the argmax over all slots. Returns the
/// number of rows.
pub fn emit_embeddings(model: &ModelState, dataset: &DiscoveryDataset, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let k = model.config().feature_dim;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let to_err = |e: csv::Error| Error::Serde(e.to_string());
    let mut header = vec!["sample_id".to_string(), "true_label".into(), "predicted_id".into()];
    header.extend((0..k).map(|j| format!("f{j}")));
    writer.write_record(&header).map_err(to_err)?;

    let labeled = dataset.labeled();
    let unlabeled = dataset.unlabeled();
    let parts = [
        (labeled.features(), labeled.labels(), labeled.is_empty()),
        (unlabeled.features(), unlabeled.hidden_labels(), unlabeled.is_empty()),
    ];
    let mut id = 0;
    for (features, labels, empty) in parts {
        if empty {
            continue;
        }
        let out = model.forward(features)?;
        for (i, &label) in labels.iter().enumerate() {
            let predicted = joint_argmax(out.known_logits.row(i), out.novel_logits.row(i));
            let mut record = vec![id.to_string(), label.to_string(), predicted.to_string()];
            record.extend(out.features.row(i).iter().map(|v| v.to_string()));
            writer.write_record(&record).map_err(to_err)?;
            id += 1;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(id)
}
