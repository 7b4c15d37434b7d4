//! Datasets with disjoint known/novel label ranges, proportional mini-batch
//! sampling and Gaussian jitter views.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Matrix;
use crate::{Error, Result};

/// Labeled samples of the known classes; labels lie in `[0, C^l)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    features: Matrix,
    labels: Vec<usize>,
}

impl LabeledSet {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unlabeled samples of the novel classes. The hidden labels lie in
/// `[C^l, C^l + C^u)` and are read only by evaluation; batches handed to the
/// trainer carry features alone.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSet {
    features: Matrix,
    hidden_labels: Vec<usize>,
}

impl UnlabeledSet {
    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn hidden_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub fn len(&self) -> usize {
        self.hidden_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden_labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryDataset {
    labeled: LabeledSet,
    unlabeled: UnlabeledSet,
    known_classes: usize,
    novel_classes: usize,
}

impl DiscoveryDataset {
    /// Builds a dataset, checking the disjoint-range invariants.
    pub fn new(
        labeled_features: Matrix,
        labels: Vec<usize>,
        unlabeled_features: Matrix,
        hidden_labels: Vec<usize>,
        known_classes: usize,
        novel_classes: usize,
    ) -> Result<Self> {
        if known_classes == 0 || novel_classes == 0 {
            return Err(Error::Config(format!(
                "need at least one known and one novel class, got {known_classes}/{novel_classes}"
            )));
        }
        if labeled_features.rows() != labels.len() || unlabeled_features.rows() != hidden_labels.len() {
            return Err(Error::Contract("feature rows and label counts differ".into()));
        }
        if labeled_features.cols() != unlabeled_features.cols() {
            return Err(Error::Contract(format!(
                "labeled features have dimension {}, unlabeled {}",
                labeled_features.cols(),
                unlabeled_features.cols()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= known_classes) {
            return Err(Error::Contract(format!(
                "labeled label {bad} outside known range [0, {known_classes})"
            )));
        }
        let total = known_classes + novel_classes;
        if let Some(&bad) = hidden_labels.iter().find(|&&y| y < known_classes || y >= total) {
            return Err(Error::Contract(format!(
                "hidden label {bad} outside novel range [{known_classes}, {total})"
            )));
        }
        labeled_features.ensure_finite("labeled features")?;
        unlabeled_features.ensure_finite("unlabeled features")?;
        Ok(Self {
            labeled: LabeledSet {
                features: labeled_features,
                labels,
            },
            unlabeled: UnlabeledSet {
                features: unlabeled_features,
                hidden_labels,
            },
            known_classes,
            novel_classes,
        })
    }

    pub fn labeled(&self) -> &LabeledSet {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &UnlabeledSet {
        &self.unlabeled
    }

    pub fn feature_dim(&self) -> usize {
        self.labeled.features.cols()
    }

    pub fn known_classes(&self) -> usize {
        self.known_classes
    }

    pub fn novel_classes(&self) -> usize {
        self.novel_classes
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ratio of unlabeled to labeled sample counts.
    pub fn imbalance_ratio(&self) -> f64 {
        self.unlabeled.len() as f64 / self.labeled.len() as f64
    }

    /// Stratified split: each class keeps `max(1, round(n · test_fraction))`
    /// samples for the test set, chosen by a seeded shuffle.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(DiscoveryDataset, DiscoveryDataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Config(format!(
                "test fraction must lie in [0, 1), got {test_fraction}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lab_train, lab_test) = split_rows(&self.labeled.labels, test_fraction, &mut rng)?;
        let (unl_train, unl_test) = split_rows(&self.unlabeled.hidden_labels, test_fraction, &mut rng)?;
        let build = |lab: &[usize], unl: &[usize]| -> Result<DiscoveryDataset> {
            DiscoveryDataset::new(
                self.labeled.features.select_rows(lab)?,
                lab.iter().map(|&i| self.labeled.labels[i]).collect(),
                self.unlabeled.features.select_rows(unl)?,
                unl.iter().map(|&i| self.unlabeled.hidden_labels[i]).collect(),
                self.known_classes,
                self.novel_classes,
            )
        };
        Ok((build(&lab_train, &unl_train)?, build(&lab_test, &unl_test)?))
    }
}

fn split_rows(labels: &[usize], test_fraction: f64, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut rows) in by_class {
        if rows.len() < 2 {
            return Err(Error::Config(format!(
                "class {class} has {} sample(s); a train/test split needs at least 2",
                rows.len()
            )));
        }
        rows.shuffle(rng);
        let n_test = ((rows.len() as f64 * test_fraction).round() as usize).clamp(1, rows.len() - 1);
        test.extend_from_slice(&rows[..n_test]);
        train.extend_from_slice(&rows[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub known_classes: usize,
    pub novel_classes: usize,
    pub samples_per_known_class: usize,
    pub samples_per_novel_class: usize,
    pub feature_dim: usize,
    /// Distance of every class mean from the origin.
    pub separation: f64,
    /// Per-coordinate standard deviation within a class.
    pub std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            known_classes: 5,
            novel_classes: 5,
            samples_per_known_class: 100,
            samples_per_novel_class: 100,
            feature_dim: 16,
            separation: 3.0,
            std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(Error::Config(format!(
                "feature_dim must be at least 2, got {}",
                self.feature_dim
            )));
        }
        if self.known_classes == 0 || self.novel_classes == 0 {
            return Err(Error::Config("class counts must be at least 1".into()));
        }
        if self.samples_per_known_class < 2 || self.samples_per_novel_class < 2 {
            return Err(Error::Config(
                "samples per class must be at least 2 to allow a train/test split".into(),
            ));
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::Config(format!("std must be positive, got {}", self.std)));
        }
        if !(self.separation >= 0.0) || !self.separation.is_finite() {
            return Err(Error::Config(format!(
                "separation must be non-negative, got {}",
                self.separation
            )));
        }
        Ok(())
    }
}

/// Fraction of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.2;

/// Draws one Gaussian cluster per class, then splits every class 80/20 into
/// train and test.
///
/// Class means sit at distance `separation` from the origin. With at most
/// `feature_dim` classes they form a scaled simplex: each class owns a
/// distinct random axis with a random sign, so all means are equidistant.
/// Otherwise each mean is a random orthant corner `±separation/√d`.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(DiscoveryDataset, DiscoveryDataset)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.feature_dim;
    let total_classes = config.known_classes + config.novel_classes;

    let means: Vec<Vec<f64>> = if total_classes <= d {
        let mut axes: Vec<usize> = (0..d).collect();
        axes.shuffle(&mut rng);
        axes[..total_classes]
            .iter()
            .map(|&axis| {
                let mut m = vec![0.0; d];
                m[axis] = if rng.random::<bool>() { config.separation } else { -config.separation };
                m
            })
            .collect()
    } else {
        let corner = config.separation / (d as f64).sqrt();
        (0..total_classes)
            .map(|_| (0..d).map(|_| if rng.random::<bool>() { corner } else { -corner }).collect())
            .collect()
    };

    let noise = Normal::new(0.0, config.std).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |class: usize, count: usize, rows: &mut Vec<f64>, labels: &mut Vec<usize>| {
        for _ in 0..count {
            rows.extend(means[class].iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(class);
        }
    };

    let (mut lab_rows, mut labels) = (Vec::new(), Vec::new());
    for c in 0..config.known_classes {
        draw(c, config.samples_per_known_class, &mut lab_rows, &mut labels);
    }
    let (mut unl_rows, mut hidden) = (Vec::new(), Vec::new());
    for c in config.known_classes..total_classes {
        draw(c, config.samples_per_novel_class, &mut unl_rows, &mut hidden);
    }

    let full = DiscoveryDataset::new(
        Matrix::new(labels.len(), d, lab_rows)?,
        labels,
        Matrix::new(hidden.len(), d, unl_rows)?,
        hidden,
        config.known_classes,
        config.novel_classes,
    )?;
    full.split(TEST_FRACTION, config.seed.wrapping_add(0x5eed))
}

/// Column layout of a CSV file to ingest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    /// Feature column names; `None` selects every column except the label.
    #[serde(default)]
    pub feature_columns: Option<Vec<String>>,
    pub label_column: String,
    /// Label values that belong to the known (labeled) classes.
    pub known_classes: Vec<String>,
}

/// Reads a CSV file with a header row. Rows whose label appears in
/// `schema.known_classes` become labeled samples; every other row is
/// unlabeled. Known classes take indices `[0, C^l)` in list order; novel
/// labels follow in sorted order (numeric when every novel label parses as
/// an integer).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<DiscoveryDataset> {
    let path = path.as_ref();
    if schema.known_classes.is_empty() {
        return Err(Error::Config("known-class list is empty".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let label_idx = column(&schema.label_column)?;
    let feature_idx: Vec<usize> = match &schema.feature_columns {
        Some(cols) => cols.iter().map(|c| column(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != label_idx).collect(),
    };
    if feature_idx.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut raw: Vec<(Vec<f64>, String)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // Data rows are numbered from 1; the header is row 0.
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let mut features = Vec::with_capacity(feature_idx.len());
        for &j in &feature_idx {
            let cell = record.get(j).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing column {j}"),
            })?;
            let x: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                message: format!("non-numeric feature `{cell}` in column `{}`", &headers[j]),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite feature `{cell}`"),
                });
            }
            features.push(x);
        }
        let label = record
            .get(label_idx)
            .ok_or_else(|| Error::Parse {
                row,
                message: "missing label".into(),
            })?
            .to_string();
        raw.push((features, label));
    }

    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, name) in schema.known_classes.iter().enumerate() {
        if index.insert(name.as_str(), i).is_some() {
            return Err(Error::Config(format!("known class `{name}` listed twice")));
        }
    }
    let mut novel: Vec<&str> = raw
        .iter()
        .map(|(_, l)| l.as_str())
        .filter(|l| !index.contains_key(l))
        .collect();
    novel.sort_unstable();
    novel.dedup();
    if novel.iter().all(|l| l.parse::<i64>().is_ok()) {
        novel.sort_by_key(|l| l.parse::<i64>().unwrap_or_default());
    }
    let known = schema.known_classes.len();
    for (i, name) in novel.iter().enumerate() {
        index.insert(name, known + i);
    }

    let d = feature_idx.len();
    let (mut lab_rows, mut labels, mut unl_rows, mut hidden) = (vec![], vec![], vec![], vec![]);
    for (features, label) in &raw {
        let y = index[label.as_str()];
        if y < known {
            lab_rows.extend_from_slice(features);
            labels.push(y);
        } else {
            unl_rows.extend_from_slice(features);
            hidden.push(y);
        }
    }
    if labels.is_empty() || hidden.is_empty() {
        return Err(Error::Config(format!(
            "{} must contain both known-class and novel-class rows ({} labeled, {} unlabeled)",
            path.display(),
            labels.len(),
            hidden.len()
        )));
    }
    DiscoveryDataset::new(
        Matrix::new(labels.len(), d, lab_rows)?,
        labels,
        Matrix::new(hidden.len(), d, unl_rows)?,
        hidden,
        known,
        novel.len(),
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// One mixed mini-batch. Unlabeled samples carry features only.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled_features: Matrix,
    pub labeled_labels: Vec<usize>,
    pub unlabeled_features: Matrix,
}

impl Batch {
    pub fn labeled_len(&self) -> usize {
        self.labeled_labels.len()
    }

    pub fn unlabeled_len(&self) -> usize {
        self.unlabeled_features.rows()
    }
}

/// Labeled/unlabeled counts `(N, M)` for a batch: `N` is proportional to the
/// labeled share of the dataset, clamped to `[1, batch_size - 1]`, and neither
/// count exceeds its subset size.
pub fn batch_composition(labeled: usize, unlabeled: usize, batch_size: usize) -> Result<(usize, usize)> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    if labeled == 0 || unlabeled == 0 {
        return Err(Error::Config("both subsets must be non-empty".into()));
    }
    let share = batch_size as f64 * labeled as f64 / (labeled + unlabeled) as f64;
    let n = (share.round() as usize).clamp(1, batch_size - 1).min(labeled);
    let m = (batch_size - n).min(unlabeled);
    Ok((n, m))
}

/// Samples one batch without replacement inside the batch.
pub fn sample_batch<R: Rng + ?Sized>(dataset: &DiscoveryDataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    let (n, m) = batch_composition(dataset.labeled.len(), dataset.unlabeled.len(), batch_size)?;
    let lab = rand::seq::index::sample(rng, dataset.labeled.len(), n).into_vec();
    let unl = rand::seq::index::sample(rng, dataset.unlabeled.len(), m).into_vec();
    make_batch(dataset, &lab, &unl)
}

fn make_batch(dataset: &DiscoveryDataset, lab: &[usize], unl: &[usize]) -> Result<Batch> {
    Ok(Batch {
        labeled_features: dataset.labeled.features.select_rows(lab)?,
        labeled_labels: lab.iter().map(|&i| dataset.labeled.labels[i]).collect(),
        unlabeled_features: dataset.unlabeled.features.select_rows(unl)?,
    })
}

/// Shuffles both subsets and cuts them into proportional batches. Every
/// sample appears at most once per subset within the returned epoch.
pub fn epoch_batches<R: Rng + ?Sized>(dataset: &DiscoveryDataset, batch_size: usize, rng: &mut R) -> Result<Vec<Batch>> {
    let (l, u) = (dataset.labeled.len(), dataset.unlabeled.len());
    let (n, m) = batch_composition(l, u, batch_size)?;
    let steps = (l / n).min(u / m).max(1);
    let mut lab: Vec<usize> = (0..l).collect();
    let mut unl: Vec<usize> = (0..u).collect();
    lab.shuffle(rng);
    unl.shuffle(rng);
    (0..steps)
        .map(|s| make_batch(dataset, &lab[s * n..(s + 1) * n], &unl[s * m..(s + 1) * m]))
        .collect()
}

/// Shuffled labeled-only batches of at most `batch_size` rows covering the
/// labeled subset once.
pub fn labeled_epoch<R: Rng + ?Sized>(
    dataset: &DiscoveryDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(Matrix, Vec<usize>)>> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.labeled.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            Ok((
                dataset.labeled.features.select_rows(chunk)?,
                chunk.iter().map(|&i| dataset.labeled.labels[i]).collect(),
            ))
        })
        .collect()
}

/// Adds i.i.d. `N(0, noise_std²)` jitter to every entry.
pub fn augment_view<R: Rng + ?Sized>(features: &Matrix, noise_std: f64, rng: &mut R) -> Result<Matrix> {
    if !(noise_std >= 0.0) || !noise_std.is_finite() {
        return Err(Error::Config(format!("noise std must be non-negative, got {noise_std}")));
    }
    if noise_std == 0.0 {
        return Ok(features.clone());
    }
    let mut out = features.clone();
    for x in out.as_mut_slice() {
        let z: f64 = StandardNormal.sample(rng);
        *x += noise_std * z;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::io::Write;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            known_classes: 2,
            novel_classes: 2,
            samples_per_known_class: 100,
            samples_per_novel_class: 100,
            feature_dim: 4,
            separation: 10.0,
            std: 0.5,
            seed: 7,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(&small_config()).unwrap();
        let b = generate_synthetic(&small_config()).unwrap();
        assert_eq!(a, b);
        let mut other = small_config();
        other.seed = 8;
        assert_ne!(a.0, generate_synthetic(&other).unwrap().0);
    }

    #[test]
    fn synthetic_split_and_ranges() {
        let (train, test) = generate_synthetic(&small_config()).unwrap();
        assert_eq!(train.labeled().len(), 160);
        assert_eq!(test.labeled().len(), 40);
        assert_eq!(train.unlabeled().len(), 160);
        assert!(train.labeled().labels().iter().all(|&y| y < 2));
        assert!(train.unlabeled().hidden_labels().iter().all(|&y| (2..4).contains(&y)));
        assert_eq!(train.feature_dim(), 4);
    }

    #[test]
    fn synthetic_imbalance_ratio() {
        let mut cfg = small_config();
        cfg.samples_per_known_class = 50;
        cfg.samples_per_novel_class = 200;
        let (train, test) = generate_synthetic(&cfg).unwrap();
        assert_eq!(train.imbalance_ratio(), 4.0);
        assert_eq!(test.imbalance_ratio(), 4.0);
    }

    #[test]
    fn synthetic_rejects_bad_config() {
        let mut cfg = small_config();
        cfg.feature_dim = 1;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config();
        cfg.std = 0.0;
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_rejects_overlapping_ranges() {
        let x = Matrix::zeros(2, 2);
        let err = DiscoveryDataset::new(x.clone(), vec![0, 2], x.clone(), vec![2, 3], 2, 2);
        assert!(err.is_err());
        let err = DiscoveryDataset::new(x.clone(), vec![0, 1], x.clone(), vec![1, 3], 2, 2);
        assert!(err.is_err());
        assert!(DiscoveryDataset::new(x.clone(), vec![0, 1], x, vec![2, 3], 2, 2).is_ok());
    }

    #[test]
    fn composition_examples() {
        assert_eq!(batch_composition(500, 500, 64).unwrap(), (32, 32));
        assert_eq!(batch_composition(100, 400, 100).unwrap(), (20, 80));
        assert_eq!(batch_composition(1, 400, 64).unwrap(), (1, 63));
        assert!(batch_composition(10, 10, 1).is_err());
    }

    #[test]
    fn epoch_visits_each_sample_at_most_once() {
        let (train, _) = generate_synthetic(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batches = epoch_batches(&train, 64, &mut rng).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen = HashSet::new();
        for b in &batches {
            assert_eq!((b.labeled_len(), b.unlabeled_len()), (32, 32));
            for row in b.unlabeled_features.row_iter() {
                assert!(seen.insert(row.iter().map(|x| x.to_bits()).collect::<Vec<_>>()));
            }
        }
    }

    #[test]
    fn sample_batch_is_proportional() {
        let mut cfg = small_config();
        cfg.samples_per_novel_class = 400;
        let (train, _) = generate_synthetic(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = sample_batch(&train, 100, &mut rng).unwrap();
        assert_eq!((b.labeled_len(), b.unlabeled_len()), (20, 80));
        assert!(sample_batch(&train, 1, &mut rng).is_err());
    }

    #[test]
    fn augment_identity_and_determinism() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_view(&x, 0.0, &mut rng).unwrap(), x);
        let a = augment_view(&x, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment_view(&x, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, x);
        assert!(matches!(augment_view(&x, -0.1, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn augment_mean_absolute_perturbation() {
        // E|N(0, 0.1²)| = 0.1·sqrt(2/π); Monte-Carlo over 200k entries.
        let x = Matrix::zeros(1000, 200);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = augment_view(&x, 0.1, &mut rng).unwrap();
        let mean_abs = y.as_slice().iter().map(|v| v.abs()).sum::<f64>() / 200_000.0;
        let expected = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
        assert!((expected - 0.0798).abs() < 1e-4);
        assert!((mean_abs - expected).abs() < 5e-4, "{mean_abs}");
    }

    fn write_csv(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn schema(known: &[&str]) -> CsvSchema {
        CsvSchema {
            feature_columns: None,
            label_column: "label".into(),
            known_classes: known.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn csv_bookkeeping() {
        let f = write_csv("x,y,label\n1,2,cat\n3,4,dog\n5,6,owl\n7,8,eel\n");
        let ds = load_csv(f.path(), &schema(&["dog", "cat"])).unwrap();
        assert_eq!(ds.labeled().len(), 2);
        assert_eq!(ds.unlabeled().len(), 2);
        assert_eq!((ds.known_classes(), ds.novel_classes()), (2, 2));
        assert_eq!(ds.labeled().labels(), &[1, 0]);
        // eel < owl
        assert_eq!(ds.unlabeled().hidden_labels(), &[3, 2]);
        assert_eq!(ds.unlabeled().features().row(0), &[5.0, 6.0]);
    }

    #[test]
    fn csv_numeric_labels_sort_numerically() {
        let f = write_csv("a,label,b\n0,1,0\n0,10,0\n0,2,0\n");
        let ds = load_csv(f.path(), &schema(&["1"])).unwrap();
        assert_eq!(ds.unlabeled().hidden_labels(), &[2, 1]);
        assert_eq!(ds.feature_dim(), 2);
    }

    #[test]
    fn csv_errors() {
        let f = write_csv("x,label\n1,a\nzz,b\n");
        assert!(matches!(load_csv(f.path(), &schema(&[])), Err(Error::Config(_))));
        match load_csv(f.path(), &schema(&["a"])) {
            Err(Error::Parse { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("zz"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut s = schema(&["a"]);
        s.label_column = "class".into();
        assert!(matches!(load_csv(f.path(), &s), Err(Error::Schema(_))));
        let f = write_csv("x,label\n1,a\n2\n");
        assert!(matches!(load_csv(f.path(), &schema(&["a"])), Err(Error::Parse { row: 2, .. })));
    }
}
