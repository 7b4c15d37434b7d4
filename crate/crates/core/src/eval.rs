//! Assignment-based clustering metrics and the two evaluation protocols.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::DiscoveryDataset;
use crate::model::ModelState;
use crate::numerics::{argmax, Matrix};
use crate::{Error, Result};

/// Solves the square assignment problem `min Σ_i cost[i][σ(i)]`.
///
/// Among optimal assignments the lexicographically smallest `σ` is returned.
/// Costs that differ by less than `1e-9 · (1 + |optimum|)` count as ties.
pub fn hungarian(cost: &Matrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::Contract(format!("cost matrix is {}×{}, expected square", n, cost.cols())));
    }
    cost.ensure_finite("cost matrix")?;
    let best = assignment_value(cost, &[], &[]);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut rows_used = Vec::with_capacity(n);
    let mut cols_used = Vec::with_capacity(n);
    let mut fixed = 0.0;
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        rows_used.push(i);
        let mut chosen = None;
        let free: Vec<usize> = (0..n).filter(|j| !cols_used.contains(j)).collect();
        for j in free {
            cols_used.push(j);
            let rest = assignment_value(cost, &rows_used, &cols_used);
            if fixed + cost[(i, j)] + rest <= best + tol {
                chosen = Some(j);
                break;
            }
            cols_used.pop();
        }
        // Some column always completes to the optimum; if rounding hides it,
        // take the cheapest completion.
        let j = match chosen {
            Some(j) => j,
            None => {
                let j = (0..n)
                    .filter(|j| !cols_used.contains(j))
                    .min_by(|&a, &b| {
                        let mut ca = cols_used.clone();
                        ca.push(a);
                        let mut cb = cols_used.clone();
                        cb.push(b);
                        let va = cost[(i, a)] + assignment_value(cost, &rows_used, &ca);
                        let vb = cost[(i, b)] + assignment_value(cost, &rows_used, &cb);
                        va.total_cmp(&vb)
                    })
                    .expect("free column exists");
                cols_used.push(j);
                j
            }
        };
        fixed += cost[(i, j)];
        perm.push(j);
    }
    Ok(perm)
}

/// Optimal assignment cost of the submatrix without the given rows and
/// columns (equal counts). O(k³) shortest augmenting paths with potentials.
fn assignment_value(cost: &Matrix, skip_rows: &[usize], skip_cols: &[usize]) -> f64 {
    let rows: Vec<usize> = (0..cost.rows()).filter(|r| !skip_rows.contains(r)).collect();
    let cols: Vec<usize> = (0..cost.cols()).filter(|c| !skip_cols.contains(c)).collect();
    let k = rows.len();
    if k == 0 {
        return 0.0;
    }
    let a = |i: usize, j: usize| cost[(rows[i - 1], cols[j - 1])];
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=k {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=k).map(|j| a(p[j], j)).sum()
}

fn check_pair(y_true: &[usize], y_pred: &[usize], min_len: usize) -> Result<()> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Contract(format!(
            "label vectors differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.len() < min_len {
        return Err(Error::Contract(format!("need at least {min_len} labels, got {}", y_true.len())));
    }
    Ok(())
}

/// Maps arbitrary ids to `0..k` in increasing id order.
fn compact(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut index = BTreeMap::new();
    for &id in ids {
        index.entry(id).or_insert(0);
    }
    for (k, v) in index.values_mut().enumerate() {
        *v = k;
    }
    (ids.iter().map(|id| index[id]).collect(), index.len())
}

/// Best one-to-one mapping from predicted ids `0..size` to true ids `0..size`.
/// Returns the number of agreements and `mapping[pred] = true`.
fn best_mapping(y_true: &[usize], y_pred: &[usize], size: usize) -> Result<(usize, Vec<usize>)> {
    let mut counts = Matrix::zeros(size, size);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        counts[(p, t)] += 1.0;
    }
    let mapping = hungarian(&counts.scale(-1.0))?;
    let hits = mapping.iter().enumerate().map(|(p, &t)| counts[(p, t)]).sum::<f64>();
    Ok((hits as usize, mapping))
}

/// Fraction of samples correct under the best bijection between cluster ids
/// and labels.
pub fn cluster_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred, 1)?;
    let (t, kt) = compact(y_true);
    let (p, kp) = compact(y_pred);
    let (hits, _) = best_mapping(&t, &p, kt.max(kp))?;
    Ok(hits as f64 / y_true.len() as f64)
}

struct Contingency {
    counts: Vec<Vec<f64>>,
    row_sums: Vec<f64>,
    col_sums: Vec<f64>,
    n: f64,
}

fn contingency(y_true: &[usize], y_pred: &[usize]) -> Contingency {
    let (t, kt) = compact(y_true);
    let (p, kp) = compact(y_pred);
    let mut counts = vec![vec![0.0; kp]; kt];
    for (&a, &b) in t.iter().zip(&p) {
        counts[a][b] += 1.0;
    }
    let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
    let col_sums = (0..kp).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
    Contingency {
        counts,
        row_sums,
        col_sums,
        n: y_true.len() as f64,
    }
}

fn entropy(sums: &[f64], n: f64) -> f64 {
    -sums.iter().filter(|&&c| c > 0.0).map(|&c| c / n * (c / n).ln()).sum::<f64>()
}

/// Normalized mutual information `I(U;V) / sqrt(H(U)·H(V))`, natural logs.
///
/// Two single-cluster partitions score 1, exactly one scores 0.
pub fn nmi(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred, 1)?;
    let c = contingency(y_true, y_pred);
    match (c.row_sums.len() == 1, c.col_sums.len() == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mut mi = 0.0;
    for (i, row) in c.counts.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0.0 {
                mi += nij / c.n * (c.n * nij / (c.row_sums[i] * c.col_sums[j])).ln();
            }
        }
    }
    let denom = (entropy(&c.row_sums, c.n) * entropy(&c.col_sums, c.n)).sqrt();
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index from pair counts.
///
/// When the normalizer vanishes the score is 1 for identical partitions and
/// 0 otherwise.
pub fn ari(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    check_pair(y_true, y_pred, 2)?;
    let c = contingency(y_true, y_pred);
    let index: f64 = c.counts.iter().flatten().map(|&x| pairs(x)).sum();
    let a: f64 = c.row_sums.iter().map(|&x| pairs(x)).sum();
    let b: f64 = c.col_sums.iter().map(|&x| pairs(x)).sum();
    let expected = a * b / pairs(c.n);
    let max_index = (a + b) / 2.0;
    let denom = max_index - expected;
    if denom == 0.0 {
        let same = c.counts.iter().all(|r| r.iter().filter(|&&x| x > 0.0).count() == 1)
            && c.row_sums.len() == c.col_sums.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok(((index - expected) / denom).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    TaskAware,
    TaskAgnostic,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::TaskAware => "task_aware",
            Protocol::TaskAgnostic => "task_agnostic",
        }
    }
}

/// Which predicted slots take part in the task-agnostic novel mapping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NovelMapping {
    /// Only novel slots are mapped; novel samples predicted into a known slot
    /// are errors.
    #[default]
    NovelSlots,
    /// Every slot may be mapped to a novel class.
    AllSlots,
}

/// Metrics of one protocol. Metrics over an empty subset are `None`.
///
/// NMI and ARI are computed over the novel samples. `permutation[k]` is the
/// novel class (counted from 0) assigned to predicted cluster `k`; under
/// [`NovelMapping::AllSlots`] it is indexed by full slot and unmatched slots
/// map to `usize::MAX`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub known_acc: Option<f64>,
    pub novel_cluster_acc: Option<f64>,
    pub all_acc: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub permutation: Vec<usize>,
    pub known_samples: usize,
    pub novel_samples: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "protocol,known_acc,novel_cluster_acc,all_acc,nmi,ari,known_samples,novel_samples";

    /// One CSV row matching [`EvalReport::CSV_HEADER`]; absent metrics are empty.
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let protocol = self.protocol.as_str();
        format!(
            "{protocol},{},{},{},{},{},{},{}",
            opt(self.known_acc),
            opt(self.novel_cluster_acc),
            opt(self.all_acc),
            opt(self.nmi),
            opt(self.ari),
            self.known_samples,
            self.novel_samples
        )
    }
}

struct Predictions {
    known: Vec<usize>,
    known_truth: Vec<usize>,
    novel: Vec<usize>,
    novel_truth: Vec<usize>,
}

fn predict(
    model: &ModelState,
    test_set: &DiscoveryDataset,
    pick_known: impl Fn(&[f64], &[f64]) -> usize,
    pick_novel: impl Fn(&[f64], &[f64]) -> usize,
) -> Result<Predictions> {
    let known_classes = model.config().known_classes;
    if test_set.known_classes() != known_classes || test_set.novel_classes() != model.config().novel_classes {
        return Err(Error::Contract("test set class counts do not match the model".into()));
    }
    let run = |x: &Matrix, pick: &dyn Fn(&[f64], &[f64]) -> usize| -> Result<Vec<usize>> {
        let out = model.forward(x)?;
        Ok((0..x.rows())
            .map(|i| pick(out.known_logits.row(i), out.novel_logits.row(i)))
            .collect())
    };
    let labeled = test_set.labeled();
    let unlabeled = test_set.unlabeled();
    let known = if labeled.is_empty() { Vec::new() } else { run(labeled.features(), &pick_known)? };
    let novel = if unlabeled.is_empty() { Vec::new() } else { run(unlabeled.features(), &pick_novel)? };
    Ok(Predictions {
        known,
        known_truth: labeled.labels().to_vec(),
        novel,
        novel_truth: unlabeled.hidden_labels().iter().map(|&y| y - known_classes).collect(),
    })
}

fn report(
    protocol: Protocol,
    known_hits: usize,
    preds: &Predictions,
    novel_hits: usize,
    permutation: Vec<usize>,
) -> Result<EvalReport> {
    let nk = preds.known.len();
    let nn = preds.novel.len();
    let frac = |hits: usize, n: usize| (n > 0).then(|| hits as f64 / n as f64);
    Ok(EvalReport {
        protocol,
        known_acc: frac(known_hits, nk),
        novel_cluster_acc: frac(novel_hits, nn),
        all_acc: frac(known_hits + novel_hits, nk + nn),
        nmi: if nn > 0 { Some(nmi(&preds.novel_truth, &preds.novel)?) } else { None },
        ari: if nn > 1 { Some(ari(&preds.novel_truth, &preds.novel)?) } else { None },
        permutation,
        known_samples: nk,
        novel_samples: nn,
    })
}

fn count_matches(pred: &[usize], truth: &[usize]) -> usize {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count()
}

/// Known samples are scored by the known head alone, novel samples are
/// clustered by the novel head alone.
pub fn evaluate_task_aware(model: &ModelState, test_set: &DiscoveryDataset) -> Result<EvalReport> {
    let preds = predict(model, test_set, |k, _| argmax(k), |_, n| argmax(n))?;
    let known_hits = count_matches(&preds.known, &preds.known_truth);
    let (novel_hits, permutation) = if preds.novel.is_empty() {
        (0, Vec::new())
    } else {
        best_mapping(&preds.novel_truth, &preds.novel, model.config().novel_classes)?
    };
    report(Protocol::TaskAware, known_hits, &preds, novel_hits, permutation)
}

/// Argmax over the concatenated `[known, novel]` logits; ties go to the
/// lower slot.
pub fn joint_argmax(known: &[f64], novel: &[f64]) -> usize {
    let (a, b) = (argmax(known), argmax(novel));
    if novel[b] > known[a] {
        known.len() + b
    } else {
        a
    }
}

/// Every sample is assigned to the argmax over all `C^l + C^u` slots.
pub fn evaluate_task_agnostic(model: &ModelState, test_set: &DiscoveryDataset, mapping: NovelMapping) -> Result<EvalReport> {
    let known_classes = model.config().known_classes;
    let novel_classes = model.config().novel_classes;
    let preds = predict(model, test_set, joint_argmax, joint_argmax)?;
    let known_hits = count_matches(&preds.known, &preds.known_truth);
    let (novel_hits, permutation) = if preds.novel.is_empty() {
        (0, Vec::new())
    } else {
        match mapping {
            NovelMapping::NovelSlots => {
                let (truth, pred): (Vec<usize>, Vec<usize>) = preds
                    .novel_truth
                    .iter()
                    .zip(&preds.novel)
                    .filter(|(_, &p)| p >= known_classes)
                    .map(|(&t, &p)| (t, p - known_classes))
                    .unzip();
                if truth.is_empty() {
                    (0, (0..novel_classes).collect())
                } else {
                    best_mapping(&truth, &pred, novel_classes)?
                }
            }
            NovelMapping::AllSlots => {
                let total = known_classes + novel_classes;
                let (hits, full) = best_mapping(&preds.novel_truth, &preds.novel, total)?;
                let perm = full.into_iter().map(|t| if t < novel_classes { t } else { usize::MAX }).collect();
                (hits, perm)
            }
        }
    };
    // NMI and ARI see raw slot ids, so known-slot predictions form their own clusters.
    report(Protocol::TaskAgnostic, known_hits, &preds, novel_hits, permutation)
}
