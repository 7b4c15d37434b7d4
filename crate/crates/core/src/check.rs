//! Self-check suite behind `sckd check`: each check compares an operation
//! against an independent oracle or invariant on random inputs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Batch;
use crate::eval::{ari, cluster_accuracy, hungarian, nmi};
use crate::model::{Activation, ModelConfig, ModelState};
use crate::numerics::{finite_difference_gradient, Matrix};
use crate::objective::{discovery_loss, prepare_step, sinkhorn_targets, TrainConfig};
use crate::sckd::SckdConfig;
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn brute_force_min(cost: &Matrix) -> f64 {
    let n = cost.rows();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm.
    let mut c = vec![0; n];
    let score = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum::<f64>();
    best = best.min(score(&perm));
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(score(&perm));
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn gradient_check(seed: u64) -> Result<CheckOutcome> {
    let mut model = ModelState::init(
        ModelConfig {
            input_dim: 3,
            hidden_dim: 4,
            feature_dim: 2,
            novel_hidden_dim: 3,
            known_classes: 2,
            novel_classes: 2,
            temperature: 0.1,
            activation: Activation::Tanh,
        },
        seed,
    )?;
    model.install_replica(model.snapshot_replica())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows| {
        Matrix::new(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let batch = Batch {
        labeled_features: draw(2)?,
        labeled_labels: vec![0, 1],
        unlabeled_features: draw(2)?,
    };
    let train = TrainConfig {
        noise_std: 0.0,
        ..TrainConfig::default()
    };
    let sckd = SckdConfig::default();
    let (step, _, targets) = prepare_step(&model, &batch, &train, &sckd, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let analytic = discovery_loss(&model, &step, &targets, &sckd)?.1.flatten();
    let numeric = finite_difference_gradient(
        |p| {
            let mut m = model.clone();
            m.set_trainable_params(p).expect("same length");
            discovery_loss(&m, &step, &targets, &sckd).map(|r| r.0.total).unwrap_or(f64::NAN)
        },
        &model.trainable_params(),
        1e-6,
    )?;
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let rel = diff / scale.max(1e-12);
    Ok(outcome("gradient", rel < 1e-4, format!("relative error {rel:.3e}")))
}

fn hungarian_check(rng: &mut ChaCha8Rng, per_size: usize) -> Result<CheckOutcome> {
    let mut mismatches = 0;
    for n in 2..=7 {
        for _ in 0..per_size {
            let cost = Matrix::new(n, n, (0..n * n).map(|_| rng.random_range(0..10) as f64).collect())?;
            let perm = hungarian(&cost)?;
            let got: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
            if got != brute_force_min(&cost) {
                mismatches += 1;
            }
        }
    }
    Ok(outcome(
        "hungarian",
        mismatches == 0,
        format!("{mismatches} mismatches over {} matrices", 6 * per_size),
    ))
}

fn sinkhorn_check(rng: &mut ChaCha8Rng, count: usize) -> Result<CheckOutcome> {
    let (m, c) = (32, 8);
    let mut worst_row = 0.0f64;
    let mut improved = 0;
    for _ in 0..count {
        let logits = Matrix::new(m, c, (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let one = sinkhorn_targets(&logits, 0.05, 1)?;
        let three = sinkhorn_targets(&logits, 0.05, 3)?;
        for s in three.row_sums() {
            worst_row = worst_row.max((s - 1.0).abs());
        }
        let dev = |q: &Matrix| {
            q.column_sums()
                .iter()
                .map(|s| (s - m as f64 / c as f64).abs())
                .fold(0.0, f64::max)
        };
        improved += usize::from(dev(&three) <= dev(&one));
    }
    let frac = improved as f64 / count as f64;
    Ok(outcome(
        "sinkhorn",
        worst_row <= 1e-6 && frac >= 0.95,
        format!("max row deviation {worst_row:.2e}, column marginal improved on {:.1}%", 100.0 * frac),
    ))
}

fn metric_check(rng: &mut ChaCha8Rng, count: usize) -> Result<CheckOutcome> {
    let mut failures = 0;
    for _ in 0..count {
        let len = rng.random_range(2..40);
        let k = rng.random_range(1..6);
        let y_true: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let y_pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
        let mut relabel: Vec<usize> = (0..k).collect();
        relabel.shuffle(rng);
        let permuted: Vec<usize> = y_pred.iter().map(|&p| relabel[p] + 7).collect();
        let bijection: Vec<usize> = y_true.iter().map(|&t| relabel[t]).collect();
        let ok = cluster_accuracy(&y_true, &y_pred)? == cluster_accuracy(&y_true, &permuted)?
            && (nmi(&y_true, &y_pred)? - nmi(&y_true, &permuted)?).abs() < 1e-12
            && (ari(&y_true, &y_pred)? - ari(&y_true, &permuted)?).abs() < 1e-12
            && cluster_accuracy(&y_true, &bijection)? == 1.0;
        failures += usize::from(!ok);
    }
    Ok(outcome(
        "metric_invariance",
        failures == 0,
        format!("{failures} failures over {count} label vectors"),
    ))
}

/// Runs every check with a fixed seed.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        gradient_check(seed)?,
        hungarian_check(&mut rng, 200)?,
        sinkhorn_check(&mut rng, 200)?,
        metric_check(&mut rng, 200)?,
    ])
}
