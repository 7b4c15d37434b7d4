//! Training objective and the two-stage training driver.
//!
//! Stage 1 fits the encoder and known head with cross-entropy on labeled
//! data. Stage 2 (discovery) optimizes
//!
//! ```text
//! L = L_CE + β · L_SCKD
//! ```
//!
//! where labeled rows use one-hot targets, unlabeled rows use balanced
//! Sinkhorn-Knopp assignments on the novel slots, and `L_SCKD` is the pair of
//! cross-space distillation losses from [`crate::sckd`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_view, epoch_batches, labeled_epoch, Batch, DiscoveryDataset};
use crate::model::{ForwardCache, ModelGrads, ModelState, ParamGroup};
use crate::numerics::{softmax_rows, Matrix, PROB_FLOOR};
use crate::sckd::{
    distill_direction, distill_target_gradient, normalize_scores, normalize_scores_backward, score_matrix_variant,
    similarity_backward, similarity_matrix, synthesize_known_pseudo, synthesize_novel_pseudo, ScoreMatrix, ScoreMode,
    SckdConfig,
};
use crate::{Error, Result};

/// Which slots the Sinkhorn targets of unlabeled rows cover.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledTargets {
    /// Zero mass on known slots, Sinkhorn assignment over the novel slots.
    #[default]
    NovelSlots,
    /// Sinkhorn assignment over all `C^l + C^u` slots.
    AllSlots,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub warmup_epochs: usize,
    pub lr_floor: f64,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub sinkhorn_epsilon: f64,
    pub sinkhorn_iters: usize,
    /// Standard deviation of the Gaussian jitter applied to each view.
    pub noise_std: f64,
    pub unlabeled_targets: UnlabeledTargets,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 50,
            stage2_epochs: 200,
            warmup_epochs: 10,
            // Base rates 0.4 and 0.001 scaled by temperature²: the affine heads
            // feed logits/0.1 to the softmax, which diverges at the base rates.
            lr_floor: 1e-5,
            lr_peak: 0.004,
            momentum: 0.9,
            weight_decay: 1.5e-4,
            batch_size: 64,
            sinkhorn_epsilon: 0.05,
            sinkhorn_iters: 3,
            noise_std: 0.1,
            unlabeled_targets: UnlabeledTargets::NovelSlots,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 {
            return Err(Error::Config("stage epochs must be at least 1".into()));
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_peak && self.lr_peak.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_floor <= lr_peak, got {} and {}",
                self.lr_floor, self.lr_peak
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.sinkhorn_epsilon > 0.0) {
            return Err(Error::Config("sinkhorn_epsilon must be positive".into()));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn_iters must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// Loss terms of one step (or their mean over an epoch).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub l_k_to_n: f64,
    pub l_n_to_k: f64,
    pub total: f64,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Balanced soft assignment of `M` rows to `C` clusters.
///
/// Starts from `exp(logits / ε)` and alternates column scaling (each column
/// sums to `M / C`) with row scaling (each row sums to 1), `n_iter` times,
/// finishing on a row scaling. Runs in the log domain, which is equivalent to
/// max-shifting before exponentiation.
pub fn sinkhorn_targets(logits: &Matrix, epsilon: f64, n_iter: usize) -> Result<Matrix> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if n_iter == 0 {
        return Err(Error::Config("n_iter must be at least 1".into()));
    }
    logits.ensure_finite("sinkhorn logits")?;
    let (rows, cols) = logits.shape();
    let col_mass = (rows as f64 / cols as f64).ln();
    let mut log_q = logits.scale(1.0 / epsilon);
    for _ in 0..n_iter {
        for c in 0..cols {
            let lse = log_sum_exp((0..rows).map(|i| log_q[(i, c)]));
            for i in 0..rows {
                log_q[(i, c)] += col_mass - lse;
            }
        }
        for i in 0..rows {
            let row = log_q.row_mut(i);
            let lse = log_sum_exp(row.iter().copied());
            row.iter_mut().for_each(|v| *v -= lse);
        }
    }
    let out = log_q.map(f64::exp);
    out.ensure_finite("sinkhorn assignment")?;
    Ok(out)
}

/// `−(1/n) Σ_i Σ_c t_ic · ln p_ic` with probabilities floored at 1e-12.
pub fn ce_loss(probs: &Matrix, targets: &Matrix) -> Result<f64> {
    if probs.shape() != targets.shape() {
        return Err(Error::Contract(format!(
            "probabilities {:?} and targets {:?} differ in shape",
            probs.shape(),
            targets.shape()
        )));
    }
    for (i, s) in targets.row_sums().into_iter().enumerate() {
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!("target row {i} sums to {s}")));
        }
    }
    let total: f64 = probs
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum();
    Ok(total / probs.rows() as f64)
}

/// `ce + β · sckd`.
pub fn total_loss(ce: f64, sckd: f64, beta: f64) -> f64 {
    ce + beta * sckd
}

/// One momentum SGD update with L2 weight decay:
/// `v ← μ·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Contract(format!(
            "sgd_step: {} params, {} grads, {} velocity entries",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Linear warmup from `lr_floor` to `lr_peak`, then cosine decay back to
/// `lr_floor` at `total_steps`.
pub fn cosine_lr(step: usize, warmup_steps: usize, total_steps: usize, lr_floor: f64, lr_peak: f64) -> Result<f64> {
    if step > total_steps || warmup_steps >= total_steps {
        return Err(Error::Contract(format!(
            "cosine_lr: step {step}, warmup {warmup_steps}, total {total_steps}"
        )));
    }
    if step <= warmup_steps {
        if warmup_steps == 0 {
            return Ok(lr_peak);
        }
        return Ok(lr_floor + (lr_peak - lr_floor) * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_floor + 0.5 * (lr_peak - lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Momentum buffers for every trainable block.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    /// Updates the blocks whose group passes `update`; the rest keep their
    /// values and momentum.
    pub fn step(
        &mut self,
        model: &mut ModelState,
        grads: &ModelGrads,
        lr: f64,
        config: &TrainConfig,
        update: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let grad_blocks = grads.blocks();
        let mut blocks = model.param_blocks_mut();
        if self.velocity.is_empty() {
            self.velocity = blocks.iter().map(|b| vec![0.0; b.values.len()]).collect();
        }
        for ((block, grad), velocity) in blocks.iter_mut().zip(grad_blocks).zip(&mut self.velocity) {
            if !update(block.group) {
                continue;
            }
            let wd = if block.decay { config.weight_decay } else { 0.0 };
            sgd_step(block.values, grad, velocity, lr, config.momentum, wd)?;
        }
        Ok(())
    }
}

fn schedule(epochs: usize, steps_per_epoch: usize, warmup_epochs: usize) -> (usize, usize) {
    let total = (epochs * steps_per_epoch).max(1);
    let warmup = (warmup_epochs * steps_per_epoch).min(total.saturating_sub(1));
    (warmup, total)
}

fn one_hot(labels: &[usize], width: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), width);
    for (i, &y) in labels.iter().enumerate() {
        m[(i, y)] = 1.0;
    }
    m
}

/// Gradient of the mean CE w.r.t. the logits feeding `softmax(· / τ)`.
fn ce_logit_grad(probs: &Matrix, targets: &Matrix, temperature: f64) -> Matrix {
    let scale = 1.0 / (temperature * probs.rows() as f64);
    let mut g = probs.clone();
    for (x, &t) in g.as_mut_slice().iter_mut().zip(targets.as_slice()) {
        *x = (*x - t) * scale;
    }
    g
}

/// Per-epoch summary of supervised pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
}

/// Supervised pre-training on labeled data: cross-entropy over the known
/// head only. The novel head is neither read nor updated.
pub fn train_stage1(model: &mut ModelState, dataset: &DiscoveryDataset, config: &TrainConfig) -> Result<Vec<Stage1Epoch>> {
    config.validate()?;
    if dataset.labeled().is_empty() {
        return Err(Error::Config("stage 1 needs labeled samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5157_a6e1);
    let steps_per_epoch = dataset.labeled().len().div_ceil(config.batch_size);
    let (warmup, total) = schedule(config.stage1_epochs, steps_per_epoch, config.warmup_epochs);
    let temperature = model.config().temperature;
    let known = model.config().known_classes;
    let mut sgd = Sgd::default();
    let mut log = Vec::with_capacity(config.stage1_epochs);
    let mut step = 0;
    for epoch in 0..config.stage1_epochs {
        let mut epoch_loss = 0.0;
        let mut lr = config.lr_floor;
        let batches = labeled_epoch(dataset, config.batch_size, &mut rng)?;
        let n_batches = batches.len();
        for (x, labels) in batches {
            lr = cosine_lr(step.min(total), warmup, total, config.lr_floor, config.lr_peak)?;
            let x = augment_view(&x, config.noise_std, &mut rng)?;
            let cache = model.forward_cached(&x)?;
            let probs = softmax_rows(&cache.known_logits, temperature)?;
            let targets = one_hot(&labels, known);
            let loss = ce_loss(&probs, &targets)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("stage 1 loss diverged at epoch {epoch}")));
            }
            epoch_loss += loss;
            let d_known = ce_logit_grad(&probs, &targets, temperature);
            let d_novel = Matrix::zeros(cache.novel_logits.rows(), cache.novel_logits.cols());
            let grads = model.backward(&cache, &d_known, &d_novel)?;
            sgd.step(model, &grads, lr, config, |g| g != ParamGroup::NovelHead)?;
            step += 1;
        }
        log.push(Stage1Epoch {
            epoch,
            lr,
            ce: epoch_loss / n_batches as f64,
        });
    }
    Ok(log)
}

/// Inputs of one discovery step: labeled rows first, then unlabeled rows.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscoveryStep {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl DiscoveryStep {
    pub fn labeled(&self) -> usize {
        self.labels.len()
    }

    pub fn unlabeled(&self) -> usize {
        self.inputs.rows() - self.labels.len()
    }
}

/// Constant targets of one discovery step; no gradient flows into them.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTargets {
    /// Sinkhorn assignment for unlabeled rows, `M × C^u` (or `M × (C^l + C^u)`
    /// with [`UnlabeledTargets::AllSlots`]).
    pub sinkhorn: Matrix,
    /// Synthesized novel-head logits for unlabeled rows, `M × C^u`.
    pub novel_pseudo: Matrix,
    /// Synthesized known-head logits for labeled rows, `N × C^l`.
    pub known_pseudo: Matrix,
    pub degenerate_scores: bool,
    /// Present when `sckd.score_gradient` is set: the loss then rebuilds the
    /// score matrix from the current features.
    pub score_inputs: Option<ScoreInputs>,
}

/// Detached inputs for rebuilding the score matrix inside the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreInputs {
    /// Replica features of labeled rows; `None` when the trainable encoder
    /// supplies them.
    pub replica_features: Option<Matrix>,
    pub labeled_novel_logits: Matrix,
    pub unlabeled_known_logits: Matrix,
}

/// Builds the jittered step inputs and all constant targets for a batch.
///
/// The Sinkhorn targets come from a second, independently jittered view of
/// the unlabeled samples. The labeled features of the score matrix come from
/// the replica encoder unless `sckd.replica` is off.
pub fn prepare_step(
    model: &ModelState,
    batch: &Batch,
    train: &TrainConfig,
    sckd: &SckdConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(DiscoveryStep, ForwardCache, StepTargets)> {
    let n = batch.labeled_len();
    let m = batch.unlabeled_len();
    let xl = augment_view(&batch.labeled_features, train.noise_std, rng)?;
    let xu = augment_view(&batch.unlabeled_features, train.noise_std, rng)?;
    let xu_target = augment_view(&batch.unlabeled_features, train.noise_std, rng)?;
    let inputs = xl.vstack(&xu)?;
    let cache = model.forward_cached(&inputs)?;

    let mut replica_features = None;
    let (scores, degenerate_scores) = match sckd.score_mode {
        ScoreMode::Cosine => {
            let labeled_features = if sckd.replica {
                let replica = model
                    .replica()
                    .ok_or_else(|| Error::Contract("discovery stage requires a replica encoder".into()))?;
                let f = replica.forward(&xl)?;
                replica_features = Some(f.clone());
                f
            } else {
                cache.features.row_range(0, n)?
            };
            let unlabeled_features = cache.features.row_range(n, n + m)?;
            let s = normalize_scores(
                &similarity_matrix(&labeled_features, &unlabeled_features)?,
                sckd.score_normalization,
            );
            let degenerate = s.is_degenerate();
            (s, degenerate)
        }
        mode => (score_matrix_variant(mode, n, m, rng)?, false),
    };
    let labeled_novel_logits = cache.novel_logits.row_range(0, n)?;
    let unlabeled_known_logits = cache.known_logits.row_range(n, n + m)?;
    let novel_pseudo = synthesize_novel_pseudo(&scores, &labeled_novel_logits, sckd.alpha)?;
    let known_pseudo = synthesize_known_pseudo(&scores, &unlabeled_known_logits, sckd.alpha)?;
    let score_inputs = (sckd.score_gradient && sckd.score_mode == ScoreMode::Cosine).then_some(ScoreInputs {
        replica_features,
        labeled_novel_logits,
        unlabeled_known_logits,
    });

    let target_view = model.forward_cached(&xu_target)?;
    let sinkhorn_logits = match train.unlabeled_targets {
        UnlabeledTargets::NovelSlots => target_view.novel_logits,
        UnlabeledTargets::AllSlots => target_view.known_logits.hcat(&target_view.novel_logits)?,
    };
    let sinkhorn = sinkhorn_targets(&sinkhorn_logits, train.sinkhorn_epsilon, train.sinkhorn_iters)?;

    Ok((
        DiscoveryStep {
            inputs,
            labels: batch.labeled_labels.clone(),
        },
        cache,
        StepTargets {
            sinkhorn,
            novel_pseudo,
            known_pseudo,
            degenerate_scores,
            score_inputs,
        },
    ))
}

/// Full CE targets: one-hot for labeled rows, Sinkhorn mass for unlabeled rows.
pub fn ce_targets(step: &DiscoveryStep, targets: &StepTargets, known: usize, novel: usize) -> Result<Matrix> {
    let n = step.labeled();
    let m = step.unlabeled();
    let width = known + novel;
    let mut out = Matrix::zeros(n + m, width);
    for (i, &y) in step.labels.iter().enumerate() {
        out[(i, y)] = 1.0;
    }
    let offset = match targets.sinkhorn.cols() {
        c if c == novel => known,
        c if c == width => 0,
        c => {
            return Err(Error::Contract(format!(
                "sinkhorn targets have {c} columns, expected {novel} or {width}"
            )))
        }
    };
    if targets.sinkhorn.rows() != m {
        return Err(Error::Contract("sinkhorn targets do not match unlabeled rows".into()));
    }
    for j in 0..m {
        out.row_mut(n + j)[offset..offset + targets.sinkhorn.cols()].copy_from_slice(targets.sinkhorn.row(j));
    }
    Ok(out)
}

/// Total discovery loss and its gradient for fixed targets, using a forward
/// cache computed on `step.inputs`.
pub fn discovery_loss_cached(
    model: &ModelState,
    cache: &ForwardCache,
    step: &DiscoveryStep,
    targets: &StepTargets,
    sckd: &SckdConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let cfg = model.config();
    let (known, novel) = (cfg.known_classes, cfg.novel_classes);
    let n = step.labeled();
    let m = step.unlabeled();
    let rows = n + m;

    let logits = cache.known_logits.hcat(&cache.novel_logits)?;
    let probs = softmax_rows(&logits, cfg.temperature)?;
    let ce_target = ce_targets(step, targets, known, novel)?;
    let ce = ce_loss(&probs, &ce_target)?;
    let d_logits = ce_logit_grad(&probs, &ce_target, cfg.temperature);

    let mut d_known = d_logits.col_range(0, known)?;
    let mut d_novel = d_logits.col_range(known, known + novel)?;

    let (w_kn, w_nk) = sckd.direction_weights();
    // With score gradients on, targets are rebuilt from the current features
    // so that the loss is a function of the encoder through the scores.
    let rebuilt = match (&targets.score_inputs, sckd.score_gradient) {
        (Some(inputs), true) => Some(rebuild_scores(cache, inputs, n, sckd)?),
        (None, true) => {
            return Err(Error::Contract(
                "score_gradient is set but the step was prepared without score inputs".into(),
            ))
        }
        (_, false) => None,
    };
    let (novel_pseudo, known_pseudo) = match &rebuilt {
        Some(r) => (&r.novel_pseudo, &r.known_pseudo),
        None => (&targets.novel_pseudo, &targets.known_pseudo),
    };
    let mut d_scores = Matrix::zeros(n, m);
    let mut l_k_to_n = 0.0;
    let mut l_n_to_k = 0.0;
    if w_kn > 0.0 {
        let student = cache.novel_logits.row_range(n, rows)?;
        let (loss, grad) = distill_direction(novel_pseudo, &student, sckd.distill_temperature)?;
        l_k_to_n = loss;
        let scale = sckd.beta * w_kn;
        for j in 0..m {
            for (d, g) in d_novel.row_mut(n + j).iter_mut().zip(grad.row(j)) {
                *d += scale * g;
            }
        }
        if let (Some(inputs), Some(_)) = (&targets.score_inputs, &rebuilt) {
            // l̂ = α Sᵀ L  ⇒  dS = α L dl̂ᵀ
            let d_target = distill_target_gradient(novel_pseudo, &student, sckd.distill_temperature)?;
            let d_s = inputs.labeled_novel_logits.matmul_t(&d_target)?;
            d_scores.add_assign_scaled(&d_s, scale * sckd.alpha)?;
        }
    }
    if w_nk > 0.0 {
        let student = cache.known_logits.row_range(0, n)?;
        let (loss, grad) = distill_direction(known_pseudo, &student, sckd.distill_temperature)?;
        l_n_to_k = loss;
        let scale = sckd.beta * w_nk;
        for i in 0..n {
            for (d, g) in d_known.row_mut(i).iter_mut().zip(grad.row(i)) {
                *d += scale * g;
            }
        }
        if let (Some(inputs), Some(_)) = (&targets.score_inputs, &rebuilt) {
            // l̂ = α S K  ⇒  dS = α dl̂ Kᵀ
            let d_target = distill_target_gradient(known_pseudo, &student, sckd.distill_temperature)?;
            let d_s = d_target.matmul_t(&inputs.unlabeled_known_logits)?;
            d_scores.add_assign_scaled(&d_s, scale * sckd.alpha)?;
        }
    }
    let sckd_value = w_kn * l_k_to_n + w_nk * l_n_to_k;
    let breakdown = LossBreakdown {
        ce,
        l_k_to_n,
        l_n_to_k,
        total: total_loss(ce, sckd_value, sckd.beta),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric("discovery loss is not finite".into()));
    }
    let grads = match &rebuilt {
        Some(r) => {
            let d_raw = normalize_scores_backward(&r.raw, sckd.score_normalization, &d_scores)?;
            let (d_labeled, d_unlabeled) = similarity_backward(&r.labeled_features, &r.unlabeled_features, &d_raw)?;
            let mut d_features = Matrix::zeros(rows, cache.features.cols());
            if r.labeled_trainable {
                for i in 0..n {
                    d_features.row_mut(i).copy_from_slice(d_labeled.row(i));
                }
            }
            for j in 0..m {
                d_features.row_mut(n + j).copy_from_slice(d_unlabeled.row(j));
            }
            model.backward_with_features(cache, &d_known, &d_novel, &d_features)?
        }
        None => model.backward(cache, &d_known, &d_novel)?,
    };
    Ok((breakdown, grads))
}

struct RebuiltScores {
    raw: ScoreMatrix,
    labeled_features: Matrix,
    unlabeled_features: Matrix,
    labeled_trainable: bool,
    novel_pseudo: Matrix,
    known_pseudo: Matrix,
}

fn rebuild_scores(cache: &ForwardCache, inputs: &ScoreInputs, n: usize, sckd: &SckdConfig) -> Result<RebuiltScores> {
    let rows = cache.features.rows();
    let labeled_features = match &inputs.replica_features {
        Some(f) => f.clone(),
        None => cache.features.row_range(0, n)?,
    };
    let unlabeled_features = cache.features.row_range(n, rows)?;
    let raw = similarity_matrix(&labeled_features, &unlabeled_features)?;
    let scores = normalize_scores(&raw, sckd.score_normalization);
    Ok(RebuiltScores {
        novel_pseudo: synthesize_novel_pseudo(&scores, &inputs.labeled_novel_logits, sckd.alpha)?,
        known_pseudo: synthesize_known_pseudo(&scores, &inputs.unlabeled_known_logits, sckd.alpha)?,
        labeled_trainable: inputs.replica_features.is_none(),
        raw,
        labeled_features,
        unlabeled_features,
    })
}

/// As [`discovery_loss_cached`], running the forward pass itself.
pub fn discovery_loss(
    model: &ModelState,
    step: &DiscoveryStep,
    targets: &StepTargets,
    sckd: &SckdConfig,
) -> Result<(LossBreakdown, ModelGrads)> {
    let cache = model.forward_cached(&step.inputs)?;
    discovery_loss_cached(model, &cache, step, targets, sckd)
}

/// One epoch of the discovery stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub l_k_to_n: f64,
    pub l_n_to_k: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Stage2Report {
    pub epochs: Vec<EpochLog>,
    /// Every step's loss terms in order.
    pub steps: Vec<LossBreakdown>,
    /// Batches whose score matrix was all zeros.
    pub degenerate_batches: usize,
}

/// Discovery training without intermediate evaluation.
pub fn train_stage2(
    model: &mut ModelState,
    dataset: &DiscoveryDataset,
    train: &TrainConfig,
    sckd: &SckdConfig,
) -> Result<Stage2Report> {
    train_stage2_with(model, dataset, train, sckd, |_, _| Ok(()))
}

/// Discovery training; `on_epoch` sees each finished epoch's log entry
/// before it is stored and may attach an evaluation record to it.
pub fn train_stage2_with<F>(
    model: &mut ModelState,
    dataset: &DiscoveryDataset,
    train: &TrainConfig,
    sckd: &SckdConfig,
    mut on_epoch: F,
) -> Result<Stage2Report>
where
    F: FnMut(&mut EpochLog, &ModelState) -> Result<()>,
{
    train.validate()?;
    sckd.validate()?;
    if sckd.replica && sckd.score_mode == ScoreMode::Cosine && model.replica().is_none() {
        return Err(Error::Contract("discovery stage requires a replica encoder".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xd15c_0e77);
    let mut sgd = Sgd::default();
    let mut report = Stage2Report::default();
    let mut steps_per_epoch = None;
    let mut step = 0;
    for epoch in 0..train.stage2_epochs {
        let batches = epoch_batches(dataset, train.batch_size, &mut rng)?;
        let (warmup, total) = schedule(
            train.stage2_epochs,
            *steps_per_epoch.get_or_insert(batches.len()),
            train.warmup_epochs,
        );
        let mut sum = LossBreakdown::default();
        let mut lr = train.lr_floor;
        for batch in &batches {
            lr = cosine_lr(step.min(total), warmup, total, train.lr_floor, train.lr_peak)?;
            let (inputs, cache, targets) = prepare_step(model, batch, train, sckd, &mut rng)?;
            report.degenerate_batches += usize::from(targets.degenerate_scores);
            let (loss, grads) = discovery_loss_cached(model, &cache, &inputs, &targets, sckd)?;
            sgd.step(model, &grads, lr, train, |_| true)?;
            if !model.is_finite() {
                return Err(Error::Numeric(format!("parameters diverged at epoch {epoch}")));
            }
            sum.ce += loss.ce;
            sum.l_k_to_n += loss.l_k_to_n;
            sum.l_n_to_k += loss.l_n_to_k;
            sum.total += loss.total;
            report.steps.push(loss);
            step += 1;
        }
        let count = batches.len() as f64;
        let mut entry = EpochLog {
            epoch,
            lr,
            ce: sum.ce / count,
            l_k_to_n: sum.l_k_to_n / count,
            l_n_to_k: sum.l_n_to_k / count,
            total: sum.total / count,
            eval: None,
        };
        on_epoch(&mut entry, model)?;
        report.epochs.push(entry);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::numerics::finite_difference_gradient;
    use crate::sckd::ScoreNormalization;

    #[test]
    fn sinkhorn_uniform_fixed_point() {
        let out = sinkhorn_targets(&Matrix::filled(6, 3, 0.7), 0.05, 3).unwrap();
        for &x in out.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sinkhorn_rows_sum_to_one() {
        let logits = Matrix::from_rows(&[[1.0, 0.2, -0.3], [0.0, 2.0, 0.1], [0.5, 0.5, 3.0], [9.0, -9.0, 0.0]]).unwrap();
        let out = sinkhorn_targets(&logits, 0.05, 3).unwrap();
        for s in out.row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(sinkhorn_targets(&logits, 0.0, 3).is_err());
        assert!(sinkhorn_targets(&logits, 0.05, 0).is_err());
        let bad = Matrix::from_rows(&[[f64::NAN, 1.0]]).unwrap();
        assert!(matches!(sinkhorn_targets(&bad, 0.05, 3), Err(Error::Numeric(_))));
    }

    #[test]
    fn ce_examples() {
        let onehot = Matrix::from_rows(&[[0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(ce_loss(&onehot, &onehot).unwrap(), 0.0);
        let uniform = Matrix::filled(2, 4, 0.25);
        assert!((ce_loss(&uniform, &uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
        let target = Matrix::from_rows(&[[1.0, 0.0, 0.0, 0.0]]).unwrap();
        let pred = Matrix::filled(1, 4, 0.25);
        assert!((ce_loss(&pred, &target).unwrap() - 1.3863).abs() < 1e-4);
        assert!(ce_loss(&pred, &Matrix::filled(1, 3, 1.0 / 3.0)).is_err());
        assert!(ce_loss(&pred, &Matrix::filled(1, 4, 0.5)).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.25, 3.0, 0.0), 1.25);
        assert_eq!(total_loss(1.25, 0.0, 0.5), 1.25);
        assert_eq!(total_loss(1.0, 2.0, 0.5), 2.0);
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        sgd_step(&mut p, &[1.0, -1.0], &mut v, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.5, -1.5]);

        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
        assert!(sgd_step(&mut p, &[1.0, 2.0], &mut v, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn cosine_lr_examples() {
        let (floor, peak) = (0.001, 0.4);
        assert_eq!(cosine_lr(0, 10, 110, floor, peak).unwrap(), floor);
        assert_eq!(cosine_lr(10, 10, 110, floor, peak).unwrap(), peak);
        assert!((cosine_lr(110, 10, 110, floor, peak).unwrap() - floor).abs() < 1e-15);
        assert!((cosine_lr(60, 10, 110, floor, peak).unwrap() - (peak + floor) / 2.0).abs() < 1e-12);
        assert!(cosine_lr(111, 10, 110, floor, peak).is_err());
        assert!(cosine_lr(0, 110, 110, floor, peak).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { stage1_epochs: 0, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig { lr_floor: 1.0, lr_peak: 0.5, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { momentum: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    fn tiny_model() -> ModelState {
        let mut m = ModelState::init(
            ModelConfig {
                input_dim: 3,
                hidden_dim: 4,
                feature_dim: 2,
                novel_hidden_dim: 2,
                known_classes: 2,
                novel_classes: 2,
                temperature: 0.1,
                activation: Activation::Tanh,
            },
            17,
        )
        .unwrap();
        m.install_replica(m.snapshot_replica()).unwrap();
        m
    }

    fn tiny_batch() -> Batch {
        Batch {
            labeled_features: Matrix::from_rows(&[[0.5, -0.3, 1.2], [-1.0, 0.4, 0.2]]).unwrap(),
            labeled_labels: vec![1, 0],
            unlabeled_features: Matrix::from_rows(&[[0.9, 0.9, -0.5], [-0.2, -1.1, 0.7]]).unwrap(),
        }
    }

    #[test]
    fn discovery_gradient_matches_finite_differences() {
        let model = tiny_model();
        let train = TrainConfig { noise_std: 0.0, ..Default::default() };
        let sckd = SckdConfig { alpha: 1.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (step, _, targets) = prepare_step(&model, &tiny_batch(), &train, &sckd, &mut rng).unwrap();
        let (loss, grads) = discovery_loss(&model, &step, &targets, &sckd).unwrap();
        assert!(loss.l_k_to_n > 0.0 && loss.l_n_to_k > 0.0);
        let analytic = grads.flatten();
        let numeric = finite_difference_gradient(
            |p| {
                let mut m = model.clone();
                m.set_trainable_params(p).unwrap();
                discovery_loss(&m, &step, &targets, &sckd).unwrap().0.total
            },
            &model.trainable_params(),
            1e-6,
        )
        .unwrap();
        for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs(), "param {i}: {a} vs {n}");
        }
    }

    #[test]
    fn replica_receives_no_gradient() {
        let model = tiny_model();
        let train = TrainConfig { noise_std: 0.0, ..Default::default() };
        for score_gradient in [false, true] {
            let sckd = SckdConfig { alpha: 1.0, score_gradient, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (step, _, targets) = prepare_step(&model, &tiny_batch(), &train, &sckd, &mut rng).unwrap();
            let base = discovery_loss(&model, &step, &targets, &sckd).unwrap().0.total;
            let replica = model.replica().unwrap().encoder().clone();
            for k in 0..replica.hidden().weight().as_slice().len() {
                let mut bumped = replica.clone();
                bumped.hidden.weight.as_mut_slice()[k] += 1e-3;
                let mut m = model.clone();
                m.replica = Some(crate::model::ReplicaEncoder::from_parts(bumped, m.config.activation));
                assert_eq!(discovery_loss(&m, &step, &targets, &sckd).unwrap().0.total, base);
            }
        }
        let mut m = tiny_model();
        assert!(m.param_blocks_mut().iter().all(|b| !b.name.starts_with("replica")));
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let model = tiny_model();
        let train = TrainConfig { noise_std: 0.0, ..Default::default() };
        for (replica, normalization) in [
            (true, ScoreNormalization::AbsMax),
            (false, ScoreNormalization::AbsMax),
            (false, ScoreNormalization::SignedMax),
        ] {
            let sckd = SckdConfig {
                alpha: 2.0,
                beta: 3.0,
                lambda: 0.4,
                replica,
                score_normalization: normalization,
                score_gradient: true,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let (step, _, targets) = prepare_step(&model, &tiny_batch(), &train, &sckd, &mut rng).unwrap();
            assert!(targets.score_inputs.is_some());
            let (with, grads) = discovery_loss(&model, &step, &targets, &sckd).unwrap();
            let detached = SckdConfig { score_gradient: false, ..sckd.clone() };
            let (without, plain) = discovery_loss(&model, &step, &targets, &detached).unwrap();
            assert!((with.total - without.total).abs() < 1e-12);
            assert_ne!(grads.flatten(), plain.flatten());
            let numeric = finite_difference_gradient(
                |p| {
                    let mut m = model.clone();
                    m.set_trainable_params(p).unwrap();
                    discovery_loss(&m, &step, &targets, &sckd).unwrap().0.total
                },
                &model.trainable_params(),
                1e-6,
            )
            .unwrap();
            for (i, (a, n)) in grads.flatten().iter().zip(&numeric).enumerate() {
                assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs(), "{replica} {normalization:?} param {i}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn breakdown_identity_and_beta_zero() {
        let model = tiny_model();
        let train = TrainConfig { noise_std: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for lambda in [0.0, 0.3, 0.5, 1.0] {
            let sckd = SckdConfig { lambda, alpha: 0.7, ..Default::default() };
            let (step, _, targets) = prepare_step(&model, &tiny_batch(), &train, &sckd, &mut rng).unwrap();
            let (l, _) = discovery_loss(&model, &step, &targets, &sckd).unwrap();
            let expected = l.ce + sckd.beta * 2.0 * (lambda * l.l_k_to_n + (1.0 - lambda) * l.l_n_to_k);
            assert!((l.total - expected).abs() <= 1e-9);
            let zero = SckdConfig { beta: 0.0, ..sckd };
            let (l0, _) = discovery_loss(&model, &step, &targets, &zero).unwrap();
            assert_eq!(l0.total, l0.ce);
        }
    }

    #[test]
    fn ce_targets_zero_known_slots_for_unlabeled() {
        let model = tiny_model();
        let train = TrainConfig { noise_std: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (step, _, targets) = prepare_step(&model, &tiny_batch(), &train, &SckdConfig::default(), &mut rng).unwrap();
        let t = ce_targets(&step, &targets, 2, 2).unwrap();
        assert_eq!(t.row(0), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.row(1), &[1.0, 0.0, 0.0, 0.0]);
        for j in 2..4 {
            assert_eq!(&t.row(j)[..2], &[0.0, 0.0]);
            assert!((t.row(j)[2] + t.row(j)[3] - 1.0).abs() < 1e-12);
        }
        let all = TrainConfig { unlabeled_targets: UnlabeledTargets::AllSlots, ..train };
        let (step, _, targets) = prepare_step(&model, &tiny_batch(), &all, &SckdConfig::default(), &mut rng).unwrap();
        assert_eq!(targets.sinkhorn.cols(), 4);
        assert!(ce_targets(&step, &targets, 2, 2).is_ok());
    }

    #[test]
    fn missing_replica_is_a_contract_error() {
        let mut model = ModelState::init(tiny_model().config().clone(), 1).unwrap();
        let cfg = crate::data::SyntheticConfig {
            known_classes: 2,
            novel_classes: 2,
            samples_per_known_class: 10,
            samples_per_novel_class: 10,
            feature_dim: 3,
            separation: 3.0,
            std: 1.0,
            seed: 0,
        };
        let (train_set, _) = crate::data::generate_synthetic(&cfg).unwrap();
        let err = train_stage2(&mut model, &train_set, &TrainConfig::default(), &SckdConfig::default());
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
