//! Cross-space similarity scores, bidirectional pseudo-label synthesis and
//! the two self-distillation losses.
//!
//! Labeled features come from the frozen replica encoder, unlabeled features
//! from the trainable encoder. Their normalized cosine scores `S` (`N × M`)
//! mix one group's head logits into soft targets for the other group:
//!
//! * novel head, unlabeled rows: target logits `α · Sᵀ · l^l_uh`
//! * known head, labeled rows: target logits `α · S · l^u_kh`
//!
//! Targets are constants. The student is pulled towards them with
//! `KL(softmax(target / T) ‖ softmax(student / T))`, averaged over rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{cosine_unchecked, dot, kl_unchecked, norm, softmax_in_place, Matrix};
use crate::{Error, Result};

/// Source of the score matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Normalized cosine similarity between replica and encoder features.
    #[default]
    Cosine,
    /// Every pair gets the same coefficient 1.
    Average,
    /// Coefficients drawn i.i.d. from `U[0, 1]`.
    Random,
}

/// Divisor used when normalizing cosine scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNormalization {
    /// `S / max |S|`; entries stay in `[-1, 1]`.
    #[default]
    AbsMax,
    /// `S / |max S|` with the signed maximum.
    SignedMax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SckdConfig {
    /// Label-smoothing coefficient applied to synthesized logits.
    pub alpha: f64,
    /// Weight of the distillation loss in the total objective.
    pub beta: f64,
    /// Balance between the two directions; 0.5 weighs them equally.
    pub lambda: f64,
    pub distill_temperature: f64,
    pub score_mode: ScoreMode,
    pub score_normalization: ScoreNormalization,
    /// Enable known → novel distillation (novel head on unlabeled rows).
    pub k_to_n: bool,
    /// Enable novel → known distillation (known head on labeled rows).
    pub n_to_k: bool,
    /// Compute labeled features with the frozen replica; when false the
    /// trainable encoder is used for both sides.
    pub replica: bool,
    /// Differentiate the distillation loss through the cosine score matrix
    /// into the encoder features. Off by default: scores are constants.
    pub score_gradient: bool,
}

impl Default for SckdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.5,
            lambda: 0.5,
            distill_temperature: 1.0,
            score_mode: ScoreMode::Cosine,
            score_normalization: ScoreNormalization::AbsMax,
            k_to_n: true,
            n_to_k: true,
            replica: true,
            score_gradient: false,
        }
    }
}

impl SckdConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.alpha, self.beta, self.lambda, self.distill_temperature]
            .iter()
            .all(|x| x.is_finite());
        if !finite {
            return Err(Error::Config("sckd parameters must be finite".into()));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.distill_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "distill_temperature must be positive, got {}",
                self.distill_temperature
            )));
        }
        if self.score_gradient && self.score_mode != ScoreMode::Cosine {
            return Err(Error::Config("score_gradient requires score_mode = \"cosine\"".into()));
        }
        Ok(())
    }

    /// Multipliers of `(L_{k→n}, L_{n→k})` inside `L_SCKD`.
    pub fn direction_weights(&self) -> (f64, f64) {
        let kn = if self.k_to_n { 2.0 * self.lambda } else { 0.0 };
        let nk = if self.n_to_k { 2.0 * (1.0 - self.lambda) } else { 0.0 };
        (kn, nk)
    }
}

/// `N × M` scores between labeled (rows) and unlabeled (columns) samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    scores: Matrix,
    degenerate: bool,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix) -> Result<Self> {
        scores.ensure_finite("score matrix")?;
        Ok(Self {
            scores,
            degenerate: false,
        })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn into_matrix(self) -> Matrix {
        self.scores
    }

    /// Set when normalization met an all-zero matrix and left it unchanged.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// `S_ij = cos(v^l_i, v^u_j)`.
pub fn similarity_matrix(labeled: &Matrix, unlabeled: &Matrix) -> Result<ScoreMatrix> {
    if labeled.cols() != unlabeled.cols() {
        return Err(Error::Contract(format!(
            "feature dimensions differ: {} vs {}",
            labeled.cols(),
            unlabeled.cols()
        )));
    }
    let mut s = Matrix::zeros(labeled.rows(), unlabeled.rows());
    for (i, u) in labeled.row_iter().enumerate() {
        for (j, v) in unlabeled.row_iter().enumerate() {
            s[(i, j)] = cosine_unchecked(u, v);
        }
    }
    ScoreMatrix::new(s)
}

/// Divides by the largest magnitude (or the magnitude of the signed maximum).
/// A zero divisor leaves the scores unchanged and marks them degenerate.
pub fn normalize_scores(scores: &ScoreMatrix, mode: ScoreNormalization) -> ScoreMatrix {
    let divisor = match mode {
        ScoreNormalization::AbsMax => scores.scores.max_abs(),
        ScoreNormalization::SignedMax => scores.scores.max().abs(),
    };
    if divisor == 0.0 {
        return ScoreMatrix {
            scores: scores.scores.clone(),
            degenerate: true,
        };
    }
    ScoreMatrix {
        scores: scores.scores.map(|x| x / divisor),
        degenerate: false,
    }
}

/// Gradient w.r.t. the raw scores of a loss whose gradient w.r.t. the
/// normalized scores is `d_norm`. The divisor is differentiated through its
/// maximizing entry; ties resolve to the first one.
pub fn normalize_scores_backward(raw: &ScoreMatrix, mode: ScoreNormalization, d_norm: &Matrix) -> Result<Matrix> {
    let r = &raw.scores;
    if r.shape() != d_norm.shape() {
        return Err(Error::Contract("score gradient shape differs from scores".into()));
    }
    let values = r.as_slice();
    let key = |x: f64| match mode {
        ScoreNormalization::AbsMax => x.abs(),
        ScoreNormalization::SignedMax => x,
    };
    let k = (0..values.len()).fold(0, |best, i| if key(values[i]) > key(values[best]) { i } else { best });
    let divisor = values[k].abs();
    if divisor == 0.0 {
        return Ok(d_norm.clone());
    }
    let mut out = d_norm.scale(1.0 / divisor);
    let d_divisor = -dot(d_norm.as_slice(), values) / (divisor * divisor);
    out.as_mut_slice()[k] += d_divisor * values[k].signum();
    Ok(out)
}

/// Gradients of `Σ_ij G_ij · cos(v^l_i, v^u_j)` w.r.t. the labeled and the
/// unlabeled features. Pairs involving a zero vector contribute nothing.
pub fn similarity_backward(labeled: &Matrix, unlabeled: &Matrix, d_scores: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_scores.shape() != (labeled.rows(), unlabeled.rows()) || labeled.cols() != unlabeled.cols() {
        return Err(Error::Contract("similarity gradient shapes do not conform".into()));
    }
    let mut d_labeled = Matrix::zeros(labeled.rows(), labeled.cols());
    let mut d_unlabeled = Matrix::zeros(unlabeled.rows(), unlabeled.cols());
    let unlabeled_norms: Vec<f64> = unlabeled.row_iter().map(norm).collect();
    for (i, a) in labeled.row_iter().enumerate() {
        let na = norm(a);
        for (j, b) in unlabeled.row_iter().enumerate() {
            let nb = unlabeled_norms[j];
            let g = d_scores[(i, j)];
            if na == 0.0 || nb == 0.0 || g == 0.0 {
                continue;
            }
            let inv = 1.0 / (na * nb);
            let c = dot(a, b) * inv;
            for (d, (&x, &y)) in d_labeled.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
                *d += g * (y * inv - c * x / (na * na));
            }
            for (d, (&x, &y)) in d_unlabeled.row_mut(j).iter_mut().zip(a.iter().zip(b)) {
                *d += g * (x * inv - c * y / (nb * nb));
            }
        }
    }
    Ok((d_labeled, d_unlabeled))
}

/// Fixed-coefficient score matrices used for ablations.
pub fn score_matrix_variant<R: Rng + ?Sized>(mode: ScoreMode, labeled: usize, unlabeled: usize, rng: &mut R) -> Result<ScoreMatrix> {
    if labeled == 0 || unlabeled == 0 {
        return Err(Error::Contract("score matrix needs at least one row and column".into()));
    }
    match mode {
        ScoreMode::Average => ScoreMatrix::new(Matrix::filled(labeled, unlabeled, 1.0)),
        ScoreMode::Random => {
            let data = (0..labeled * unlabeled).map(|_| rng.random::<f64>()).collect();
            ScoreMatrix::new(Matrix::new(labeled, unlabeled, data)?)
        }
        ScoreMode::Cosine => Err(Error::Config(
            "cosine scores are computed from features, not drawn".into(),
        )),
    }
}

/// Novel-head targets for unlabeled samples: `α · Sᵀ · l^l_uh` (`M × C^u`).
pub fn synthesize_novel_pseudo(scores: &ScoreMatrix, labeled_novel_logits: &Matrix, alpha: f64) -> Result<Matrix> {
    if scores.scores.rows() != labeled_novel_logits.rows() {
        return Err(Error::Contract(format!(
            "scores have {} labeled rows, logits have {}",
            scores.scores.rows(),
            labeled_novel_logits.rows()
        )));
    }
    Ok(scores.scores.t_matmul(labeled_novel_logits)?.scale(alpha))
}

/// Known-head targets for labeled samples: `α · S · l^u_kh` (`N × C^l`).
pub fn synthesize_known_pseudo(scores: &ScoreMatrix, unlabeled_known_logits: &Matrix, alpha: f64) -> Result<Matrix> {
    if scores.scores.cols() != unlabeled_known_logits.rows() {
        return Err(Error::Contract(format!(
            "scores have {} unlabeled columns, logits have {}",
            scores.scores.cols(),
            unlabeled_known_logits.rows()
        )));
    }
    Ok(scores.scores.matmul(unlabeled_known_logits)?.scale(alpha))
}

/// Mean row KL from the target distribution to the student distribution, and
/// its gradient w.r.t. the student logits (targets held constant).
pub fn distill_direction(target_logits: &Matrix, student_logits: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    if target_logits.shape() != student_logits.shape() {
        return Err(Error::Contract(format!(
            "target {:?} and student {:?} shapes differ",
            target_logits.shape(),
            student_logits.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    target_logits.ensure_finite("distillation targets")?;
    student_logits.ensure_finite("student logits")?;
    let rows = student_logits.rows() as f64;
    let mut grad = Matrix::zeros(student_logits.rows(), student_logits.cols());
    let mut total = 0.0;
    for i in 0..student_logits.rows() {
        let mut t = target_logits.row(i).to_vec();
        let mut s = student_logits.row(i).to_vec();
        softmax_in_place(&mut t, temperature);
        softmax_in_place(&mut s, temperature);
        total += kl_unchecked(&t, &s);
        for ((g, &pt), &ps) in grad.row_mut(i).iter_mut().zip(&t).zip(&s) {
            *g = (ps - pt) / (temperature * rows);
        }
    }
    Ok((total / rows, grad))
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| ((v - max) / temperature).exp()).sum::<f64>().ln();
    logits.iter().map(|v| (v - max) / temperature - lse).collect()
}

/// Gradient of [`distill_direction`]'s loss w.r.t. the target logits.
pub fn distill_target_gradient(target_logits: &Matrix, student_logits: &Matrix, temperature: f64) -> Result<Matrix> {
    if target_logits.shape() != student_logits.shape() {
        return Err(Error::Contract("target and student shapes differ".into()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let rows = target_logits.rows() as f64;
    let mut grad = Matrix::zeros(target_logits.rows(), target_logits.cols());
    for i in 0..target_logits.rows() {
        let lt = log_softmax(target_logits.row(i), temperature);
        let ls = log_softmax(student_logits.row(i), temperature);
        let ratio: Vec<f64> = lt.iter().zip(&ls).map(|(t, s)| t - s).collect();
        let kl: f64 = lt.iter().zip(&ratio).map(|(t, r)| t.exp() * r).sum();
        for ((g, t), r) in grad.row_mut(i).iter_mut().zip(&lt).zip(&ratio) {
            *g = t.exp() * (r - kl) / (temperature * rows);
        }
    }
    Ok(grad)
}

/// Values of both distillation directions and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SckdLosses {
    pub k_to_n: f64,
    pub n_to_k: f64,
    pub sckd: f64,
}

/// `L_{k→n}`, `L_{n→k}` and `L_SCKD = 2[λ·L_{k→n} + (1−λ)·L_{n→k}]`.
pub fn sckd_losses(
    unlabeled_novel_logits: &Matrix,
    novel_pseudo: &Matrix,
    labeled_known_logits: &Matrix,
    known_pseudo: &Matrix,
    temperature: f64,
    lambda: f64,
) -> Result<SckdLosses> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let (k_to_n, _) = distill_direction(novel_pseudo, unlabeled_novel_logits, temperature)?;
    let (n_to_k, _) = distill_direction(known_pseudo, labeled_known_logits, temperature)?;
    Ok(SckdLosses {
        k_to_n,
        n_to_k,
        sckd: 2.0 * (lambda * k_to_n + (1.0 - lambda) * n_to_k),
    })
}
