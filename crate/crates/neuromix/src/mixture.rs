//! Mixture-model head: relevance-score normalization, cluster distribution
//! outputs, posterior approximation, the EM and consistency losses, and the
//! per-batch optimization steps.
//!
//! For a batch of n samples the network emits raw relevance scores `a: n×K`.
//! Each column is standardized over the batch (`a* = (a−μ_j)/σ_j`), squeezed
//! by `γ > 1` and passed through a sigmoid to give the cluster distribution
//! output `h = σ(a*/γ)`. Posterior memberships are the row softmax of `a*`
//! (without the γ division) and are always detached before losses are built.

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Largest admissible sigmoid input magnitude: the normalized-score bound
/// `(n−1)/√n` divided by γ must stay inside the sigmoid's near-linear
/// interval for the batch-mean-0.5 approximation to hold.
pub const SIGMOID_LINEAR_BOUND: f64 = 2.31;

/// The exact bound on a z-score standardized over n points with 1/n variance.
pub fn normalized_score_bound(batch_size: usize) -> f64 {
    (batch_size as f64 - 1.0) / (batch_size as f64).sqrt()
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Cluster-head hyperparameters; `validate` enforces the γ/batch pairing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClusterHeadConfig {
    pub clusters: usize,
    pub gamma: f64,
    pub batch_size: usize,
}

impl ClusterHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::config(format!("need at least 2 clusters, got {}", self.clusters)));
        }
        if !(self.gamma > 1.0) {
            return Err(Error::config(format!("gamma must be > 1, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size must be ≥ 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        let reach = normalized_score_bound(self.batch_size) / self.gamma;
        if reach > SIGMOID_LINEAR_BOUND {
            return Err(Error::config(format!(
                "gamma {} too small for batch size {}: normalized scores reach ±{reach:.3} \
                 after the γ division, outside the near-linear sigmoid interval ±{SIGMOID_LINEAR_BOUND}",
                self.gamma, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-batch step options: head hyperparameters plus the normalization
/// ablation switch.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub head: ClusterHeadConfig,
    pub normalize: bool,
}

// ---------------------------------------------------------------------------
// relevance statistics
// ---------------------------------------------------------------------------

/// Running per-cluster mean and standard deviation of the relevance scores,
/// used for eval-mode normalization (arbitrary batch sizes, including 1).
/// No learnable affine follows the normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelevanceStats {
    mu: Vec<f64>,
    sigma: Vec<f64>,
    momentum: f64,
    eps: f64,
}

impl RelevanceStats {
    /// `momentum` is the weight kept on the previous running value.
    pub fn new(clusters: usize, momentum: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in (0,1), got {momentum}")));
        }
        if !(eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {eps}")));
        }
        Ok(RelevanceStats { mu: vec![0.0; clusters], sigma: vec![1.0; clusters], momentum, eps })
    }

    /// Defaults used throughout: momentum 0.9, eps 1e−5.
    pub fn with_defaults(clusters: usize) -> Self {
        RelevanceStats::new(clusters, 0.9, 1e-5).expect("default stats")
    }

    pub fn clusters(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Blends batch statistics into the running values. `batch_sigma` must
    /// already be floored at eps, which keeps `sigma[j] ≥ eps` invariant.
    pub fn update(&mut self, batch_mu: &[f64], batch_sigma: &[f64]) {
        for (m, &bm) in self.mu.iter_mut().zip(batch_mu) {
            *m = self.momentum * *m + (1.0 - self.momentum) * bm;
        }
        for (s, &bs) in self.sigma.iter_mut().zip(batch_sigma) {
            *s = self.momentum * *s + (1.0 - self.momentum) * bs;
        }
    }
}

/// Which statistics normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; updates the running stats. Requires n ≥ 2.
    Train,
    /// Running statistics; any batch size ≥ 1.
    Eval,
}

/// Standardizes each column with batch statistics (no running-stat update).
pub fn batch_normalize(a: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(ops::batchnorm_cols(a, eps)?.output)
}

/// Normalizes relevance scores `a: n×K` per cluster.
///
/// Train mode standardizes with the batch's own mean and uncorrected std
/// (floored at eps) and folds those statistics into `stats`; eval mode
/// applies the running statistics as a fixed affine map.
pub fn normalize_relevance(a: &Tensor, stats: &mut RelevanceStats, mode: NormMode) -> Result<Tensor> {
    if a.ndim() != 2 || a.dim(1) != stats.clusters() {
        return Err(Error::shape(format!(
            "relevance shape {:?} does not match {} clusters",
            a.shape(),
            stats.clusters()
        )));
    }
    match mode {
        NormMode::Train => {
            if a.dim(0) < 2 {
                return Err(Error::shape(format!(
                    "train-mode normalization needs a batch of ≥ 2, got {}",
                    a.dim(0)
                )));
            }
            let norm = ops::batchnorm_cols(a, stats.eps)?;
            stats.update(&norm.mean, &norm.denom);
            Ok(norm.output)
        }
        NormMode::Eval => {
            let k = stats.clusters();
            let mut out = a.data().to_vec();
            for row in out.chunks_mut(k) {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - stats.mu[j]) / stats.sigma[j];
                }
            }
            Tensor::new(a.shape().to_vec(), out)
        }
    }
}

/// Tape-recorded train-mode normalization: gradients flow through the batch
/// statistics (standard batch-norm semantics, no affine). Running stats are
/// only updated when `update_running` is set — the original batch's forward
/// pass updates them, re-forwards and transformed batches do not.
pub fn normalize_relevance_tape(
    tape: &mut Tape,
    a: Var,
    stats: &mut RelevanceStats,
    update_running: bool,
) -> Result<Var> {
    if tape.value(a).ndim() != 2 || tape.value(a).dim(1) != stats.clusters() {
        return Err(Error::shape(format!(
            "relevance shape {:?} does not match {} clusters",
            tape.value(a).shape(),
            stats.clusters()
        )));
    }
    let (out, mean, denom) = tape.batch_norm_cols(a, stats.eps)?;
    if update_running {
        stats.update(&mean, &denom);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// distributions, posteriors, losses (value level)
// ---------------------------------------------------------------------------

/// Cluster distribution outputs `h = σ(a*/γ)`.
pub fn cluster_likelihoods(a_star: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 1.0) {
        return Err(Error::config(format!("gamma must be > 1, got {gamma}")));
    }
    Ok(a_star.map(|v| ops::sigmoid_scalar(v / gamma)))
}

/// Posterior membership approximation: row softmax of `a*` (not `a*/γ`).
/// The result is a plain value; graph builders re-enter it as a constant.
pub fn posteriors(a_star: &Tensor) -> Result<Tensor> {
    ops::softmax_rows(a_star)
}

/// Everything the head derives from one batch of normalized scores.
pub struct PosteriorBatch {
    /// `a*`, the normalized relevance scores.
    pub normalized: Tensor,
    /// `h = σ(a*/γ)`, per-cluster distribution outputs in (0,1).
    pub likelihoods: Tensor,
    /// Detached posterior rows, each summing to 1.
    pub posteriors: Tensor,
}

pub fn posterior_batch(a_star: &Tensor, gamma: f64) -> Result<PosteriorBatch> {
    Ok(PosteriorBatch {
        likelihoods: cluster_likelihoods(a_star, gamma)?,
        posteriors: posteriors(a_star)?,
        normalized: a_star.clone(),
    })
}

fn check_pair(p: &Tensor, h: &Tensor, what: &str) -> Result<()> {
    if p.ndim() != 2 || p.shape() != h.shape() {
        return Err(Error::shape(format!(
            "{what}: posterior shape {:?} vs {:?}",
            p.shape(),
            h.shape()
        )));
    }
    Ok(())
}

/// EM loss value `−(1/n) Σ_ij p_ij · ln h_ij` with `p` held constant.
pub fn em_loss(p: &Tensor, h: &Tensor) -> Result<f64> {
    check_pair(p, h, "em_loss")?;
    let n = p.dim(0) as f64;
    let mut total = 0.0;
    for (&pv, &hv) in p.data().iter().zip(h.data()) {
        if hv <= 0.0 || !hv.is_finite() {
            return Err(Error::Numeric(format!("em_loss: likelihood {hv} outside (0,1)")));
        }
        total += pv * hv.ln();
    }
    Ok(-total / n)
}

/// Augmented EM loss: original and transformed log-likelihoods, both
/// weighted by the original batch's posteriors. Exactly
/// `em_loss(p, h) + em_loss(p, h_tr)`.
pub fn em_loss_augmented(p: &Tensor, h: &Tensor, h_tr: &Tensor) -> Result<f64> {
    Ok(em_loss(p, h)? + em_loss(p, h_tr)?)
}

/// Mean KL divergence `(1/n) Σ_i Σ_j p_ij ln(p_ij/q_ij)` with the
/// convention `0·ln(0/q) = 0`. Non-negative; zero iff the rows agree.
pub fn kl_consistency(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_pair(p, q, "kl_consistency")?;
    for &qv in q.data() {
        if qv <= 0.0 || !qv.is_finite() {
            return Err(Error::Numeric(format!("kl_consistency: posterior {qv} must be > 0")));
        }
    }
    let n = p.dim(0) as f64;
    let mut total = 0.0;
    for (&pv, &qv) in p.data().iter().zip(q.data()) {
        if pv > 0.0 {
            total += pv * (pv / qv).ln();
        }
    }
    Ok(total / n)
}

/// Per-cluster batch means of the distribution outputs: the Monte Carlo
/// estimate of `I_j / V` for the integral `I_j = ∫ h_j dx ≈ 0.5·V` over the
/// (unevaluated) sample-space volume V. Clusters whose mean strays from 0.5
/// by more than `tolerance` are flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub h_mean: Vec<f64>,
    pub tolerance: f64,
    pub flagged: Vec<usize>,
}

pub fn monte_carlo_check(h: &Tensor, tolerance: f64) -> Result<MonteCarloReport> {
    if h.ndim() != 2 {
        return Err(Error::shape("monte_carlo_check: expected n×K likelihoods"));
    }
    let h_mean = column_means(h);
    let flagged = h_mean
        .iter()
        .enumerate()
        .filter_map(|(j, &m)| ((m - 0.5).abs() > tolerance).then_some(j))
        .collect();
    Ok(MonteCarloReport { h_mean, tolerance, flagged })
}

pub fn column_means(t: &Tensor) -> Vec<f64> {
    let (n, k) = (t.dim(0), t.dim(1));
    let mut means = vec![0.0; k];
    for row in t.data().chunks(k) {
        for (m, &v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in means.iter_mut() {
        *m /= n as f64;
    }
    means
}

/// Row argmax with lowest-index tie-breaking.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let k = t.dim(1);
    t.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// losses (graph level)
// ---------------------------------------------------------------------------

/// Builds the EM loss on the tape from normalized scores. `p` enters as a
/// constant; the log-likelihood uses the stabilized log-sigmoid so gradient
/// flows only through the `a*` path(s).
pub fn build_em_loss(
    tape: &mut Tape,
    p: &Tensor,
    a_star: Var,
    a_star_tr: Option<Var>,
    gamma: f64,
) -> Result<Var> {
    if !(gamma > 1.0) {
        return Err(Error::config(format!("gamma must be > 1, got {gamma}")));
    }
    if p.shape() != tape.value(a_star).shape() {
        return Err(Error::shape("build_em_loss: posterior/score shapes differ"));
    }
    let n = p.dim(0) as f64;
    let pc = tape.constant(p.clone());
    let z = tape.scale(a_star, 1.0 / gamma);
    let logh = tape.log_sigmoid(z);
    let weighted = tape.mul(pc, logh)?;
    let mut total = tape.sum(weighted);
    if let Some(tr) = a_star_tr {
        let z_tr = tape.scale(tr, 1.0 / gamma);
        let logh_tr = tape.log_sigmoid(z_tr);
        let weighted_tr = tape.mul(pc, logh_tr)?;
        let total_tr = tape.sum(weighted_tr);
        total = tape.add(total, total_tr)?;
    }
    Ok(tape.scale(total, -1.0 / n))
}

/// Builds the KL consistency loss on the tape: `p` constant, `q` the softmax
/// of the transformed batch's normalized scores (gradient-carrying).
pub fn build_kl_loss(tape: &mut Tape, p: &Tensor, a_star_tr: Var) -> Result<Var> {
    if p.shape() != tape.value(a_star_tr).shape() {
        return Err(Error::shape("build_kl_loss: posterior/score shapes differ"));
    }
    let n = p.dim(0) as f64;
    let entropy_term: f64 =
        p.data().iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum();
    let pc = tape.constant(p.clone());
    let logq = tape.log_softmax_rows(a_star_tr)?;
    let cross = tape.mul(pc, logq)?;
    let cross_sum = tape.sum(cross);
    let neg_cross = tape.scale(cross_sum, -1.0);
    let ent = tape.constant(Tensor::scalar(entropy_term));
    let total = tape.add(ent, neg_cross)?;
    Ok(tape.scale(total, 1.0 / n))
}

// ---------------------------------------------------------------------------
// per-batch optimization steps
// ---------------------------------------------------------------------------

/// Outcome of one per-batch step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub loss_em: f64,
    pub loss_kl: Option<f64>,
    /// Per-cluster batch mean of `h` on the original batch (train-mode).
    pub h_mean: Vec<f64>,
    /// Posterior argmax per sample of the original batch.
    pub assignments: Vec<usize>,
}

fn finite_or_err(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric(format!("{what} became {value}")))
    }
}

/// Shared EM fold: forward, normalize, detach posteriors, one optimizer step
/// on the (optionally augmented) EM loss.
fn em_fold(
    model: &mut Model,
    stats: &mut RelevanceStats,
    opt: &mut Adam,
    x: &Tensor,
    x_tr: Option<&Tensor>,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let mut tape = Tape::new();
    let params = model.lease_params(&mut tape);
    let xv = tape.constant(x.clone());
    let a = model.forward_tape(&mut tape, xv, &params)?;
    let a_star =
        if cfg.normalize { normalize_relevance_tape(&mut tape, a, stats, true)? } else { a };
    let p = posteriors(tape.value(a_star))?;

    let a_star_tr = match x_tr {
        Some(xt) => {
            let xtv = tape.constant(xt.clone());
            let at = model.forward_tape(&mut tape, xtv, &params)?;
            Some(if cfg.normalize {
                normalize_relevance_tape(&mut tape, at, stats, false)?
            } else {
                at
            })
        }
        None => None,
    };

    let loss = build_em_loss(&mut tape, &p, a_star, a_star_tr, cfg.head.gamma)?;
    let loss_em = finite_or_err(tape.value(loss).data()[0], "EM loss")?;
    let h = cluster_likelihoods(tape.value(a_star), cfg.head.gamma)?;
    let h_mean = column_means(&h);
    let assignments = argmax_rows(&p);

    tape.backward(loss)?;
    let grads: Vec<Tensor> = params
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let mut param_refs = model.params_mut();
    opt.step(&mut param_refs, &grads)?;

    Ok(StepReport { loss_em, loss_kl: None, h_mean, assignments })
}

/// One consistency step: recompute posteriors of the original batch with the
/// updated parameters (no gradient, no running-stat update), then one
/// optimizer step on the KL divergence toward the transformed batch.
pub fn consistency_step(
    model: &mut Model,
    stats: &mut RelevanceStats,
    opt: &mut Adam,
    x: &Tensor,
    x_tr: &Tensor,
    cfg: &StepConfig,
) -> Result<f64> {
    let a = model.forward_eval(x)?;
    let a_star = if cfg.normalize { batch_normalize(&a, stats.eps())? } else { a };
    let p = posteriors(&a_star)?;

    let mut tape = Tape::new();
    let params = model.lease_params(&mut tape);
    let xtv = tape.constant(x_tr.clone());
    let at = model.forward_tape(&mut tape, xtv, &params)?;
    let at_star =
        if cfg.normalize { normalize_relevance_tape(&mut tape, at, stats, false)? } else { at };
    let loss = build_kl_loss(&mut tape, &p, at_star)?;
    let loss_kl = finite_or_err(tape.value(loss).data()[0], "KL loss")?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = params
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
        .collect();
    let mut param_refs = model.params_mut();
    opt.step(&mut param_refs, &grads)?;
    Ok(loss_kl)
}

/// EM-only step on original samples: the vector-data training step.
pub fn em_step_plain(
    model: &mut Model,
    stats: &mut RelevanceStats,
    opt: &mut Adam,
    x: &Tensor,
    cfg: &StepConfig,
) -> Result<StepReport> {
    em_fold(model, stats, opt, x, None, cfg)
}

/// EM-only step with the transformed batch folded into the loss.
pub fn em_step_augmented(
    model: &mut Model,
    stats: &mut RelevanceStats,
    opt: &mut Adam,
    x: &Tensor,
    x_tr: &Tensor,
    cfg: &StepConfig,
) -> Result<StepReport> {
    if x.shape() != x_tr.shape() {
        return Err(Error::shape("em_step_augmented: original/transformed shapes differ"));
    }
    em_fold(model, stats, opt, x, Some(x_tr), cfg)
}

/// Two-fold optimization for one batch: an augmented EM gradient step under
/// `opt_em`, then a KL consistency gradient step under `opt_kl` with freshly
/// recomputed (detached) posteriors.
pub fn two_fold_step(
    model: &mut Model,
    stats: &mut RelevanceStats,
    opt_em: &mut Adam,
    opt_kl: &mut Adam,
    x: &Tensor,
    x_tr: &Tensor,
    cfg: &StepConfig,
) -> Result<StepReport> {
    let mut report = em_step_augmented(model, stats, opt_em, x, x_tr, cfg)?;
    report.loss_kl = Some(consistency_step(model, stats, opt_kl, x, x_tr, cfg)?);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::parse_arch;
    use crate::model::build_model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_two_point_column() {
        let mut stats = RelevanceStats::with_defaults(1);
        let a = t2(&[vec![0.0], vec![2.0]]);
        let out = normalize_relevance(&a, &mut stats, NormMode::Train).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);
        // running stats blended: mu 0.9·0 + 0.1·1, sigma 0.9·1 + 0.1·1
        assert!((stats.mu()[0] - 0.1).abs() < 1e-15);
        assert!((stats.sigma()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_constant_column_floors() {
        let mut stats = RelevanceStats::with_defaults(1);
        let a = t2(&[vec![5.0], vec![5.0], vec![5.0]]);
        let out = normalize_relevance(&a, &mut stats, NormMode::Train).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 0.0]);
        assert!(stats.sigma()[0] >= stats.eps());
    }

    #[test]
    fn train_mode_needs_two_samples() {
        let mut stats = RelevanceStats::with_defaults(2);
        let a = t2(&[vec![1.0, 2.0]]);
        assert!(normalize_relevance(&a, &mut stats, NormMode::Train).is_err());
        // eval mode accepts batch size 1
        assert!(normalize_relevance(&a, &mut stats, NormMode::Eval).is_ok());
    }

    #[test]
    fn train_mode_zero_mean_unit_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> =
            (0..64).map(|_| (0..3).map(|_| rng.gen_range(-4.0..4.0)).collect()).collect();
        let a = t2(&rows);
        let mut stats = RelevanceStats::with_defaults(3);
        let out = normalize_relevance(&a, &mut stats, NormMode::Train).unwrap();
        for j in 0..3 {
            let mean: f64 = (0..64).map(|i| out.at2(i, j)).sum::<f64>() / 64.0;
            let var: f64 = (0..64).map(|i| (out.at2(i, j) - mean).powi(2)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "column {j} std {}", var.sqrt());
        }
    }

    #[test]
    fn normalized_scores_respect_batch_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bound = normalized_score_bound(128);
        for _ in 0..20 {
            let rows: Vec<Vec<f64>> =
                (0..128).map(|_| vec![rng.gen_range(-100.0..100.0)]).collect();
            let a = t2(&rows);
            let mut stats = RelevanceStats::with_defaults(1);
            let out = normalize_relevance(&a, &mut stats, NormMode::Train).unwrap();
            for &v in out.data() {
                assert!(v.abs() <= bound, "{v} exceeds {bound}");
            }
        }
    }

    #[test]
    fn likelihood_reference_points() {
        let a = t2(&[vec![0.0, 5.0]]);
        let h = cluster_likelihoods(&a, 5.0).unwrap();
        assert_eq!(h.data()[0], 0.5);
        assert!((h.data()[1] - 0.7310585786300049).abs() < 1e-12);
        assert!(cluster_likelihoods(&a, 1.0).is_err());
    }

    #[test]
    fn posterior_reference_rows() {
        let uniform = t2(&[vec![0.7, 0.7, 0.7, 0.7]]);
        let p = posteriors(&uniform).unwrap();
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let row = t2(&[vec![3.0f64.ln(), 0.0]]);
        let p = posteriors(&row).unwrap();
        assert!((p.data()[0] - 0.75).abs() < 1e-12);
        assert!((p.data()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn posterior_argmax_matches_likelihood_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> =
            (0..32).map(|_| (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
        let a = t2(&rows);
        let batch = posterior_batch(&a, 5.0).unwrap();
        assert_eq!(argmax_rows(&batch.posteriors), argmax_rows(&batch.likelihoods));
        assert_eq!(argmax_rows(&batch.posteriors), argmax_rows(&a));
    }

    #[test]
    fn em_loss_at_half_is_ln2() {
        let p = t2(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let h = Tensor::full(&[2, 2], 0.5);
        let loss = em_loss(&p, &h).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn em_loss_vanishes_for_confident_onehot() {
        let p = t2(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let h = t2(&[vec![1.0 - 1e-12, 0.3], vec![1.0 - 1e-12, 0.4]]);
        let loss = em_loss(&p, &h).unwrap();
        assert!(loss >= 0.0 && loss < 1e-11);
    }

    #[test]
    fn em_loss_hand_example() {
        let p = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let h = t2(&[vec![0.7, 0.3], vec![0.4, 0.6]]);
        let expect = -(0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((em_loss(&p, &h).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn em_loss_rejects_nonpositive_likelihood() {
        let p = t2(&[vec![1.0, 0.0]]);
        let h = t2(&[vec![0.0, 0.5]]);
        assert!(matches!(em_loss(&p, &h), Err(Error::Numeric(_))));
    }

    #[test]
    fn augmented_identities() {
        let p = t2(&[vec![0.3, 0.7], vec![0.9, 0.1]]);
        let h = t2(&[vec![0.6, 0.2], vec![0.8, 0.55]]);
        let single = em_loss(&p, &h).unwrap();
        let double = em_loss_augmented(&p, &h, &h).unwrap();
        assert_eq!(double, 2.0 * single);

        let half = Tensor::full(&[2, 2], 0.5);
        let both_half = em_loss_augmented(&p, &half, &half).unwrap();
        assert!((both_half - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let hand_p = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let hand_h = t2(&[vec![0.7, 0.3], vec![0.4, 0.6]]);
        let sum = em_loss_augmented(&hand_p, &hand_h, &half).unwrap();
        let expect = -(0.7f64.ln() + 0.6f64.ln()) / 2.0 + std::f64::consts::LN_2;
        assert!((sum - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_identity_and_reference() {
        let p = t2(&[vec![0.25, 0.75], vec![0.5, 0.5]]);
        assert_eq!(kl_consistency(&p, &p).unwrap(), 0.0);

        let one_hot = t2(&[vec![1.0, 0.0]]);
        let uniform = t2(&[vec![0.5, 0.5]]);
        let kl = kl_consistency(&one_hot, &uniform).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);

        assert!(matches!(
            kl_consistency(&one_hot, &t2(&[vec![0.0, 1.0]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn kl_nonnegative_on_random_simplex_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let raw: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            };
            let p = t2(&[mk(&mut rng), mk(&mut rng)]);
            let q = t2(&[mk(&mut rng), mk(&mut rng)]);
            assert!(kl_consistency(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn gamma_batch_pairing_is_validated() {
        assert!(ClusterHeadConfig { clusters: 10, gamma: 5.0, batch_size: 128 }
            .validate()
            .is_ok());
        // 127/√128 / 2 ≈ 5.6 exceeds the near-linear interval
        assert!(ClusterHeadConfig { clusters: 10, gamma: 2.0, batch_size: 128 }
            .validate()
            .is_err());
        assert!(ClusterHeadConfig { clusters: 10, gamma: 0.5, batch_size: 4 }
            .validate()
            .is_err());
        assert!(ClusterHeadConfig { clusters: 1, gamma: 5.0, batch_size: 128 }
            .validate()
            .is_err());
    }

    #[test]
    fn detached_posteriors_receive_no_gradient() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let model = build_model(&arch, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = t2(&rows);

        let mut tape = Tape::new();
        let params = model.lease_params(&mut tape);
        let xv = tape.constant(x);
        let a = model.forward_tape(&mut tape, xv, &params).unwrap();
        let mut stats = RelevanceStats::with_defaults(4);
        let a_star = normalize_relevance_tape(&mut tape, a, &mut stats, true).unwrap();
        let p = posteriors(tape.value(a_star)).unwrap();

        // Loss touching only the detached posterior path: no parameter grads.
        let pc = tape.constant(p);
        let loss = tape.sum(pc);
        tape.backward(loss).unwrap();
        for &v in &params {
            assert!(tape.grad(v).is_none());
        }
    }

    #[test]
    fn em_loss_gradient_reaches_parameters_through_likelihoods() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let model = build_model(&arch, 22);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let x = t2(&rows);

        let mut tape = Tape::new();
        let params = model.lease_params(&mut tape);
        let xv = tape.constant(x);
        let a = model.forward_tape(&mut tape, xv, &params).unwrap();
        let mut stats = RelevanceStats::with_defaults(4);
        let a_star = normalize_relevance_tape(&mut tape, a, &mut stats, true).unwrap();
        let p = posteriors(tape.value(a_star)).unwrap();
        let loss = build_em_loss(&mut tape, &p, a_star, None, 5.0).unwrap();
        tape.backward(loss).unwrap();
        let total: f64 = params
            .iter()
            .filter_map(|&v| tape.grad(v))
            .map(|g| g.data().iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        assert!(total > 0.0);
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        t2(&rows)
    }

    #[test]
    fn two_fold_with_zero_kl_lr_matches_augmented_step_bitwise() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let cfg = StepConfig {
            head: ClusterHeadConfig { clusters: 4, gamma: 5.0, batch_size: 16 },
            normalize: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_batch(&mut rng, 16, 3);
        let x_tr = random_batch(&mut rng, 16, 3);

        let mut m1 = build_model(&arch, 33);
        let mut s1 = RelevanceStats::with_defaults(4);
        let mut em1 = Adam::new(1e-3).unwrap();
        let mut kl1 = Adam::new(0.0).unwrap();
        let mut m2 = build_model(&arch, 33);
        let mut s2 = RelevanceStats::with_defaults(4);
        let mut em2 = Adam::new(1e-3).unwrap();

        for _ in 0..3 {
            let r1 = two_fold_step(&mut m1, &mut s1, &mut em1, &mut kl1, &x, &x_tr, &cfg).unwrap();
            let r2 = em_step_augmented(&mut m2, &mut s2, &mut em2, &x, &x_tr, &cfg).unwrap();
            assert_eq!(r1.loss_em.to_bits(), r2.loss_em.to_bits());
        }
        assert_eq!(m1.params(), m2.params());
        assert_eq!(s1.mu(), s2.mu());
    }

    #[test]
    fn em_step_descends_with_frozen_posteriors() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let cfg = StepConfig {
            head: ClusterHeadConfig { clusters: 4, gamma: 5.0, batch_size: 16 },
            normalize: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_batch(&mut rng, 16, 3);

        let mut model = build_model(&arch, 44);
        let mut stats = RelevanceStats::with_defaults(4);

        // Loss with the pre-step posteriors, before and after one small step.
        let a0 = model.forward_eval(&x).unwrap();
        let a0_star = batch_normalize(&a0, stats.eps()).unwrap();
        let p0 = posteriors(&a0_star).unwrap();
        let h0 = cluster_likelihoods(&a0_star, cfg.head.gamma).unwrap();
        let before = em_loss(&p0, &h0).unwrap();

        let mut opt = Adam::new(1e-4).unwrap();
        em_step_plain(&mut model, &mut stats, &mut opt, &x, &cfg).unwrap();

        let a1 = model.forward_eval(&x).unwrap();
        let a1_star = batch_normalize(&a1, stats.eps()).unwrap();
        let h1 = cluster_likelihoods(&a1_star, cfg.head.gamma).unwrap();
        let after = em_loss(&p0, &h1).unwrap();
        assert!(after < before, "loss did not descend: {before} -> {after}");
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let cfg = StepConfig {
            head: ClusterHeadConfig { clusters: 4, gamma: 5.0, batch_size: 16 },
            normalize: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_batch(&mut rng, 16, 3);
        let mut model = build_model(&arch, 55);
        let before: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let mut stats = RelevanceStats::with_defaults(4);
        let mut opt = Adam::new(0.0).unwrap();
        em_step_plain(&mut model, &mut stats, &mut opt, &x, &cfg).unwrap();
        let after: Vec<&Tensor> = model.params();
        for (b, a) in before.iter().zip(after) {
            assert_eq!(b, a);
        }
    }

    #[test]
    fn self_consistency_kl_is_tiny_on_identical_batches() {
        let arch = parse_arch("F8 F4", &[3]).unwrap();
        let cfg = StepConfig {
            head: ClusterHeadConfig { clusters: 4, gamma: 5.0, batch_size: 16 },
            normalize: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_batch(&mut rng, 16, 3);
        let mut model = build_model(&arch, 66);
        let mut stats = RelevanceStats::with_defaults(4);
        let mut em = Adam::new(1e-3).unwrap();
        let mut kl = Adam::new(1e-4).unwrap();
        let report =
            two_fold_step(&mut model, &mut stats, &mut em, &mut kl, &x, &x.clone(), &cfg).unwrap();
        assert!(report.loss_kl.unwrap().abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_check_flags_deviations() {
        let h = Tensor::full(&[8, 3], 0.5);
        let report = monte_carlo_check(&h, 0.02).unwrap();
        assert!(report.flagged.is_empty());
        assert!(report.h_mean.iter().all(|&m| m == 0.5));

        let skew = t2(&[vec![0.95, 0.5], vec![0.93, 0.5]]);
        let report = monte_carlo_check(&skew, 0.02).unwrap();
        assert_eq!(report.flagged, vec![0]);
    }
}
