//! Pruning: the magnitude `Prune` function, singular-vector sparsification,
//! ζ₁-targeted coefficient pruning with a pruning-factor search, the
//! multi-cycle pipeline with data-free regularization, and MP-based
//! singular-value pruning with layer splitting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::matrixio::LabeledDataset;
use crate::nn::{train, EpochRecord, LossBreakdown, MLPModel, TrainConfig, Weight};
use crate::rmt::{bema_fit, layer_metrics_from_sv, Esd, LayerMetrics, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TAU};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Target fraction of nonzero weights removed per cycle.
    pub r: f64,
    pub n_cycles: usize,
    pub theta_coeff: f64,
    pub sv_floor: f64,
    pub sv_exponent: f64,
    pub f_init: f64,
    pub f_step: f64,
    pub min_mult: f64,
    pub max_mult: f64,
    pub reg_epochs_start: usize,
    pub reg_epochs_step: usize,
    pub reg_epochs_cap: usize,
    pub mu1: f64,
    pub mu2: f64,
    pub reg_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub sv_prune_every_other_cycle: bool,
    /// Bulk-only thresholds followed by a universal θ·sv_floor pass, instead
    /// of the max-form threshold on every triplet.
    pub strict_sv_mode: bool,
    /// Replaces θ = theta_coeff·r·N·M when set.
    pub theta_override: Option<f64>,
    /// Layers whose smaller dimension is below this are not analysed.
    pub min_dim: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            r: 0.06,
            n_cycles: 19,
            theta_coeff: 0.00001125,
            sv_floor: 1.0 / 750.0,
            sv_exponent: 30.0,
            f_init: 1e-6,
            f_step: 5e-6,
            min_mult: 3.0,
            max_mult: 5.0,
            reg_epochs_start: 15,
            reg_epochs_step: 5,
            reg_epochs_cap: 40,
            mu1: 5e-6,
            mu2: 2e-6,
            reg_lr: 0.05e-6,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            tau: DEFAULT_TAU,
            sv_prune_every_other_cycle: true,
            strict_sv_mode: false,
            theta_override: None,
            min_dim: 32,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("theta_coeff", self.theta_coeff),
            ("sv_floor", self.sv_floor),
            ("sv_exponent", self.sv_exponent),
            ("f_init", self.f_init),
            ("f_step", self.f_step),
            ("min_mult", self.min_mult),
            ("max_mult", self.max_mult),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("mu1", self.mu1), ("mu2", self.mu2), ("reg_lr", self.reg_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Parameter(format!("r must lie in (0, 1), got {}", self.r)));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::Parameter(format!("alpha must lie in (0, 1/2), got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Parameter(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if let Some(t) = self.theta_override {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::Parameter(format!("theta_override must be nonnegative, got {t}")));
            }
        }
        Ok(())
    }

    /// θ for an N × M layer.
    pub fn theta(&self, n_rows: usize, n_cols: usize) -> f64 {
        self.theta_override.unwrap_or(self.theta_coeff * self.r * n_rows as f64 * n_cols as f64)
    }

    pub fn reg_epochs(&self, cycle: usize) -> usize {
        (self.reg_epochs_start + (cycle - 1) * self.reg_epochs_step).min(self.reg_epochs_cap)
    }

    pub fn eligible(&self, n_rows: usize, n_cols: usize) -> bool {
        n_rows.min(n_cols) >= self.min_dim
    }
}

/// `x` if |x| > θ, else 0.
#[inline]
pub fn prune_value(x: f64, theta: f64) -> f64 {
    if x.abs() > theta {
        x
    } else {
        0.0
    }
}

/// Zero every entry with |x| ≤ θ. The count covers entries that were
/// nonzero before.
pub fn prune_matrix(w: &RealMatrix, theta: f64) -> (RealMatrix, usize) {
    let mut out = w.clone();
    let count = prune_in_place(out.as_mut_slice(), theta);
    (out, count)
}

fn prune_in_place(xs: &mut [f64], theta: f64) -> usize {
    let mut count = 0;
    for x in xs {
        if *x != 0.0 && x.abs() <= theta {
            *x = 0.0;
            count += 1;
        }
    }
    count
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvPruneResult {
    pub matrix: RealMatrix,
    /// Singular-vector entries newly set to zero.
    pub zeroed_entries: usize,
    /// Entries across all left and right singular vectors.
    pub total_entries: usize,
}

/// Sparsify the singular vectors of `W` and recompose.
///
/// Triplet i is compared through σ̂ᵢ = σᵢ/√N. In the default mode both
/// vectors are pruned at θ·max{floor, (1 − σ̂/√λ₊)^p}, the power term being
/// 0 above the edge. In strict mode bulk triplets are pruned at
/// θ·(1 − σ̂/√λ₊)^p and then every vector at θ·floor.
pub fn prune_singular_vectors(w: &RealMatrix, lambda_plus_hat: f64, theta: f64, cfg: &PruneConfig) -> Result<SvPruneResult> {
    if !(theta >= 0.0) {
        return Err(Error::Parameter(format!("theta must be nonnegative, got {theta}")));
    }
    let mut svd = w.thin_svd()?;
    let edge = lambda_plus_hat.max(0.0).sqrt();
    let scale = (w.rows() as f64).sqrt();
    let k = svd.s.len();
    let power = |s: f64| {
        let x = s / scale;
        if edge > 0.0 && x < edge {
            (1.0 - x / edge).powf(cfg.sv_exponent)
        } else {
            0.0
        }
    };
    let mut zeroed = 0;
    for i in 0..k {
        let p = power(svd.s[i]);
        let thresholds: Vec<f64> = if cfg.strict_sv_mode {
            let below = edge > 0.0 && svd.s[i] / scale < edge;
            let mut t = Vec::with_capacity(2);
            if below {
                t.push(theta * p);
            }
            t.push(theta * cfg.sv_floor);
            t
        } else {
            vec![theta * cfg.sv_floor.max(p)]
        };
        for t in thresholds {
            zeroed += prune_column(&mut svd.u, i, t);
            zeroed += prune_column(&mut svd.v, i, t);
        }
    }
    Ok(SvPruneResult { matrix: svd.recompose(), zeroed_entries: zeroed, total_entries: k * (w.rows() + w.cols()) })
}

fn prune_column(m: &mut RealMatrix, j: usize, theta: f64) -> usize {
    let mut count = 0;
    for i in 0..m.rows() {
        let x = m.get(i, j);
        if x != 0.0 && x.abs() <= theta {
            m.set(i, j, 0.0);
            count += 1;
        }
    }
    count
}

fn randomness(mu: f64, gamma: f64, t: usize) -> f64 {
    ((1.0 - mu) * gamma).max(0.0).powf(1.5 / t as f64)
}

/// ⌊[(1 − μ)γ]^{1.5/t}·r·nnz⌋.
pub fn zeta1(mu: f64, gamma: f64, r: f64, t: usize, nnz: usize) -> Result<usize> {
    if t < 1 {
        return Err(Error::Parameter("cycle index starts at 1".into()));
    }
    if !(0.0..=1.0).contains(&mu) || !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Parameter(format!("mu={mu}, gamma={gamma} must lie in [0, 1]")));
    }
    Ok((randomness(mu, gamma, t) * r * nnz as f64).floor() as usize)
}

/// max{min_mult, max_mult·[(1 − μ)γ]^{1.5/t}}.
pub fn pruning_multiplier(mu: f64, gamma: f64, t: usize, cfg: &PruneConfig) -> f64 {
    cfg.min_mult.max(cfg.max_mult * randomness(mu, gamma, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneFactor {
    pub f: f64,
    pub multiplier: f64,
    pub threshold: f64,
    pub pruned: usize,
    pub matrix: RealMatrix,
}

/// Smallest f on the grid f_init + k·f_step whose threshold f·m zeroes at
/// least `target` nonzero entries.
///
/// The grid is walked analytically: the target-th smallest magnitude fixes
/// the step, then neighbouring steps are checked against the exact count so
/// the result matches a step-by-step search.
pub fn find_pruning_factor(
    w: &RealMatrix,
    target: usize,
    mu: f64,
    gamma: f64,
    t: usize,
    cfg: &PruneConfig,
) -> Result<PruneFactor> {
    let m = pruning_multiplier(mu, gamma, t, cfg);
    let mut mags: Vec<f64> = w.as_slice().iter().filter(|x| **x != 0.0).map(|x| x.abs()).collect();
    if target > mags.len() {
        return Err(Error::SearchOverflow { achieved: mags.len(), target });
    }
    mags.sort_unstable_by(f64::total_cmp);
    let f_at = |k: u64| cfg.f_init + k as f64 * cfg.f_step;
    let count = |k: u64| mags.partition_point(|&x| x <= f_at(k) * m);
    let mut k = if target == 0 {
        0
    } else {
        let need = mags[target - 1] / m;
        ((need - cfg.f_init) / cfg.f_step).ceil().max(0.0) as u64
    };
    while count(k) < target {
        k += 1;
    }
    while k > 0 && count(k - 1) >= target {
        k -= 1;
    }
    let f = f_at(k);
    let threshold = f * m;
    let (matrix, pruned) = prune_matrix(w, threshold);
    Ok(PruneFactor { f, multiplier: m, threshold, pruned, matrix })
}

/// SGD on μ₁‖W‖₁ + μ₂‖W‖_F² alone, one step per epoch. Masked entries
/// stay zero; split layers update both factors.
pub fn regularize_data_free(model: &mut MLPModel, cfg: &PruneConfig, epochs: usize) {
    let (lr, mu1, mu2) = (cfg.reg_lr, cfg.mu1, cfg.mu2);
    for _ in 0..epochs {
        for layer in &mut model.layers {
            let mats: Vec<&mut RealMatrix> = match &mut layer.weight {
                Weight::Dense(w) => vec![w],
                Weight::Split { left, right } => vec![left, right],
            };
            for w in mats {
                for x in w.as_mut_slice() {
                    let sign = if *x == 0.0 { 0.0 } else { x.signum() };
                    let g = mu1 * sign + 2.0 * mu2 * *x;
                    *x -= lr * g;
                }
            }
            layer.apply_mask();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCycleReport {
    pub layer: usize,
    pub eligible: bool,
    pub gamma: f64,
    pub mu: f64,
    pub lambda_plus_hat: f64,
    pub zeta1_target: usize,
    pub pruned: usize,
    pub f: f64,
    pub threshold: f64,
    pub sv_zeroed_entries: usize,
    pub nnz_before: usize,
    pub nnz_after_sv: usize,
    pub nnz_after_prune: usize,
    pub nnz_after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: usize,
    pub sv_pruned: bool,
    pub reg_epochs: usize,
    pub layers: Vec<LayerCycleReport>,
    pub nnz: usize,
    pub param_count: usize,
    /// Fraction of weights that are zero.
    pub sparsity: f64,
    pub loss: Option<LossBreakdown>,
    pub accuracy: Option<f64>,
}

/// A cycle that failed part-way: the completed cycles, the layers of the
/// failing cycle that finished, and the cause.
#[derive(Debug)]
pub struct CycleFailure {
    pub completed: Vec<CycleReport>,
    pub partial_layers: Vec<LayerCycleReport>,
    pub error: Error,
}

impl From<CycleFailure> for Error {
    fn from(f: CycleFailure) -> Self {
        f.error
    }
}

fn prune_layer_cycle(
    k: usize,
    w: &mut RealMatrix,
    mask: &Option<RealMatrix>,
    cfg: &PruneConfig,
    t: usize,
    sv_step: bool,
) -> Result<LayerCycleReport> {
    let (n, m) = w.shape();
    let nnz_before = w.nnz();
    let mut rep = LayerCycleReport {
        layer: k,
        eligible: cfg.eligible(n, m),
        gamma: f64::NAN,
        mu: f64::NAN,
        lambda_plus_hat: f64::NAN,
        zeta1_target: 0,
        pruned: 0,
        f: 0.0,
        threshold: 0.0,
        sv_zeroed_entries: 0,
        nnz_before,
        nnz_after_sv: nnz_before,
        nnz_after_prune: nnz_before,
        nnz_after: nnz_before,
    };
    if !rep.eligible {
        return Ok(rep);
    }
    let reapply_mask = |w: &mut RealMatrix| {
        if let Some(mk) = mask {
            for (x, keep) in w.as_mut_slice().iter_mut().zip(mk.as_slice()) {
                if *keep == 0.0 {
                    *x = 0.0;
                }
            }
        }
    };
    if sv_step {
        let sv = w.singular_values()?;
        let metrics = layer_metrics_from_sv(&sv, n, m, w.nnz(), cfg.alpha, cfg.beta, cfg.tau)?;
        if !metrics.degenerate {
            let res = prune_singular_vectors(w, metrics.lambda_plus_hat, cfg.theta(n, m), cfg)?;
            *w = res.matrix;
            reapply_mask(w);
            rep.sv_zeroed_entries = res.zeroed_entries;
        }
        rep.nnz_after_sv = w.nnz();
    }
    let sv = w.singular_values()?;
    let metrics: LayerMetrics = layer_metrics_from_sv(&sv, n, m, w.nnz(), cfg.alpha, cfg.beta, cfg.tau)?;
    rep.gamma = metrics.gamma;
    rep.mu = metrics.mu;
    rep.lambda_plus_hat = metrics.lambda_plus_hat;
    rep.zeta1_target = zeta1(metrics.mu, metrics.gamma, cfg.r, t, metrics.nnz)?;
    let pf = find_pruning_factor(w, rep.zeta1_target, metrics.mu, metrics.gamma, t, cfg)?;
    rep.pruned = pf.pruned;
    rep.f = pf.f;
    rep.threshold = pf.threshold;
    *w = pf.matrix;
    rep.nnz_after_prune = w.nnz();
    Ok(rep)
}

/// The multi-cycle pipeline. Cycle t (1-based):
/// (a) on odd t, singular-vector pruning of every eligible layer;
/// (b) layer metrics; (c) ζ₁-targeted coefficient pruning, after which
/// each mask is reset to the layer's zero pattern; (d) data-free
/// regularization; (e) a report, with loss and accuracy when `eval` is
/// given. Split layers and layers below `min_dim` are left alone.
pub fn run_prune_cycles(
    model: &mut MLPModel,
    cfg: &PruneConfig,
    eval: Option<&LabeledDataset>,
) -> std::result::Result<Vec<CycleReport>, CycleFailure> {
    let fail = |completed: &Vec<CycleReport>, partial, error| CycleFailure { completed: completed.clone(), partial_layers: partial, error };
    let mut reports = Vec::new();
    if let Err(e) = cfg.validate() {
        return Err(fail(&reports, vec![], e));
    }
    let eval_cfg = TrainConfig { mu1: cfg.mu1, mu2: cfg.mu2, ..TrainConfig::default() };
    for t in 1..=cfg.n_cycles {
        let sv_step = cfg.sv_prune_every_other_cycle && t % 2 == 1;
        let results: Vec<Option<Result<LayerCycleReport>>> = model
            .layers
            .par_iter_mut()
            .enumerate()
            .map(|(k, layer)| {
                let mask = layer.mask.clone();
                match &mut layer.weight {
                    Weight::Dense(w) => Some(prune_layer_cycle(k, w, &mask, cfg, t, sv_step)),
                    Weight::Split { .. } => None,
                }
            })
            .collect();
        let mut layers = Vec::new();
        for r in results.into_iter().flatten() {
            match r {
                Ok(rep) => layers.push(rep),
                Err(e) => return Err(fail(&reports, layers, e)),
            }
        }
        for layer in &mut model.layers {
            if !layer.weight.is_split() {
                layer.mask_zeros();
            }
        }
        let reg_epochs = cfg.reg_epochs(t);
        regularize_data_free(model, cfg, reg_epochs);
        let dense_nnz: Vec<usize> = model.layers.iter().map(|l| l.weight.nnz()).collect();
        for rep in &mut layers {
            rep.nnz_after = dense_nnz[rep.layer];
        }
        let (loss, accuracy) = match eval {
            Some(d) => match model.loss(d, &eval_cfg, 0).and_then(|l| Ok((l, model.accuracy(d)?))) {
                Ok((l, a)) => (Some(l), Some(a)),
                Err(e) => return Err(fail(&reports, layers, e)),
            },
            None => (None, None),
        };
        let nnz = model.nnz();
        let param_count = model.param_count();
        reports.push(CycleReport {
            cycle: t,
            sv_pruned: sv_step,
            reg_epochs,
            layers,
            nnz,
            param_count,
            sparsity: 1.0 - nnz as f64 / param_count as f64,
            loss,
            accuracy,
        });
    }
    Ok(reports)
}

/// Train with every dense layer's zero pattern frozen. Layers without a
/// mask get one from their current zeros; at least one must already carry
/// a mask.
pub fn mask_frozen_finetune(
    model: &mut MLPModel,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if model.layers.iter().all(|l| l.mask.is_none()) {
        return Err(Error::Contract("fine-tuning needs a pruned model with masks".into()));
    }
    for layer in &mut model.layers {
        if layer.mask.is_none() && !layer.weight.is_split() {
            layer.mask_zeros();
        }
    }
    model.apply_masks();
    train(model, data, test, cfg, &mut [])
}

/// Keep fraction f(epoch) = max(0, 1 − slope·epoch).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepSchedule {
    pub slope: f64,
}

impl KeepSchedule {
    pub fn new(slope: f64) -> Result<Self> {
        if !(slope >= 0.0 && slope.is_finite()) {
            return Err(Error::Parameter(format!("keep-schedule slope must be nonnegative, got {slope}")));
        }
        Ok(Self { slope })
    }

    pub fn keep_fraction(&self, epoch: usize) -> f64 {
        (1.0 - self.slope * epoch as f64).max(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MpAction {
    /// Below `min_dim`.
    Exempt,
    /// Spectrum did not pass the MP fit test.
    Rejected,
    /// Singular values removed, kept dense.
    Pruned,
    /// Singular values removed and stored as a factor pair.
    Split,
    /// Split layer left as is.
    KeptSplit,
    /// Split layer multiplied back into a dense matrix.
    Merged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpLayerReport {
    pub layer: usize,
    pub action: MpAction,
    pub keep_fraction: f64,
    pub fit_error: f64,
    pub lambda_plus_hat: f64,
    pub bulk_count: usize,
    pub removed: usize,
    /// Nonzero singular values after the step.
    pub retained_rank: usize,
    pub param_count: usize,
}

struct MpPlan {
    fit_error: f64,
    lambda_plus_hat: f64,
    accepted: bool,
    bulk_count: usize,
    /// Indices (into descending singular values) to zero.
    drop: Vec<usize>,
    rank_after: usize,
}

fn mp_plan(s: &[f64], n_rows: usize, n_cols: usize, keep: f64, cfg: &PruneConfig) -> Result<MpPlan> {
    let esd = Esd::from_singular_values(s, n_rows, n_cols);
    let fit = match bema_fit(&esd, cfg.alpha, cfg.beta) {
        Ok(f) => f.with_tau(cfg.tau),
        Err(Error::Degenerate(_)) => {
            return Ok(MpPlan { fit_error: 1.0, lambda_plus_hat: 0.0, accepted: false, bulk_count: 0, drop: vec![], rank_after: 0 })
        }
        Err(e) => return Err(e),
    };
    let edge = fit.lambda_plus_hat.max(0.0).sqrt();
    let scale = (n_rows as f64).sqrt();
    // Descending order, so the bulk is a suffix and its largest values come first.
    let bulk: Vec<usize> = (0..s.len()).filter(|&i| s[i] / scale < edge).collect();
    let kept = (keep * bulk.len() as f64).floor() as usize;
    let drop = bulk[kept.min(bulk.len())..].to_vec();
    let nonzero = s.iter().filter(|&&x| x > 0.0).count();
    let dropped_nonzero = drop.iter().filter(|&&i| s[i] > 0.0).count();
    Ok(MpPlan {
        fit_error: fit.fit_error,
        lambda_plus_hat: fit.lambda_plus_hat,
        accepted: fit.accepted,
        bulk_count: bulk.len(),
        drop,
        rank_after: nonzero - dropped_nonzero,
    })
}

fn split_params(rank: usize, n_rows: usize, n_cols: usize) -> usize {
    rank * (n_rows + n_cols)
}

/// One pass of MP-based singular-value pruning at `epoch`.
///
/// Split layers are first checked for re-merging: the product is merged
/// back when its spectrum passes the fit test and pruning it now would
/// leave fewer parameters than the current factors. Dense eligible layers
/// whose spectrum passes the fit test lose the smallest (1 − f) share of
/// their bulk singular values (σ/√N < √λ₊); the result is stored as
/// U√Σ′ · √Σ′Vᵀ when k(N + M) < NM. Masks of split layers are dropped.
pub fn mp_singular_value_prune(
    model: &mut MLPModel,
    schedule: &KeepSchedule,
    cfg: &PruneConfig,
    epoch: usize,
) -> Result<Vec<MpLayerReport>> {
    cfg.validate()?;
    let keep = schedule.keep_fraction(epoch);
    let results: Vec<Result<MpLayerReport>> = model
        .layers
        .par_iter_mut()
        .enumerate()
        .map(|(k, layer)| {
            let (n, m) = (layer.weight.out_dim(), layer.weight.in_dim());
            let mut rep = MpLayerReport {
                layer: k,
                action: MpAction::Exempt,
                keep_fraction: keep,
                fit_error: f64::NAN,
                lambda_plus_hat: f64::NAN,
                bulk_count: 0,
                removed: 0,
                retained_rank: 0,
                param_count: layer.weight.param_count(),
            };
            if !cfg.eligible(n, m) {
                rep.retained_rank = layer.weight.dense().singular_values()?.iter().filter(|&&s| s > 0.0).count();
                return Ok(rep);
            }
            if let Weight::Split { left, .. } = &layer.weight {
                let current_rank = left.cols();
                let merged = layer.weight.dense();
                let s = merged.singular_values()?;
                let plan = mp_plan(&s, n, m, keep, cfg)?;
                rep.fit_error = plan.fit_error;
                rep.lambda_plus_hat = plan.lambda_plus_hat;
                rep.bulk_count = plan.bulk_count;
                let hypothetical =
                    if split_params(plan.rank_after, n, m) < n * m { split_params(plan.rank_after, n, m) } else { n * m };
                if plan.accepted && hypothetical < split_params(current_rank, n, m) {
                    layer.weight = Weight::Dense(merged);
                    rep.action = MpAction::Merged;
                    rep.retained_rank = s.iter().filter(|&&x| x > 0.0).count();
                } else {
                    rep.action = MpAction::KeptSplit;
                    rep.retained_rank = current_rank;
                }
                rep.param_count = layer.weight.param_count();
                return Ok(rep);
            }
            let Weight::Dense(w) = &layer.weight else { unreachable!() };
            let svd = w.thin_svd()?;
            let plan = mp_plan(&svd.s, n, m, keep, cfg)?;
            rep.fit_error = plan.fit_error;
            rep.lambda_plus_hat = plan.lambda_plus_hat;
            rep.bulk_count = plan.bulk_count;
            if !plan.accepted {
                rep.action = MpAction::Rejected;
                rep.retained_rank = svd.s.iter().filter(|&&x| x > 0.0).count();
                return Ok(rep);
            }
            rep.removed = plan.drop.len();
            rep.retained_rank = plan.rank_after;
            let kept: Vec<usize> = (0..svd.s.len()).filter(|i| !plan.drop.contains(i) && svd.s[*i] > 0.0).collect();
            let rank = kept.len();
            if split_params(rank, n, m) < n * m {
                let left = RealMatrix::from_fn(n, rank, |i, j| svd.u.get(i, kept[j]) * svd.s[kept[j]].sqrt());
                let right = RealMatrix::from_fn(rank, m, |i, j| svd.s[kept[i]].sqrt() * svd.v.get(j, kept[i]));
                layer.weight = Weight::Split { left, right };
                layer.mask = None;
                rep.action = MpAction::Split;
            } else {
                let mut s = svd.s.clone();
                for &i in &plan.drop {
                    s[i] = 0.0;
                }
                let mut pruned = crate::linalg::Svd { u: svd.u, s, v: svd.v }.recompose();
                if let Some(mk) = &layer.mask {
                    for (x, keep) in pruned.as_mut_slice().iter_mut().zip(mk.as_slice()) {
                        if *keep == 0.0 {
                            *x = 0.0;
                        }
                    }
                }
                layer.weight = Weight::Dense(pruned);
                rep.action = MpAction::Pruned;
            }
            rep.param_count = layer.weight.param_count();
            Ok(rep)
        })
        .collect();
    results.into_iter().collect()
}
