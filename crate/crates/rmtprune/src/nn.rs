//! A small fully connected classifier with hand-written backpropagation.
//!
//! Weights are stored out × in, so a layer maps a batch `A` (B × in) to
//! `A Wᵀ + b`. A split layer stores `W = L·R` as its two factors and is
//! trained through both.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, RealMatrix};
use crate::matrixio::{LabeledDataset, ModelCheckpoint, NamedMatrix};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Abs,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Abs => "abs",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "abs" => Ok(Activation::Abs),
            "relu" => Ok(Activation::Relu),
            _ => Err(Error::Parameter(format!("unknown activation {s:?}"))),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Abs => x.abs(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative with the kink assigned slope 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Abs => sign(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weight {
    Dense(RealMatrix),
    /// `W = left · right`, left out × r, right r × in.
    Split { left: RealMatrix, right: RealMatrix },
}

impl Weight {
    pub fn out_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.rows(),
            Weight::Split { left, .. } => left.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Weight::Dense(w) => w.cols(),
            Weight::Split { right, .. } => right.cols(),
        }
    }

    pub fn is_split(&self) -> bool {
        matches!(self, Weight::Split { .. })
    }

    /// The effective out × in matrix.
    pub fn dense(&self) -> RealMatrix {
        match self {
            Weight::Dense(w) => w.clone(),
            Weight::Split { left, right } => left.matmul(right).expect("split factors are conformable"),
        }
    }

    pub fn matrices(&self) -> Vec<&RealMatrix> {
        match self {
            Weight::Dense(w) => vec![w],
            Weight::Split { left, right } => vec![left, right],
        }
    }

    fn matrices_mut(&mut self) -> Vec<&mut RealMatrix> {
        match self {
            Weight::Dense(w) => vec![w],
            Weight::Split { left, right } => vec![left, right],
        }
    }

    pub fn param_count(&self) -> usize {
        self.matrices().iter().map(|m| m.len()).sum()
    }

    pub fn nnz(&self) -> usize {
        self.matrices().iter().map(|m| m.nnz()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Weight,
    pub bias: Option<Vec<f64>>,
    /// Binary keep-mask with the dense weight's shape; 0 entries stay 0.
    pub mask: Option<RealMatrix>,
}

impl Layer {
    pub fn apply_mask(&mut self) {
        if let (Weight::Dense(w), Some(m)) = (&mut self.weight, &self.mask) {
            for (x, k) in w.as_mut_slice().iter_mut().zip(m.as_slice()) {
                if *k == 0.0 {
                    *x = 0.0;
                }
            }
        }
    }

    /// Freeze the current zero pattern of a dense weight into the mask.
    pub fn mask_zeros(&mut self) {
        if let Weight::Dense(w) = &self.weight {
            self.mask = Some(w.map(|x| if x == 0.0 { 0.0 } else { 1.0 }));
        }
    }
}

/// Weight initialisation; "fan-in" is the number of columns of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// N(0, 2/fan_in).
    He,
    /// N(0, 1/fan_in).
    FanIn,
    /// N(0, 1/fan_in²).
    FanInSquared,
    /// N(0, std²).
    Std(f64),
}

impl Init {
    pub fn std(self, fan_in: usize) -> f64 {
        let n = fan_in as f64;
        match self {
            Init::He => (2.0 / n).sqrt(),
            Init::FanIn => n.sqrt().recip(),
            Init::FanInSquared => n.recip(),
            Init::Std(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MLPModel {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub activation_on_final: bool,
}

/// Per-layer gradient, shaped like the layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<RealMatrix>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub l1_term: f64,
    pub l2_term: f64,
    pub stable_rank_term: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    None,
    Step { factor: f64, period: usize },
    /// Cosine annealing from the base rate to 0 over `TrainConfig::epochs`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub warmup_epochs: usize,
    pub mu1: f64,
    pub mu2: f64,
    pub stable_rank_coeff: f64,
    pub stable_rank_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
    /// Evaluate loss and accuracy on the full training set after each epoch.
    pub log_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.0,
            lr_schedule: LrSchedule::None,
            warmup_epochs: 0,
            mu1: 0.0,
            mu2: 0.0,
            stable_rank_coeff: 0.0,
            stable_rank_period: 1,
            epochs: 1,
            batch_size: 128,
            seed: 0,
            grad_clip: None,
            log_metrics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("learning_rate", self.learning_rate),
            ("momentum", self.momentum),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("stable_rank_coeff", self.stable_rank_coeff),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be at least 1".into()));
        }
        if self.stable_rank_coeff > 0.0 && self.stable_rank_period == 0 {
            return Err(Error::Parameter("stable_rank_period must be at least 1".into()));
        }
        if let LrSchedule::Step { factor, period } = self.lr_schedule {
            if period == 0 || !(factor > 0.0) {
                return Err(Error::Parameter("step schedule needs period ≥ 1 and factor > 0".into()));
            }
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Parameter("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = match self.lr_schedule {
            LrSchedule::None => self.learning_rate,
            LrSchedule::Step { factor, period } => self.learning_rate * factor.powi((epoch / period) as i32),
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        };
        if epoch < self.warmup_epochs {
            base * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            base
        }
    }

    pub fn stable_rank_active(&self, epoch: usize) -> bool {
        self.stable_rank_coeff > 0.0 && epoch % self.stable_rank_period.max(1) == 0
    }
}

/// Stable rank ‖W‖_F² / ‖W‖₂² (0 for the zero matrix).
pub fn stable_rank(w: &RealMatrix) -> Result<f64> {
    let s = w.spectral_norm()?;
    Ok(if s == 0.0 { 0.0 } else { w.frobenius_sq() / (s * s) })
}

/// ∇ stable(W) = 2W/‖W‖₂² − 2(‖W‖_F²/‖W‖₂³) u₁v₁ᵀ.
pub fn stable_rank_gradient(w: &RealMatrix) -> Result<RealMatrix> {
    let svd = w.thin_svd()?;
    let s = svd.s.first().copied().unwrap_or(0.0);
    if s == 0.0 {
        return Ok(RealMatrix::zeros(w.rows(), w.cols()));
    }
    let f2 = w.frobenius_sq();
    let (a, b) = (2.0 / (s * s), 2.0 * f2 / (s * s * s));
    Ok(RealMatrix::from_fn(w.rows(), w.cols(), |i, j| {
        a * w.get(i, j) - b * svd.u.get(i, 0) * svd.v.get(j, 0)
    }))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &RealMatrix) -> RealMatrix {
    let mut p = z.clone();
    for i in 0..p.rows() {
        let row = p.row_mut(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    p
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    softmax_rows(&RealMatrix::from_vec_unchecked(1, v.len(), v.to_vec())).into_vec()
}

/// δX = X_label − max_{j≠label} X_j.
pub fn margin(logits: &[f64], label: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    logits[label] - other
}

fn cross_entropy_row(z: &[f64], label: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

/// Intermediate values of one forward pass, kept for backpropagation.
struct Trace {
    /// Input to each layer (B × in).
    inputs: Vec<RealMatrix>,
    /// Pre-activations (B × out).
    pre: Vec<RealMatrix>,
    /// For split layers, `A Rᵀ` (B × r).
    mid: Vec<Option<RealMatrix>>,
    logits: RealMatrix,
}

impl MLPModel {
    pub fn new(layers: Vec<Layer>, activation: Activation, activation_on_final: bool) -> Result<Self> {
        let m = Self { layers, activation, activation_on_final };
        m.validate()?;
        Ok(m)
    }

    pub fn init(
        topology: &[usize],
        activation: Activation,
        activation_on_final: bool,
        init: Init,
        with_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if topology.len() < 2 || topology.contains(&0) {
            return Err(Error::Parameter(format!("invalid topology {topology:?}")));
        }
        let layers = topology
            .windows(2)
            .map(|w| Layer {
                weight: Weight::Dense(RealMatrix::gaussian(w[1], w[0], init.std(w[0]), rng)),
                bias: with_bias.then(|| vec![0.0; w[1]]),
                mask: None,
            })
            .collect();
        Self::new(layers, activation, activation_on_final)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Contract("model has no layers".into()));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if let Weight::Split { left, right } = &l.weight {
                if left.cols() != right.rows() {
                    return Err(Error::Dimension(format!("layer {}: split inner dims differ", k + 1)));
                }
            }
            if k > 0 && l.weight.in_dim() != self.layers[k - 1].weight.out_dim() {
                return Err(Error::Dimension(format!(
                    "layer {} takes {} inputs but layer {} gives {}",
                    k + 1,
                    l.weight.in_dim(),
                    k,
                    self.layers[k - 1].weight.out_dim()
                )));
            }
            if l.bias.as_ref().is_some_and(|b| b.len() != l.weight.out_dim()) {
                return Err(Error::Dimension(format!("layer {}: bias length", k + 1)));
            }
            if let Some(m) = &l.mask {
                if l.weight.is_split() || m.shape() != (l.weight.out_dim(), l.weight.in_dim()) {
                    return Err(Error::Dimension(format!("layer {}: mask shape", k + 1)));
                }
            }
        }
        Ok(())
    }

    pub fn topology(&self) -> Vec<usize> {
        let mut t = vec![self.layers[0].weight.in_dim()];
        t.extend(self.layers.iter().map(|l| l.weight.out_dim()));
        t
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().unwrap().weight.out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.param_count() + l.bias.as_ref().map_or(0, Vec::len))
            .sum()
    }

    /// Nonzero weight entries (biases excluded).
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.weight.nnz()).sum()
    }

    pub fn apply_masks(&mut self) {
        for l in &mut self.layers {
            l.apply_mask();
        }
    }

    fn activates(&self, k: usize) -> bool {
        k + 1 < self.layers.len() || self.activation_on_final
    }

    fn trace(&self, x: &RealMatrix) -> Result<Trace> {
        if x.cols() != self.layers[0].weight.in_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.layers[0].weight.in_dim()
            )));
        }
        let b = x.rows();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut mid = Vec::with_capacity(self.layers.len());
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = RealMatrix::zeros(b, layer.weight.out_dim());
            match &layer.weight {
                Weight::Dense(w) => {
                    gemm(&mut z, a.view(), w.view().transpose(), 1.0, false);
                    mid.push(None);
                }
                Weight::Split { left, right } => {
                    let mut t = RealMatrix::zeros(b, right.rows());
                    gemm(&mut t, a.view(), right.view().transpose(), 1.0, false);
                    gemm(&mut z, t.view(), left.view().transpose(), 1.0, false);
                    mid.push(Some(t));
                }
            }
            if let Some(bias) = &layer.bias {
                for i in 0..b {
                    for (x, c) in z.row_mut(i).iter_mut().zip(bias) {
                        *x += c;
                    }
                }
            }
            let next = if self.activates(k) { z.map(|v| self.activation.apply(v)) } else { z.clone() };
            inputs.push(a);
            pre.push(z);
            a = next;
        }
        Ok(Trace { inputs, pre, mid, logits: a })
    }

    /// Logits for a batch (B × features).
    pub fn forward_batch(&self, x: &RealMatrix) -> Result<RealMatrix> {
        // Evaluate in chunks to bound the memory of the intermediate trace.
        const CHUNK: usize = 512;
        let mut out = RealMatrix::zeros(x.rows(), self.n_outputs());
        let mut start = 0;
        while start < x.rows() {
            let end = (start + CHUNK).min(x.rows());
            let logits = self.trace(&x.row_block(start, end))?.logits;
            out.as_mut_slice()[start * self.n_outputs()..end * self.n_outputs()]
                .copy_from_slice(logits.as_slice());
            start = end;
        }
        Ok(out)
    }

    /// Logits and softmax probabilities for one sample.
    pub fn forward(&self, s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = RealMatrix::new(1, s.len(), s.to_vec())?;
        let logits = self.forward_batch(&x)?.into_vec();
        let probs = softmax(&logits);
        Ok((logits, probs))
    }

    fn regularizer(&self, cfg: &TrainConfig, epoch: usize) -> Result<(f64, f64, f64)> {
        let (mut l1, mut l2, mut sr) = (0.0, 0.0, 0.0);
        let active = cfg.stable_rank_active(epoch);
        for l in &self.layers {
            for w in l.weight.matrices() {
                if cfg.mu1 > 0.0 {
                    l1 += w.l1_entrywise();
                }
                if cfg.mu2 > 0.0 {
                    l2 += w.frobenius_sq();
                }
                if active {
                    sr += stable_rank(w)?;
                }
            }
        }
        Ok((cfg.mu1 * l1, cfg.mu2 * l2, if active { cfg.stable_rank_coeff * sr } else { 0.0 }))
    }

    /// Sum of the configured penalty terms at epoch 0.
    pub(crate) fn loss_regularizer(&self, cfg: &TrainConfig) -> Result<f64> {
        let (l1, l2, sr) = self.regularizer(cfg, 0)?;
        Ok(l1 + l2 + sr)
    }

    /// Loss per the configured terms; the stable-rank term only counts on
    /// its scheduled epochs.
    pub fn loss(&self, data: &LabeledDataset, cfg: &TrainConfig, epoch: usize) -> Result<LossBreakdown> {
        let ce = self.cross_entropy(data)?;
        let (l1, l2, sr) = self.regularizer(cfg, epoch)?;
        Ok(LossBreakdown {
            cross_entropy: ce,
            l1_term: l1,
            l2_term: l2,
            stable_rank_term: sr,
            total: ce + l1 + l2 + sr,
        })
    }

    pub fn cross_entropy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Domain("cross-entropy of an empty dataset".into()));
        }
        self.check_labels(data)?;
        let z = self.forward_batch(&data.features)?;
        let sum: f64 = data.labels.iter().enumerate().map(|(i, &y)| cross_entropy_row(z.row(i), y)).sum();
        Ok(sum / data.len() as f64)
    }

    fn check_labels(&self, data: &LabeledDataset) -> Result<()> {
        let k = self.n_outputs();
        if data.labels.iter().any(|&y| y >= k) {
            return Err(Error::Dimension(format!("labels exceed the {k} model outputs")));
        }
        Ok(())
    }

    pub fn classification_confidence(&self, s: &[f64], label: usize) -> Result<f64> {
        let (logits, _) = self.forward(s)?;
        if label >= logits.len() {
            return Err(Error::Dimension(format!("label {label} with {} outputs", logits.len())));
        }
        Ok(margin(&logits, label))
    }

    /// Fraction of samples with strictly positive margin.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Domain("accuracy of an empty dataset".into()));
        }
        self.check_labels(data)?;
        let z = self.forward_batch(&data.features)?;
        let hits = data.labels.iter().enumerate().filter(|&(i, &y)| margin(z.row(i), y) > 0.0).count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Cross-entropy and accuracy in one pass.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<(f64, f64)> {
        if data.is_empty() {
            return Err(Error::Domain("evaluation on an empty dataset".into()));
        }
        self.check_labels(data)?;
        let z = self.forward_batch(&data.features)?;
        let (mut ce, mut hits) = (0.0, 0usize);
        for (i, &y) in data.labels.iter().enumerate() {
            ce += cross_entropy_row(z.row(i), y);
            hits += (margin(z.row(i), y) > 0.0) as usize;
        }
        let n = data.len() as f64;
        Ok((ce / n, hits as f64 / n))
    }

    /// Full gradient of [`loss`](Self::loss) on `batch` (cross-entropy
    /// averaged over the batch plus the regularizers), one entry per layer.
    pub fn gradient(&self, batch: &LabeledDataset, cfg: &TrainConfig, epoch: usize) -> Result<Vec<LayerGrad>> {
        let mut grads = collect_grads(&mut self.clone(), batch)?;
        self.add_penalty_grads(&mut grads, cfg, epoch)?;
        Ok(grads)
    }

    fn add_penalty_grads(&self, grads: &mut [LayerGrad], cfg: &TrainConfig, epoch: usize) -> Result<()> {
        let active = cfg.stable_rank_active(epoch);
        for (layer, g) in self.layers.iter().zip(grads) {
            for (w, gw) in layer.weight.matrices().into_iter().zip(&mut g.weight) {
                add_regularizer_grad(gw, w, cfg)?;
                if active {
                    gw.axpy(cfg.stable_rank_coeff, &stable_rank_gradient(w)?)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        let mut layers = Vec::new();
        let mut masks = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            let k = i + 1;
            match &l.weight {
                Weight::Dense(w) => layers.push(NamedMatrix::new(format!("layer{k}.weight"), w.clone())),
                Weight::Split { left, right } => {
                    layers.push(NamedMatrix::new(format!("layer{k}.left"), left.clone()));
                    layers.push(NamedMatrix::new(format!("layer{k}.right"), right.clone()));
                }
            }
            if let Some(b) = &l.bias {
                layers.push(NamedMatrix::new(
                    format!("layer{k}.bias"),
                    RealMatrix::from_vec_unchecked(1, b.len(), b.clone()),
                ));
            }
            if let Some(m) = &l.mask {
                masks.push(NamedMatrix::new(format!("layer{k}.mask"), m.clone()));
            }
        }
        ModelCheckpoint {
            topology: self.topology(),
            activation: self.activation,
            activation_on_final: self.activation_on_final,
            layers,
            masks,
            split_flags: self.layers.iter().map(|l| l.weight.is_split()).collect(),
        }
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        c.validate()?;
        let mut layers = Vec::new();
        for k in 1..c.topology.len() {
            let get = |n: &str| c.find(&format!("layer{k}.{n}")).cloned();
            let weight = if c.split_flags[k - 1] {
                Weight::Split { left: get("left").unwrap(), right: get("right").unwrap() }
            } else {
                Weight::Dense(get("weight").unwrap())
            };
            layers.push(Layer {
                weight,
                bias: get("bias").map(RealMatrix::into_vec),
                mask: c.find_mask(&format!("layer{k}.mask")).cloned(),
            });
        }
        Self::new(layers, c.activation, c.activation_on_final)
    }
}

/// The pieces of one layer's gradient: the upstream delta `dz` (B × out),
/// the layer input (B × in) and, for split layers, the inner activation
/// `input · rightᵀ`.
struct LocalGrad<'a> {
    dz: &'a RealMatrix,
    input: &'a RealMatrix,
    mid: Option<&'a RealMatrix>,
    bias: Option<Vec<f64>>,
}

impl LocalGrad<'_> {
    /// Form the full gradient; `layer` must still hold the weights the
    /// forward pass used.
    fn materialize(self, layer: &Layer) -> LayerGrad {
        let dz = self.dz;
        let weight = match &layer.weight {
            Weight::Dense(w) => {
                let mut g = RealMatrix::zeros(w.rows(), w.cols());
                gemm(&mut g, dz.view().transpose(), self.input.view(), 1.0, false);
                vec![g]
            }
            Weight::Split { left, right } => {
                let t = self.mid.expect("split layers record their inner activation");
                let mut gl = RealMatrix::zeros(left.rows(), left.cols());
                gemm(&mut gl, dz.view().transpose(), t.view(), 1.0, false);
                let mut dt = RealMatrix::zeros(dz.rows(), left.cols());
                gemm(&mut dt, dz.view(), left.view(), 1.0, false);
                let mut gr = RealMatrix::zeros(right.rows(), right.cols());
                gemm(&mut gr, dt.view().transpose(), self.input.view(), 1.0, false);
                vec![gl, gr]
            }
        };
        LayerGrad { weight, bias: self.bias }
    }
}

/// Backpropagate the mean cross-entropy of `batch` through the model.
/// `visit` receives each layer mutably with its local gradient, last layer
/// first, after the delta flowing into the layer's input has been formed,
/// so it may update the layer in place.
fn backprop(
    model: &mut MLPModel,
    batch: &LabeledDataset,
    mut visit: impl FnMut(usize, &mut Layer, LocalGrad<'_>) -> Result<()>,
) -> Result<()> {
    model.check_labels(batch)?;
    let tr = model.trace(&batch.features)?;
    let activation = model.activation;
    let activates: Vec<bool> = (0..model.layers.len()).map(|k| model.activates(k)).collect();
    let layers = &mut model.layers;
    let b = batch.len() as f64;
    let last = layers.len() - 1;
    // dL/dlogits = (softmax − onehot)/B, then through the final activation.
    let mut dz = softmax_rows(&tr.logits);
    for (i, &y) in batch.labels.iter().enumerate() {
        let row = dz.row_mut(i);
        row[y] -= 1.0;
        for x in row.iter_mut() {
            *x /= b;
        }
    }
    for k in (0..=last).rev() {
        if activates[k] {
            for (d, z) in dz.as_mut_slice().iter_mut().zip(tr.pre[k].as_slice()) {
                *d *= activation.derivative(*z);
            }
        }
        let layer = &mut layers[k];
        let bias = layer.bias.as_ref().map(|_| {
            let mut g = vec![0.0; dz.cols()];
            for i in 0..dz.rows() {
                for (s, x) in g.iter_mut().zip(dz.row(i)) {
                    *s += x;
                }
            }
            g
        });
        let mut da = RealMatrix::zeros(dz.rows(), layer.weight.in_dim());
        if k > 0 {
            match &layer.weight {
                Weight::Dense(w) => gemm(&mut da, dz.view(), w.view(), 1.0, false),
                Weight::Split { left, right } => {
                    let mut dt = RealMatrix::zeros(dz.rows(), left.cols());
                    gemm(&mut dt, dz.view(), left.view(), 1.0, false);
                    gemm(&mut da, dt.view(), right.view(), 1.0, false);
                }
            }
        }
        let local = LocalGrad { dz: &dz, input: &tr.inputs[k], mid: tr.mid[k].as_ref(), bias };
        visit(k, layer, local)?;
        dz = da;
    }
    Ok(())
}

fn collect_grads(model: &mut MLPModel, batch: &LabeledDataset) -> Result<Vec<LayerGrad>> {
    let mut grads: Vec<Option<LayerGrad>> = vec![None; model.layers.len()];
    backprop(model, batch, |k, layer, g| {
        grads[k] = Some(g.materialize(layer));
        Ok(())
    })?;
    Ok(grads.into_iter().map(Option::unwrap).collect())
}

/// `g += μ₁·sign(W) + 2μ₂·W`.
fn add_regularizer_grad(g: &mut RealMatrix, w: &RealMatrix, cfg: &TrainConfig) -> Result<()> {
    if cfg.mu1 == 0.0 && cfg.mu2 == 0.0 {
        return Ok(());
    }
    for (gi, &wi) in g.as_mut_slice().iter_mut().zip(w.as_slice()) {
        *gi += cfg.mu1 * sign(wi) + 2.0 * cfg.mu2 * wi;
    }
    Ok(())
}

/// Add independent N(0, eps) noise to the dense weights of the selected
/// layers (0-based). Returns a new model.
pub fn inject_noise(model: &MLPModel, layers: &[usize], eps: f64, rng: &mut Rng) -> Result<MLPModel> {
    if !(eps >= 0.0) {
        return Err(Error::Parameter(format!("noise variance must be nonnegative, got {eps}")));
    }
    let mut out = model.clone();
    if eps == 0.0 {
        return Ok(out);
    }
    let std = eps.sqrt();
    for &k in layers {
        let layer = out
            .layers
            .get_mut(k)
            .ok_or_else(|| Error::Parameter(format!("no layer {k}")))?;
        let Weight::Dense(w) = &mut layer.weight else {
            return Err(Error::Contract(format!("layer {k} is split; noise needs a dense weight")));
        };
        for x in w.as_mut_slice() {
            *x += std * rng::normal(rng);
        }
    }
    Ok(out)
}

/// Optimizer state carried across steps.
#[derive(Clone, Debug, Default)]
pub struct Optimizer {
    velocity: Vec<Vec<(RealMatrix, Option<Vec<f64>>)>>,
}

impl Optimizer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop momentum, e.g. after a layer changed shape.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

fn global_norm(grads: &[LayerGrad]) -> f64 {
    let mut s = 0.0;
    for g in grads {
        for w in &g.weight {
            s += w.frobenius_sq();
        }
        if let Some(b) = &g.bias {
            s += b.iter().map(|x| x * x).sum::<f64>();
        }
    }
    s.sqrt()
}

fn mask_grad(g: &mut RealMatrix, mask: &Option<RealMatrix>) {
    if let Some(m) = mask {
        for (x, k) in g.as_mut_slice().iter_mut().zip(m.as_slice()) {
            if *k == 0.0 {
                *x = 0.0;
            }
        }
    }
}

fn check_finite(grads: &[LayerGrad]) -> Result<()> {
    for (k, g) in grads.iter().enumerate() {
        let bad = g.weight.iter().any(|w| w.as_slice().iter().any(|x| !x.is_finite()))
            || g.bias.as_ref().is_some_and(|b| b.iter().any(|x| !x.is_finite()));
        if bad {
            return Err(Error::Numeric(format!("non-finite gradient in layer {}", k + 1)));
        }
    }
    Ok(())
}

/// One SGD step on `batch`: v ← m·v + g, W ← W − lr·v, then masks are
/// re-applied.
///
/// Without momentum or clipping the update is applied layer by layer as
/// soon as that layer's gradient is known, so no full gradient is ever held
/// in memory.
pub fn backward_and_step(
    model: &mut MLPModel,
    opt: &mut Optimizer,
    batch: &LabeledDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let lr = cfg.lr_at(epoch);
    if cfg.momentum == 0.0 && cfg.grad_clip.is_none() && !cfg.stable_rank_active(epoch) {
        return streaming_step(model, batch, cfg, lr);
    }
    let mut grads = collect_grads(model, batch)?;
    model.add_penalty_grads(&mut grads, cfg, epoch)?;
    check_finite(&grads)?;
    for (g, l) in grads.iter_mut().zip(&model.layers) {
        if let Some(gw) = g.weight.first_mut() {
            if !l.weight.is_split() {
                mask_grad(gw, &l.mask);
            }
        }
    }
    if let Some(clip) = cfg.grad_clip {
        let n = global_norm(&grads);
        if n > clip {
            let f = clip / n;
            for g in &mut grads {
                g.weight.iter_mut().for_each(|w| *w = w.scale(f));
                if let Some(b) = &mut g.bias {
                    b.iter_mut().for_each(|x| *x *= f);
                }
            }
        }
    }
    let shapes_match = opt.velocity.len() == grads.len()
        && opt.velocity.iter().zip(&grads).all(|(v, g)| {
            v.len() == g.weight.len() && v.iter().zip(&g.weight).all(|(a, b)| a.0.shape() == b.shape())
        });
    if !shapes_match {
        opt.velocity = grads
            .iter()
            .map(|g| {
                g.weight
                    .iter()
                    .enumerate()
                    .map(|(i, w)| {
                        let b = if i == 0 { g.bias.as_ref().map(|b| vec![0.0; b.len()]) } else { None };
                        (RealMatrix::zeros(w.rows(), w.cols()), b)
                    })
                    .collect()
            })
            .collect();
    }
    for ((layer, g), vel) in model.layers.iter_mut().zip(grads).zip(&mut opt.velocity) {
        for (i, (w, gw)) in layer.weight.matrices_mut().into_iter().zip(&g.weight).enumerate() {
            let (vw, vb) = &mut vel[i];
            for ((x, v), d) in w.as_mut_slice().iter_mut().zip(vw.as_mut_slice()).zip(gw.as_slice()) {
                *v = cfg.momentum * *v + d;
                *x -= lr * *v;
            }
            if i == 0 {
                if let (Some(b), Some(gb), Some(vb)) = (&mut layer.bias, &g.bias, vb) {
                    for ((x, v), d) in b.iter_mut().zip(vb.iter_mut()).zip(gb) {
                        *v = cfg.momentum * *v + d;
                        *x -= lr * *v;
                    }
                }
            }
        }
        layer.apply_mask();
    }
    Ok(())
}

fn streaming_step(model: &mut MLPModel, batch: &LabeledDataset, cfg: &TrainConfig, lr: f64) -> Result<()> {
    backprop(model, batch, |k, layer, local| {
        let non_finite = || Error::Numeric(format!("non-finite gradient in layer {}", k + 1));
        if local.dz.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(non_finite());
        }
        if let (Some(b), Some(gb)) = (&mut layer.bias, &local.bias) {
            for (x, d) in b.iter_mut().zip(gb) {
                *x -= lr * d;
            }
        }
        if let (Weight::Dense(w), None) = (&mut layer.weight, &layer.mask) {
            // W ← W − lr·penalty′(W) − lr·dzᵀA, without forming dzᵀA.
            shrink(w, cfg, lr);
            gemm(w, local.dz.view().transpose(), local.input.view(), -lr, true);
            return Ok(());
        }
        let mut g = local.materialize(layer);
        check_finite(std::slice::from_ref(&g)).map_err(|_| non_finite())?;
        let split = layer.weight.is_split();
        let mask = layer.mask.take();
        for (w, gw) in layer.weight.matrices_mut().into_iter().zip(&mut g.weight) {
            if !split {
                mask_grad(gw, &mask);
            }
            for (x, d) in w.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                let reg = cfg.mu1 * sign(*x) + 2.0 * cfg.mu2 * *x;
                *x -= lr * (d + reg);
            }
        }
        layer.mask = mask;
        layer.apply_mask();
        Ok(())
    })
}

fn shrink(w: &mut RealMatrix, cfg: &TrainConfig, lr: f64) {
    if cfg.mu1 == 0.0 && cfg.mu2 == 0.0 {
        return;
    }
    for x in w.as_mut_slice() {
        *x -= lr * (cfg.mu1 * sign(*x) + 2.0 * cfg.mu2 * *x);
    }
}

/// One row of the per-epoch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub layer_nnz: Vec<usize>,
    /// Named values contributed by hooks (e.g. retained ranks).
    pub extra: Vec<(String, f64)>,
}

/// Called after every epoch; may edit the model (e.g. prune it).
pub trait EpochHook {
    fn after_epoch(&mut self, epoch: usize, model: &mut MLPModel, opt: &mut Optimizer) -> Result<Vec<(String, f64)>>;
}

impl<F> EpochHook for F
where
    F: FnMut(usize, &mut MLPModel, &mut Optimizer) -> Result<Vec<(String, f64)>>,
{
    fn after_epoch(&mut self, epoch: usize, model: &mut MLPModel, opt: &mut Optimizer) -> Result<Vec<(String, f64)>> {
        self(epoch, model, opt)
    }
}

/// Mini-batch SGD for `cfg.epochs` epochs with a seeded reshuffle per
/// epoch. Epoch `e` uses the permutation drawn from stream `e` of
/// `cfg.seed`.
pub fn train(
    model: &mut MLPModel,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    hooks: &mut [&mut dyn EpochHook],
) -> Result<Vec<EpochRecord>> {
    train_epochs(model, data, test, cfg, 0..cfg.epochs, &mut Optimizer::new(), hooks)
}

/// [`train`] over an explicit epoch range with caller-held optimizer state.
pub fn train_epochs(
    model: &mut MLPModel,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    epochs: std::ops::Range<usize>,
    opt: &mut Optimizer,
    hooks: &mut [&mut dyn EpochHook],
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    model.check_labels(data)?;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in epochs {
        let mut r = rng::substream(cfg.seed, epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            backward_and_step(model, opt, &data.subset(chunk), cfg, epoch)?;
        }
        let mut extra = Vec::new();
        for h in hooks.iter_mut() {
            extra.extend(h.after_epoch(epoch, model, opt)?);
        }
        let (loss, train_acc, test_acc) = if cfg.log_metrics {
            let (ce, acc) = model.evaluate(data)?;
            let (l1, l2, sr) = model.regularizer(cfg, epoch)?;
            let loss = LossBreakdown { cross_entropy: ce, l1_term: l1, l2_term: l2, stable_rank_term: sr, total: ce + l1 + l2 + sr };
            let test_acc = test.map(|t| model.accuracy(t)).transpose()?;
            (loss, acc, test_acc)
        } else {
            (LossBreakdown::default(), f64::NAN, None)
        };
        log.push(EpochRecord {
            epoch,
            lr: cfg.lr_at(epoch),
            loss,
            train_acc,
            test_acc,
            layer_nnz: model.layers.iter().map(|l| l.weight.nnz()).collect(),
            extra,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: RealMatrix, act: Activation, on_final: bool) -> MLPModel {
        MLPModel::new(vec![Layer { weight: Weight::Dense(w), bias: None, mask: None }], act, on_final).unwrap()
    }

    #[test]
    fn identity_abs_forward() {
        let m = single(RealMatrix::identity(2), Activation::Abs, true);
        let (z, p) = m.forward(&[-1.0, 2.0]).unwrap();
        assert_eq!(z, vec![1.0, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn margins() {
        assert_eq!(margin(&[3.0, 1.0, 0.0], 0), 2.0);
        assert_eq!(margin(&[1.0, 1.0], 0), 0.0);
        assert_eq!(margin(&[0.0, 5.0], 0), -5.0);
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn schedules() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_schedule: LrSchedule::Step { factor: 0.96, period: 4 },
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(8), 0.96f64.powi(2));
        assert_eq!(cfg.lr_at(3), 1.0);
        let cos = TrainConfig { learning_rate: 1.0, lr_schedule: LrSchedule::Cosine, epochs: 10, ..Default::default() };
        assert_eq!(cos.lr_at(0), 1.0);
        assert!((cos.lr_at(5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stable_rank_of_scaled_identity() {
        let w = RealMatrix::identity(2).scale(2.0);
        assert!((stable_rank(&w).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_leaves_model() {
        let mut r = rng::seeded(1);
        let mut m = MLPModel::init(&[3, 4, 2], Activation::Relu, false, Init::He, true, &mut r).unwrap();
        let before = m.clone();
        let x = RealMatrix::gaussian(5, 3, 1.0, &mut r);
        let d = LabeledDataset::new(x, vec![0, 1, 0, 1, 1], 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, mu1: 0.1, mu2: 0.1, ..Default::default() };
        backward_and_step(&mut m, &mut Optimizer::new(), &d, &cfg, 0).unwrap();
        assert_eq!(m, before);
    }
}
