//! End-to-end training of the screen.
//!
//! Alternates two half-steps starting from a spherical k-means clustering:
//!
//! 1. with candidate sets fixed, SGD on the cluster weights through a
//!    Gumbel-softmax relaxation of the cluster choice, using the
//!    straight-through estimator (hard choice forward, soft gradient back)
//!    and a hinge penalty on the moving-average candidate size;
//! 2. with the clustering fixed, rebuild every candidate set with the
//!    greedy knapsack.

use std::fmt::{self, Write as _};

use crate::bench::precision_at_k;
use crate::error::{Error, Result};
use crate::kmeans::{spherical_kmeans, DEFAULT_MAX_ITERS};
use crate::knapsack::{assignment_loss, capacity, capacity_used, collect_stats, greedy_knapsack};
use crate::rng::Rng;
use crate::screen::{assign_hard, CandidateSet, ScreeningModel};
use crate::softmax::{label_contexts, ContextSet, Labels, SoftmaxLayer};
use crate::tensor::{argmax, dot, DenseMatrix, DenseVector};

/// Smallest probability fed to `ln` in the relaxation.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Full alternating optimization.
    L2s,
    /// Spherical k-means clusters plus a single knapsack pass.
    Kmeans,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Number of clusters `r`.
    pub clusters: usize,
    /// Average candidate-set budget `B`.
    pub budget: f64,
    /// Weight on wasted candidates, in (0, 1).
    pub lambda: f64,
    /// Budget penalty weight.
    pub gamma: f64,
    /// Outer alternations `T`.
    pub outer_iters: usize,
    pub epochs_per_iter: usize,
    /// Base step size; step `n` uses `learning_rate / sqrt(n)`.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Decay of the moving-average candidate size.
    pub ema_decay: f64,
    pub seed: u64,
    /// Size of the ground-truth label sets.
    pub top_k: usize,
    pub kmeans_iters: usize,
    /// Training contexts used for the logged precision probe.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::L2s,
            clusters: 100,
            budget: 100.0,
            lambda: 0.0003,
            gamma: 10.0,
            outer_iters: 20,
            epochs_per_iter: 1,
            learning_rate: 0.05,
            batch_size: 64,
            temperature: 1.0,
            ema_decay: 0.9,
            seed: 0,
            top_k: 5,
            kmeans_iters: DEFAULT_MAX_ITERS,
            probe_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda {} outside (0, 1)", self.lambda));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma {} must be >= 0", self.gamma));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature {} must be > 0", self.temperature));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad(format!("ema decay {} outside [0, 1)", self.ema_decay));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate {} must be >= 0", self.learning_rate));
        }
        if self.clusters == 0 || self.batch_size == 0 || self.top_k == 0 {
            return bad("clusters, batch size and top-k must all be >= 1".into());
        }
        if !(self.budget >= self.top_k as f64) {
            return bad(format!(
                "budget {} below top-k {}; every cluster is seeded with top-k labels",
                self.budget, self.top_k
            ));
        }
        Ok(())
    }

    /// Outer iterations actually run; k-means mode runs none.
    pub fn effective_outer_iters(&self) -> usize {
        match self.mode {
            TrainMode::L2s => self.outer_iters,
            TrainMode::Kmeans => 0,
        }
    }
}

/// Mutable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: DenseMatrix,
    pub sets: Vec<CandidateSet>,
    /// Moving average of the per-batch hard candidate size.
    pub moving_size: f64,
    /// SGD steps taken so far.
    pub step: usize,
    pub rng: Rng,
}

impl TrainState {
    pub fn new(weights: DenseMatrix, vocab: usize, rng: Rng) -> Self {
        let r = weights.rows();
        Self {
            weights,
            sets: vec![CandidateSet::empty(vocab); r],
            moving_size: 0.0,
            step: 0,
            rng,
        }
    }
}

/// `P(t|h)`: softmax over `v_t · h`.
pub fn cluster_probs(weights: &DenseMatrix, h: &[f64]) -> DenseVector {
    let scores: Vec<f64> = weights.iter_rows().map(|v| dot(v, h)).collect();
    crate::softmax::probabilities(&scores)
}

/// Gumbel-softmax relaxation `softmax((ln P + g) / τ)`.
pub fn gumbel_softmax_sample(probs: &[f64], gumbel: &[f64], temperature: f64) -> Result<DenseVector> {
    if probs.len() != gumbel.len() {
        return Err(Error::dims(
            "gumbel_softmax_sample",
            format!("{} probabilities", probs.len()),
            format!("{} gumbel draws", gumbel.len()),
        ));
    }
    let y: Vec<f64> = probs
        .iter()
        .zip(gumbel)
        .map(|(p, g)| (p.max(PROB_FLOOR).ln() + g) / temperature)
        .collect();
    Ok(crate::softmax::probabilities(&y))
}

/// Hard one-hot of a soft sample and the chosen index.
pub fn straight_through(p: &[f64]) -> (Vec<f64>, usize) {
    let idx = argmax(p).expect("non-empty distribution");
    let mut hard = vec![0.0; p.len()];
    hard[idx] = 1.0;
    (hard, idx)
}

/// Mismatch cost of sending a context with true labels `y` to each cluster:
/// `(k - hits) + λ·(|c_t| - hits)`.
pub fn mismatch_costs(sets: &[CandidateSet], y: &[u32], lambda: f64) -> Vec<f64> {
    let k = y.len() as f64;
    sets.iter()
        .map(|c| {
            let hits = c.hits(y) as f64;
            (k - hits) + lambda * (c.len() as f64 - hits)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    /// Mean hard mismatch plus `γ·max(0, L̄_mov − B)`.
    pub loss: f64,
    /// Gradient of the relaxed batch objective with respect to the cluster weights.
    pub grad: DenseMatrix,
    /// Mean candidate size of the hard (sampled) clusters.
    pub hard_size: f64,
}

/// Forward and backward pass over one mini-batch.
///
/// Per sample: `p = softmax((ln P + g)/τ)`, hard cluster `t* = argmax p`,
/// forward loss `a[t*]`. The backward pass differentiates the relaxed
/// objective `(1/n) Σ_i Σ_t p_t·(a_t + γ·1[L̄_mov > B]·|c_t| / n)`, so
/// `∂/∂p_t = (a_t + γ·gate·|c_t|/n) / n`, chained through the softmax and
/// `∂ ln P(t|h) / ∂v_j = (δ_tj − P_j)·h`.
///
/// `gumbel` holds one row of `r` draws per batch entry.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_and_grad(
    weights: &DenseMatrix,
    sets: &[CandidateSet],
    labels: &Labels,
    contexts: &ContextSet,
    batch: &[usize],
    gumbel: &DenseMatrix,
    moving_size: f64,
    config: &TrainConfig,
) -> Result<BatchGrad> {
    let (r, d) = weights.shape();
    let n = batch.len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if sets.len() != r || gumbel.shape() != (n, r) || contexts.dim() != d {
        return Err(Error::dims(
            "batch_loss_and_grad",
            format!("r = {r}, d = {d}, batch = {n}"),
            format!(
                "{} sets, gumbel {}x{}, contexts dim {}",
                sets.len(),
                gumbel.rows(),
                gumbel.cols(),
                contexts.dim()
            ),
        ));
    }
    let gate = if moving_size > config.budget { 1.0 } else { 0.0 };
    let tau = config.temperature;
    let sizes: Vec<f64> = sets.iter().map(|c| c.len() as f64).collect();
    let inv_n = 1.0 / n as f64;

    let mut grad = DenseMatrix::zeros(r, d);
    let mut mismatch = 0.0;
    let mut hard_size = 0.0;
    let mut dy = vec![0.0; r];
    for (b, &i) in batch.iter().enumerate() {
        let h = contexts.get(i);
        let probs = cluster_probs(weights, h);
        let p = gumbel_softmax_sample(&probs, gumbel.row(b), tau)?;
        let (_, hard) = straight_through(&p);
        let costs = mismatch_costs(sets, labels.row(i), config.lambda);
        mismatch += costs[hard];
        hard_size += sizes[hard];

        // ∂J/∂p_t, then through p = softmax(y)
        let g_p: Vec<f64> = costs
            .iter()
            .zip(&sizes)
            .map(|(a, c)| (a + config.gamma * gate * c * inv_n) * inv_n)
            .collect();
        let mean_g: f64 = p.iter().zip(&g_p).map(|(pt, gt)| pt * gt).sum();
        for t in 0..r {
            dy[t] = p[t] * (g_p[t] - mean_g);
        }
        // y_t = (ln P_t + g_t)/τ
        let sum_dy: f64 = dy.iter().sum();
        for j in 0..r {
            let coef = (dy[j] - probs[j] * sum_dy) / tau;
            if coef != 0.0 {
                for (gv, x) in grad.row_mut(j).iter_mut().zip(h) {
                    *gv += coef * x;
                }
            }
        }
    }
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient { batch: 0 });
    }
    let penalty = config.gamma * (moving_size - config.budget).max(0.0);
    Ok(BatchGrad {
        loss: mismatch * inv_n + penalty,
        grad,
        hard_size: hard_size * inv_n,
    })
}

/// One pass of shuffled mini-batch SGD over `indices` with the candidate sets fixed.
pub fn sgd_epoch(
    state: &mut TrainState,
    contexts: &ContextSet,
    labels: &Labels,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<()> {
    let r = state.weights.rows();
    let mut order = indices.to_vec();
    state.rng.shuffle(&mut order);
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let mut noise = DenseMatrix::zeros(batch.len(), r);
        state.rng.fill_gumbel(noise.as_mut_slice());
        let out = batch_loss_and_grad(
            &state.weights,
            &state.sets,
            labels,
            contexts,
            batch,
            &noise,
            state.moving_size,
            config,
        )
        .map_err(|e| match e {
            Error::NonFiniteGradient { .. } => Error::NonFiniteGradient { batch: b },
            other => other,
        })?;
        state.step += 1;
        let lr = config.learning_rate / (state.step as f64).sqrt();
        if lr != 0.0 {
            for (v, g) in state.weights.as_mut_slice().iter_mut().zip(out.grad.as_slice()) {
                *v -= lr * g;
            }
        }
        if !state.weights.is_finite() {
            return Err(Error::NonFiniteGradient { batch: b });
        }
        let beta = config.ema_decay;
        state.moving_size = beta * state.moving_size + (1.0 - beta) * out.hard_size;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Init,
    Sgd,
    Knapsack,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Sgd => "sgd",
            Phase::Knapsack => "knapsack",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub phase: Phase,
    /// Mismatch objective of the hard clustering with the current sets.
    pub loss: f64,
    /// Mean candidate size under the hard clustering.
    pub mean_size: f64,
    pub moving_size: f64,
    /// Screened precision@k on the probe slice.
    pub probe_precision: f64,
    pub capacity_used: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Tab-separated, one line per half-step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("#step\teq7_loss\tlbar_hard\tlbar_mov\tp_at_k_probe\n");
        for row in &self.rows {
            writeln!(
                out,
                "{}/{}\t{}\t{}\t{}\t{}",
                row.iteration, row.phase, row.loss, row.mean_size, row.moving_size, row.probe_precision
            )
            .expect("write to String");
        }
        out
    }

    pub fn knapsack_rows(&self) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(|r| r.phase == Phase::Knapsack)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: ScreeningModel,
    pub log: TrainLog,
    pub moving_size: f64,
}

/// Labels the contexts with the exact softmax and trains.
pub fn train(layer: &SoftmaxLayer, contexts: &ContextSet, config: &TrainConfig) -> Result<Trained> {
    config.validate()?;
    let labels = label_contexts(layer, contexts, config.top_k)?;
    train_with_labels(layer, contexts, &labels, config)
}

/// Training with precomputed ground-truth labels (`labels.k()` must equal `config.top_k`).
pub fn train_with_labels(
    layer: &SoftmaxLayer,
    contexts: &ContextSet,
    labels: &Labels,
    config: &TrainConfig,
) -> Result<Trained> {
    config.validate()?;
    let n = contexts.len();
    let r = config.clusters;
    let vocab = layer.vocab_size();
    if labels.len() != n || labels.k() != config.top_k {
        return Err(Error::dims(
            "train",
            format!("{n} contexts, top-k {}", config.top_k),
            format!("{} label rows of size {}", labels.len(), labels.k()),
        ));
    }
    if contexts.dim() != layer.dim() {
        return Err(Error::dims(
            "train",
            format!("layer dim {}", layer.dim()),
            format!("contexts of dim {}", contexts.dim()),
        ));
    }
    if n < r {
        return Err(Error::InvalidArgument(format!("need N >= r, got N = {n}, r = {r}")));
    }

    let root = Rng::new(config.seed);
    let km = spherical_kmeans(contexts, r, &mut root.fork(1), config.kmeans_iters)?;
    let mut state = TrainState::new(km.centroids, vocab, root.fork(2));

    let all: Vec<usize> = (0..n).collect();
    let probe = probe_slice(n, config.probe_size);
    let mut log = TrainLog::default();
    let mut half_step = 0;
    let mut record = |state: &TrainState, iteration: usize, phase: Phase, log: &mut TrainLog| {
        let row = evaluate(layer, contexts, labels, &probe, state, iteration, phase, config)?;
        if row.loss.is_nan() {
            return Err(Error::NanLoss { step: half_step });
        }
        half_step += 1;
        log.rows.push(row);
        Ok(())
    };

    record(&state, 0, Phase::Init, &mut log)?;
    let outer = config.effective_outer_iters();
    if outer == 0 {
        knapsack_step(&mut state, contexts, labels, config)?;
        record(&state, 0, Phase::Knapsack, &mut log)?;
    }
    for it in 1..=outer {
        for _ in 0..config.epochs_per_iter {
            sgd_epoch(&mut state, contexts, labels, &all, config)?;
        }
        record(&state, it, Phase::Sgd, &mut log)?;
        knapsack_step(&mut state, contexts, labels, config)?;
        record(&state, it, Phase::Knapsack, &mut log)?;
    }

    let model = ScreeningModel::new(state.weights, state.sets, config.budget)?;
    Ok(Trained {
        model,
        log,
        moving_size: state.moving_size,
    })
}

/// Rebuild every candidate set for the current hard clustering.
pub fn knapsack_step(
    state: &mut TrainState,
    contexts: &ContextSet,
    labels: &Labels,
    config: &TrainConfig,
) -> Result<()> {
    let r = state.weights.rows();
    let vocab = state.sets[0].vocab();
    let assignments = assign_hard(&state.weights, contexts);
    let stats = collect_stats(&assignments, labels, r, vocab)?;
    state.sets = greedy_knapsack(&stats, config.budget, config.lambda, config.top_k)?;
    Ok(())
}

fn probe_slice(n: usize, size: usize) -> Vec<usize> {
    let size = size.min(n);
    if size == 0 {
        return Vec::new();
    }
    (0..size).map(|j| j * n / size).collect()
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    layer: &SoftmaxLayer,
    contexts: &ContextSet,
    labels: &Labels,
    probe: &[usize],
    state: &TrainState,
    iteration: usize,
    phase: Phase,
    config: &TrainConfig,
) -> Result<LogRow> {
    let r = state.weights.rows();
    let vocab = layer.vocab_size();
    let assignments = assign_hard(&state.weights, contexts);
    let stats = collect_stats(&assignments, labels, r, vocab)?;
    let loss = assignment_loss(&stats, &state.sets, config.lambda)?;
    let used = capacity_used(&stats, &state.sets);
    let mean_size = used as f64 / contexts.len() as f64;

    let probe_precision = if probe.is_empty() {
        f64::NAN
    } else {
        let model = ScreeningModel::new(state.weights.clone(), state.sets.clone(), config.budget)?;
        let k = config.top_k;
        let mut total = 0.0;
        for &i in probe {
            let pred = model.screened_topk(layer, contexts.get(i), k)?;
            let truth: Vec<usize> = labels.row(i).iter().map(|&s| s as usize).collect();
            total += precision_at_k(&pred.topk.indices, &truth, k);
        }
        total / probe.len() as f64
    };

    Ok(LogRow {
        iteration,
        phase,
        loss,
        mean_size,
        moving_size: state.moving_size,
        probe_precision,
        capacity_used: used,
        capacity: capacity(&stats, config.budget),
    })
}
