//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use l2s_core::knapsack::ClusterStats;
use l2s_core::{CandidateSet, ContextSet, DenseMatrix, DenseVector, Labels, Rng, SoftmaxLayer};

pub fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::new(rows, cols, (0..rows * cols).map(|_| scale * rng.normal()).collect()).unwrap()
}

pub fn random_layer(rng: &mut Rng, l: usize, d: usize) -> SoftmaxLayer {
    let w = random_matrix(rng, l, d, 1.0);
    let b = DenseVector::new((0..l).map(|_| rng.normal()).collect()).unwrap();
    SoftmaxLayer::new(w, b).unwrap()
}

pub fn random_contexts(rng: &mut Rng, n: usize, d: usize) -> ContextSet {
    ContextSet::new(random_matrix(rng, n, d, 1.0))
}

/// `k` distinct labels below `vocab`.
pub fn distinct_labels(rng: &mut Rng, vocab: usize, k: usize) -> Vec<u32> {
    let mut all: Vec<u32> = (0..vocab as u32).collect();
    rng.shuffle(&mut all);
    all.truncate(k);
    all
}

pub fn random_set(rng: &mut Rng, vocab: usize, density: f64) -> CandidateSet {
    let ids = (0..vocab as u32).filter(|_| rng.uniform_open() < density);
    CandidateSet::from_indices(vocab, ids.collect::<Vec<_>>()).unwrap()
}

/// Top-k by fully sorting scalar-loop logits.
pub fn brute_force_topk(layer: &SoftmaxLayer, h: &[f64], k: usize) -> Vec<usize> {
    let (l, d) = layer.weights().shape();
    let mut scored: Vec<(usize, f64)> = (0..l)
        .map(|s| {
            let w = layer.weights().row(s);
            // same association order as the library's unrolled dot product
            let mut acc = [0.0; 4];
            let chunks = d / 4;
            for c in 0..chunks {
                for j in 0..4 {
                    acc[j] += w[4 * c + j] * h[4 * c + j];
                }
            }
            let mut tail = 0.0;
            for j in 4 * chunks..d {
                tail += w[j] * h[j];
            }
            ((acc[0] + acc[1]) + (acc[2] + acc[3]) + tail + layer.bias()[s], s)
        })
        .map(|(x, s)| (s, x))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(s, _)| s).collect()
}

fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    x.iter().map(|v| v - z).collect()
}

/// Relaxed batch objective with fixed noise:
/// `(1/n) Σ_i Σ_t p_ti · (a_ti + γ·gate·|c_t| / n)`,
/// `p_i = softmax((log softmax(V h_i) + g_i) / τ)`.
#[allow(clippy::too_many_arguments)]
pub fn soft_surrogate(
    v: &[f64],
    r: usize,
    d: usize,
    sets: &[CandidateSet],
    labels: &[Vec<u32>],
    contexts: &[Vec<f64>],
    gumbel: &[Vec<f64>],
    lambda: f64,
    gamma: f64,
    gate: bool,
    tau: f64,
) -> f64 {
    let n = contexts.len() as f64;
    let mut total = 0.0;
    for ((h, y), g) in contexts.iter().zip(labels).zip(gumbel) {
        let scores: Vec<f64> = (0..r)
            .map(|t| (0..d).map(|j| v[t * d + j] * h[j]).sum())
            .collect();
        let logp = log_softmax(&scores);
        let y_relaxed: Vec<f64> = logp.iter().zip(g).map(|(lp, gt)| (lp + gt) / tau).collect();
        let p: Vec<f64> = log_softmax(&y_relaxed).iter().map(|x| x.exp()).collect();
        for t in 0..r {
            let hits = y.iter().filter(|&&s| sets[t].contains(s as usize)).count() as f64;
            let size = sets[t].len() as f64;
            let a = (y.len() as f64 - hits) + lambda * (size - hits);
            let penalty = if gate { gamma * size / n } else { 0.0 };
            total += p[t] * (a + penalty);
        }
    }
    total / n
}

pub fn labels_from(rows: &[Vec<u32>]) -> Labels {
    Labels::new(rows[0].len(), rows.to_vec()).unwrap()
}

/// Value of a label in a cluster: `pos - λ·neg`.
pub fn pair_value(stats: &ClusterStats, t: usize, s: usize, lambda: f64) -> f64 {
    stats.pos(t, s) as f64 - lambda * stats.neg(t, s) as f64
}

pub fn sets_value(stats: &ClusterStats, sets: &[CandidateSet], lambda: f64) -> f64 {
    let mut v = 0.0;
    for (t, c) in sets.iter().enumerate() {
        if stats.sizes()[t] == 0 {
            continue;
        }
        for &s in c.indices() {
            v += pair_value(stats, t, s as usize, lambda);
        }
    }
    v
}

/// The `k` most frequent labels of a cluster (count descending, id ascending).
pub fn seed_labels(stats: &ClusterStats, t: usize, k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..stats.vocab()).collect();
    ids.sort_by(|&a, &b| stats.pos(t, b).cmp(&stats.pos(t, a)).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

/// Exhaustive 0/1 knapsack over every positive-count (cluster, label) pair,
/// with each non-empty cluster's `k_seed` most frequent labels forced in.
/// Returns `None` when more than `max_items` free items would need enumerating.
pub fn exhaustive_knapsack(
    stats: &ClusterStats,
    budget: f64,
    lambda: f64,
    k_seed: usize,
    max_items: usize,
) -> Option<f64> {
    let cap = (budget * stats.total() as f64).floor() as u64;
    let mut forced_value = 0.0;
    let mut forced_weight = 0u64;
    let mut items = Vec::new();
    for t in 0..stats.clusters() {
        let w = stats.sizes()[t] as u64;
        if w == 0 {
            continue;
        }
        let seeds = seed_labels(stats, t, k_seed);
        for &s in &seeds {
            forced_value += pair_value(stats, t, s, lambda);
            forced_weight += w;
        }
        for s in 0..stats.vocab() {
            if stats.pos(t, s) > 0 && !seeds.contains(&s) {
                items.push((pair_value(stats, t, s, lambda), w));
            }
        }
    }
    if items.len() > max_items {
        return None;
    }
    let room = cap.saturating_sub(forced_weight);
    let mut best = 0.0f64;
    for mask in 0u32..(1u32 << items.len()) {
        let mut v = 0.0;
        let mut w = 0u64;
        for (j, &(iv, iw)) in items.iter().enumerate() {
            if mask >> j & 1 == 1 {
                v += iv;
                w += iw;
            }
        }
        if w <= room && v > best {
            best = v;
        }
    }
    Some(forced_value + best)
}

pub fn bits_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}
