//! Precision, speedup and perplexity measurements.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::screen::ScreeningModel;
use crate::softmax::{exact_topk, label_contexts, log_sum_exp, logits, ContextSet, SoftmaxLayer};
use crate::svd::truncated_svd;
use crate::tensor::dot;
use crate::train::{train_with_labels, TrainConfig};

/// `|approx[..k] ∩ exact[..k]| / k`. Both slices are expected to hold at least `k` entries.
pub fn precision_at_k(approx: &[usize], exact: &[usize], k: usize) -> f64 {
    debug_assert!(k > 0 && approx.len() >= k && exact.len() >= k);
    let truth = &exact[..k.min(exact.len())];
    let shared = approx.iter().take(k).filter(|s| truth.contains(s)).count();
    shared as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Precision cut-offs, e.g. `[1, 5]`.
    pub ks: Vec<usize>,
    /// Timed passes; 0 skips timing entirely.
    pub repetitions: usize,
    /// Timed queries per pass; `None` times every context.
    pub timing_queries: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5],
            repetitions: 5,
            timing_queries: Some(2000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    /// Median per-query nanoseconds of the exact top-k.
    pub exact_ns: f64,
    pub screened_ns: f64,
}

impl Timing {
    pub fn speedup(&self) -> f64 {
        self.exact_ns / self.screened_ns
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub queries: usize,
    pub vocab: usize,
    pub clusters: usize,
    /// `(k, P@k)` in the order requested.
    pub precision: Vec<(usize, f64)>,
    /// `L̄`, mean candidate-set size of the routed clusters.
    pub mean_candidate_size: f64,
    /// `L / (r + L̄)`.
    pub logit_speedup: f64,
    /// `L` over the measured mean inner products per screened query.
    pub counter_speedup: f64,
    pub fallback_rate: f64,
    pub timing: Option<Timing>,
}

impl BenchReport {
    pub fn precision_at(&self, k: usize) -> Option<f64> {
        self.precision.iter().find(|(kk, _)| *kk == k).map(|(_, p)| *p)
    }

    /// `name<TAB>value` lines; wall-clock lines carry a `time.` prefix.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, value: String| {
            writeln!(out, "{name}\t{value}").expect("write to String");
        };
        line("queries", self.queries.to_string());
        line("vocab", self.vocab.to_string());
        line("clusters", self.clusters.to_string());
        for (k, p) in &self.precision {
            line(&format!("p_at_{k}"), p.to_string());
        }
        line("mean_candidate_size", self.mean_candidate_size.to_string());
        line("logit_speedup", self.logit_speedup.to_string());
        line("counter_speedup", self.counter_speedup.to_string());
        line("fallback_rate", self.fallback_rate.to_string());
        if let Some(t) = &self.timing {
            line("time.exact_ns", t.exact_ns.to_string());
            line("time.screened_ns", t.screened_ns.to_string());
            line("time.speedup", t.speedup().to_string());
        }
        out
    }
}

pub fn run_bench(
    model: &ScreeningModel,
    layer: &SoftmaxLayer,
    contexts: &ContextSet,
    config: &BenchConfig,
) -> Result<BenchReport> {
    let n = contexts.len();
    let vocab = layer.vocab_size();
    if n == 0 {
        return Err(Error::InvalidArgument("benchmark needs at least one context".into()));
    }
    if model.vocab() != vocab || model.dim() != layer.dim() || contexts.dim() != layer.dim() {
        return Err(Error::dims(
            "run_bench",
            format!("layer {vocab}x{}", layer.dim()),
            format!(
                "model over vocab {} dim {}, contexts dim {}",
                model.vocab(),
                model.dim(),
                contexts.dim()
            ),
        ));
    }
    let k_max = config.ks.iter().copied().max().unwrap_or(0);
    if config.ks.contains(&0) || k_max == 0 || k_max > vocab {
        return Err(Error::KOutOfRange { k: k_max, len: vocab });
    }

    struct Query {
        precision: Vec<f64>,
        candidates: usize,
        inner_products: usize,
        fallback: bool,
    }
    let queries: Vec<Query> = (0..n)
        .into_par_iter()
        .map(|i| {
            let h = contexts.get(i);
            let exact = exact_topk(layer, h, k_max)?;
            let pred = model.screened_topk(layer, h, k_max)?;
            Ok(Query {
                precision: config
                    .ks
                    .iter()
                    .map(|&k| precision_at_k(&pred.topk.indices, &exact.indices, k))
                    .collect(),
                candidates: pred.candidate_count,
                inner_products: pred.inner_products,
                fallback: pred.fallback,
            })
        })
        .collect::<Result<_>>()?;

    let nf = n as f64;
    let precision = config
        .ks
        .iter()
        .enumerate()
        .map(|(j, &k)| (k, queries.iter().map(|q| q.precision[j]).sum::<f64>() / nf))
        .collect();
    let mean_candidate_size = queries.iter().map(|q| q.candidates as f64).sum::<f64>() / nf;
    let mean_products = queries.iter().map(|q| q.inner_products as f64).sum::<f64>() / nf;
    let fallback_rate = queries.iter().filter(|q| q.fallback).count() as f64 / nf;

    let timing = if config.repetitions == 0 {
        None
    } else {
        let m = config.timing_queries.unwrap_or(n).clamp(1, n);
        Some(time_queries(model, layer, contexts, m, k_max, config.repetitions)?)
    };

    Ok(BenchReport {
        queries: n,
        vocab,
        clusters: model.clusters(),
        precision,
        mean_candidate_size,
        logit_speedup: vocab as f64 / (model.clusters() as f64 + mean_candidate_size),
        counter_speedup: vocab as f64 / mean_products,
        fallback_rate,
        timing,
    })
}

/// Single-threaded, one untimed warm-up pass, median over `reps` timed passes.
fn time_queries(
    model: &ScreeningModel,
    layer: &SoftmaxLayer,
    contexts: &ContextSet,
    m: usize,
    k: usize,
    reps: usize,
) -> Result<Timing> {
    let pass_exact = || -> Result<usize> {
        let mut sink = 0;
        for i in 0..m {
            sink ^= exact_topk(layer, contexts.get(i), k)?.indices[0];
        }
        Ok(sink)
    };
    let pass_screened = || -> Result<usize> {
        let mut sink = 0;
        for i in 0..m {
            sink ^= model.screened_topk(layer, contexts.get(i), k)?.topk.indices[0];
        }
        Ok(sink)
    };
    std::hint::black_box(pass_exact()?);
    std::hint::black_box(pass_screened()?);
    let mut exact = Vec::with_capacity(reps);
    let mut screened = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        std::hint::black_box(pass_exact()?);
        exact.push(t.elapsed().as_nanos() as f64 / m as f64);
        let t = Instant::now();
        std::hint::black_box(pass_screened()?);
        screened.push(t.elapsed().as_nanos() as f64 / m as f64);
    }
    Ok(Timing {
        exact_ns: median(&mut exact),
        screened_ns: median(&mut screened).max(f64::MIN_POSITIVE),
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub clusters: usize,
    pub budget: f64,
    pub report: BenchReport,
}

/// Trains one model per cluster count with `B = compute - r`, so that
/// `r + B` stays fixed, and benchmarks each on `eval`.
pub fn cluster_sweep(
    layer: &SoftmaxLayer,
    train: &ContextSet,
    eval: &ContextSet,
    cluster_counts: &[usize],
    compute: f64,
    base: &TrainConfig,
    bench: &BenchConfig,
) -> Result<Vec<SweepRow>> {
    let labels = label_contexts(layer, train, base.top_k)?;
    cluster_counts
        .iter()
        .map(|&r| {
            let budget = compute - r as f64;
            let config = TrainConfig {
                clusters: r,
                budget,
                ..base.clone()
            };
            let trained = train_with_labels(layer, train, &labels, &config)?;
            let report = run_bench(&trained.model, layer, eval, bench)?;
            Ok(SweepRow {
                clusters: r,
                budget,
                report,
            })
        })
        .collect()
}

/// CSV with one row per cluster count. Wall-clock columns appear only when
/// `with_timing` is set.
pub fn sweep_csv(rows: &[SweepRow], with_timing: bool) -> String {
    let ks: Vec<usize> = rows
        .first()
        .map(|r| r.report.precision.iter().map(|(k, _)| *k).collect())
        .unwrap_or_default();
    let mut out = String::from("r,budget,mean_candidate_size");
    for k in &ks {
        write!(out, ",p_at_{k}").expect("write to String");
    }
    out.push_str(",logit_speedup");
    if with_timing {
        out.push_str(",time_screened_ns,time_speedup");
    }
    out.push('\n');
    for row in rows {
        let rep = &row.report;
        write!(out, "{},{},{}", row.clusters, row.budget, rep.mean_candidate_size).expect("write to String");
        for (_, p) in &rep.precision {
            write!(out, ",{p}").expect("write to String");
        }
        write!(out, ",{}", rep.logit_speedup).expect("write to String");
        if with_timing {
            match &rep.timing {
                Some(t) => write!(out, ",{},{}", t.screened_ns, t.speedup()),
                None => write!(out, ",,"),
            }
            .expect("write to String");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerplexityReport {
    pub exact_ppl: f64,
    pub hybrid_ppl: f64,
    pub svd_rank: usize,
    pub positions: usize,
    /// Fraction of targets that fell outside their candidate set.
    pub outside_rate: f64,
}

impl PerplexityReport {
    /// `|hybrid - exact| / exact`.
    pub fn relative_gap(&self) -> f64 {
        (self.hybrid_ppl - self.exact_ppl).abs() / self.exact_ppl
    }

    pub fn to_text(&self) -> String {
        format!(
            "positions\t{}\nsvd_rank\t{}\nexact_ppl\t{}\nhybrid_ppl\t{}\nrelative_gap\t{}\noutside_rate\t{}\n",
            self.positions,
            self.svd_rank,
            self.exact_ppl,
            self.hybrid_ppl,
            self.relative_gap(),
            self.outside_rate
        )
    }
}

/// Perplexity with exact logits inside each position's candidate set and
/// rank-truncated logits `(W̃h + b)_s` outside it.
pub fn hybrid_perplexity(
    model: &ScreeningModel,
    layer: &SoftmaxLayer,
    svd_rank: usize,
    contexts: &ContextSet,
    targets: &[u32],
) -> Result<PerplexityReport> {
    let (vocab, d) = layer.weights().shape();
    if svd_rank == 0 || svd_rank > vocab.min(d) {
        return Err(Error::InvalidArgument(format!(
            "svd rank {svd_rank} outside 1..={}",
            vocab.min(d)
        )));
    }
    if contexts.len() != targets.len() || contexts.is_empty() {
        return Err(Error::dims(
            "hybrid_perplexity",
            format!("{} contexts", contexts.len()),
            format!("{} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::LabelOutOfRange { id: bad as usize, vocab });
    }
    if model.vocab() != vocab || model.dim() != d || contexts.dim() != d {
        return Err(Error::dims(
            "hybrid_perplexity",
            format!("layer {vocab}x{d}"),
            format!(
                "model over vocab {} dim {}, contexts dim {}",
                model.vocab(),
                model.dim(),
                contexts.dim()
            ),
        ));
    }
    let svd = truncated_svd(layer.weights(), svd_rank)?;
    // W̃h = U · (S ⊙ (Vᵀ h))
    let us: Vec<f64> = svd
        .u
        .iter_rows()
        .flat_map(|row| row.iter().zip(&svd.s).map(|(u, s)| u * s).collect::<Vec<_>>())
        .collect();
    let bias = layer.bias();

    let per_position: Vec<(f64, f64, bool)> = (0..contexts.len())
        .into_par_iter()
        .map(|i| {
            let h = contexts.get(i);
            let target = targets[i] as usize;
            let exact = logits(layer, h)?;
            let set = model.set(model.assign_cluster(h)?);
            let proj: Vec<f64> = svd.vt.iter_rows().map(|v| dot(v, h)).collect();
            let hybrid: Vec<f64> = (0..vocab)
                .map(|s| {
                    if set.contains(s) {
                        exact[s]
                    } else {
                        dot(&us[s * svd_rank..(s + 1) * svd_rank], &proj) + bias[s]
                    }
                })
                .collect();
            let nll_exact = log_sum_exp(&exact) - exact[target];
            let nll_hybrid = log_sum_exp(&hybrid) - hybrid[target];
            Ok((nll_exact, nll_hybrid, !set.contains(target)))
        })
        .collect::<Result<_>>()?;

    let n = per_position.len() as f64;
    let exact_nll = per_position.iter().map(|p| p.0).sum::<f64>() / n;
    let hybrid_nll = per_position.iter().map(|p| p.1).sum::<f64>() / n;
    let outside = per_position.iter().filter(|p| p.2).count() as f64 / n;
    Ok(PerplexityReport {
        exact_ppl: exact_nll.exp(),
        hybrid_ppl: hybrid_nll.exp(),
        svd_rank,
        positions: per_position.len(),
        outside_rate: outside,
    })
}
