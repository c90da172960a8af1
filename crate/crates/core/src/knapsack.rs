//! Candidate-set selection under an average-size budget.
//!
//! With the clustering fixed, each (cluster t, label s) pair is a knapsack
//! item. Including it costs `N_t` (every member of the cluster now scores
//! label `s`) and changes the mismatch loss by `-pos + λ·neg`, so its value
//! is `pos - λ·neg`. The capacity is `B·N`.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::screen::CandidateSet;
use crate::softmax::Labels;

/// Per-cluster label counts over a fixed assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    clusters: usize,
    vocab: usize,
    sizes: Vec<usize>,
    pos: Vec<u32>,
}

impl ClusterStats {
    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// `N_t` for every cluster.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Members of cluster `t` whose true top-k contains `s`.
    #[inline]
    pub fn pos(&self, t: usize, s: usize) -> u32 {
        self.pos[t * self.vocab + s]
    }

    /// Members of cluster `t` whose true top-k does not contain `s`.
    #[inline]
    pub fn neg(&self, t: usize, s: usize) -> u32 {
        self.sizes[t] as u32 - self.pos(t, s)
    }

    fn pos_row(&self, t: usize) -> &[u32] {
        &self.pos[t * self.vocab..(t + 1) * self.vocab]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnapsackItem {
    pub cluster: usize,
    pub label: usize,
    pub value: f64,
    pub weight: u64,
}

impl KnapsackItem {
    pub fn ratio(&self) -> f64 {
        self.value / self.weight as f64
    }
}

/// Loss reduction from adding one label to one cluster's candidate set.
#[inline]
pub fn item_value(pos: u32, neg: u32, lambda: f64) -> f64 {
    f64::from(pos) - lambda * f64::from(neg)
}

pub fn collect_stats(
    assignments: &[usize],
    labels: &Labels,
    clusters: usize,
    vocab: usize,
) -> Result<ClusterStats> {
    if assignments.len() != labels.len() {
        return Err(Error::dims(
            "collect_stats",
            format!("{} assignments", assignments.len()),
            format!("{} label rows", labels.len()),
        ));
    }
    let mut sizes = vec![0usize; clusters];
    let mut pos = vec![0u32; clusters * vocab];
    for (i, &t) in assignments.iter().enumerate() {
        if t >= clusters {
            return Err(Error::ClusterOutOfRange { id: t, r: clusters });
        }
        sizes[t] += 1;
        for &s in labels.row(i) {
            let s = s as usize;
            if s >= vocab {
                return Err(Error::LabelOutOfRange { id: s, vocab });
            }
            pos[t * vocab + s] += 1;
        }
    }
    Ok(ClusterStats {
        clusters,
        vocab,
        sizes,
        pos,
    })
}

/// Integer capacity `floor(B·N)`.
pub fn capacity(stats: &ClusterStats, budget: f64) -> u64 {
    (budget * stats.total() as f64).floor() as u64
}

/// `Σ_t N_t · |c_t|`.
pub fn capacity_used(stats: &ClusterStats, sets: &[CandidateSet]) -> u64 {
    stats
        .sizes
        .iter()
        .zip(sets)
        .map(|(&n, c)| n as u64 * c.len() as u64)
        .sum()
}

/// Greedy value/weight knapsack with per-cluster seeding.
///
/// Every non-empty cluster first receives its `k_seed` most frequent true
/// labels; clusters without members receive the globally most frequent
/// ones at no cost. Remaining positive-value items are then taken in
/// decreasing value/weight order (ties: lower cluster, then lower label),
/// skipping any item that no longer fits.
///
/// Plain greedy can lose large items to a small one with a slightly better
/// ratio. The fill is therefore repeated with the `m` most valuable items
/// of one cluster forced in, for every cluster and every `m` above what the
/// plain fill took there (within a fixed work limit), and the most valuable
/// fill wins, the plain one on ties. Items of a cluster share a weight, so
/// its best `m` items are always its `m` most valuable ones.
pub fn greedy_knapsack(
    stats: &ClusterStats,
    budget: f64,
    lambda: f64,
    k_seed: usize,
) -> Result<Vec<CandidateSet>> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside (0, 1)")));
    }
    if !budget.is_finite() || budget < 0.0 {
        return Err(Error::InvalidArgument(format!("budget {budget} must be non-negative")));
    }
    let seed_len = k_seed.min(stats.vocab);
    let n = stats.total() as u64;
    let cap = capacity(stats, budget);
    let seed_cost = n * seed_len as u64;
    if seed_cost > cap {
        return Err(Error::InfeasibleBudget {
            budget,
            required: seed_len as f64,
        });
    }

    let mut members: Vec<Vec<bool>> = vec![vec![false; stats.vocab]; stats.clusters];
    let mut used = 0u64;

    let global_seed = {
        let mut totals = vec![0u64; stats.vocab];
        for t in 0..stats.clusters {
            for (acc, &p) in totals.iter_mut().zip(stats.pos_row(t)) {
                *acc += u64::from(p);
            }
        }
        most_frequent(&totals, seed_len)
    };
    for t in 0..stats.clusters {
        let seeds = if stats.sizes[t] == 0 {
            global_seed.clone()
        } else {
            let row: Vec<u64> = stats.pos_row(t).iter().map(|&p| u64::from(p)).collect();
            most_frequent(&row, seed_len)
        };
        for s in seeds {
            members[t][s] = true;
        }
        used += stats.sizes[t] as u64 * seed_len as u64;
    }

    let mut items: Vec<KnapsackItem> = Vec::new();
    for t in 0..stats.clusters {
        let weight = stats.sizes[t] as u64;
        if weight == 0 {
            continue;
        }
        for (s, &p) in stats.pos_row(t).iter().enumerate() {
            if p == 0 || members[t][s] {
                continue;
            }
            let value = item_value(p, stats.neg(t, s), lambda);
            if value > 0.0 {
                items.push(KnapsackItem {
                    cluster: t,
                    label: s,
                    value,
                    weight,
                });
            }
        }
    }
    items.sort_by(item_order);

    for j in best_fill(&items, cap - used, stats.clusters) {
        members[items[j].cluster][items[j].label] = true;
    }

    let sets = members
        .into_iter()
        .map(|m| {
            let ids = m.iter().enumerate().filter(|(_, &b)| b).map(|(s, _)| s as u32);
            CandidateSet::from_indices(stats.vocab, ids).expect("labels below vocab")
        })
        .collect();
    Ok(sets)
}

/// Upper bound on item visits spent on forced re-fills.
const REFILL_WORK: usize = 50_000_000;

/// Indices of the chosen items, best of the plain and forced fills.
fn best_fill(items: &[KnapsackItem], room: u64, clusters: usize) -> Vec<usize> {
    let (mut best_value, mut best) = fill(items, room, &[]);
    let plain = best.clone();
    // items of each cluster, most valuable first, and how many the plain fill took
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    let mut taken_plain = vec![0; clusters];
    for (j, item) in items.iter().enumerate() {
        groups[item.cluster].push(j);
        taken_plain[item.cluster] += usize::from(plain[j]);
    }
    let mut work = 0;
    'clusters: for (group, &base) in groups.iter().zip(&taken_plain) {
        for m in base + 1..=group.len() {
            let forced = &group[..m];
            if forced.iter().map(|&j| items[j].weight).sum::<u64>() > room {
                break;
            }
            work += items.len();
            if work > REFILL_WORK {
                break 'clusters;
            }
            let (value, taken) = fill(items, room, forced);
            if value > best_value {
                best_value = value;
                best = taken;
            }
        }
    }
    best.iter().enumerate().filter(|(_, &t)| t).map(|(j, _)| j).collect()
}

fn fill(items: &[KnapsackItem], room: u64, forced: &[usize]) -> (f64, Vec<bool>) {
    let mut taken = vec![false; items.len()];
    let mut used = 0;
    for &j in forced {
        taken[j] = true;
        used += items[j].weight;
    }
    for (j, item) in items.iter().enumerate() {
        if !taken[j] && used + item.weight <= room {
            taken[j] = true;
            used += item.weight;
        }
    }
    let value = items.iter().zip(&taken).filter(|(_, &t)| t).map(|(i, _)| i.value).sum();
    (value, taken)
}

/// Greedy order: ratio descending, then cluster, then label ascending.
pub fn item_order(a: &KnapsackItem, b: &KnapsackItem) -> Ordering {
    b.ratio()
        .total_cmp(&a.ratio())
        .then(a.cluster.cmp(&b.cluster))
        .then(a.label.cmp(&b.label))
}

fn most_frequent(counts: &[u64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// The mismatch objective for binary candidate sets:
/// `Σ_t Σ_s pos[t][s]·(1 - c_ts)² + λ·neg[t][s]·c_ts²`.
pub fn assignment_loss(stats: &ClusterStats, sets: &[CandidateSet], lambda: f64) -> Result<f64> {
    if sets.len() != stats.clusters {
        return Err(Error::dims(
            "assignment_loss",
            format!("{} clusters", stats.clusters),
            format!("{} candidate sets", sets.len()),
        ));
    }
    let mut missed = 0u64;
    let mut wasted = 0u64;
    for (t, set) in sets.iter().enumerate() {
        if set.vocab() != stats.vocab {
            return Err(Error::dims(
                "assignment_loss",
                format!("vocab {}", stats.vocab),
                format!("candidate set over {}", set.vocab()),
            ));
        }
        let row = stats.pos_row(t);
        let total_pos: u64 = row.iter().map(|&p| u64::from(p)).sum();
        let covered: u64 = set.indices().iter().map(|&s| u64::from(row[s as usize])).sum();
        missed += total_pos - covered;
        wasted += stats.sizes[t] as u64 * set.len() as u64 - covered;
    }
    Ok(missed as f64 + lambda * wasted as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn labels(rows: Vec<Vec<u32>>) -> Labels {
        let k = rows[0].len();
        Labels::new(k, rows).unwrap()
    }

    fn random_instance(rng: &mut Rng, n: usize, r: usize, l: usize, k: usize) -> (Vec<usize>, Labels) {
        let assignments: Vec<usize> = (0..n).map(|_| rng.below(r)).collect();
        let rows = (0..n)
            .map(|_| {
                let mut ids: Vec<u32> = (0..l as u32).collect();
                rng.shuffle(&mut ids);
                // skew toward low ids so clusters have frequent labels
                ids.sort_by_key(|&s| (s as usize * rng.below(3), s));
                ids.truncate(k);
                ids
            })
            .collect();
        (assignments, labels(rows))
    }

    #[test]
    fn single_context_counts() {
        let stats = collect_stats(&[0], &labels(vec![vec![3]]), 2, 5).unwrap();
        assert_eq!(stats.pos(0, 3), 1);
        assert_eq!(stats.neg(0, 0), 1);
        assert_eq!(stats.neg(0, 3), 0);
        assert_eq!(stats.sizes(), &[1, 0]);
    }

    #[test]
    fn duplicated_contexts_double_counts() {
        let mut rng = Rng::new(1);
        let (a, y) = random_instance(&mut rng, 30, 3, 10, 2);
        let once = collect_stats(&a, &y, 3, 10).unwrap();
        let idx: Vec<usize> = (0..30).chain(0..30).collect();
        let a2: Vec<usize> = idx.iter().map(|&i| a[i]).collect();
        let twice = collect_stats(&a2, &y.select(&idx), 3, 10).unwrap();
        for t in 0..3 {
            assert_eq!(twice.sizes()[t], 2 * once.sizes()[t]);
            for s in 0..10 {
                assert_eq!(twice.pos(t, s), 2 * once.pos(t, s));
                assert_eq!(twice.neg(t, s), 2 * once.neg(t, s));
            }
        }
    }

    #[test]
    fn stats_match_nested_loops() {
        let mut rng = Rng::new(2);
        let (a, y) = random_instance(&mut rng, 80, 4, 12, 3);
        let stats = collect_stats(&a, &y, 4, 12).unwrap();
        for t in 0..4 {
            let n_t = a.iter().filter(|&&x| x == t).count();
            assert_eq!(stats.sizes()[t], n_t);
            for s in 0..12u32 {
                let p = (0..80).filter(|&i| a[i] == t && y.row(i).contains(&s)).count();
                assert_eq!(stats.pos(t, s as usize) as usize, p);
            }
        }
        assert_eq!(stats.total(), 80);
    }

    #[test]
    fn out_of_range_cluster_is_fatal() {
        let err = collect_stats(&[2], &labels(vec![vec![0]]), 2, 3).unwrap_err();
        assert!(matches!(err, Error::ClusterOutOfRange { id: 2, r: 2 }));
    }

    #[test]
    fn tiny_lambda_and_loose_budget_take_every_positive_label() {
        let mut rng = Rng::new(3);
        let (a, y) = random_instance(&mut rng, 50, 3, 10, 2);
        let stats = collect_stats(&a, &y, 3, 10).unwrap();
        let sets = greedy_knapsack(&stats, 10.0, 1e-9, 2).unwrap();
        for t in 0..3 {
            for s in 0..10 {
                if stats.pos(t, s) > 0 {
                    assert!(sets[t].contains(s));
                }
            }
        }
    }

    #[test]
    fn seed_only_budget_single_cluster() {
        let rows = vec![vec![1, 2], vec![1, 3], vec![1, 2], vec![4, 2], vec![5, 0]];
        let y = labels(rows);
        let stats = collect_stats(&[0; 5], &y, 1, 6).unwrap();
        let sets = greedy_knapsack(&stats, 2.0, 0.0003, 2).unwrap();
        assert_eq!(sets[0].indices(), &[1, 2]);
    }

    #[test]
    fn infeasible_seeding_reports_minimum() {
        let stats = collect_stats(&[0, 0], &labels(vec![vec![0, 1], vec![1, 2]]), 1, 4).unwrap();
        let err = greedy_knapsack(&stats, 1.5, 0.1, 2).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { required, .. } if required == 2.0));
    }

    #[test]
    fn empty_cluster_gets_global_seed() {
        let y = labels(vec![vec![4, 1], vec![4, 2], vec![4, 1]]);
        let stats = collect_stats(&[0, 0, 0], &y, 2, 6).unwrap();
        let sets = greedy_knapsack(&stats, 2.0, 0.01, 2).unwrap();
        assert_eq!(sets[1].indices(), &[1, 4]);
        assert_eq!(capacity_used(&stats, &sets), 6);
    }

    #[test]
    fn loss_extremes() {
        let mut rng = Rng::new(4);
        let (a, y) = random_instance(&mut rng, 40, 3, 8, 3);
        let stats = collect_stats(&a, &y, 3, 8).unwrap();
        let lambda = 0.25;
        let full = vec![CandidateSet::full(8); 3];
        let none = vec![CandidateSet::empty(8); 3];
        let neg: u64 = (0..3)
            .flat_map(|t| (0..8).map(move |s| (t, s)))
            .map(|(t, s)| u64::from(stats.neg(t, s)))
            .sum();
        assert!((assignment_loss(&stats, &full, lambda).unwrap() - lambda * neg as f64).abs() < 1e-12);
        assert_eq!(assignment_loss(&stats, &none, lambda).unwrap(), 40.0 * 3.0);
    }

    #[test]
    fn loss_matches_per_sample_sum() {
        let mut rng = Rng::new(5);
        let (a, y) = random_instance(&mut rng, 60, 4, 15, 3);
        let stats = collect_stats(&a, &y, 4, 15).unwrap();
        let sets: Vec<CandidateSet> = (0..4)
            .map(|_| CandidateSet::from_indices(15, (0..6).map(|_| rng.below(15) as u32)).unwrap())
            .collect();
        let lambda = 0.0003;
        let mut direct = 0.0;
        for i in 0..60 {
            let c = &sets[a[i]];
            for s in 0..15u32 {
                let cs = if c.contains(s as usize) { 1.0 } else { 0.0 };
                if y.row(i).contains(&s) {
                    direct += (1.0f64 - cs).powi(2);
                } else {
                    direct += lambda * cs * cs;
                }
            }
        }
        let agg = assignment_loss(&stats, &sets, lambda).unwrap();
        assert!((agg - direct).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn larger_budget_never_hurts() {
        let mut rng = Rng::new(6);
        for _ in 0..30 {
            let (a, y) = random_instance(&mut rng, 60, 3, 20, 3);
            let stats = collect_stats(&a, &y, 3, 20).unwrap();
            let mut prev = f64::INFINITY;
            for b in [3.0, 3.5, 4.0, 5.0, 7.0, 10.0, 20.0] {
                let sets = greedy_knapsack(&stats, b, 0.0003, 3).unwrap();
                assert!(capacity_used(&stats, &sets) <= capacity(&stats, b));
                let loss = assignment_loss(&stats, &sets, 0.0003).unwrap();
                assert!(loss <= prev + 1e-9, "budget {b}: {loss} > {prev}");
                prev = loss;
            }
        }
    }
}
