mod common;

use l2s_core::knapsack::{assignment_loss, capacity, capacity_used, collect_stats, greedy_knapsack, item_value};
use l2s_core::softmax::{exact_topk, label_contexts, probabilities};
use l2s_core::{io, CandidateSet, Rng, ScreeningModel};
use proptest::prelude::*;

use common::*;

/// Random clustering problem: assignments, label rows, and sizes.
#[derive(Debug, Clone)]
struct Instance {
    r: usize,
    vocab: usize,
    assignments: Vec<usize>,
    labels: Vec<Vec<u32>>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..5, 4usize..12, 1usize..3, 1usize..40, any::<u64>()).prop_map(|(r, vocab, k, n, seed)| {
        let mut rng = Rng::new(seed);
        let n = n.max(r);
        Instance {
            r,
            vocab,
            assignments: (0..n).map(|_| rng.below(r)).collect(),
            labels: (0..n).map(|_| distinct_labels(&mut rng, vocab, k)).collect(),
        }
    })
}

/// Plain ratio-ordered greedy fill, written independently of the library.
fn plain_greedy_value(inst: &Instance, budget: f64, lambda: f64, k_seed: usize) -> f64 {
    let stats = collect_stats(&inst.assignments, &labels_from(&inst.labels), inst.r, inst.vocab).unwrap();
    let n = inst.assignments.len() as u64;
    let cap = (budget * n as f64).floor() as u64;
    let mut used = 0;
    let mut value = 0.0;
    let mut items = Vec::new();
    for t in 0..inst.r {
        let w = stats.sizes()[t] as u64;
        if w == 0 {
            continue;
        }
        let seeds = seed_labels(&stats, t, k_seed);
        for &s in &seeds {
            used += w;
            value += pair_value(&stats, t, s, lambda);
        }
        for s in 0..inst.vocab {
            let v = pair_value(&stats, t, s, lambda);
            if stats.pos(t, s) > 0 && !seeds.contains(&s) && v > 0.0 {
                items.push((v / w as f64, t, s, v, w));
            }
        }
    }
    items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, _, _, v, w) in items {
        if used + w <= cap {
            used += w;
            value += v;
        }
    }
    value
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn knapsack_respects_capacity_and_is_maximal(inst in instance(), frac in 0.0f64..1.0, k_seed in 0usize..3) {
        let stats = collect_stats(&inst.assignments, &labels_from(&inst.labels), inst.r, inst.vocab).unwrap();
        let k_seed = k_seed.min(inst.vocab);
        let budget = k_seed as f64 + frac * (inst.vocab - k_seed) as f64;
        let lambda = 0.0003;
        let sets = greedy_knapsack(&stats, budget, lambda, k_seed).unwrap();
        let cap = capacity(&stats, budget);
        let used = capacity_used(&stats, &sets);
        prop_assert!(used <= cap);
        // nothing positive that still fits was left out
        for t in 0..inst.r {
            let w = stats.sizes()[t] as u64;
            if w == 0 {
                continue;
            }
            for s in 0..inst.vocab {
                let v = item_value(stats.pos(t, s), stats.neg(t, s), lambda);
                if v > 0.0 && !sets[t].contains(s) {
                    prop_assert!(used + w > cap, "item ({t}, {s}) fits but was skipped");
                }
            }
        }
        // at least as good as the plain greedy
        let got = sets_value(&stats, &sets, lambda);
        prop_assert!(got >= plain_greedy_value(&inst, budget, lambda, k_seed) - 1e-9);
    }

    #[test]
    fn larger_budget_never_increases_loss(inst in instance(), frac in 0.0f64..1.0, delta in 0.0f64..3.0) {
        let stats = collect_stats(&inst.assignments, &labels_from(&inst.labels), inst.r, inst.vocab).unwrap();
        let b = 1.0 + frac * (inst.vocab - 1) as f64;
        let lambda = 0.0003;
        let small = greedy_knapsack(&stats, b, lambda, 1).unwrap();
        let large = greedy_knapsack(&stats, b + delta, lambda, 1).unwrap();
        let l_small = assignment_loss(&stats, &small, lambda).unwrap();
        let l_large = assignment_loss(&stats, &large, lambda).unwrap();
        prop_assert!(l_large <= l_small + 1e-9, "B={b}: {l_small} -> B+{delta}: {l_large}");
    }

    #[test]
    fn assignment_loss_matches_per_sample_sum(inst in instance(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let labels = labels_from(&inst.labels);
        let stats = collect_stats(&inst.assignments, &labels, inst.r, inst.vocab).unwrap();
        let sets: Vec<CandidateSet> = (0..inst.r).map(|_| random_set(&mut rng, inst.vocab, 0.4)).collect();
        let lambda = 0.25;
        let mut direct = 0.0;
        for (i, &t) in inst.assignments.iter().enumerate() {
            for s in 0..inst.vocab {
                let y = if inst.labels[i].contains(&(s as u32)) { 1.0 } else { 0.0 };
                let c = if sets[t].contains(s) { 1.0 } else { 0.0 };
                direct += y * (1.0 - c) * (1.0f64 - c) + lambda * (1.0 - y) * c * c;
            }
        }
        let got = assignment_loss(&stats, &sets, lambda).unwrap();
        prop_assert!((got - direct).abs() <= 1e-10 * direct.max(1.0));
    }

    #[test]
    fn full_sets_reproduce_exact_topk(seed in any::<u64>(), l in 5usize..60, d in 1usize..8, r in 1usize..4) {
        let mut rng = Rng::new(seed);
        let layer = random_layer(&mut rng, l, d);
        let model = ScreeningModel::new(random_matrix(&mut rng, r, d, 1.0), vec![CandidateSet::full(l); r], l as f64).unwrap();
        for _ in 0..10 {
            let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let k = 1 + rng.below(l);
            let pred = model.screened_topk(&layer, &h, k).unwrap();
            prop_assert_eq!(&pred.topk, &exact_topk(&layer, &h, k).unwrap());
            prop_assert_eq!(pred.inner_products, r + l);
        }
    }

    #[test]
    fn screened_labels_stay_in_candidate_set(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (l, d, r) = (40, 5, 3);
        let layer = random_layer(&mut rng, l, d);
        let sets: Vec<CandidateSet> = (0..r).map(|_| random_set(&mut rng, l, 0.3)).collect();
        let model = ScreeningModel::new(random_matrix(&mut rng, r, d, 1.0), sets, 12.0).unwrap();
        for _ in 0..20 {
            let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let pred = model.screened_topk(&layer, &h, 3).unwrap();
            let set = model.set(pred.cluster);
            if !pred.fallback {
                prop_assert!(pred.topk.indices.iter().all(|&s| set.contains(s)));
                prop_assert_eq!(pred.inner_products, r + set.len());
            } else {
                prop_assert!(set.len() < 3);
            }
        }
    }

    #[test]
    fn positive_scaling_keeps_routing(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let mut rng = Rng::new(seed);
        let model = ScreeningModel::new(random_matrix(&mut rng, 6, 4, 1.0), vec![CandidateSet::empty(3); 6], 1.0).unwrap();
        let h: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let scaled: Vec<f64> = h.iter().map(|x| x * scale).collect();
        prop_assert_eq!(model.assign_cluster(&h).unwrap(), model.assign_cluster(&scaled).unwrap());
    }

    #[test]
    fn probabilities_normalized_and_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 1..40), shift in -100.0f64..100.0) {
        let p = probabilities(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let q = probabilities(&shifted);
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_round_trip_bitwise(rows in 1usize..9, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = random_matrix(&mut rng, rows, cols, 1e3);
        let back = io::decode_matrix(&io::encode_matrix(&m)).unwrap();
        prop_assert!(bits_equal(back.as_slice(), m.as_slice()));
    }
}

#[test]
fn model_file_round_trip_gives_identical_predictions() {
    let mut rng = Rng::new(11);
    let (l, d, r) = (120, 6, 5);
    let layer = random_layer(&mut rng, l, d);
    let mut sets: Vec<CandidateSet> = (0..r).map(|_| random_set(&mut rng, l, 0.2)).collect();
    sets[2] = CandidateSet::empty(l);
    let model = ScreeningModel::new(random_matrix(&mut rng, r, d, 1.0), sets, 24.0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.l2s");
    io::save_model(&path, &model).unwrap();
    let back = io::load_model(&path).unwrap();
    for _ in 0..100 {
        let h: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        assert_eq!(model.screened_topk(&layer, &h, 5).unwrap(), back.screened_topk(&layer, &h, 5).unwrap());
    }
}

#[test]
fn labels_follow_exact_topk() {
    let mut rng = Rng::new(12);
    let layer = random_layer(&mut rng, 50, 4);
    let ctx = random_contexts(&mut rng, 30, 4);
    let labels = label_contexts(&layer, &ctx, 5).unwrap();
    for i in 0..ctx.len() {
        let want: Vec<u32> = brute_force_topk(&layer, ctx.get(i), 5).iter().map(|&s| s as u32).collect();
        assert_eq!(labels.row(i), want.as_slice());
    }
}
