//! Synthetic softmax layers and contexts with planted cluster structure.
//!
//! Contexts are noisy copies of `r_true` unit centroid directions. Each
//! planted cluster owns a subset of labels whose weight vectors lean
//! toward its centroid, so the exact top-k of a context lands inside its
//! cluster's subset. Every other label gets a small random weight vector.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::softmax::{exact_topk, logits, probabilities, ContextSet, SoftmaxLayer};
use crate::tensor::{norm, DenseMatrix, DenseVector};

/// Fraction of contexts whose top-k must fall inside their planted subset.
pub const REQUIRED_CONTAINMENT: f64 = 0.95;
/// Re-draws after the first attempt before giving up.
pub const MAX_RESAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vocab: usize,
    pub dim: usize,
    pub contexts: usize,
    pub true_clusters: usize,
    pub subset_size: usize,
    /// Per-coordinate standard deviation of context noise.
    pub noise_sigma: f64,
    pub seed: u64,
    /// `k` of the containment check.
    pub top_k: usize,
    /// Length of the centroid component in subset weights.
    pub signal: f64,
    /// Scale of the per-label random component in subset weights.
    pub spread: f64,
    /// Scale of background label weights.
    pub background: f64,
    pub bias_sigma: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab: 10_000,
            dim: 64,
            contexts: 20_000,
            true_clusters: 10,
            subset_size: 50,
            noise_sigma: 0.1,
            seed: 0,
            top_k: 5,
            signal: 8.0,
            spread: 1.0,
            background: 1.0,
            bias_sigma: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.vocab == 0 || self.dim == 0 || self.contexts == 0 || self.true_clusters == 0 {
            return bad("vocab, dim, contexts and planted clusters must all be >= 1".into());
        }
        if self.vocab > u32::MAX as usize {
            return bad(format!("vocab {} exceeds u32 ids", self.vocab));
        }
        if self.subset_size == 0 || self.subset_size > self.vocab {
            return bad(format!("subset size {} outside 1..={}", self.subset_size, self.vocab));
        }
        if self.true_clusters > self.contexts {
            return bad(format!(
                "planted clusters {} exceed contexts {}",
                self.true_clusters, self.contexts
            ));
        }
        if self.top_k == 0 || self.top_k > self.subset_size {
            return bad(format!("top-k {} outside 1..={}", self.top_k, self.subset_size));
        }
        for (name, v) in [
            ("noise sigma", self.noise_sigma),
            ("signal", self.signal),
            ("spread", self.spread),
            ("background", self.background),
            ("bias sigma", self.bias_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Ground truth behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    /// `r_true x d`, unit rows.
    pub centroids: DenseMatrix,
    /// Label subset of each planted cluster, ascending.
    pub subsets: Vec<Vec<u32>>,
    /// Planted cluster of each context.
    pub membership: Vec<usize>,
    /// Fraction of contexts whose exact top-k lies inside their subset.
    pub containment: f64,
    /// Draws made, including the accepted one.
    pub attempts: usize,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub layer: SoftmaxLayer,
    pub contexts: ContextSet,
    pub planted: Planted,
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut best = 0.0;
    for attempt in 0..=MAX_RESAMPLES {
        let mut rng = root.fork(attempt as u64);
        let data = draw(spec, &mut rng, attempt + 1)?;
        if data.planted.containment >= REQUIRED_CONTAINMENT {
            return Ok(data);
        }
        best = f64::max(best, data.planted.containment);
    }
    Err(Error::Generation {
        rate: best,
        required: REQUIRED_CONTAINMENT,
        attempts: MAX_RESAMPLES + 1,
    })
}

fn draw(spec: &SynthSpec, rng: &mut Rng, attempts: usize) -> Result<SynthData> {
    let (l, d, r) = (spec.vocab, spec.dim, spec.true_clusters);
    let centroids = unit_rows(rng, r, d);
    let subsets = planted_subsets(rng, l, r, spec.subset_size);

    // a label shared by several subsets points along the sum of their centroids
    let mut direction = vec![0.0; l * d];
    for (c, subset) in subsets.iter().enumerate() {
        for &s in subset {
            let row = &mut direction[s as usize * d..(s as usize + 1) * d];
            row.iter_mut().zip(centroids.row(c)).for_each(|(x, mu)| *x += mu);
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut w: Vec<f64> = (0..l * d).map(|_| scale * rng.normal()).collect();
    for (row, dir) in w.chunks_exact_mut(d).zip(direction.chunks_exact(d)) {
        let n = norm(dir);
        if n > 0.0 {
            row.iter_mut()
                .zip(dir)
                .for_each(|(x, u)| *x = spec.signal * u / n + spec.spread * *x);
        } else {
            row.iter_mut().for_each(|x| *x *= spec.background);
        }
    }
    let bias: Vec<f64> = (0..l).map(|_| spec.bias_sigma * rng.normal()).collect();
    let layer = SoftmaxLayer::new(DenseMatrix::new(l, d, w)?, DenseVector::new(bias)?)?;

    let (contexts, membership) = sample_contexts(&centroids, spec.contexts, spec.noise_sigma, rng);
    let containment = containment_rate(&layer, &contexts, &membership, &subsets, spec.top_k)?;
    Ok(SynthData {
        layer,
        contexts,
        planted: Planted {
            centroids,
            subsets,
            membership,
            containment,
            attempts,
        },
    })
}

fn unit_rows(rng: &mut Rng, r: usize, d: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(r, d);
    for t in 0..r {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = norm(&v);
            if n > 0.0 {
                m.row_mut(t).iter_mut().zip(&v).for_each(|(x, y)| *x = y / n);
                break;
            }
        }
    }
    m
}

/// Disjoint subsets when they fit in the vocabulary, independent draws otherwise.
fn planted_subsets(rng: &mut Rng, l: usize, r: usize, size: usize) -> Vec<Vec<u32>> {
    let mut perm: Vec<u32> = (0..l as u32).collect();
    let disjoint = r * size <= l;
    if disjoint {
        rng.shuffle(&mut perm);
    }
    (0..r)
        .map(|c| {
            let mut subset = if disjoint {
                perm[c * size..(c + 1) * size].to_vec()
            } else {
                rng.shuffle(&mut perm);
                perm[..size].to_vec()
            };
            subset.sort_unstable();
            subset
        })
        .collect()
}

/// `n` contexts, each a planted centroid (chosen uniformly) plus `N(0, σ²I)` noise.
pub fn sample_contexts(centroids: &DenseMatrix, n: usize, sigma: f64, rng: &mut Rng) -> (ContextSet, Vec<usize>) {
    let (r, d) = centroids.shape();
    let mut data = Vec::with_capacity(n * d);
    let mut membership = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.below(r);
        membership.push(c);
        data.extend(centroids.row(c).iter().map(|mu| mu + sigma * rng.normal()));
    }
    let m = DenseMatrix::new(n, d, data).expect("finite samples");
    (ContextSet::new(m), membership)
}

/// One target per context, drawn from the exact softmax distribution.
pub fn sample_targets(layer: &SoftmaxLayer, contexts: &ContextSet, rng: &mut Rng) -> Result<Vec<u32>> {
    contexts
        .iter()
        .map(|h| {
            let p = probabilities(&logits(layer, h)?);
            let s = rng.weighted_index(&p).expect("softmax has positive mass");
            Ok(s as u32)
        })
        .collect()
}

pub fn containment_rate(
    layer: &SoftmaxLayer,
    contexts: &ContextSet,
    membership: &[usize],
    subsets: &[Vec<u32>],
    k: usize,
) -> Result<f64> {
    let inside: Vec<bool> = (0..contexts.len())
        .into_par_iter()
        .map(|i| {
            let top = exact_topk(layer, contexts.get(i), k)?;
            let subset = &subsets[membership[i]];
            Ok(top.indices.iter().all(|&s| subset.binary_search(&(s as u32)).is_ok()))
        })
        .collect::<Result<_>>()?;
    Ok(inside.iter().filter(|&&b| b).count() as f64 / contexts.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::softmax::label_contexts;

    fn small() -> SynthSpec {
        SynthSpec {
            vocab: 400,
            dim: 16,
            contexts: 300,
            true_clusters: 4,
            subset_size: 20,
            seed: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn noiseless_contexts_are_fully_contained() {
        let data = generate_synthetic(&SynthSpec {
            noise_sigma: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(data.planted.containment, 1.0);
        assert_eq!(data.planted.attempts, 1);
    }

    #[test]
    fn single_planted_cluster_uses_one_subset() {
        let data = generate_synthetic(&SynthSpec {
            true_clusters: 1,
            ..small()
        })
        .unwrap();
        assert!(data.planted.membership.iter().all(|&c| c == 0));
        let labels = label_contexts(&data.layer, &data.contexts, 5).unwrap();
        let subset = &data.planted.subsets[0];
        let inside = (0..labels.len())
            .filter(|&i| labels.row(i).iter().all(|s| subset.contains(s)))
            .count();
        assert!(inside as f64 >= 0.95 * labels.len() as f64);
    }

    #[test]
    fn shapes_and_disjoint_subsets() {
        let spec = small();
        let data = generate_synthetic(&spec).unwrap();
        assert_eq!(data.layer.weights().shape(), (400, 16));
        assert_eq!(data.contexts.len(), 300);
        let mut all: Vec<u32> = data.planted.subsets.concat();
        assert_eq!(all.len(), 80);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 80);
        for c in data.planted.centroids.iter_rows() {
            assert!((norm(c) - 1.0).abs() < 1e-12);
        }
        // containment is recomputed independently of the generator's own count
        let labels = label_contexts(&data.layer, &data.contexts, spec.top_k).unwrap();
        let inside = (0..labels.len())
            .filter(|&i| {
                let subset = &data.planted.subsets[data.planted.membership[i]];
                labels.row(i).iter().all(|s| subset.contains(s))
            })
            .count();
        assert_eq!(inside as f64 / 300.0, data.planted.containment);
    }

    #[test]
    fn overlapping_subsets_when_vocab_is_small() {
        let data = generate_synthetic(&SynthSpec {
            vocab: 30,
            subset_size: 20,
            ..small()
        })
        .unwrap();
        assert!(data.planted.subsets.iter().all(|s| s.len() == 20 && s.windows(2).all(|w| w[0] < w[1])));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.layer, b.layer);
        assert_eq!(a.contexts, b.contexts);
        assert_eq!(a.planted, b.planted);
        let c = generate_synthetic(&SynthSpec { seed: 4, ..small() }).unwrap();
        assert_ne!(a.contexts, c.contexts);
    }

    #[test]
    fn hopeless_noise_fails_with_advice() {
        let err = generate_synthetic(&SynthSpec {
            noise_sigma: 50.0,
            ..small()
        })
        .unwrap_err();
        assert!(matches!(err, Error::Generation { attempts: 11, .. }));
        assert!(err.to_string().contains("smaller noise sigma"));
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { subset_size: 401, ..small() },
            SynthSpec { true_clusters: 301, ..small() },
            SynthSpec { top_k: 21, ..small() },
            SynthSpec { noise_sigma: -1.0, ..small() },
            SynthSpec { dim: 0, ..small() },
        ] {
            assert!(generate_synthetic(&spec).is_err(), "{spec:?}");
        }
    }

    #[test]
    fn targets_follow_softmax() {
        let data = generate_synthetic(&small()).unwrap();
        let t = sample_targets(&data.layer, &data.contexts, &mut Rng::new(1)).unwrap();
        assert_eq!(t.len(), 300);
        assert!(t.iter().all(|&s| (s as usize) < 400));
    }
}
