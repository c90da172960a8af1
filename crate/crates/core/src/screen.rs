//! The screening predictor: route a context to a cluster, then score only
//! that cluster's candidate labels.

use crate::error::{Error, Result};
use crate::softmax::{exact_topk, ContextSet, SoftmaxLayer, TopKResult};
use crate::tensor::{dot, select_top, DenseMatrix};

/// A subset of the vocabulary, kept both as a bitset for membership tests
/// and as an ascending index list for iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    vocab: usize,
    bits: Vec<u64>,
    indices: Vec<u32>,
}

impl CandidateSet {
    pub fn empty(vocab: usize) -> Self {
        Self {
            vocab,
            bits: vec![0; vocab.div_ceil(64)],
            indices: Vec::new(),
        }
    }

    pub fn full(vocab: usize) -> Self {
        Self::from_indices(vocab, 0..vocab as u32).expect("in range")
    }

    pub fn from_indices(vocab: usize, ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let mut set = Self::empty(vocab);
        for id in ids {
            if id as usize >= vocab {
                return Err(Error::LabelOutOfRange {
                    id: id as usize,
                    vocab,
                });
            }
            set.bits[id as usize / 64] |= 1 << (id % 64);
        }
        set.rebuild_indices();
        Ok(set)
    }

    fn rebuild_indices(&mut self) {
        self.indices.clear();
        for (w, &word) in self.bits.iter().enumerate() {
            let mut word = word;
            while word != 0 {
                let b = word.trailing_zeros();
                self.indices.push((w * 64) as u32 + b);
                word &= word - 1;
            }
        }
    }

    #[inline]
    pub fn contains(&self, id: usize) -> bool {
        id < self.vocab && self.bits[id / 64] & (1 << (id % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Members in ascending order.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Number of `labels` that are members.
    pub fn hits(&self, labels: &[u32]) -> usize {
        labels.iter().filter(|&&s| self.contains(s as usize)).count()
    }
}

/// Learned screen: `r` cluster weight vectors and one candidate set per cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreeningModel {
    weights: DenseMatrix,
    sets: Vec<CandidateSet>,
    budget: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScreenedPrediction {
    pub cluster: usize,
    pub candidate_count: usize,
    pub topk: TopKResult,
    /// Set when the candidate set held fewer than `k` labels and the whole
    /// vocabulary was scored instead.
    pub fallback: bool,
    /// Inner products actually computed: `r` for routing plus one per scored label.
    pub inner_products: usize,
}

impl ScreeningModel {
    pub fn new(weights: DenseMatrix, sets: Vec<CandidateSet>, budget: f64) -> Result<Self> {
        if weights.rows() != sets.len() || sets.is_empty() {
            return Err(Error::dims(
                "ScreeningModel::new",
                format!("{} cluster weight rows", weights.rows()),
                format!("{} candidate sets", sets.len()),
            ));
        }
        let vocab = sets[0].vocab();
        if let Some(bad) = sets.iter().find(|s| s.vocab() != vocab) {
            return Err(Error::dims(
                "ScreeningModel::new",
                format!("vocab {vocab}"),
                format!("candidate set over vocab {}", bad.vocab()),
            ));
        }
        if !weights.is_finite() {
            return Err(Error::NonFinite("ScreeningModel weights"));
        }
        Ok(Self {
            weights,
            sets,
            budget,
        })
    }

    /// One cluster whose candidate set is the whole vocabulary; screening is a no-op.
    pub fn full(vocab: usize, dim: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(1, dim),
            sets: vec![CandidateSet::full(vocab)],
            budget: vocab as f64,
        }
    }

    pub fn clusters(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn vocab(&self) -> usize {
        self.sets[0].vocab()
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn sets(&self) -> &[CandidateSet] {
        &self.sets
    }

    pub fn set(&self, t: usize) -> &CandidateSet {
        &self.sets[t]
    }

    fn check_dim(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::dims(
                "screening model",
                format!("model dim {}", self.dim()),
                format!("context of length {}", h.len()),
            ));
        }
        Ok(())
    }

    /// `argmax_t v_t · h`, lowest index on ties.
    pub fn assign_cluster(&self, h: &[f64]) -> Result<usize> {
        self.check_dim(h)?;
        Ok(route(&self.weights, h))
    }

    pub fn screened_topk(
        &self,
        layer: &SoftmaxLayer,
        h: &[f64],
        k: usize,
    ) -> Result<ScreenedPrediction> {
        self.check_dim(h)?;
        layer.check_dim(h)?;
        if layer.vocab_size() != self.vocab() {
            return Err(Error::dims(
                "screened_topk",
                format!("model vocab {}", self.vocab()),
                format!("layer vocab {}", layer.vocab_size()),
            ));
        }
        if k == 0 || k > layer.vocab_size() {
            return Err(Error::KOutOfRange {
                k,
                len: layer.vocab_size(),
            });
        }
        let r = self.clusters();
        let cluster = route(&self.weights, h);
        let set = &self.sets[cluster];
        if set.len() < k {
            let topk = exact_topk(layer, h, k)?;
            return Ok(ScreenedPrediction {
                cluster,
                candidate_count: set.len(),
                topk,
                fallback: true,
                inner_products: r + layer.vocab_size(),
            });
        }
        let mut scored = 0;
        let pairs: Vec<(usize, f64)> = set
            .indices()
            .iter()
            .map(|&s| {
                scored += 1;
                (s as usize, layer.logit(s as usize, h))
            })
            .collect();
        Ok(ScreenedPrediction {
            cluster,
            candidate_count: set.len(),
            topk: TopKResult::from_pairs(select_top(pairs, k)),
            fallback: false,
            inner_products: r + scored,
        })
    }

    /// Hard cluster of every context.
    pub fn assign_all(&self, contexts: &ContextSet) -> Result<Vec<usize>> {
        if contexts.dim() != self.dim() {
            return Err(Error::dims(
                "assign_all",
                format!("model dim {}", self.dim()),
                format!("contexts of dim {}", contexts.dim()),
            ));
        }
        Ok(assign_hard(&self.weights, contexts))
    }

    /// Mean candidate-set size `L̄` over `contexts`.
    pub fn candidate_logit_count(&self, contexts: &ContextSet) -> Result<f64> {
        let assignments = self.assign_all(contexts)?;
        if assignments.is_empty() {
            return Ok(0.0);
        }
        let total: usize = assignments.iter().map(|&t| self.sets[t].len()).sum();
        Ok(total as f64 / assignments.len() as f64)
    }
}

#[inline]
pub(crate) fn route(weights: &DenseMatrix, h: &[f64]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (t, v) in weights.iter_rows().enumerate() {
        let s = dot(v, h);
        if s > best.1 {
            best = (t, s);
        }
    }
    best.0
}

pub(crate) fn assign_hard(weights: &DenseMatrix, contexts: &ContextSet) -> Vec<usize> {
    contexts.iter().map(|h| route(weights, h)).collect()
}
