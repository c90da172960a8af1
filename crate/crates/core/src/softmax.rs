//! The exact softmax layer. It is both the baseline the screen has to beat
//! and the oracle that produces ground-truth labels.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{dot, select_top, DenseMatrix, DenseVector};

/// Output layer `x = W h + b`, with `W` stored as `L` rows of length `d`
/// (row `s` is the weight vector of label `s`).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer {
    weights: DenseMatrix,
    bias: DenseVector,
}

impl SoftmaxLayer {
    pub fn new(weights: DenseMatrix, bias: DenseVector) -> Result<Self> {
        if weights.rows() != bias.len() {
            return Err(Error::dims(
                "SoftmaxLayer::new",
                format!("weights with {} rows", weights.rows()),
                format!("bias of length {}", bias.len()),
            ));
        }
        if weights.rows() == 0 || weights.cols() == 0 {
            return Err(Error::InvalidArgument("empty softmax layer".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.rows()
    }

    pub fn dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn bias(&self) -> &DenseVector {
        &self.bias
    }

    #[inline]
    pub(crate) fn logit(&self, s: usize, h: &[f64]) -> f64 {
        dot(self.weights.row(s), h) + self.bias[s]
    }

    pub(crate) fn check_dim(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::dims(
                "softmax layer",
                format!("layer dim {}", self.dim()),
                format!("context of length {}", h.len()),
            ));
        }
        Ok(())
    }
}

/// `N` context vectors of dimension `d`, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    vectors: DenseMatrix,
}

impl ContextSet {
    pub fn new(vectors: DenseMatrix) -> Self {
        Self { vectors }
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.vectors.iter_rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.vectors
    }

    /// A new set made of the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(self.get(i));
        }
        Self::new(DenseMatrix::new(rows.len(), d, data).expect("rows of a valid matrix"))
    }
}

/// Top-k labels of one query, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKResult {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl TopKResult {
    pub(crate) fn from_pairs(pairs: Vec<(usize, f64)>) -> Self {
        let (indices, scores) = pairs.into_iter().unzip();
        Self { indices, scores }
    }

    pub fn k(&self) -> usize {
        self.indices.len()
    }
}

/// Ground-truth top-k label ids for every context, stored row-major in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    k: usize,
    ids: Vec<u32>,
}

impl Labels {
    pub fn new(k: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut ids = Vec::with_capacity(rows.len() * k);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::dims(
                    "Labels::new",
                    format!("k = {k}"),
                    format!("row {i} with {} labels", r.len()),
                ));
            }
            ids.extend_from_slice(r);
        }
        Ok(Self { k, ids })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.ids.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(rows.len() * self.k);
        for &i in rows {
            ids.extend_from_slice(self.row(i));
        }
        Self { k: self.k, ids }
    }
}

/// `x_s = w_s · h + b_s` for every label.
pub fn logits(layer: &SoftmaxLayer, h: &[f64]) -> Result<DenseVector> {
    layer.check_dim(h)?;
    let x = (0..layer.vocab_size()).map(|s| layer.logit(s, h)).collect();
    DenseVector::new(x)
}

/// Max-subtracted softmax.
pub fn probabilities(x: &[f64]) -> DenseVector {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    DenseVector::new(p).expect("softmax of finite logits is finite")
}

/// `log Σ exp(x)`, stable.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exact top-k over the whole vocabulary.
pub fn exact_topk(layer: &SoftmaxLayer, h: &[f64], k: usize) -> Result<TopKResult> {
    let l = layer.vocab_size();
    if k == 0 || k > l {
        return Err(Error::KOutOfRange { k, len: l });
    }
    let x = logits(layer, h)?;
    let pairs = x.iter().copied().enumerate().collect();
    Ok(TopKResult::from_pairs(select_top(pairs, k)))
}

/// Exact top-k labels of every context. Parallel over contexts; the result
/// does not depend on the thread count.
pub fn label_contexts(layer: &SoftmaxLayer, contexts: &ContextSet, k: usize) -> Result<Labels> {
    if contexts.dim() != layer.dim() {
        return Err(Error::dims(
            "label_contexts",
            format!("layer dim {}", layer.dim()),
            format!("contexts of dim {}", contexts.dim()),
        ));
    }
    let rows: Vec<Vec<u32>> = (0..contexts.len())
        .into_par_iter()
        .map(|i| {
            exact_topk(layer, contexts.get(i), k)
                .map(|t| t.indices.into_iter().map(|s| s as u32).collect())
        })
        .collect::<Result<_>>()?;
    Labels::new(k, rows)
}
