//! Spherical k-means: Lloyd iterations on unit-normalized vectors under
//! cosine similarity, seeded k-means++ style.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::softmax::ContextSet;
use crate::tensor::{dot, norm, DenseMatrix};

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansState {
    /// `r x d`, unit rows.
    pub centroids: DenseMatrix,
    pub assignments: Vec<usize>,
    /// `Σ_i centroid[a(i)] · x̂_i` for the final state.
    pub objective: f64,
    /// Objective after every assignment step; non-decreasing.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl KmeansState {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.rows()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

pub fn spherical_kmeans(
    contexts: &ContextSet,
    r: usize,
    rng: &mut Rng,
    max_iters: usize,
) -> Result<KmeansState> {
    let n = contexts.len();
    let d = contexts.dim();
    if r == 0 || r > n {
        return Err(Error::InvalidArgument(format!(
            "spherical k-means needs 1 <= r <= N, got r = {r}, N = {n}"
        )));
    }
    let points = normalized(contexts)?;

    let mut centroids = seed_plus_plus(&points, r, rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters.max(1) {
        let next = assign(&points, &centroids);
        history.push(objective(&points, &centroids, &next));
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        update_centroids(&points, &assignments, &mut centroids);
        repair_empty(&points, &mut assignments, &mut centroids);
    }
    if !converged {
        // centroids moved after the last assignment; make the pair consistent
        let next = assign(&points, &centroids);
        history.push(objective(&points, &centroids, &next));
        converged = next == assignments;
        assignments = next;
    }

    let objective = *history.last().expect("at least one assignment step");
    debug_assert_eq!(centroids.shape(), (r, d));
    Ok(KmeansState {
        centroids,
        assignments,
        objective,
        history,
        converged,
    })
}

fn normalized(contexts: &ContextSet) -> Result<DenseMatrix> {
    let d = contexts.dim();
    let mut data = Vec::with_capacity(contexts.len() * d);
    for (i, h) in contexts.iter().enumerate() {
        let nrm = norm(h);
        if nrm == 0.0 {
            return Err(Error::ZeroNormContext { index: i });
        }
        data.extend(h.iter().map(|x| x / nrm));
    }
    DenseMatrix::new(contexts.len(), d, data)
}

/// k-means++ on cosine distance `1 - cos`, sampling with squared distance.
fn seed_plus_plus(points: &DenseMatrix, r: usize, rng: &mut Rng) -> DenseMatrix {
    let (n, d) = points.shape();
    let mut centroids = DenseMatrix::zeros(r, d);
    let mut chosen = vec![false; n];
    let first = rng.below(n);
    chosen[first] = true;
    centroids.row_mut(0).copy_from_slice(points.row(first));

    let mut best_sim: Vec<f64> = (0..n).map(|i| dot(points.row(i), points.row(first))).collect();
    for t in 1..r {
        let weights: Vec<f64> = best_sim
            .iter()
            .zip(&chosen)
            .map(|(s, &c)| if c { 0.0 } else { (1.0 - s).max(0.0).powi(2) })
            .collect();
        let pick = rng.weighted_index(&weights).unwrap_or_else(|| {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        });
        chosen[pick] = true;
        centroids.row_mut(t).copy_from_slice(points.row(pick));
        for (i, s) in best_sim.iter_mut().enumerate() {
            *s = s.max(dot(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn assign(points: &DenseMatrix, centroids: &DenseMatrix) -> Vec<usize> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| nearest(points.row(i), centroids).0)
        .collect()
}

fn nearest(x: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (t, c) in centroids.iter_rows().enumerate() {
        let s = dot(c, x);
        if s > best.1 {
            best = (t, s);
        }
    }
    best
}

fn objective(points: &DenseMatrix, centroids: &DenseMatrix, assignments: &[usize]) -> f64 {
    assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| dot(centroids.row(a), points.row(i)))
        .sum()
}

fn update_centroids(points: &DenseMatrix, assignments: &[usize], centroids: &mut DenseMatrix) {
    let (r, d) = centroids.shape();
    let mut sums = vec![0.0; r * d];
    for (i, &a) in assignments.iter().enumerate() {
        for (s, x) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for t in 0..r {
        let sum = &sums[t * d..(t + 1) * d];
        let nrm = norm(sum);
        // an empty cluster, or members that cancel exactly, keep the old direction
        if nrm > 0.0 {
            for (c, s) in centroids.row_mut(t).iter_mut().zip(sum) {
                *c = s / nrm;
            }
        }
    }
}

/// Re-seed every empty cluster with the point least similar to its own
/// centroid, taken from a cluster that keeps at least one member.
fn repair_empty(points: &DenseMatrix, assignments: &mut [usize], centroids: &mut DenseMatrix) {
    let r = centroids.rows();
    let mut sizes = vec![0usize; r];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    for t in 0..r {
        if sizes[t] > 0 {
            continue;
        }
        let mut worst: Option<(usize, f64)> = None;
        for (i, &a) in assignments.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let s = dot(centroids.row(a), points.row(i));
            if worst.is_none_or(|(_, w)| s < w) {
                worst = Some((i, s));
            }
        }
        let Some((i, _)) = worst else { return };
        sizes[assignments[i]] -= 1;
        sizes[t] += 1;
        assignments[i] = t;
        centroids.row_mut(t).copy_from_slice(points.row(i));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contexts(rows: Vec<Vec<f64>>) -> ContextSet {
        ContextSet::new(DenseMatrix::from_rows(&rows).unwrap())
    }

    fn bundles(rng: &mut Rng, n_per: usize) -> ContextSet {
        let dir = [1.0, 0.5, -0.25, 2.0];
        let mut rows = Vec::new();
        for sign in [1.0, -1.0] {
            for _ in 0..n_per {
                rows.push(dir.iter().map(|x| sign * x + 0.02 * rng.normal()).collect());
            }
        }
        contexts(rows)
    }

    #[test]
    fn n_equals_r_gives_singletons() {
        let mut rng = Rng::new(1);
        let ctx = contexts(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
            vec![1.0, 1.0, 0.0],
        ]);
        let st = spherical_kmeans(&ctx, 4, &mut rng, 50).unwrap();
        let mut a = st.assignments.clone();
        a.sort_unstable();
        a.dedup();
        assert_eq!(a.len(), 4);
        assert!((st.objective - 4.0).abs() < 1e-12);
    }

    #[test]
    fn antipodal_bundles_are_separated() {
        let mut rng = Rng::new(2);
        let ctx = bundles(&mut rng, 30);
        // construction check: tight inside, opposed across
        let cos = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
        assert!(cos(ctx.get(0), ctx.get(29)) > 0.99);
        assert!(cos(ctx.get(0), ctx.get(30)) < -0.9);
        let st = spherical_kmeans(&ctx, 2, &mut Rng::new(7), 50).unwrap();
        let first = st.assignments[0];
        assert!(st.assignments[..30].iter().all(|&a| a == first));
        assert!(st.assignments[30..].iter().all(|&a| a != first));
    }

    #[test]
    fn single_cluster_is_normalized_mean_direction() {
        let mut rng = Rng::new(3);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.normal() + 1.0).collect()).collect();
        let ctx = contexts(rows.clone());
        let st = spherical_kmeans(&ctx, 1, &mut rng, 50).unwrap();
        let mut mean = [0.0; 3];
        for r in &rows {
            let n = norm(r);
            for j in 0..3 {
                mean[j] += r[j] / n;
            }
        }
        let n = norm(&mean);
        for j in 0..3 {
            assert!((st.centroids.get(0, j) - mean[j] / n).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_monotone_unit_centroids_and_deterministic() {
        let mut gen = Rng::new(10);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..6).map(|_| gen.normal()).collect()).collect();
        let ctx = contexts(rows);
        let a = spherical_kmeans(&ctx, 7, &mut Rng::new(42), 50).unwrap();
        let b = spherical_kmeans(&ctx, 7, &mut Rng::new(42), 50).unwrap();
        assert_eq!(a, b);
        assert!(a.history.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        for c in a.centroids.iter_rows() {
            assert!((norm(c) - 1.0).abs() < 1e-10);
        }
        assert!(a.assignments.iter().all(|&t| t < 7));
        assert!(a.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn zero_norm_context_is_reported() {
        let ctx = contexts(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let err = spherical_kmeans(&ctx, 1, &mut Rng::new(0), 10).unwrap_err();
        assert!(matches!(err, Error::ZeroNormContext { index: 1 }));
    }

    #[test]
    fn empty_cluster_gets_reseeded() {
        let mut points = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.0, 1.0],
        ])
        .unwrap();
        for i in 0..3 {
            let n = norm(points.row(i));
            points.row_mut(i).iter_mut().for_each(|x| *x /= n);
        }
        let mut centroids = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let mut assignments = vec![0, 0, 0];
        repair_empty(&points, &mut assignments, &mut centroids);
        assert_eq!(assignments, vec![0, 0, 1]);
        assert_eq!(centroids.row(1), points.row(2));
    }
}
