//! Downstream evaluation of embeddings: link prediction by dot-product
//! probing, node classification by a cross-validated linear probe, and
//! clustering by k-means with NMI, ARI and silhouette scores.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::graph::{Edge, SparseGraph};
use crate::tensor::Matrix;

/// Largest point count accepted by the exact silhouette.
pub const SILHOUETTE_MAX_POINTS: usize = 20_000;
pub const KMEANS_MAX_ITERS: usize = 300;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    Length { what: &'static str, expected: usize, found: usize },
    #[error("class {class} has no training examples in fold {fold}")]
    ClassAbsent { class: usize, fold: usize },
    #[error("k = {k} exceeds the {n} available points")]
    TooManyClusters { k: usize, n: usize },
    #[error("{n} points exceed the exact silhouette limit of {SILHOUETTE_MAX_POINTS}")]
    TooLarge { n: usize },
    #[error("node {node} out of range for {n} embeddings")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("embedding export: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpResult {
    pub auc: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NcResult {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    pub nmi: f64,
    pub ari: f64,
    pub sc: f64,
}

fn check_scores(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(EvalError::Length {
            what: "scores",
            expected: labels.len(),
            found: scores.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(EvalError::Empty("positive set"));
    }
    if pos == labels.len() {
        return Err(EvalError::Empty("negative set"));
    }
    Ok((pos, labels.len() - pos))
}

/// ROC AUC: probability that a positive outscores a negative, ties ½.
/// Computed from average ranks in `O(n log n)`.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (p, n) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of positives keeps tie ranks integral
    let mut twice_rank_sum = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 average to (i+j+2)/2
        let twice_avg = (i + j + 2) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += positives * twice_avg;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / 2.0 / (p as f64 * n as f64))
}

/// Average precision: mean precision at the rank of each positive, scores
/// descending, ties kept in input order.
pub fn average_precision(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (p, _) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn pair_scores(h: &Matrix, pairs: &[Edge]) -> Result<Vec<f64>> {
    pairs
        .iter()
        .map(|&(a, b)| {
            for node in [a, b] {
                if node >= h.rows() {
                    return Err(EvalError::NodeOutOfRange { node, n: h.rows() });
                }
            }
            Ok(sigmoid(h.row(a).iter().zip(h.row(b)).map(|(x, y)| x * y).sum()))
        })
        .collect()
}

/// Scores each pair by `σ(h_i · h_j)`.
pub fn lp_probe(h: &Matrix, pos: &[Edge], neg: &[Edge]) -> Result<LpResult> {
    if pos.is_empty() {
        return Err(EvalError::Empty("positive edge set"));
    }
    if neg.is_empty() {
        return Err(EvalError::Empty("negative edge set"));
    }
    let mut scores = pair_scores(h, pos)?;
    scores.extend(pair_scores(h, neg)?);
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
    Ok(LpResult {
        auc: auc(&labels, &scores)?,
        ap: average_precision(&labels, &scores)?,
    })
}

/// Common-neighbour counts of each pair in `g`.
pub fn common_neighbor_scores(g: &SparseGraph, pairs: &[Edge]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(a, b)| {
            let (na, nb) = (g.neighbors(a), g.neighbors(b));
            let (mut i, mut j, mut c) = (0, 0, 0usize);
            while i < na.len() && j < nb.len() {
                match na[i].cmp(&nb[j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        c += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            c as f64
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub folds: usize,
    /// L2 penalty on the weights (not the bias).
    pub l2: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            l2: 1e-4,
            iterations: 300,
            seed: 0,
        }
    }
}

/// Fold index of every node: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    let mut next = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            fold[i] = next % folds;
            next += 1;
        }
    }
    fold
}

/// Column means and standard deviations (1 for constant columns).
fn standardizer(x: &Matrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.cols();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for &r in rows {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for &r in rows {
        for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

fn design(x: &Matrix, rows: &[usize], mean: &[f64], std: &[f64]) -> Matrix {
    let d = x.cols();
    Matrix::from_fn(rows.len(), d + 1, |r, c| if c == d { 1.0 } else { (x.row(rows[r])[c] - mean[c]) / std[c] })
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Largest eigenvalue of `XᵀX / n` by power iteration.
fn gram_spectral_norm(x: &Matrix) -> f64 {
    let n = x.rows() as f64;
    let mut v = Matrix::filled(x.cols(), 1, 1.0 / (x.cols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..50 {
        let w = x.t_matmul(&x.matmul(&v));
        let norm = w.as_slice().iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / n;
        v = w.map(|a| a / norm);
    }
    lambda
}

/// Multinomial logistic regression by Nesterov-accelerated gradient descent
/// with step `1/L` for the smoothness bound `L = ½λ_max(XᵀX/n) + l2`.
/// Returns `(d+1)×k` weights, last row the bias.
fn fit_logistic(x: &Matrix, y: &[usize], classes: usize, l2: f64, iterations: usize) -> Matrix {
    let n = x.rows() as f64;
    let d1 = x.cols();
    let step = 1.0 / (0.5 * gram_spectral_norm(x) + l2).max(1e-12);
    let mut w = Matrix::zeros(d1, classes);
    let mut prev = w.clone();
    for t in 0..iterations {
        let momentum = t as f64 / (t as f64 + 3.0);
        let look = w.zip_map(&prev, |a, b| a + momentum * (a - b));
        let mut p = x.matmul(&look);
        for r in 0..p.rows() {
            let row = p.row_mut(r);
            softmax_in_place(row);
            row[y[r]] -= 1.0;
        }
        let mut grad = x.t_matmul(&p).map(|g| g / n);
        for r in 0..d1 - 1 {
            for (g, wv) in grad.row_mut(r).iter_mut().zip(look.row(r)) {
                *g += l2 * wv;
            }
        }
        prev = w;
        w = look.zip_map(&grad, |a, g| a - step * g);
    }
    w
}

fn predict(x: &Matrix, w: &Matrix) -> Vec<usize> {
    let s = x.matmul(w);
    (0..s.rows()).map(|r| crate::vq::argmax(s.row(r))).collect()
}

/// Stratified k-fold accuracy of a linear probe on standardised embeddings.
pub fn nc_probe(h: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<NcResult> {
    if labels.len() != h.rows() {
        return Err(EvalError::Length {
            what: "labels",
            expected: h.rows(),
            found: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty("label set"));
    }
    let folds = cfg.folds.max(2);
    let classes = labels.iter().max().unwrap() + 1;
    let assignment = stratified_folds(labels, folds, cfg.seed);
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    let mut splits = Vec::with_capacity(folds);
    for fold in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| assignment[i] == fold);
        let mut seen = vec![false; classes];
        train.iter().for_each(|&i| seen[labels[i]] = true);
        if let Some(class) = (0..classes).find(|&c| present[c] && !seen[c]) {
            return Err(EvalError::ClassAbsent { class, fold });
        }
        splits.push((train, test));
    }
    let fold_accuracies: Vec<f64> = splits
        .par_iter()
        .map(|(train, test)| {
            if test.is_empty() {
                return f64::NAN;
            }
            let (mean, std) = standardizer(h, train);
            let xtr = design(h, train, &mean, &std);
            let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let w = fit_logistic(&xtr, &ytr, classes, cfg.l2, cfg.iterations);
            let pred = predict(&design(h, test, &mean, &std), &w);
            let correct = pred.iter().zip(test).filter(|(p, &i)| **p == labels[i]).count();
            correct as f64 / test.len() as f64
        })
        .collect::<Vec<_>>()
        .into_iter()
        .filter(|a| !a.is_nan())
        .collect();
    let k = fold_accuracies.len() as f64;
    let mean = fold_accuracies.iter().sum::<f64>() / k;
    let std = (fold_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / k).sqrt();
    Ok(NcResult {
        fold_accuracies,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_plus_plus<R: Rng + ?Sized>(x: &Matrix, k: usize, rng: &mut R) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(next)));
        }
    }
    x.gather_rows(&chosen)
}

fn lloyd(x: &Matrix, mut centroids: Matrix) -> KMeansResult {
    let (n, d, k) = (x.rows(), x.cols(), centroids.rows());
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let next: Vec<usize> = (0..n).map(|i| nearest(x.row(i), &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            // empty clusters keep their centroid
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
    }
    let inertia = (0..n).map(|i| sq_dist(x.row(i), centroids.row(assignments[i]))).sum();
    KMeansResult {
        assignments,
        centroids,
        inertia,
    }
}

/// k-means++ seeding and Lloyd iterations; the lowest-inertia restart wins,
/// earliest on ties. Restart `r` draws from stream `r` of the seeded RNG.
pub fn kmeans(x: &Matrix, k: usize, seed: u64, restarts: usize) -> Result<KMeansResult> {
    if k == 0 || x.rows() == 0 {
        return Err(EvalError::Empty("k-means input"));
    }
    if k > x.rows() {
        return Err(EvalError::TooManyClusters { k, n: x.rows() });
    }
    let runs: Vec<KMeansResult> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            lloyd(x, kmeans_plus_plus(x, k, &mut rng))
        })
        .collect();
    Ok(runs.into_iter().reduce(|best, r| if r.inertia < best.inertia { r } else { best }).unwrap())
}

fn relabel(ids: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = ids
        .iter()
        .map(|&i| {
            let next = map.len();
            *map.entry(i).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (a, ka) = relabel(a);
    let (b, kb) = relabel(b);
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Normalised mutual information with arithmetic-mean normalisation.
/// A single-cluster assignment scores 0.
pub fn nmi(assignments: &[usize], labels: &[usize]) -> f64 {
    let n = assignments.len() as f64;
    let (table, rows, cols) = contingency(assignments, labels);
    if rows.len() <= 1 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (i, r) in table.iter().enumerate() {
        for (j, &c) in r.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (n * c / (rows[i] * cols[j])).ln();
            }
        }
    }
    let denom = 0.5 * (entropy(&rows, n) + entropy(&cols, n));
    if denom <= 0.0 {
        return 0.0;
    }
    (mi / denom).clamp(0.0, 1.0)
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. A single-cluster assignment scores 0.
pub fn ari(assignments: &[usize], labels: &[usize]) -> f64 {
    let n = assignments.len() as f64;
    let (table, rows, cols) = contingency(assignments, labels);
    if rows.len() <= 1 {
        return 0.0;
    }
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sa: f64 = rows.iter().map(|&c| choose2(c)).sum();
    let sb: f64 = cols.iter().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return if assignments.len() <= 1 || index == max { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Mean silhouette with Euclidean distance; singleton clusters score 0 and a
/// single-cluster assignment scores 0.
pub fn silhouette(x: &Matrix, assignments: &[usize]) -> Result<f64> {
    let n = x.rows();
    if assignments.len() != n {
        return Err(EvalError::Length {
            what: "assignments",
            expected: n,
            found: assignments.len(),
        });
    }
    if n > SILHOUETTE_MAX_POINTS {
        return Err(EvalError::TooLarge { n });
    }
    let (ids, k) = relabel(assignments);
    if k <= 1 {
        return Ok(0.0);
    }
    let mut sizes = vec![0usize; k];
    ids.iter().for_each(|&c| sizes[c] += 1);
    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = ids[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..n {
                if j != i {
                    sums[ids[j]] += sq_dist(x.row(i), x.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k).filter(|&c| c != own).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m > 0.0 {
                (b - a) / m
            } else {
                0.0
            }
        })
        .collect();
    Ok(per_point.iter().sum::<f64>() / n as f64)
}

pub fn cluster_metrics(assignments: &[usize], labels: &[usize], h: &Matrix) -> Result<ClusterResult> {
    if labels.len() != assignments.len() {
        return Err(EvalError::Length {
            what: "labels",
            expected: assignments.len(),
            found: labels.len(),
        });
    }
    Ok(ClusterResult {
        nmi: nmi(assignments, labels),
        ari: ari(assignments, labels),
        sc: silhouette(h, assignments)?,
    })
}

/// Tab-separated embedding rows, one line per node, shortest round-trip
/// float formatting.
pub fn write_embeddings(h: &Matrix, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in 0..h.rows() {
        let line: Vec<String> = h.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join("\t"))?;
    }
    w.flush()?;
    Ok(())
}
