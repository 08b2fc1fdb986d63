//! Undirected graph storage, dataset ingestion, synthetic generation and
//! edge splitting.
//!
//! Graphs are stored as symmetric CSR: every undirected edge `{i, j}` appears
//! twice, once in row `i` and once in row `j`. Rows are sorted and contain
//! neither self-loops nor duplicates.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Matrix;

/// Unordered node pair, stored with `0 <= i < j`.
pub type Edge = (usize, usize);

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: node index {node} out of range (num_nodes = {num_nodes})")]
    NodeOutOfRange {
        file: String,
        line: usize,
        node: usize,
        num_nodes: usize,
    },
    #[error("features.tsv has {found} rows, expected {expected}")]
    FeatureRowCount { expected: usize, found: usize },
    #[error("{file}:{line}: expected {expected} columns, found {found}")]
    ColumnCount {
        file: String,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("{file}:{line}: non-numeric token {token:?}")]
    Parse {
        file: String,
        line: usize,
        token: String,
    },
    #[error("labels.tsv has {found} rows, expected {expected}")]
    LabelRowCount { expected: usize, found: usize },
    #[error("label {label} on line {line} is not below num_classes = {num_classes}")]
    LabelOutOfRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid meta.json: {0}")]
    Meta(String),
    #[error("graph too small: {0}")]
    TooSmall(String),
    #[error("cannot sample {requested} negative edges, only {available} non-edges available")]
    Infeasible { requested: usize, available: usize },
    #[error("invalid SBM parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Immutable undirected graph with dense node features and optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Matrix,
    labels: Option<Vec<usize>>,
    num_classes: Option<usize>,
}

impl SparseGraph {
    /// Builds a graph from an arbitrary edge list. Self-loops are dropped and
    /// duplicate pairs (in either direction) collapse to one undirected edge.
    /// Returns the graph together with the number of discarded input entries.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Option<Vec<usize>>,
        num_classes: Option<usize>,
    ) -> (Self, usize) {
        assert_eq!(features.rows(), num_nodes, "feature rows must equal num_nodes");
        let mut canon: Vec<Edge> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            assert!(a < num_nodes && b < num_nodes, "edge ({a},{b}) out of range");
            if a != b {
                canon.push((a.min(b), a.max(b)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        let dropped = edges.len() - canon.len();

        let mut degree = vec![0usize; num_nodes];
        for &(i, j) in &canon {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        for d in &degree {
            offsets.push(offsets.last().unwrap() + d);
        }
        let mut cursor = offsets[..num_nodes].to_vec();
        let mut targets = vec![0usize; 2 * canon.len()];
        for &(i, j) in &canon {
            targets[cursor[i]] = j;
            cursor[i] += 1;
            targets[cursor[j]] = i;
            cursor[j] += 1;
        }
        for r in 0..num_nodes {
            targets[offsets[r]..offsets[r + 1]].sort_unstable();
        }
        let g = Self {
            offsets,
            targets,
            features,
            labels,
            num_classes,
        };
        (g, dropped)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges (half the stored CSR entries).
    pub fn num_edges(&self) -> usize {
        self.targets.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.num_classes
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.targets[self.offsets[node]..self.offsets[node + 1]]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.offsets[node + 1] - self.offsets[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors(a).binary_search(&b).is_ok()
    }

    /// Undirected edges as `(i, j)` with `i < j`, in CSR order.
    pub fn edge_list(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_nodes() {
            for &j in self.neighbors(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Same nodes, features and labels with a different edge set.
    pub fn with_edges(&self, edges: &[Edge]) -> Self {
        Self::from_edges(
            self.num_nodes(),
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.num_classes,
        )
        .0
    }

    /// Checks every structural invariant. Used by tests and after loading.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.num_nodes();
        if *self.offsets.last().unwrap() != self.targets.len() {
            return Err("offsets[N] != len(targets)".into());
        }
        for r in 0..n {
            if self.offsets[r] > self.offsets[r + 1] {
                return Err(format!("offsets decrease at row {r}"));
            }
            let row = self.neighbors(r);
            for w in row.windows(2) {
                if w[0] >= w[1] {
                    return Err(format!("row {r} unsorted or duplicated"));
                }
            }
            for &c in row {
                if c >= n {
                    return Err(format!("row {r} target {c} out of range"));
                }
                if c == r {
                    return Err(format!("self-loop on {r}"));
                }
                if !self.has_edge(c, r) {
                    return Err(format!("asymmetric entry ({r},{c})"));
                }
            }
        }
        if self.features.rows() != n {
            return Err("feature rows != N".into());
        }
        Ok(())
    }
}

/// CSR operator with per-entry weights. Produced by the normalisation
/// routines below; used as a constant left factor in sparse products.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub offsets: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl NormalizedAdjacency {
    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.targets.len()
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let row = &self.targets[self.offsets[i]..self.offsets[i + 1]];
        row.binary_search(&j)
            .ok()
            .map(|k| self.weights[self.offsets[i] + k])
    }

    /// Row index of every stored entry.
    pub fn entry_rows(&self) -> Vec<usize> {
        let mut rows = Vec::with_capacity(self.nnz());
        for r in 0..self.num_nodes() {
            rows.extend(std::iter::repeat_n(r, self.offsets[r + 1] - self.offsets[r]));
        }
        rows
    }

    fn from_rows(g: &SparseGraph, self_loops: bool, weight: impl Fn(usize, usize) -> f64) -> Self {
        let n = g.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut targets = Vec::with_capacity(g.targets.len() + n);
        let mut weights = Vec::with_capacity(g.targets.len() + n);
        offsets.push(0);
        for i in 0..n {
            let row = g.neighbors(i);
            let split = row.partition_point(|&c| c < i);
            let mut push = |j: usize| {
                targets.push(j);
                weights.push(weight(i, j));
            };
            row[..split].iter().for_each(|&j| push(j));
            if self_loops {
                push(i);
            }
            row[split..].iter().for_each(|&j| push(j));
            offsets.push(targets.len());
        }
        Self {
            offsets,
            targets,
            weights,
        }
    }
}

/// GCN propagation operator `D̃^{-1/2} (A + I) D̃^{-1/2}`:
/// weight(i, j) = 1 / sqrt((deg_i + 1)(deg_j + 1)), self-loops on every row.
pub fn sym_normalize(g: &SparseGraph) -> NormalizedAdjacency {
    let deg: Vec<f64> = (0..g.num_nodes()).map(|i| g.degree(i) as f64 + 1.0).collect();
    NormalizedAdjacency::from_rows(g, true, |i, j| 1.0 / (deg[i] * deg[j]).sqrt())
}

/// Neighbour-mean operator without self-loops (GraphSAGE-mean aggregation).
/// Isolated nodes get an empty row.
pub fn mean_adjacency(g: &SparseGraph) -> NormalizedAdjacency {
    NormalizedAdjacency::from_rows(g, false, |i, _| 1.0 / g.degree(i) as f64)
}

/// Unweighted `A + I` (GIN sum aggregation with epsilon = 0).
pub fn sum_adjacency(g: &SparseGraph) -> NormalizedAdjacency {
    NormalizedAdjacency::from_rows(g, true, |_, _| 1.0)
}

/// Held-out link-prediction split. Positive sets partition the input edges;
/// negative sets are non-edges of the full graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSplit {
    pub train_pos: Vec<Edge>,
    pub val_pos: Vec<Edge>,
    pub test_pos: Vec<Edge>,
    pub val_neg: Vec<Edge>,
    pub test_neg: Vec<Edge>,
}

fn frac_count(frac: f64, total: usize) -> usize {
    (frac * total as f64).round() as usize
}

pub fn split_edges(g: &SparseGraph, val_frac: f64, test_frac: f64, seed: u64) -> Result<EdgeSplit> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        return Err(GraphError::TooSmall(format!(
            "val_frac + test_frac must be in [0, 1), got {val_frac} + {test_frac}"
        )));
    }
    let mut edges = g.edge_list();
    let total = edges.len();
    let n_val = frac_count(val_frac, total);
    let n_test = frac_count(test_frac, total);
    if (val_frac > 0.0 && n_val == 0) || (test_frac > 0.0 && n_test == 0) || (n_val + n_test > 0 && n_val + n_test >= total) {
        return Err(GraphError::TooSmall(format!(
            "{total} edges cannot supply {n_val} validation and {n_test} test positives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let val_pos: Vec<Edge> = edges[..n_val].to_vec();
    let test_pos: Vec<Edge> = edges[n_val..n_val + n_test].to_vec();
    let train_pos: Vec<Edge> = edges[n_val + n_test..].to_vec();

    let neg = sample_negative_edges(g, n_val + n_test, rng.random(), &[])?;
    let val_neg = neg[..n_val].to_vec();
    let test_neg = neg[n_val..].to_vec();
    Ok(EdgeSplit {
        train_pos,
        val_pos,
        test_pos,
        val_neg,
        test_neg,
    })
}

/// Draws `count` distinct non-edges, none of which appear in the graph or in
/// `exclude`. Rejection sampling on sparse graphs; explicit enumeration when
/// the request is a large share of what is available.
pub fn sample_negative_edges(g: &SparseGraph, count: usize, seed: u64, exclude: &[Edge]) -> Result<Vec<Edge>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let n = g.num_nodes();
    let excluded: HashSet<Edge> = exclude
        .iter()
        .map(|&(a, b)| (a.min(b), a.max(b)))
        .filter(|&(a, b)| a != b && !g.has_edge(a, b))
        .collect();
    let all_pairs = n * n.saturating_sub(1) / 2;
    let available = all_pairs - g.num_edges() - excluded.len();
    if count > available {
        return Err(GraphError::Infeasible {
            requested: count,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count * 4 > available {
        let mut pool: Vec<Edge> = Vec::with_capacity(available);
        for i in 0..n {
            for j in i + 1..n {
                if !g.has_edge(i, j) && !excluded.contains(&(i, j)) {
                    pool.push((i, j));
                }
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(count);
        return Ok(pool);
    }
    let mut seen: HashSet<Edge> = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.random_range(0..n);
        let b = rng.random_range(0..n);
        if a == b {
            continue;
        }
        let e = (a.min(b), a.max(b));
        if g.has_edge(e.0, e.1) || excluded.contains(&e) || !seen.insert(e) {
            continue;
        }
        out.push(e);
    }
    Ok(out)
}

/// Planted-partition random graph parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SbmParams {
    pub blocks: usize,
    pub nodes_per_block: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub feature_noise: f64,
}

impl SbmParams {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.nodes_per_block == 0 || self.feature_dim == 0 {
            return Err(GraphError::InvalidParams("blocks, nodes_per_block and feature_dim must be positive".into()));
        }
        if !(0.0 <= self.p_out && self.p_out <= self.p_in && self.p_in <= 1.0) {
            return Err(GraphError::InvalidParams(format!(
                "need 0 <= p_out <= p_in <= 1, got p_in = {}, p_out = {}",
                self.p_in, self.p_out
            )));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return Err(GraphError::InvalidParams("feature_noise must be a finite non-negative std-dev".into()));
        }
        Ok(())
    }
}

/// Samples a stochastic block model. Labels are block ids; feature `k` of a
/// node in block `b` is `[k % blocks == b]` plus Gaussian noise.
pub fn generate_sbm(p: &SbmParams, seed: u64) -> Result<SparseGraph> {
    p.validate()?;
    let n = p.blocks * p.nodes_per_block;
    let block = |i: usize| i / p.nodes_per_block;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let prob = if block(i) == block(j) { p.p_in } else { p.p_out };
            if rng.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }
    let noise = Normal::new(0.0, p.feature_noise).expect("validated std-dev");
    let mut features = Matrix::zeros(n, p.feature_dim);
    for i in 0..n {
        for k in 0..p.feature_dim {
            let base = if k % p.blocks == block(i) { 1.0 } else { 0.0 };
            let eps = if p.feature_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            features[(i, k)] = base + eps;
        }
    }
    let labels = (0..n).map(block).collect();
    Ok(SparseGraph::from_edges(n, &edges, features, Some(labels), Some(p.blocks)).0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    feature_dim: usize,
    #[serde(default)]
    num_classes: Option<usize>,
}

fn read_required(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(GraphError::MissingFile(path));
    }
    Ok(fs::read_to_string(path)?)
}

fn parse_token<T: std::str::FromStr>(file: &str, line: usize, token: &str) -> Result<T> {
    token.trim().parse().map_err(|_| GraphError::Parse {
        file: file.to_string(),
        line,
        token: token.to_string(),
    })
}

/// Reads a dataset directory (`edges.tsv`, `features.tsv`, `meta.json`,
/// optional `labels.tsv`).
pub fn load_graph(dir: &Path) -> Result<SparseGraph> {
    let meta: Meta = serde_json::from_str(&read_required(dir, "meta.json")?).map_err(|e| GraphError::Meta(e.to_string()))?;
    let n = meta.num_nodes;
    let d = meta.feature_dim;

    let edges_txt = read_required(dir, "edges.tsv")?;
    let feats_txt = read_required(dir, "features.tsv")?;

    let mut edges = Vec::new();
    for (ln, line) in edges_txt.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 2 {
            return Err(GraphError::ColumnCount {
                file: "edges.tsv".into(),
                line: ln + 1,
                expected: 2,
                found: cols.len(),
            });
        }
        let a: usize = parse_token("edges.tsv", ln + 1, cols[0])?;
        let b: usize = parse_token("edges.tsv", ln + 1, cols[1])?;
        for node in [a, b] {
            if node >= n {
                return Err(GraphError::NodeOutOfRange {
                    file: "edges.tsv".into(),
                    line: ln + 1,
                    node,
                    num_nodes: n,
                });
            }
        }
        edges.push((a, b));
    }

    let rows: Vec<&str> = feats_txt.lines().filter(|l| !l.trim().is_empty()).collect();
    if rows.len() != n {
        return Err(GraphError::FeatureRowCount {
            expected: n,
            found: rows.len(),
        });
    }
    let mut features = Matrix::zeros(n, d);
    for (i, line) in rows.iter().enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != d {
            return Err(GraphError::ColumnCount {
                file: "features.tsv".into(),
                line: i + 1,
                expected: d,
                found: cols.len(),
            });
        }
        for (k, tok) in cols.iter().enumerate() {
            let v: f64 = parse_token("features.tsv", i + 1, tok)?;
            if !v.is_finite() {
                return Err(GraphError::Parse {
                    file: "features.tsv".into(),
                    line: i + 1,
                    token: tok.to_string(),
                });
            }
            features[(i, k)] = v;
        }
    }

    let labels_path = dir.join("labels.tsv");
    let labels = if labels_path.is_file() {
        let txt = fs::read_to_string(&labels_path)?;
        let rows: Vec<&str> = txt.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != n {
            return Err(GraphError::LabelRowCount {
                expected: n,
                found: rows.len(),
            });
        }
        let mut out = Vec::with_capacity(n);
        for (i, tok) in rows.iter().enumerate() {
            let label: usize = parse_token("labels.tsv", i + 1, tok)?;
            if let Some(k) = meta.num_classes {
                if label >= k {
                    return Err(GraphError::LabelOutOfRange {
                        line: i + 1,
                        label,
                        num_classes: k,
                    });
                }
            }
            out.push(label);
        }
        Some(out)
    } else {
        None
    };
    let num_classes = match (&labels, meta.num_classes) {
        (_, Some(k)) => Some(k),
        (Some(l), None) => l.iter().max().map(|m| m + 1),
        (None, None) => None,
    };

    let (g, dropped) = SparseGraph::from_edges(n, &edges, features, labels, num_classes);
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} self-loop or duplicate edge entries", dir.display());
    }
    Ok(g)
}

/// Writes a graph in the layout `load_graph` reads. Each undirected edge is
/// written once as `i<TAB>j` with `i < j`.
pub fn write_graph(g: &SparseGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut edges = std::io::BufWriter::new(fs::File::create(dir.join("edges.tsv"))?);
    for (i, j) in g.edge_list() {
        writeln!(edges, "{i}\t{j}")?;
    }
    edges.flush()?;
    let mut feats = std::io::BufWriter::new(fs::File::create(dir.join("features.tsv"))?);
    for i in 0..g.num_nodes() {
        let row: Vec<String> = g.features.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(feats, "{}", row.join("\t"))?;
    }
    feats.flush()?;
    if let Some(labels) = g.labels() {
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join("labels.tsv"))?);
        for l in labels {
            writeln!(out, "{l}")?;
        }
        out.flush()?;
    }
    let meta = Meta {
        num_nodes: g.num_nodes(),
        feature_dim: g.feature_dim(),
        num_classes: g.num_classes(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(n: usize, edges: &[(usize, usize)]) -> SparseGraph {
        SparseGraph::from_edges(n, edges, Matrix::zeros(n, 1), None, None).0
    }

    #[test]
    fn smallest_symmetric_graph() {
        let g = bare(2, &[(0, 1)]);
        assert_eq!(g.offsets(), &[0, 1, 2]);
        assert_eq!(g.targets(), &[1, 0]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn dedup_drops_loops_and_duplicates() {
        let (g, dropped) = SparseGraph::from_edges(4, &[(3, 3), (1, 2), (2, 1), (1, 2)], Matrix::zeros(4, 1), None, None);
        assert_eq!(g.num_edges(), 1);
        assert_eq!(dropped, 3);
        assert_eq!(g.edge_list(), vec![(1, 2)]);
        g.check_invariants().unwrap();
    }

    #[test]
    fn normalize_isolated_node() {
        let a = sym_normalize(&bare(1, &[]));
        assert_eq!(a.offsets, vec![0, 1]);
        assert_eq!(a.weights, vec![1.0]);
    }

    #[test]
    fn normalize_path_is_half_everywhere() {
        let a = sym_normalize(&bare(2, &[(0, 1)]));
        assert_eq!(a.nnz(), 4);
        assert!(a.weights.iter().all(|&w| w == 0.5));
    }

    #[test]
    fn normalize_star_center() {
        let a = sym_normalize(&bare(3, &[(0, 1), (0, 2)]));
        // deg(0)+1 = 3, deg(leaf)+1 = 2
        let expected = 1.0 / 6f64.sqrt();
        assert!((a.weight(0, 1).unwrap() - expected).abs() < 1e-15);
        assert!((a.weight(0, 1).unwrap() - 0.40825).abs() < 1e-5);
        assert_eq!(a.weight(1, 2), None);
        assert!((a.weight(1, 1).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_and_sum_operators() {
        let g = bare(3, &[(0, 1), (0, 2)]);
        let m = mean_adjacency(&g);
        assert_eq!(m.weight(0, 1), Some(0.5));
        assert_eq!(m.weight(1, 0), Some(1.0));
        assert_eq!(m.weight(0, 0), None);
        let s = sum_adjacency(&g);
        assert_eq!(s.weight(0, 0), Some(1.0));
        assert_eq!(s.nnz(), 7);
    }

    #[test]
    fn split_arithmetic() {
        let edges: Vec<Edge> = (0..100).map(|i| (i, i + 1)).collect();
        let g = bare(101, &edges);
        let s = split_edges(&g, 0.05, 0.10, 7).unwrap();
        assert_eq!((s.val_pos.len(), s.test_pos.len(), s.train_pos.len()), (5, 10, 85));
        assert_eq!(s.val_neg.len(), 5);
        assert_eq!(s.test_neg.len(), 10);
        let mut all: Vec<Edge> = s.train_pos.iter().chain(&s.val_pos).chain(&s.test_pos).copied().collect();
        all.sort();
        assert_eq!(all, g.edge_list());
        for e in s.val_neg.iter().chain(&s.test_neg) {
            assert!(!g.has_edge(e.0, e.1));
        }
    }

    #[test]
    fn degenerate_split_keeps_everything() {
        let g = bare(4, &[(0, 1), (1, 2), (2, 3)]);
        let s = split_edges(&g, 0.0, 0.0, 1).unwrap();
        assert_eq!(s.train_pos.len(), 3);
        assert!(s.val_pos.is_empty() && s.test_neg.is_empty());
    }

    #[test]
    fn split_too_small() {
        let g = bare(3, &[(0, 1)]);
        assert!(matches!(split_edges(&g, 0.05, 0.1, 1), Err(GraphError::TooSmall(_))));
    }

    #[test]
    fn split_seed_determinism() {
        let p = SbmParams {
            blocks: 2,
            nodes_per_block: 20,
            p_in: 0.3,
            p_out: 0.05,
            feature_dim: 4,
            feature_noise: 0.1,
        };
        let g = generate_sbm(&p, 3).unwrap();
        let a = split_edges(&g, 0.1, 0.2, 11).unwrap();
        let b = split_edges(&g, 0.1, 0.2, 11).unwrap();
        let c = split_edges(&g, 0.1, 0.2, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn negatives_on_complete_graph_are_infeasible() {
        let g = bare(3, &[(0, 1), (1, 2), (0, 2)]);
        assert!(matches!(
            sample_negative_edges(&g, 1, 0, &[]),
            Err(GraphError::Infeasible { requested: 1, available: 0 })
        ));
        assert!(sample_negative_edges(&g, 0, 0, &[]).unwrap().is_empty());
    }

    #[test]
    fn negatives_on_path_enumerate_all_non_edges() {
        let g = bare(4, &[(0, 1), (1, 2), (2, 3)]);
        // brute force: every pair i<j that is not an edge
        let mut expected = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                if !g.has_edge(i, j) {
                    expected.push((i, j));
                }
            }
        }
        assert_eq!(expected, vec![(0, 2), (0, 3), (1, 3)]);
        let mut got = sample_negative_edges(&g, 3, 5, &[]).unwrap();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn negatives_respect_exclusions() {
        let g = bare(4, &[(0, 1), (1, 2), (2, 3)]);
        let mut got = sample_negative_edges(&g, 2, 5, &[(2, 0)]).unwrap();
        got.sort();
        assert_eq!(got, vec![(0, 3), (1, 3)]);
        assert!(sample_negative_edges(&g, 3, 5, &[(0, 2)]).is_err());
    }

    #[test]
    fn sbm_corners() {
        let p = SbmParams {
            blocks: 2,
            nodes_per_block: 3,
            p_in: 1.0,
            p_out: 0.0,
            feature_dim: 4,
            feature_noise: 0.0,
        };
        let g = generate_sbm(&p, 9).unwrap();
        assert_eq!(g.edge_list(), vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
        assert_eq!(g.labels().unwrap(), &[0, 0, 0, 1, 1, 1]);
        for i in 1..3 {
            assert_eq!(g.features().row(0), g.features().row(i));
            assert_eq!(g.features().row(3), g.features().row(3 + i));
        }
        assert_eq!(g.features().row(0), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn sbm_rejects_bad_probabilities() {
        let p = SbmParams {
            blocks: 2,
            nodes_per_block: 3,
            p_in: 0.1,
            p_out: 0.2,
            feature_dim: 4,
            feature_noise: 0.0,
        };
        assert!(generate_sbm(&p, 0).is_err());
    }

    #[test]
    fn loader_round_trip_and_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let p = SbmParams {
            blocks: 3,
            nodes_per_block: 5,
            p_in: 0.6,
            p_out: 0.1,
            feature_dim: 3,
            feature_noise: 0.25,
        };
        let g = generate_sbm(&p, 1).unwrap();
        write_graph(&g, dir.path()).unwrap();
        let back = load_graph(dir.path()).unwrap();
        assert_eq!(back, g);

        fs::write(dir.path().join("edges.tsv"), "0\t99\n").unwrap();
        assert!(matches!(load_graph(dir.path()), Err(GraphError::NodeOutOfRange { node: 99, .. })));
        fs::write(dir.path().join("edges.tsv"), "0\tx\n").unwrap();
        assert!(matches!(load_graph(dir.path()), Err(GraphError::Parse { .. })));
        fs::write(dir.path().join("edges.tsv"), "0\t1\n").unwrap();
        fs::write(dir.path().join("features.tsv"), "1\t2\t3\n").unwrap();
        assert!(matches!(
            load_graph(dir.path()),
            Err(GraphError::FeatureRowCount { expected: 15, found: 1 })
        ));
        fs::remove_file(dir.path().join("features.tsv")).unwrap();
        assert!(matches!(load_graph(dir.path()), Err(GraphError::MissingFile(_))));
    }
}
