//! GNN and MLP building blocks assembled from tape operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Result, Tape, Var};
use crate::graph::{mean_adjacency, sum_adjacency, sym_normalize, NormalizedAdjacency, SparseGraph};
use crate::params::{BoundParams, ParamStore};
use crate::tensor::Matrix;

/// Slope of the attention score nonlinearity.
pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

/// Graph operators shared by every layer during one forward pass.
#[derive(Debug, Clone)]
pub struct GraphContext {
    /// Symmetric-normalised `A + I`; its CSR structure (with self-loops) also
    /// drives attention.
    pub gcn: NormalizedAdjacency,
    pub mean: NormalizedAdjacency,
    pub sum: NormalizedAdjacency,
    /// Destination row of each entry of `gcn`.
    pub entry_rows: Vec<usize>,
}

impl GraphContext {
    pub fn new(g: &SparseGraph) -> Self {
        let gcn = sym_normalize(g);
        let entry_rows = gcn.entry_rows();
        Self {
            gcn,
            mean: mean_adjacency(g),
            sum: sum_adjacency(g),
            entry_rows,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.gcn.num_nodes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Prelu(ParamId),
    Elu,
}

impl Activation {
    fn apply<'a>(self, tape: &mut Tape<'a>, p: &BoundParams, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Prelu(slope) => tape.prelu(x, p[slope]),
            Activation::Elu => tape.elu(x),
        }
    }

    fn prelu(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Activation::Prelu(store.add(format!("{name}.prelu"), Matrix::filled(1, width, PRELU_INIT)))
    }
}

/// Affine map with optional activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, activation: Activation, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        Self { weight, bias, activation }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, x: Var) -> Result<Var> {
        let z = tape.matmul(x, p[self.weight])?;
        let z = tape.add_row(z, p[self.bias])?;
        self.activation.apply(tape, p, z)
    }
}

/// Graph convolution: `act(Â · H · W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, prelu: bool, rng: &mut R) -> Self {
        let weight = store.add_glorot(format!("{name}.weight"), d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        let activation = if prelu {
            Activation::prelu(store, name, d_out)
        } else {
            Activation::Identity
        };
        Self { weight, bias, activation }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, adj: &'a NormalizedAdjacency, h: Var) -> Result<Var> {
        let hw = tape.matmul(h, p[self.weight])?;
        let agg = tape.sparse_matmul(adj, hw)?;
        let z = tape.add_row(agg, p[self.bias])?;
        self.activation.apply(tape, p, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    pub weight: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
}

/// Graph attention with self-loops, leaky-ReLU scoring and per-destination
/// softmax. Heads are concatenated or averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub concat: bool,
    pub bias: ParamId,
    pub activation: Activation,
}

impl GatLayer {
    /// With `concat`, the output width is `heads * d_head`; otherwise `d_head`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_head: usize,
        heads: usize,
        concat: bool,
        prelu: bool,
        rng: &mut R,
    ) -> Self {
        assert!(heads >= 1, "GAT needs at least one head");
        let heads_v = (0..heads)
            .map(|k| GatHead {
                weight: store.add_glorot(format!("{name}.head{k}.weight"), d_in, d_head, rng),
                att_src: store.add_glorot(format!("{name}.head{k}.att_src"), d_head, 1, rng),
                att_dst: store.add_glorot(format!("{name}.head{k}.att_dst"), d_head, 1, rng),
            })
            .collect();
        let d_out = if concat { heads * d_head } else { d_head };
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d_out));
        let activation = if prelu {
            Activation::prelu(store, name, d_out)
        } else {
            Activation::Identity
        };
        Self {
            heads: heads_v,
            concat,
            bias,
            activation,
        }
    }

    /// Output plus each head's `nnz×1` attention column (CSR order of
    /// `ctx.gcn`).
    pub fn forward_with_attention<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, ctx: &'a GraphContext, h: Var) -> Result<(Var, Vec<Var>)> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let z = tape.matmul(h, p[head.weight])?;
            let s_src = tape.matmul(z, p[head.att_src])?;
            let s_dst = tape.matmul(z, p[head.att_dst])?;
            let e_dst = tape.gather_rows(s_dst, &ctx.entry_rows)?;
            let e_src = tape.gather_rows(s_src, &ctx.gcn.targets)?;
            let raw = tape.add(e_dst, e_src)?;
            let score = tape.leaky_relu(raw, GAT_NEGATIVE_SLOPE)?;
            let alpha = tape.segment_softmax(score, &ctx.gcn.offsets)?;
            outs.push(tape.edge_aggregate(alpha, z, &ctx.gcn)?);
            alphas.push(alpha);
        }
        let combined = if outs.len() == 1 {
            outs[0]
        } else if self.concat {
            tape.concat_cols(&outs)?
        } else {
            let mut acc = outs[0];
            for &o in &outs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / outs.len() as f64)?
        };
        let z = tape.add_row(combined, p[self.bias])?;
        Ok((self.activation.apply(tape, p, z)?, alphas))
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, ctx: &'a GraphContext, h: Var) -> Result<Var> {
        Ok(self.forward_with_attention(tape, p, ctx, h)?.0)
    }
}

/// GraphSAGE with mean aggregation: `act(H W_self + mean_N(H) W_neigh + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SageLayer {
    pub w_self: ParamId,
    pub w_neigh: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

impl SageLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            w_self: store.add_glorot(format!("{name}.w_self"), d_in, d_out, rng),
            w_neigh: store.add_glorot(format!("{name}.w_neigh"), d_in, d_out, rng),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)),
            activation: Activation::prelu(store, name, d_out),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, ctx: &'a GraphContext, h: Var) -> Result<Var> {
        let own = tape.matmul(h, p[self.w_self])?;
        let neigh = tape.sparse_matmul(&ctx.mean, h)?;
        let neigh = tape.matmul(neigh, p[self.w_neigh])?;
        let z = tape.add(own, neigh)?;
        let z = tape.add_row(z, p[self.bias])?;
        self.activation.apply(tape, p, z)
    }
}

/// GIN with epsilon fixed to zero: `act(MLP((A + I) H))`, two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct GinLayer {
    pub inner: Dense,
    pub outer: Dense,
}

impl GinLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let inner = Dense::new(store, &format!("{name}.mlp0"), d_in, d_out, Activation::Elu, rng);
        let act = Activation::prelu(store, name, d_out);
        let outer = Dense::new(store, &format!("{name}.mlp1"), d_out, d_out, act, rng);
        Self { inner, outer }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, ctx: &'a GraphContext, h: Var) -> Result<Var> {
        let agg = tape.sparse_matmul(&ctx.sum, h)?;
        let z = self.inner.forward(tape, p, agg)?;
        self.outer.forward(tape, p, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpStack {
    pub layers: Vec<Dense>,
}

impl MlpStack {
    /// Hidden layers use ELU; the last layer is linear.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { Activation::Identity } else { Activation::Elu };
                Dense::new(store, &format!("{name}.{i}"), w[0], w[1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, l| l.forward(tape, p, h))
    }
}

/// How a node pair is combined before the edge MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairCombine {
    /// Scalar `h_i · h_j`; the MLP input is one-dimensional.
    #[default]
    Dot,
    /// Elementwise `h_i ⊙ h_j`; the MLP input has the embedding width.
    Hadamard,
}

/// Edge logits `MLP(h_i ∘ h_j)` for each pair, as an `E×1` column.
pub fn edge_logits<'a>(
    tape: &mut Tape<'a>,
    p: &BoundParams,
    mlp: &MlpStack,
    combine: PairCombine,
    h: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let src: Vec<usize> = pairs.iter().map(|e| e.0).collect();
    let dst: Vec<usize> = pairs.iter().map(|e| e.1).collect();
    let a = tape.gather_rows(h, &src)?;
    let b = tape.gather_rows(h, &dst)?;
    let x = match combine {
        PairCombine::Dot => tape.row_dot(a, b)?,
        PairCombine::Hadamard => tape.mul(a, b)?,
    };
    mlp.forward(tape, p, x)
}

/// Edge probabilities `sigmoid(MLP(h_i ∘ h_j))`.
pub fn edge_decode<'a>(
    tape: &mut Tape<'a>,
    p: &BoundParams,
    mlp: &MlpStack,
    combine: PairCombine,
    h: Var,
    pairs: &[(usize, usize)],
) -> Result<Var> {
    let logits = edge_logits(tape, p, mlp, combine, h, pairs)?;
    tape.sigmoid(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReadoutMode {
    #[default]
    Concat,
    Last,
}

pub fn readout<'a>(tape: &mut Tape<'a>, per_layer: &[Var], mode: ReadoutMode) -> Result<Var> {
    assert!(!per_layer.is_empty(), "readout of zero layers");
    match mode {
        ReadoutMode::Last => Ok(*per_layer.last().unwrap()),
        ReadoutMode::Concat if per_layer.len() == 1 => Ok(per_layer[0]),
        ReadoutMode::Concat => tape.concat_cols(per_layer),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize)], feats: Matrix) -> SparseGraph {
        SparseGraph::from_edges(n, edges, feats, None, None).0
    }

    #[test]
    fn gcn_single_node_identity() {
        let g = graph(1, &[], Matrix::from_rows(&[vec![1.5, -2.0]]));
        let ctx = GraphContext::new(&g);
        let mut store = ParamStore::new();
        let weight = store.add("w", Matrix::identity(2));
        let bias = store.add("b", Matrix::zeros(1, 2));
        let layer = GcnLayer {
            weight,
            bias,
            activation: Activation::Identity,
        };
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let x = t.constant(g.features().clone()).unwrap();
        let y = layer.forward(&mut t, &p, &ctx.gcn, x).unwrap();
        assert_eq!(t.value(y), g.features());
    }

    #[test]
    fn gcn_two_node_path() {
        let g = graph(2, &[(0, 1)], Matrix::from_rows(&[vec![2.0], vec![4.0]]));
        let ctx = GraphContext::new(&g);
        let mut store = ParamStore::new();
        let weight = store.add("w", Matrix::scalar(1.0));
        let bias = store.add("b", Matrix::zeros(1, 1));
        let layer = GcnLayer {
            weight,
            bias,
            activation: Activation::Identity,
        };
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let x = t.constant(g.features().clone()).unwrap();
        let y = layer.forward(&mut t, &p, &ctx.gcn, x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn gat_isolated_node_and_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // node 3 isolated; star 0-{1,2} with identical features
        let feats = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![0.5, -1.0]]);
        let g = graph(4, &[(0, 1), (0, 2)], feats.clone());
        let ctx = GraphContext::new(&g);
        let mut store = ParamStore::new();
        let layer = GatLayer::new(&mut store, "gat", 2, 3, 1, true, false, &mut rng);
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let x = t.constant(feats.clone()).unwrap();
        let (y, alphas) = layer.forward_with_attention(&mut t, &p, &ctx, x).unwrap();
        let a = t.value(alphas[0]).as_slice();
        // row 0 holds (0,0),(0,1),(0,2)
        for e in 0..3 {
            assert!((a[e] - 1.0 / 3.0).abs() < 1e-12);
        }
        let last = ctx.gcn.offsets[3];
        assert_eq!(a[last], 1.0);
        let wx = feats.gather_rows(&[3]).matmul(store.get(layer.heads[0].weight));
        for c in 0..3 {
            assert!((t.value(y)[(3, c)] - wx[(0, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn gat_star_matches_hand_softmax() {
        let feats = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![-1.0]]);
        let g = graph(3, &[(0, 1), (0, 2)], feats.clone());
        let ctx = GraphContext::new(&g);
        let mut store = ParamStore::new();
        let weight = store.add("w", Matrix::scalar(0.5));
        let att_src = store.add("as", Matrix::scalar(1.5));
        let att_dst = store.add("ad", Matrix::scalar(-0.7));
        let bias = store.add("b", Matrix::zeros(1, 1));
        let layer = GatLayer {
            heads: vec![GatHead { weight, att_src, att_dst }],
            concat: true,
            bias,
            activation: Activation::Identity,
        };
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let x = t.constant(feats).unwrap();
        let (y, alphas) = layer.forward_with_attention(&mut t, &p, &ctx, x).unwrap();
        // hand evaluation for destination 0 over sources {0, 1, 2}
        let z = [0.5, 1.0, -0.5];
        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let s: Vec<f64> = z.iter().map(|&zj| lrelu(-0.7 * z[0] + 1.5 * zj)).collect();
        let denom: f64 = s.iter().map(|v| v.exp()).sum();
        let alpha: Vec<f64> = s.iter().map(|v| v.exp() / denom).collect();
        let got = &t.value(alphas[0]).as_slice()[0..3];
        for k in 0..3 {
            assert!((got[k] - alpha[k]).abs() < 1e-12);
        }
        let out0: f64 = alpha.iter().zip(z).map(|(a, zj)| a * zj).sum();
        assert!((t.value(y)[(0, 0)] - out0).abs() < 1e-12);
    }

    #[test]
    fn edge_decoder_examples() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::scalar(1.0));
        let b = store.add("b", Matrix::zeros(1, 1));
        let mlp = MlpStack {
            layers: vec![Dense {
                weight: w,
                bias: b,
                activation: Activation::Identity,
            }],
        };
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let h = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]])).unwrap();
        let probs = edge_decode(&mut t, &p, &mlp, PairCombine::Dot, h, &[(0, 1), (2, 2), (0, 2), (2, 0)]).unwrap();
        let v = t.value(probs).as_slice();
        assert_eq!(v[0], 0.5);
        assert!((v[1] - 0.880797).abs() < 1e-6);
        assert_eq!(v[2], v[3]);
        assert!(edge_decode(&mut t, &p, &mlp, PairCombine::Dot, h, &[(0, 7)]).is_err());
    }

    #[test]
    fn readout_widths() {
        let mut t = Tape::new(false);
        let a = t.constant(Matrix::zeros(3, 4)).unwrap();
        let b = t.constant(Matrix::zeros(3, 8)).unwrap();
        assert_eq!(readout(&mut t, &[a], ReadoutMode::Concat).unwrap(), readout(&mut t, &[a], ReadoutMode::Last).unwrap());
        let c = readout(&mut t, &[a, b], ReadoutMode::Concat).unwrap();
        assert_eq!(t.value(c).cols(), 12);
        assert_eq!(readout(&mut t, &[a, b], ReadoutMode::Last).unwrap(), b);
    }

    #[test]
    fn layers_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 7;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (1, 4), (2, 6)];
        let feats = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let g = graph(n, &edges, feats.clone());
        let ctx = GraphContext::new(&g);

        let mut store = ParamStore::new();
        let gcn = GcnLayer::new(&mut store, "gcn", 3, 4, true, &mut rng);
        let gat = GatLayer::new(&mut store, "gat", 4, 2, 2, true, true, &mut rng);
        let gat_avg = GatLayer::new(&mut store, "gat2", 4, 3, 2, false, false, &mut rng);
        let sage = SageLayer::new(&mut store, "sage", 4, 3, &mut rng);
        let gin = GinLayer::new(&mut store, "gin", 3, 3, &mut rng);
        let mlp = MlpStack::new(&mut store, "mlp", &[1, 4, 1], &mut rng);
        // move PReLU slopes off their init so both branches matter
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("prelu") {
                *store.get_mut(id) = Matrix::from_fn(1, store.get(id).cols(), |_, _| rng.random_range(0.1..0.6));
            }
        }
        let pairs = [(0, 1), (2, 5), (3, 6)];
        let err = finite_diff_check(
            |t, vars| {
                let p = BoundParams::from_vars(vars.to_vec());
                let x = t.constant(feats.clone())?;
                let h1 = gcn.forward(t, &p, &ctx.gcn, x)?;
                let h2 = gat.forward(t, &p, &ctx, h1)?;
                let h3 = gat_avg.forward(t, &p, &ctx, h1)?;
                let h4 = sage.forward(t, &p, &ctx, h1)?;
                let h5 = gin.forward(t, &p, &ctx, x)?;
                let h = readout(t, &[h2, h3, h4, h5], ReadoutMode::Concat)?;
                let probs = edge_decode(t, &p, &mlp, PairCombine::Dot, h, &pairs)?;
                let sq = t.mul(h, h)?;
                let a = t.mean(sq)?;
                let b = t.sum(probs)?;
                t.add(a, b)
            },
            store.values(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gcn_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 10;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.3 {
                    edges.push((i, j));
                }
            }
        }
        let feats = Matrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let g = graph(n, &edges, feats.clone());
        let pedges: Vec<_> = edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut pfeats = Matrix::zeros(n, 3);
        for i in 0..n {
            pfeats.row_mut(perm[i]).copy_from_slice(feats.row(i));
        }
        let pg = graph(n, &pedges, pfeats);

        let mut store = ParamStore::new();
        let gcn = GcnLayer::new(&mut store, "gcn", 3, 4, true, &mut rng);
        let gat = GatLayer::new(&mut store, "gat", 4, 2, 1, true, true, &mut rng);
        let run = |g: &SparseGraph| {
            let ctx = GraphContext::new(g);
            let mut t = Tape::new(false);
            let p = store.bind(&mut t).unwrap();
            let x = t.constant(g.features().clone()).unwrap();
            let h = gcn.forward(&mut t, &p, &ctx.gcn, x).unwrap();
            let h = gat.forward(&mut t, &p, &ctx, h).unwrap();
            t.value(h).clone()
        };
        let (a, b) = (run(&g), run(&pg));
        for i in 0..n {
            for (x, y) in a.row(i).iter().zip(b.row(perm[i])) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
