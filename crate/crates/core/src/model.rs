//! The trainable autoencoder: encoder, two-level codebook, GAT feature
//! decoder, MLP edge decoder, losses and the full-batch training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::graph::{sample_negative_edges, Edge, GraphError, SparseGraph};
use crate::nn::{edge_decode, readout, Activation, Dense, GatLayer, GcnLayer, GinLayer, GraphContext, MlpStack, PairCombine, ReadoutMode, SageLayer};
use crate::params::{Adam, AdamConfig, BoundParams, ParamStore};
use crate::tensor::Matrix;
use crate::vq::{anneal_step, cluster_codes, init_codebook, select_codes, similarity_scores, utilization, vq_losses_with, AnnealState, Assignment, FrozenTargets, SelectMode};

/// Probabilities fed to `log` in the edge loss are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("graph has feature dimension {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("edge reconstruction loss needs non-empty positive and negative edge lists")]
    EmptyEdges,
    #[error("training diverged at epoch {epoch}: {source}")]
    Diverged { epoch: u64, source: AutodiffError },
    #[error("loss term {0} is not finite")]
    NonFiniteLoss(&'static str),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Gcn,
    Gat,
    Sage,
    Gin,
    /// Features only, no message passing.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    /// Width of each encoder layer.
    pub hidden: Vec<usize>,
    /// Heads per GAT encoder layer (concatenated; each head gets
    /// `width / heads` channels).
    pub gat_heads: usize,
    pub readout: ReadoutMode,
    /// Heads of the single-layer GAT feature decoder (averaged).
    pub decoder_heads: usize,
    pub edge_mlp_hidden: Vec<usize>,
    pub pair_combine: PairCombine,
    /// Level-1 codebook size M.
    pub codebook_size: usize,
    /// Level-2 codebook size C.
    pub cluster_codebook_size: usize,
    /// Quantise between encoder and feature decoder. Off gives a plain GAE.
    pub vq: bool,
    /// Train the level-2 codebook. Off gives a single-level codebook.
    pub hierarchical: bool,
    pub t0: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Exponent of the scaled cosine error.
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub dropout: f64,
    /// Negatives drawn per epoch, as a multiple of the positive edge count.
    pub neg_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Gcn,
            hidden: vec![64, 64],
            gat_heads: 1,
            readout: ReadoutMode::Concat,
            decoder_heads: 1,
            edge_mlp_hidden: vec![16],
            pair_combine: PairCombine::Dot,
            codebook_size: 256,
            cluster_codebook_size: 16,
            vq: true,
            hierarchical: true,
            t0: 1.0,
            gamma: 0.9,
            epsilon: 1e-4,
            lambda: 2.0,
            alpha: 1.0,
            beta: 0.01,
            lr: 1e-3,
            weight_decay: 0.0,
            epochs: 300,
            dropout: 0.0,
            neg_ratio: 1.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden must list at least one positive width".into());
        }
        if self.gat_heads == 0 || self.decoder_heads == 0 {
            return bad("head counts must be positive".into());
        }
        if self.encoder == EncoderKind::Gat && self.hidden.iter().any(|w| w % self.gat_heads != 0) {
            return bad(format!("GAT widths {:?} must be divisible by gat_heads = {}", self.hidden, self.gat_heads));
        }
        if self.edge_mlp_hidden.contains(&0) {
            return bad("edge_mlp_hidden widths must be positive".into());
        }
        if !(self.codebook_size > self.cluster_codebook_size && self.cluster_codebook_size >= 1) {
            return bad(format!(
                "need codebook_size > cluster_codebook_size >= 1, got {} and {}",
                self.codebook_size, self.cluster_codebook_size
            ));
        }
        if !(self.t0 > 0.0 && self.epsilon > 0.0 && self.t0.is_finite()) {
            return bad("t0 and epsilon must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.lambda >= 1.0) {
            return bad(format!("lambda must be >= 1, got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be non-negative".into());
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.neg_ratio >= 0.0 && self.neg_ratio.is_finite()) {
            return bad("neg_ratio must be non-negative".into());
        }
        Ok(())
    }

    /// Width of the readout embedding H.
    pub fn embedding_dim(&self) -> usize {
        match self.readout {
            ReadoutMode::Concat => self.hidden.iter().sum(),
            ReadoutMode::Last => *self.hidden.last().unwrap(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderLayer {
    Gcn(GcnLayer),
    Gat(GatLayer),
    Sage(SageLayer),
    Gin(GinLayer),
    Mlp(Dense),
}

impl EncoderLayer {
    fn forward<'a>(&self, tape: &mut Tape<'a>, p: &BoundParams, ctx: &'a GraphContext, h: Var) -> crate::autodiff::Result<Var> {
        match self {
            EncoderLayer::Gcn(l) => l.forward(tape, p, &ctx.gcn, h),
            EncoderLayer::Gat(l) => l.forward(tape, p, ctx, h),
            EncoderLayer::Sage(l) => l.forward(tape, p, ctx, h),
            EncoderLayer::Gin(l) => l.forward(tape, p, ctx, h),
            EncoderLayer::Mlp(l) => l.forward(tape, p, h),
        }
    }
}

/// Parameter handles of every component. Values live in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAutoencoder {
    pub encoder: Vec<EncoderLayer>,
    pub readout: ReadoutMode,
    pub codebook: crate::autodiff::ParamId,
    pub cluster_codebook: crate::autodiff::ParamId,
    pub node_decoder: GatLayer,
    pub edge_mlp: MlpStack,
    pub pair_combine: PairCombine,
}

/// How quantised rows reach the feature decoder.
#[derive(Debug, Clone, Default)]
pub enum QuantizePath {
    /// Forward the selected codes, copy gradients to H.
    #[default]
    StraightThrough,
    /// `H + offset` with a constant offset: the straight-through estimator
    /// written as a differentiable function, for finite-difference checks.
    IdentityOffset(Matrix),
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Use this assignment instead of selecting codes.
    pub assignment: Option<Assignment>,
    pub path: QuantizePath,
    /// Constants replacing the stop-gradient targets of the codebook losses.
    pub frozen: Option<FrozenTargets>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub per_layer: Vec<Var>,
    pub h: Var,
    pub e1: Option<Var>,
    pub assignment: Option<Assignment>,
    pub x_hat: Var,
    pub frozen: Option<FrozenTargets>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub node_rec: Var,
    pub edge_rec: Option<Var>,
    pub vq1: Option<Var>,
    pub vq2: Option<Var>,
    pub total: Var,
}

impl GraphAutoencoder {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, feature_dim: usize, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(cfg.hidden.len());
        let mut d_in = feature_dim;
        for (i, &w) in cfg.hidden.iter().enumerate() {
            let name = format!("encoder.{i}");
            let layer = match cfg.encoder {
                EncoderKind::Gcn => EncoderLayer::Gcn(GcnLayer::new(&mut store, &name, d_in, w, true, rng)),
                EncoderKind::Gat => EncoderLayer::Gat(GatLayer::new(&mut store, &name, d_in, w / cfg.gat_heads, cfg.gat_heads, true, true, rng)),
                EncoderKind::Sage => EncoderLayer::Sage(SageLayer::new(&mut store, &name, d_in, w, rng)),
                EncoderKind::Gin => EncoderLayer::Gin(GinLayer::new(&mut store, &name, d_in, w, rng)),
                EncoderKind::Mlp => {
                    let act = Activation::Prelu(store.add(format!("{name}.prelu"), Matrix::filled(1, w, crate::nn::PRELU_INIT)));
                    EncoderLayer::Mlp(Dense::new(&mut store, &name, d_in, w, act, rng))
                }
            };
            encoder.push(layer);
            d_in = w;
        }
        let d_h = cfg.embedding_dim();
        let codebook = store.add("codebook.level1", init_codebook(cfg.codebook_size, d_h, rng));
        let cluster_codebook = store.add("codebook.level2", init_codebook(cfg.cluster_codebook_size, d_h, rng));
        let node_decoder = GatLayer::new(&mut store, "decoder.node", d_h, feature_dim, cfg.decoder_heads, false, false, rng);
        let mlp_in = match cfg.pair_combine {
            PairCombine::Dot => 1,
            PairCombine::Hadamard => d_h,
        };
        let mut dims = vec![mlp_in];
        dims.extend(&cfg.edge_mlp_hidden);
        dims.push(1);
        let edge_mlp = MlpStack::new(&mut store, "decoder.edge", &dims, rng);
        let model = Self {
            encoder,
            readout: cfg.readout,
            codebook,
            cluster_codebook,
            node_decoder,
            edge_mlp,
            pair_combine: cfg.pair_combine,
        };
        (model, store)
    }

    /// Encoder → readout → quantise → feature decoder.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_on<'a, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'a>,
        p: &BoundParams,
        ctx: &'a GraphContext,
        features: &Matrix,
        vq: bool,
        anneal: &AnnealState,
        dropout: f64,
        rng: &mut R,
        opts: &ForwardOptions,
    ) -> Result<ForwardVars> {
        let mut h = tape.constant(features.clone())?;
        let mut per_layer = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            h = tape.dropout(h, dropout, rng)?;
            h = layer.forward(tape, p, ctx, h)?;
            per_layer.push(h);
        }
        let h = readout(tape, &per_layer, self.readout)?;

        let (decoder_in, e1, assignment) = if vq {
            let cb1 = tape.value(p[self.codebook]).clone();
            let cb2 = tape.value(p[self.cluster_codebook]).clone();
            let asn = match &opts.assignment {
                Some(a) => a.clone(),
                None => {
                    let scores = similarity_scores(tape.value(h), &cb1);
                    let (level1, probabilities) = select_codes(&scores, anneal, rng);
                    let clusters = cluster_codes(&cb1, &cb2);
                    let level2 = level1.iter().map(|&k| clusters[k]).collect();
                    Assignment {
                        level1,
                        level2,
                        probabilities,
                    }
                }
            };
            let q = match &opts.path {
                QuantizePath::StraightThrough => tape.straight_through(h, cb1.gather_rows(&asn.level1))?,
                QuantizePath::IdentityOffset(offset) => {
                    let c = tape.constant(offset.clone())?;
                    tape.add(h, c)?
                }
            };
            (q, Some(q), Some(asn))
        } else {
            (h, None, None)
        };
        let x_hat = self.node_decoder.forward(tape, p, ctx, decoder_in)?;
        Ok(ForwardVars {
            per_layer,
            h,
            e1,
            assignment,
            x_hat,
            frozen: opts.frozen.clone(),
        })
    }

    /// Full objective `L_node + L_edge + α L_vq1 + β L_vq2`. The edge term is
    /// skipped when either edge list is empty; the level-2 term when
    /// `hierarchical` is off.
    #[allow(clippy::too_many_arguments)]
    pub fn losses<'a>(
        &self,
        tape: &mut Tape<'a>,
        p: &BoundParams,
        fwd: &ForwardVars,
        features: &Matrix,
        pos: &[Edge],
        neg: &[Edge],
        cfg: &ModelConfig,
    ) -> Result<LossVars> {
        let x = tape.constant(features.clone())?;
        let node_rec = node_rec_loss(tape, x, fwd.x_hat, cfg.lambda)?;
        let edge_rec = if pos.is_empty() || neg.is_empty() {
            None
        } else {
            Some(edge_rec_loss(tape, p, &self.edge_mlp, self.pair_combine, fwd.h, pos, neg)?)
        };
        let (vq1, vq2) = match &fwd.assignment {
            Some(asn) => {
                let (l1, l2) = vq_losses_with(tape, fwd.h, p[self.codebook], p[self.cluster_codebook], asn, fwd.frozen.as_ref())?;
                (Some(l1), cfg.hierarchical.then_some(l2))
            }
            None => (None, None),
        };
        let total = total_loss(tape, node_rec, edge_rec, vq1, vq2, cfg.alpha, cfg.beta)?;
        Ok(LossVars {
            node_rec,
            edge_rec,
            vq1,
            vq2,
            total,
        })
    }
}

/// Scaled cosine error `mean_i (1 − cos(x_i, x̂_i))^λ`. Zero rows have
/// cosine 0 and so contribute exactly 1.
pub fn node_rec_loss<'a>(tape: &mut Tape<'a>, x: Var, x_hat: Var, lambda: f64) -> crate::autodiff::Result<Var> {
    let xn = tape.row_normalize(x)?;
    let xhn = tape.row_normalize(x_hat)?;
    let cos = tape.row_dot(xn, xhn)?;
    let neg = tape.scale(cos, -1.0)?;
    let gap = tape.add_scalar(neg, 1.0)?;
    let gap = tape.clamp(gap, 0.0, 2.0)?;
    let powered = tape.pow(gap, lambda)?;
    tape.mean(powered)
}

/// Binary cross-entropy over positive and negative pairs:
/// `−mean log D(pos) − mean log(1 − D(neg))`.
pub fn edge_rec_loss<'a>(
    tape: &mut Tape<'a>,
    p: &BoundParams,
    mlp: &MlpStack,
    combine: PairCombine,
    h: Var,
    pos: &[Edge],
    neg: &[Edge],
) -> Result<Var> {
    if pos.is_empty() || neg.is_empty() {
        return Err(ModelError::EmptyEdges);
    }
    let pp = edge_decode(tape, p, mlp, combine, h, pos)?;
    let pp = tape.clamp(pp, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = tape.log(pp)?;
    let lp = tape.mean(lp)?;

    let pn = edge_decode(tape, p, mlp, combine, h, neg)?;
    let pn = tape.scale(pn, -1.0)?;
    let qn = tape.add_scalar(pn, 1.0)?;
    let qn = tape.clamp(qn, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let ln = tape.log(qn)?;
    let ln = tape.mean(ln)?;

    let both = tape.add(lp, ln)?;
    Ok(tape.scale(both, -1.0)?)
}

/// Weighted sum on the tape; absent parts count as zero.
pub fn total_loss<'a>(
    tape: &mut Tape<'a>,
    node_rec: Var,
    edge_rec: Option<Var>,
    vq1: Option<Var>,
    vq2: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let mut total = node_rec;
    if let Some(e) = edge_rec {
        total = tape.add(total, e)?;
    }
    if let Some(v) = vq1 {
        let w = tape.scale(v, alpha)?;
        total = tape.add(total, w)?;
    }
    if let Some(v) = vq2 {
        let w = tape.scale(v, beta)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Loss values of one epoch, as recorded in telemetry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub node_rec: f64,
    pub edge_rec: f64,
    pub vq1: f64,
    pub vq2: f64,
}

impl LossParts {
    /// `node_rec + edge_rec + α·vq1 + β·vq2`; errors on any non-finite part.
    pub fn total(&self, alpha: f64, beta: f64) -> Result<f64> {
        for (name, v) in [("node_rec", self.node_rec), ("edge_rec", self.edge_rec), ("vq1", self.vq1), ("vq2", self.vq2)] {
            if !v.is_finite() {
                return Err(ModelError::NonFiniteLoss(name));
            }
        }
        Ok(self.node_rec + self.edge_rec + alpha * self.vq1 + beta * self.vq2)
    }
}

/// Telemetry row for one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub node_rec: f64,
    pub edge_rec: f64,
    pub vq1: f64,
    pub vq2: f64,
    pub total: f64,
    /// Temperature used for this epoch's selection.
    pub temperature: f64,
    pub utilization: Option<f64>,
    pub utilization_l2: Option<f64>,
}

/// Everything needed to resume training exactly.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub model: GraphAutoencoder,
    pub params: ParamStore,
    pub adam: Adam,
    pub anneal: AnnealState,
    pub epoch: u64,
    pub rng: ChaCha8Rng,
}

impl ModelState {
    pub fn new(config: ModelConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (model, params) = GraphAutoencoder::build(&config, feature_dim, &mut rng);
        let adam = Adam::new(config.adam(), &params);
        let anneal = AnnealState::new(config.t0, config.gamma, config.epsilon);
        Ok(Self {
            config,
            feature_dim,
            model,
            params,
            adam,
            anneal,
            epoch: 0,
            rng,
        })
    }

    fn check_graph(&self, g: &SparseGraph) -> Result<()> {
        if g.feature_dim() != self.feature_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.feature_dim,
                found: g.feature_dim(),
            });
        }
        Ok(())
    }

    /// Forward pass on a fresh tape. Training mode samples codes and applies
    /// dropout; evaluation uses argmax and no dropout.
    pub fn forward<'a>(&mut self, ctx: &'a GraphContext, g: &SparseGraph, training: bool) -> Result<(Tape<'a>, BoundParams, ForwardVars)> {
        self.check_graph(g)?;
        let mut tape = Tape::new(training);
        let p = self.params.bind(&mut tape)?;
        let anneal = if training {
            self.anneal.with_mode(SelectMode::Sample)
        } else {
            self.anneal.with_mode(SelectMode::Argmax)
        };
        let fwd = self.model.forward_on(
            &mut tape,
            &p,
            ctx,
            g.features(),
            self.config.vq,
            &anneal,
            self.config.dropout,
            &mut self.rng,
            &ForwardOptions::default(),
        )?;
        Ok((tape, p, fwd))
    }

    /// One epoch: fresh negatives, forward, loss, backward, Adam step,
    /// temperature decay.
    pub fn train_epoch(&mut self, g: &SparseGraph, ctx: &GraphContext, pos: &[Edge]) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let diverged = |e: ModelError| match e {
            ModelError::Autodiff(source) => ModelError::Diverged { epoch, source },
            other => other,
        };
        let n = g.num_nodes();
        let available = n * n.saturating_sub(1) / 2 - g.num_edges();
        let count = ((pos.len() as f64 * self.config.neg_ratio).round() as usize).min(available);
        let neg = sample_negative_edges(g, count, self.rng.random(), &[])?;

        let temperature = self.anneal.temperature;
        let (mut tape, p, fwd) = self.forward(ctx, g, true).map_err(diverged)?;
        let losses = self
            .model
            .losses(&mut tape, &p, &fwd, g.features(), pos, &neg, &self.config)
            .map_err(diverged)?;
        let grads = tape.backward(losses.total).map_err(|source| ModelError::Diverged { epoch, source })?;
        self.adam.update(&mut self.params, &grads);
        if self.params.values().iter().any(|m| !m.is_finite()) {
            return Err(ModelError::Diverged {
                epoch,
                source: AutodiffError::NonFinite { op: "adam", index: 0 },
            });
        }

        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        let (util, util2) = match &fwd.assignment {
            Some(a) => (
                Some(utilization(&a.level1, self.config.codebook_size)),
                Some(utilization(&a.level2, self.config.cluster_codebook_size)),
            ),
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            node_rec: tape.value(losses.node_rec).item(),
            edge_rec: value(losses.edge_rec),
            vq1: value(losses.vq1),
            vq2: value(losses.vq2),
            total: tape.value(losses.total).item(),
            temperature,
            utilization: util,
            utilization_l2: util2,
        };
        self.anneal = anneal_step(&self.anneal);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs `epochs` more epochs on `g`'s edges.
    pub fn train_epochs(&mut self, g: &SparseGraph, epochs: usize) -> Result<Vec<EpochRecord>> {
        self.check_graph(g)?;
        let ctx = GraphContext::new(g);
        let pos = g.edge_list();
        (0..epochs).map(|_| self.train_epoch(g, &ctx, &pos)).collect()
    }

    /// Eval-mode readout embedding H.
    pub fn embed(&mut self, g: &SparseGraph) -> Result<Matrix> {
        let ctx = GraphContext::new(g);
        let (tape, _, fwd) = self.forward(&ctx, g, false)?;
        Ok(tape.value(fwd.h).clone())
    }

    /// Eval-mode code assignment (argmax at both levels).
    pub fn assign(&mut self, g: &SparseGraph) -> Result<Option<Assignment>> {
        let ctx = GraphContext::new(g);
        let (_, _, fwd) = self.forward(&ctx, g, false)?;
        Ok(fwd.assignment)
    }
}

/// Loss term selected for a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    NodeRec,
    EdgeRec,
    Vq1,
    Vq2,
    Total,
}

impl ModelState {
    /// Largest relative error between tape gradients and central differences
    /// of one loss term over every parameter. Code choices are frozen at the
    /// current argmax assignment, straight-through is taken as the identity
    /// plus a constant offset, and stop-gradient targets are constants at the
    /// current parameters.
    pub fn gradient_check(&mut self, g: &SparseGraph, pos: &[Edge], neg: &[Edge], term: LossTerm, h: f64) -> Result<f64> {
        if (pos.is_empty() || neg.is_empty()) && term == LossTerm::EdgeRec {
            return Err(ModelError::EmptyEdges);
        }
        let ctx = GraphContext::new(g);
        let (tape, p, fwd) = self.forward(&ctx, g, false)?;
        let opts = match &fwd.assignment {
            Some(asn) => {
                let e1 = tape.value(p[self.model.codebook]).gather_rows(&asn.level1);
                let e2 = tape.value(p[self.model.cluster_codebook]).gather_rows(&asn.level2);
                let h0 = tape.value(fwd.h).clone();
                ForwardOptions {
                    assignment: Some(asn.clone()),
                    path: QuantizePath::IdentityOffset(e1.zip_map(&h0, |c, x| c - x)),
                    frozen: Some(FrozenTargets { h: h0, e1, e2 }),
                }
            }
            None => ForwardOptions::default(),
        };
        drop(tape);
        let anneal = self.anneal.with_mode(SelectMode::Argmax);
        let flatten = |e: ModelError| match e {
            ModelError::Autodiff(a) => a,
            _ => AutodiffError::Domain { op: "model" },
        };
        let err = crate::autodiff::finite_diff_check(
            |t, vars| {
                let p = BoundParams::from_vars(vars.to_vec());
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let fwd = self
                    .model
                    .forward_on(t, &p, &ctx, g.features(), self.config.vq, &anneal, 0.0, &mut rng, &opts)
                    .map_err(flatten)?;
                let l = self.model.losses(t, &p, &fwd, g.features(), pos, neg, &self.config).map_err(flatten)?;
                let pick = match term {
                    LossTerm::NodeRec => Some(l.node_rec),
                    LossTerm::EdgeRec => l.edge_rec,
                    LossTerm::Vq1 => l.vq1,
                    LossTerm::Vq2 => l.vq2,
                    LossTerm::Total => Some(l.total),
                };
                pick.ok_or(AutodiffError::Domain { op: "absent loss term" })
            },
            self.params.values(),
            h,
        )?;
        Ok(err)
    }
}

/// Logs a warning when some feature rows are all zero; returns their count.
pub fn warn_zero_feature_rows(g: &SparseGraph) -> usize {
    let zero_rows = (0..g.num_nodes()).filter(|&i| g.features().row(i).iter().all(|&v| v == 0.0)).count();
    if zero_rows > 0 {
        log::warn!("{zero_rows} all-zero feature rows; each contributes a reconstruction error of 1");
    }
    zero_rows
}

/// Builds a model from `config` and trains it for `config.epochs` epochs on
/// every edge of `g`.
pub fn train(config: &ModelConfig, g: &SparseGraph) -> Result<(ModelState, Vec<EpochRecord>)> {
    let mut state = ModelState::new(config.clone(), g.feature_dim())?;
    warn_zero_feature_rows(g);
    let records = state.train_epochs(g, config.epochs)?;
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, SbmParams};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            hidden: vec![4, 4],
            codebook_size: 8,
            cluster_codebook_size: 2,
            epochs: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn scaled_cosine_examples() {
        let run = |x: Matrix, xh: Matrix, lambda: f64| {
            let mut t = Tape::new(false);
            let a = t.constant(x).unwrap();
            let b = t.constant(xh).unwrap();
            let l = node_rec_loss(&mut t, a, b, lambda).unwrap();
            t.value(l).item()
        };
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5]]);
        assert!(run(x.clone(), x.clone(), 2.0).abs() < 1e-15);
        assert_eq!(run(Matrix::from_rows(&[vec![1.0, 0.0]]), Matrix::from_rows(&[vec![0.0, 1.0]]), 2.0), 1.0);
        assert_eq!(run(Matrix::from_rows(&[vec![1.0, 0.0]]), Matrix::from_rows(&[vec![-2.0, 0.0]]), 1.0), 2.0);
        assert_eq!(run(Matrix::from_rows(&[vec![0.0, 0.0]]), Matrix::from_rows(&[vec![1.0, 1.0]]), 3.0), 1.0);
    }

    fn identity_mlp(store: &mut ParamStore) -> MlpStack {
        let w = store.add("w", Matrix::scalar(1.0));
        let b = store.add("b", Matrix::zeros(1, 1));
        MlpStack {
            layers: vec![Dense {
                weight: w,
                bias: b,
                activation: Activation::Identity,
            }],
        }
    }

    #[test]
    fn bce_examples() {
        let mut store = ParamStore::new();
        let mlp = identity_mlp(&mut store);
        // D ≡ 0.5: all dot products zero
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let h = t.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]])).unwrap();
        let l = edge_rec_loss(&mut t, &p, &mlp, PairCombine::Dot, h, &[(0, 1)], &[(0, 2), (1, 2)]).unwrap();
        assert!((t.value(l).item() - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!((t.value(l).item() - 1.386294).abs() < 1e-6);

        // saturated decoder: D = 1 on positives, 0 on negatives
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let h = t.constant(Matrix::from_rows(&[vec![40.0], vec![40.0], vec![-40.0]])).unwrap();
        let l = edge_rec_loss(&mut t, &p, &mlp, PairCombine::Dot, h, &[(0, 1)], &[(0, 2)]).unwrap();
        assert!(t.value(l).item() < 1e-11);

        // 2 positives, 2 negatives, identity MLP, direct arithmetic
        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let hm = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, -1.0], vec![2.0, 1.0], vec![-0.5, 0.3]]);
        let h = t.constant(hm.clone()).unwrap();
        let pos = [(0, 2), (1, 3)];
        let neg = [(0, 1), (2, 3)];
        let l = edge_rec_loss(&mut t, &p, &mlp, PairCombine::Dot, h, &pos, &neg).unwrap();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let dot = |a: usize, b: usize| hm.row(a).iter().zip(hm.row(b)).map(|(x, y)| x * y).sum::<f64>();
        let expected = -(sig(dot(0, 2)).ln() + sig(dot(1, 3)).ln()) / 2.0 - ((1.0 - sig(dot(0, 1))).ln() + (1.0 - sig(dot(2, 3))).ln()) / 2.0;
        assert!((t.value(l).item() - expected).abs() < 1e-14);

        let mut t = Tape::new(false);
        let p = store.bind(&mut t).unwrap();
        let h = t.constant(hm).unwrap();
        assert!(matches!(
            edge_rec_loss(&mut t, &p, &mlp, PairCombine::Dot, h, &[], &neg),
            Err(ModelError::EmptyEdges)
        ));
    }

    #[test]
    fn weighted_total() {
        let parts = LossParts {
            node_rec: 1.0,
            edge_rec: 2.0,
            vq1: 3.0,
            vq2: 4.0,
        };
        assert!((parts.total(1.0, 0.01).unwrap() - 6.04).abs() < 1e-12);
        assert_eq!(parts.total(0.0, 0.0).unwrap(), 3.0);
        let bad = LossParts { vq2: f64::NAN, ..parts };
        assert!(matches!(bad.total(1.0, 1.0), Err(ModelError::NonFiniteLoss("vq2"))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { alpha: -1.0, ..Default::default() },
            ModelConfig { lambda: 0.5, ..Default::default() },
            ModelConfig {
                codebook_size: 4,
                cluster_codebook_size: 4,
                ..Default::default()
            },
            ModelConfig { cluster_codebook_size: 0, ..Default::default() },
            ModelConfig { hidden: vec![], ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(ModelError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn single_node_graph_runs() {
        let g = SparseGraph::from_edges(1, &[], Matrix::from_rows(&[vec![1.0, -1.0, 0.5]]), None, None).0;
        let (mut state, records) = train(&tiny_config(), &g).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].edge_rec, 0.0);
        let h = state.embed(&g).unwrap();
        assert_eq!(h.shape(), (1, 8));
    }

    #[test]
    fn eval_forward_is_pure() {
        let g = generate_sbm(
            &SbmParams {
                blocks: 2,
                nodes_per_block: 6,
                p_in: 0.6,
                p_out: 0.1,
                feature_dim: 5,
                feature_noise: 0.3,
            },
            1,
        )
        .unwrap();
        let (mut state, _) = train(&tiny_config(), &g).unwrap();
        let a = state.embed(&g).unwrap();
        let b = state.embed(&g).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.cols(), 8);
        let last = ModelConfig {
            readout: ReadoutMode::Last,
            ..tiny_config()
        };
        let (mut s2, _) = train(&last, &g).unwrap();
        assert_eq!(s2.embed(&g).unwrap().cols(), 4);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let g = SparseGraph::from_edges(2, &[(0, 1)], Matrix::zeros(2, 3), None, None).0;
        let mut state = ModelState::new(tiny_config(), 4).unwrap();
        assert!(matches!(
            state.embed(&g),
            Err(ModelError::DimensionMismatch { expected: 4, found: 3 })
        ));
    }

    #[test]
    fn vq_off_has_no_codebook_terms() {
        let g = generate_sbm(
            &SbmParams {
                blocks: 2,
                nodes_per_block: 5,
                p_in: 0.7,
                p_out: 0.1,
                feature_dim: 4,
                feature_noise: 0.2,
            },
            3,
        )
        .unwrap();
        let cfg = ModelConfig {
            vq: false,
            encoder: EncoderKind::Mlp,
            ..tiny_config()
        };
        let (state, records) = train(&cfg, &g).unwrap();
        assert!(records.iter().all(|r| r.vq1 == 0.0 && r.vq2 == 0.0 && r.utilization.is_none()));
        // codebooks never move without VQ losses
        let fresh = ModelState::new(cfg, 4).unwrap();
        assert_eq!(state.params.get(state.model.codebook), fresh.params.get(fresh.model.codebook));
    }
}
