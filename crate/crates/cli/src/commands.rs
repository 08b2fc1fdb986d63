//! `train`, `eval`, `embed` and `gen-sbm`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;

use hqgae_core::checkpoint;
use hqgae_core::eval::{cluster_metrics, kmeans, lp_probe, nc_probe, write_embeddings, ClusterResult, LpResult, NcResult};
use hqgae_core::graph::{write_graph, EdgeSplit};
use hqgae_core::model::{warn_zero_feature_rows, EpochRecord, ModelError};
use hqgae_core::nn::GraphContext;
use hqgae_core::{Matrix, ModelState, SparseGraph};

use crate::config::{ConfigError, RunConfig, Task};
use crate::metrics::{append_timing, MetricsWriter, METRICS_FILE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

#[derive(Debug, Clone, Serialize)]
struct Meta<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    num_nodes: usize,
    num_edges: usize,
    train_edges: usize,
    num_parameters: usize,
}

#[derive(Debug, Clone, Serialize)]
struct Final {
    epochs: u64,
    total: f64,
    utilization: Option<f64>,
    utilization_l2: Option<f64>,
}

/// Outcome of one downstream task.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum TaskResult {
    Lp {
        #[serde(flatten)]
        test: LpResult,
        val: Option<LpResult>,
    },
    Nc(NcResult),
    Cluster {
        #[serde(flatten)]
        scores: ClusterResult,
        k: usize,
    },
}

/// Loaded graph, held-out split and the graph training sees.
pub struct Data {
    pub graph: SparseGraph,
    pub split: Option<EdgeSplit>,
    pub train_graph: SparseGraph,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> anyhow::Result<Self> {
        let graph = cfg.load_graph()?;
        let split = cfg.split(&graph)?;
        let train_graph = cfg.training_graph(&graph, split.as_ref());
        Ok(Self { graph, split, train_graph })
    }
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))
}

/// Trains on `data.train_graph`, streaming epoch records to `metrics`.
pub fn train_model(cfg: &RunConfig, data: &Data, mut metrics: Option<&mut MetricsWriter>) -> anyhow::Result<(ModelState, Vec<EpochRecord>)> {
    let g = &data.train_graph;
    warn_zero_feature_rows(g);
    let mut state = ModelState::new(cfg.model.clone(), g.feature_dim())?;
    if let Some(m) = metrics.as_deref_mut() {
        m.record(
            "meta",
            &Meta {
                command: "train",
                config_hash: cfg.hash(),
                seed: cfg.model.seed,
                num_nodes: data.graph.num_nodes(),
                num_edges: data.graph.num_edges(),
                train_edges: g.num_edges(),
                num_parameters: state.params.num_scalars(),
            },
        )?;
    }
    let ctx = GraphContext::new(g);
    let pos = g.edge_list();
    let mut records = Vec::with_capacity(cfg.model.epochs);
    for _ in 0..cfg.model.epochs {
        match state.train_epoch(g, &ctx, &pos) {
            Ok(r) => {
                if let Some(m) = metrics.as_deref_mut() {
                    m.record("epoch", &r)?;
                }
                log::debug!("epoch {} total {:.6} T {:.3e}", r.epoch, r.total, r.temperature);
                records.push(r);
            }
            Err(e) => {
                if let (Some(m), ModelError::Diverged { epoch, .. }) = (metrics.as_deref_mut(), &e) {
                    m.record("diverged", &serde_json::json!({ "epoch": epoch }))?;
                }
                return Err(e.into());
            }
        }
    }
    Ok((state, records))
}

/// Embeds with `state` and scores `task`.
pub fn evaluate(cfg: &RunConfig, data: &Data, state: &mut ModelState, task: Task, seed: u64) -> anyhow::Result<TaskResult> {
    let h = state.embed(&data.train_graph)?;
    evaluate_embeddings(cfg, data, &h, task, seed)
}

pub fn evaluate_embeddings(cfg: &RunConfig, data: &Data, h: &Matrix, task: Task, seed: u64) -> anyhow::Result<TaskResult> {
    let labels = || {
        data.graph
            .labels()
            .ok_or_else(|| anyhow::anyhow!("task `{}` needs node labels but the graph has none", task.name()))
    };
    Ok(match task {
        Task::Lp => {
            let Some(split) = &data.split else {
                bail!(ConfigError("task `lp` needs `split.holdout = true`".into()));
            };
            let val = if split.val_pos.is_empty() {
                None
            } else {
                Some(lp_probe(h, &split.val_pos, &split.val_neg)?)
            };
            TaskResult::Lp {
                test: lp_probe(h, &split.test_pos, &split.test_neg)?,
                val,
            }
        }
        Task::Nc => {
            let probe = hqgae_core::eval::ProbeConfig { seed, ..cfg.eval.probe };
            TaskResult::Nc(nc_probe(h, labels()?, &probe)?)
        }
        Task::Cluster => {
            let labels = labels()?;
            let k = cfg.eval.clusters.or(data.graph.num_classes()).unwrap_or(1);
            let km = kmeans(h, k, seed, cfg.eval.kmeans_restarts)?;
            TaskResult::Cluster {
                scores: cluster_metrics(&km.assignments, labels, h)?,
                k,
            }
        }
    })
}

pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    prepare(cfg)?;
    let data = Data::load(cfg)?;
    let mut metrics = MetricsWriter::create(&cfg.out.join(METRICS_FILE))?;
    let (state, records) = train_model(cfg, &data, Some(&mut metrics))?;
    let last = records.last();
    metrics.record(
        "final",
        &Final {
            epochs: state.epoch,
            total: last.map_or(f64::NAN, |r| r.total),
            utilization: last.and_then(|r| r.utilization),
            utilization_l2: last.and_then(|r| r.utilization_l2),
        },
    )?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    checkpoint::save(&state, &ckpt)?;
    append_timing(&cfg.out, "train", start.elapsed())?;
    log::info!("trained {} epochs, checkpoint at {}", state.epoch, ckpt.display());
    Ok(())
}

fn load_checkpoint(cfg: &RunConfig, path: Option<&Path>) -> anyhow::Result<ModelState> {
    let path: PathBuf = path.map_or_else(|| cfg.out.join(CHECKPOINT_FILE), Path::to_path_buf);
    checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<TaskResult> {
    let start = Instant::now();
    prepare(cfg)?;
    let data = Data::load(cfg)?;
    let mut state = load_checkpoint(cfg, checkpoint)?;
    let result = evaluate(cfg, &data, &mut state, cfg.eval.task, cfg.model.seed)?;
    let mut metrics = MetricsWriter::append(&cfg.out.join(METRICS_FILE))?;
    metrics.record("eval", &result)?;
    append_timing(&cfg.out, "eval", start.elapsed())?;
    log::info!("{}", serde_json::to_string(&result)?);
    Ok(result)
}

pub fn cmd_embed(cfg: &RunConfig, checkpoint: Option<&Path>) -> anyhow::Result<PathBuf> {
    prepare(cfg)?;
    let data = Data::load(cfg)?;
    let mut state = load_checkpoint(cfg, checkpoint)?;
    let h = state.embed(&data.train_graph)?;
    let path = cfg.out.join(EMBEDDINGS_FILE);
    write_embeddings(&h, &path)?;
    log::info!("wrote {}x{} embeddings to {}", h.rows(), h.cols(), path.display());
    Ok(path)
}

pub fn cmd_gen_sbm(cfg: &RunConfig) -> anyhow::Result<()> {
    let Some(p) = &cfg.sbm else {
        bail!(ConfigError("gen-sbm needs an `sbm` section".into()));
    };
    p.validate().map_err(|e| ConfigError(format!("sbm: {e}")))?;
    std::fs::create_dir_all(&cfg.out)?;
    let g = hqgae_core::graph::generate_sbm(p, cfg.sbm_seed)?;
    write_graph(&g, &cfg.out)?;
    log::info!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), cfg.out.display());
    Ok(())
}
