//! Ablation sweeps: one training run per grid point and seed.

use std::io::Write;

use anyhow::Context;
use rayon::prelude::*;
use serde::Serialize;

use hqgae_core::model::EncoderKind;
use hqgae_core::ModelConfig;

use crate::commands::{evaluate, train_model, Data, TaskResult};
use crate::config::{ConfigError, RunConfig, SweepKind};
use crate::metrics::tagged;

pub const DECAY_GRID: [f64; 7] = [0.0, 0.3, 0.6, 0.9, 0.99, 0.999, 0.9999];
pub const ALPHA_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
pub const BETA_GRID: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 1.0];
/// Level-1 size held fixed while the level-2 size varies.
pub const CB2_SWEEP_CB1_SIZE: usize = 1 << 10;

pub fn cb1_grid() -> Vec<f64> {
    (1..=12).map(|e| (1u64 << e) as f64).collect()
}

pub fn cb2_grid() -> Vec<f64> {
    (1..=8).map(|e| (1u64 << e) as f64).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub index: usize,
    pub parameter: &'static str,
    pub value: f64,
    pub config: ModelConfig,
}

fn size(v: f64, what: &str) -> Result<usize, ConfigError> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(ConfigError(format!("sweep.values: {what} size {v} is not a positive integer")))
    }
}

/// Grid points of `kind` around `base`. `values` replaces the default grid
/// of the one-dimensional sweeps.
pub fn grid(kind: SweepKind, base: &ModelConfig, values: Option<&[f64]>) -> Result<Vec<SweepPoint>, ConfigError> {
    let point = |index, parameter, value, config| SweepPoint {
        index,
        parameter,
        value,
        config,
    };
    let pick = |default: Vec<f64>| values.map_or(default, <[f64]>::to_vec);
    let points: Vec<SweepPoint> = match kind {
        SweepKind::Decay => pick(DECAY_GRID.to_vec())
            .into_iter()
            .enumerate()
            .map(|(i, g)| point(i, "gamma", g, ModelConfig { gamma: g, ..base.clone() }))
            .collect(),
        SweepKind::Cb1Size => pick(cb1_grid())
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let m = size(v, "codebook")?;
                if m < 2 {
                    return Err(ConfigError("sweep.values: codebook size must be at least 2".into()));
                }
                // the level-2 codebook must stay smaller than level 1
                let c = base.cluster_codebook_size.min(m / 2).max(1);
                Ok(point(
                    i,
                    "codebook_size",
                    v,
                    ModelConfig {
                        codebook_size: m,
                        cluster_codebook_size: c,
                        ..base.clone()
                    },
                ))
            })
            .collect::<Result<_, _>>()?,
        SweepKind::Cb2Size => pick(cb2_grid())
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let c = size(v, "cluster codebook")?;
                if c >= CB2_SWEEP_CB1_SIZE {
                    return Err(ConfigError(format!("sweep.values: cluster codebook size {c} must be below {CB2_SWEEP_CB1_SIZE}")));
                }
                Ok(point(
                    i,
                    "cluster_codebook_size",
                    v,
                    ModelConfig {
                        codebook_size: CB2_SWEEP_CB1_SIZE,
                        cluster_codebook_size: c,
                        ..base.clone()
                    },
                ))
            })
            .collect::<Result<_, _>>()?,
        SweepKind::AlphaBeta => {
            if values.is_some() {
                return Err(ConfigError("sweep.values is not supported for alpha-beta".into()));
            }
            let alphas = ALPHA_GRID.iter().map(|&a| ("alpha", a, ModelConfig { alpha: a, ..base.clone() }));
            let betas = BETA_GRID.iter().map(|&b| ("beta", b, ModelConfig { beta: b, ..base.clone() }));
            alphas.chain(betas).enumerate().map(|(i, (p, v, c))| point(i, p, v, c)).collect()
        }
        SweepKind::VqOnoff => {
            if values.is_some() {
                return Err(ConfigError("sweep.values is not supported for vq-onoff".into()));
            }
            [false, true]
                .into_iter()
                .enumerate()
                .map(|(i, vq)| {
                    let c = ModelConfig {
                        vq,
                        encoder: EncoderKind::Mlp,
                        ..base.clone()
                    };
                    point(i, "vq", f64::from(u8::from(vq)), c)
                })
                .collect()
        }
    };
    for p in &points {
        p.config
            .validate()
            .map_err(|e| ConfigError(format!("sweep point {} ({} = {}): {e}", p.index, p.parameter, p.value)))?;
    }
    Ok(points)
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub point: usize,
    pub parameter: &'static str,
    pub value: f64,
    pub seed: u64,
    pub status: &'static str,
    pub gamma: f64,
    pub codebook_size: usize,
    pub cluster_codebook_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub vq: bool,
    pub encoder: String,
    pub epochs: usize,
    pub final_total: Option<f64>,
    pub utilization: Option<f64>,
    pub utilization_l2: Option<f64>,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub nc_accuracy: Option<f64>,
    pub nc_std: Option<f64>,
    pub nmi: Option<f64>,
    pub ari: Option<f64>,
    pub sc: Option<f64>,
    pub error: Option<String>,
}

fn run_point(cfg: &RunConfig, data: &Data, p: &SweepPoint, seed: u64) -> PointResult {
    let c = &p.config;
    let mut row = PointResult {
        point: p.index,
        parameter: p.parameter,
        value: p.value,
        seed,
        status: "ok",
        gamma: c.gamma,
        codebook_size: c.codebook_size,
        cluster_codebook_size: c.cluster_codebook_size,
        alpha: c.alpha,
        beta: c.beta,
        vq: c.vq,
        encoder: format!("{:?}", c.encoder).to_lowercase(),
        epochs: c.epochs,
        final_total: None,
        utilization: None,
        utilization_l2: None,
        auc: None,
        ap: None,
        nc_accuracy: None,
        nc_std: None,
        nmi: None,
        ari: None,
        sc: None,
        error: None,
    };
    let run = RunConfig {
        model: ModelConfig { seed, ..c.clone() },
        ..cfg.clone()
    };
    let outcome = (|| -> anyhow::Result<()> {
        let (mut state, records) = train_model(&run, data, None)?;
        if let Some(last) = records.last() {
            row.final_total = Some(last.total);
            row.utilization = last.utilization;
            row.utilization_l2 = last.utilization_l2;
        }
        for &task in &cfg.sweep.tasks {
            if task != crate::config::Task::Lp && data.graph.labels().is_none() {
                continue;
            }
            match evaluate(&run, data, &mut state, task, seed)? {
                TaskResult::Lp { test, .. } => {
                    row.auc = Some(test.auc);
                    row.ap = Some(test.ap);
                }
                TaskResult::Nc(r) => {
                    row.nc_accuracy = Some(r.mean);
                    row.nc_std = Some(r.std);
                }
                TaskResult::Cluster { scores, .. } => {
                    row.nmi = Some(scores.nmi);
                    row.ari = Some(scores.ari);
                    row.sc = Some(scores.sc);
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("sweep point {} ({} = {}, seed {seed}) failed: {e:#}", p.index, p.parameter, p.value);
        row.status = "failed";
        row.error = Some(format!("{e:#}"));
    }
    row
}

/// Runs every grid point (and repeat) of `kind`. Point `i` of repeat `r`
/// uses seed `base + i + r·points`. Failed points are recorded, not fatal.
pub fn run_sweep(cfg: &RunConfig, kind: SweepKind) -> anyhow::Result<Vec<PointResult>> {
    cfg.validate()?;
    let points = grid(kind, &cfg.model, cfg.sweep.values.as_deref())?;
    let data = Data::load(cfg)?;
    let n = points.len() as u64;
    let jobs: Vec<(&SweepPoint, u64)> = (0..cfg.sweep.seeds as u64)
        .flat_map(|r| points.iter().map(move |p| (p, cfg.model.seed + p.index as u64 + r * n)))
        .collect();
    let rows = if cfg.sweep.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.sweep.jobs).build()?;
        pool.install(|| jobs.par_iter().map(|&(p, s)| run_point(cfg, &data, p, s)).collect())
    } else {
        jobs.iter().map(|&(p, s)| run_point(cfg, &data, p, s)).collect()
    };
    Ok(rows)
}

pub fn write_sweep(cfg: &RunConfig, kind: SweepKind, rows: &[PointResult]) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    let csv_path = cfg.out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("sweep.jsonl"))?);
    let kind = serde_json::to_value(kind)?;
    for r in rows {
        let mut line = tagged("sweep_point", r)?;
        line["sweep"] = kind.clone();
        writeln!(jsonl, "{line}")?;
    }
    jsonl.flush()?;
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<Vec<PointResult>> {
    let Some(kind) = cfg.sweep.kind else {
        anyhow::bail!(ConfigError("ablate needs `--sweep KIND` or `sweep.kind`".into()));
    };
    let start = std::time::Instant::now();
    let rows = run_sweep(cfg, kind)?;
    write_sweep(cfg, kind, &rows)?;
    crate::metrics::append_timing(&cfg.out, "ablate", start.elapsed())?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    log::info!("sweep finished: {} runs, {failed} failed", rows.len());
    Ok(rows)
}
