//! Run configuration: one JSON file, overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use hqgae_core::eval::ProbeConfig;
use hqgae_core::graph::{generate_sbm, load_graph, split_edges, EdgeSplit, SbmParams};
use hqgae_core::{ModelConfig, SparseGraph};

/// Invalid or unreadable configuration. Maps to exit code 1.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lp,
    Nc,
    Cluster,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Lp => "lp",
            Task::Nc => "nc",
            Task::Cluster => "cluster",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Decay,
    Cb1Size,
    Cb2Size,
    AlphaBeta,
    VqOnoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Train on the training edges only, so link prediction can be scored on
    /// unseen edges.
    pub holdout: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val: 0.05,
            test: 0.10,
            seed: 0,
            holdout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: Task,
    pub probe: ProbeConfig,
    pub kmeans_restarts: usize,
    /// Cluster count for k-means; defaults to the number of label classes.
    pub clusters: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            task: Task::Lp,
            probe: ProbeConfig::default(),
            kmeans_restarts: 10,
            clusters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub kind: Option<SweepKind>,
    /// Overrides the default grid of one-dimensional sweeps.
    pub values: Option<Vec<f64>>,
    /// Runs per grid point.
    pub seeds: usize,
    /// Grid points trained concurrently.
    pub jobs: usize,
    /// Downstream tasks scored per run; tasks needing labels are skipped on
    /// unlabelled graphs.
    pub tasks: Vec<Task>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: None,
            values: None,
            seeds: 1,
            jobs: 1,
            tasks: vec![Task::Lp, Task::Nc, Task::Cluster],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding `meta.json`, `edges.tsv`, `features.tsv` and
    /// optionally `labels.tsv`.
    pub dataset: Option<PathBuf>,
    /// Synthetic graph used when no dataset is given.
    pub sbm: Option<SbmParams>,
    pub sbm_seed: u64,
    pub out: PathBuf,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            sbm: None,
            sbm_seed: 0,
            out: PathBuf::from("runs/default"),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub task: Option<Task>,
    pub sweep: Option<SweepKind>,
    pub jobs: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))
    }

    /// Precedence: flag > file > default.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.sbm_seed = seed;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(d) = &o.dataset {
            self.dataset = Some(d.clone());
        }
        if let Some(t) = o.task {
            self.eval.task = t;
        }
        if let Some(k) = o.sweep {
            self.sweep.kind = Some(k);
        }
        if let Some(j) = o.jobs {
            self.sweep.jobs = j;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.dataset.is_none() && self.sbm.is_none() {
            return err("one of `dataset` or `sbm` must be set".into());
        }
        if let Some(p) = &self.sbm {
            p.validate().map_err(|e| ConfigError(format!("sbm: {e}")))?;
        }
        self.model.validate().map_err(|e| ConfigError(format!("model: {e}")))?;
        let s = &self.split;
        if !(s.val >= 0.0 && s.test > 0.0 && s.val + s.test < 1.0) {
            return err(format!("split: need val >= 0, test > 0 and val + test < 1, got val = {} and test = {}", s.val, s.test));
        }
        if self.eval.probe.folds < 2 || self.eval.probe.iterations == 0 {
            return err("eval.probe: folds must be >= 2 and iterations positive".into());
        }
        if !(self.eval.probe.l2 >= 0.0) {
            return err("eval.probe.l2 must be non-negative".into());
        }
        if self.eval.kmeans_restarts == 0 || self.eval.clusters == Some(0) {
            return err("eval.kmeans_restarts and eval.clusters must be positive".into());
        }
        if self.sweep.seeds == 0 || self.sweep.jobs == 0 {
            return err("sweep.seeds and sweep.jobs must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    /// SHA-256 of the config JSON with `out` cleared, so identical runs in
    /// different directories share a hash.
    pub fn hash(&self) -> String {
        let keyed = Self { out: PathBuf::new(), ..self.clone() };
        let bytes = serde_json::to_vec(&keyed).expect("config serialises");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load_graph(&self) -> anyhow::Result<SparseGraph> {
        Ok(match (&self.dataset, &self.sbm) {
            (Some(dir), _) => load_graph(dir)?,
            (None, Some(p)) => generate_sbm(p, self.sbm_seed)?,
            (None, None) => return Err(ConfigError("one of `dataset` or `sbm` must be set".into()).into()),
        })
    }

    /// The held-out split, or `None` when training sees every edge.
    pub fn split(&self, g: &SparseGraph) -> anyhow::Result<Option<EdgeSplit>> {
        if !self.split.holdout {
            return Ok(None);
        }
        Ok(Some(split_edges(g, self.split.val, self.split.test, self.split.seed)?))
    }

    /// Graph the model is trained and embedded on.
    pub fn training_graph(&self, g: &SparseGraph, split: Option<&EdgeSplit>) -> SparseGraph {
        match split {
            Some(s) => g.with_edges(&s.train_pos),
            None => g.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_json(r#"{"model": {"alpah": 1.0}}"#).unwrap_err();
        assert!(e.0.contains("alpah"), "{e}");
        let e = RunConfig::from_json(r#"{"outt": "x"}"#).unwrap_err();
        assert!(e.0.contains("outt"), "{e}");
    }

    #[test]
    fn flags_override_file() {
        let mut c = RunConfig::from_json(r#"{"model": {"seed": 3}, "out": "a", "eval": {"task": "nc"}}"#).unwrap();
        assert_eq!(c.model.seed, 3);
        c.apply(&Overrides {
            seed: Some(9),
            out: Some("b".into()),
            ..Default::default()
        });
        assert_eq!((c.model.seed, c.out.to_str().unwrap(), c.eval.task), (9, "b", Task::Nc));
        assert_eq!(c.model.alpha, 1.0);
    }

    #[test]
    fn validation_names_the_section() {
        let mut c = RunConfig {
            sbm: Some(SbmParams {
                blocks: 2,
                nodes_per_block: 5,
                p_in: 0.5,
                p_out: 0.1,
                feature_dim: 3,
                feature_noise: 0.1,
            }),
            ..Default::default()
        };
        assert!(c.validate().is_ok());
        c.model.beta = -1.0;
        assert!(c.validate().unwrap_err().0.starts_with("model:"));
        c.model.beta = 0.0;
        c.split.test = 0.99;
        assert!(c.validate().unwrap_err().0.starts_with("split:"));
        assert!(RunConfig::default().validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.model.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let c = RunConfig { out: "elsewhere".into(), ..a.clone() };
        assert_eq!(a.hash(), c.hash());
    }
}
