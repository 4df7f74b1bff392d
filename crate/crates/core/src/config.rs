//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored.
//! Unknown and repeated keys are errors.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::env::{ActionSet, Geometry, Placement};
use crate::graph::{CommGraph, GraphError, GraphSpec, PushSumConfig};
use crate::net::{Architecture, GroupMask};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    SoftmaxL2,
    RawL2,
}

impl FromStr for LossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "softmax-l2" => Ok(LossVariant::SoftmaxL2),
            "raw-l2" => Ok(LossVariant::RawL2),
            _ => Err("expected softmax-l2 or raw-l2".into()),
        }
    }
}

impl fmt::Display for LossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossVariant::SoftmaxL2 => "softmax-l2",
            LossVariant::RawL2 => "raw-l2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consensus {
    Exact,
    PushSum,
}

impl FromStr for Consensus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(Consensus::Exact),
            "push-sum" => Ok(Consensus::PushSum),
            _ => Err("expected exact or push-sum".into()),
        }
    }
}

impl fmt::Display for Consensus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Consensus::Exact => "exact",
            Consensus::PushSum => "push-sum",
        })
    }
}

/// Every tunable of a run. Field names match config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    /// Use only the first `k` training images; 0 means all.
    pub train_subset: usize,
    pub test_subset: usize,
    pub n_i: usize,
    pub f: usize,
    /// Defaults to `f` when absent.
    pub f_m: Option<usize>,
    pub num_agents: usize,
    pub horizon: usize,
    pub initial_poses: Placement,
    pub graph: GraphSpec,
    /// Graph used by push-sum at the end of the horizon; defaults to `graph`.
    pub consensus_graph: Option<GraphSpec>,
    pub eval_consensus: Consensus,
    pub push_sum_tol: f64,
    pub push_sum_max_iters: usize,
    pub batch_size: usize,
    pub rollouts: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub learning_rate: f64,
    pub stage2_mask: GroupMask,
    pub loss: LossVariant,
    pub seed: u64,
    pub threads: usize,
    pub hidden: usize,
    pub fc_width: usize,
    pub message_dim: usize,
    pub classes: usize,
    pub actions: ActionSet,
    pub centralized_epochs: usize,
    pub out_dir: PathBuf,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train_images: "data/mnist/train-images-idx3-ubyte".into(),
            train_labels: "data/mnist/train-labels-idx1-ubyte".into(),
            test_images: "data/mnist/t10k-images-idx3-ubyte".into(),
            test_labels: "data/mnist/t10k-labels-idx1-ubyte".into(),
            train_subset: 0,
            test_subset: 0,
            n_i: 28,
            f: 2,
            f_m: None,
            num_agents: 2,
            horizon: 9,
            initial_poses: Placement::Diagonal,
            graph: GraphSpec::Complete,
            consensus_graph: None,
            eval_consensus: Consensus::PushSum,
            push_sum_tol: PushSumConfig::default().tol,
            push_sum_max_iters: PushSumConfig::default().max_iters,
            batch_size: 64,
            rollouts: 10,
            epochs_stage1: 30,
            epochs_stage2: 20,
            learning_rate: 1e-3,
            stage2_mask: "theta2,theta3".parse().expect("literal mask"),
            loss: LossVariant::SoftmaxL2,
            seed: 0,
            threads: 1,
            hidden: 64,
            fc_width: 64,
            message_dim: 12,
            classes: 10,
            actions: ActionSet::default(),
            centralized_epochs: 40,
            out_dir: "runs/default".into(),
            resume: true,
        }
    }
}

const KEYS: &[&str] = &[
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "train_subset",
    "test_subset",
    "n_I",
    "f",
    "f_m",
    "num_agents",
    "horizon",
    "initial_poses",
    "graph",
    "consensus_graph",
    "eval_consensus",
    "push_sum_tol",
    "push_sum_max_iters",
    "batch_size",
    "rollouts",
    "epochs_stage1",
    "epochs_stage2",
    "learning_rate",
    "stage2_mask",
    "loss",
    "seed",
    "threads",
    "hidden",
    "fc_width",
    "message_dim",
    "classes",
    "actions",
    "centralized_epochs",
    "out_dir",
    "resume",
];

fn parse_value<V: FromStr>(value: &str) -> Result<V, String>
where
    V::Err: fmt::Display,
{
    value.parse::<V>().map_err(|e| e.to_string())
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let canonical =
                KEYS.iter()
                    .find(|k| **k == key)
                    .ok_or_else(|| ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    })?;
            if seen.contains(canonical) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(canonical);
            cfg.set(key, value).map_err(|reason| ConfigError::Value {
                line,
                key: key.to_string(),
                reason,
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Assign one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "train_images" => self.train_images = value.into(),
            "train_labels" => self.train_labels = value.into(),
            "test_images" => self.test_images = value.into(),
            "test_labels" => self.test_labels = value.into(),
            "train_subset" => self.train_subset = parse_value(value)?,
            "test_subset" => self.test_subset = parse_value(value)?,
            "n_I" => self.n_i = parse_value(value)?,
            "f" => self.f = parse_value(value)?,
            "f_m" => {
                self.f_m = if value == "auto" {
                    None
                } else {
                    Some(parse_value(value)?)
                }
            }
            "num_agents" => self.num_agents = parse_value(value)?,
            "horizon" => self.horizon = parse_value(value)?,
            "initial_poses" => self.initial_poses = parse_value(value)?,
            "graph" => self.graph = parse_value(value)?,
            "consensus_graph" => {
                self.consensus_graph = if value == "auto" {
                    None
                } else {
                    Some(parse_value(value)?)
                }
            }
            "eval_consensus" => self.eval_consensus = parse_value(value)?,
            "push_sum_tol" => self.push_sum_tol = parse_value(value)?,
            "push_sum_max_iters" => self.push_sum_max_iters = parse_value(value)?,
            "batch_size" => self.batch_size = parse_value(value)?,
            "rollouts" => self.rollouts = parse_value(value)?,
            "epochs_stage1" => self.epochs_stage1 = parse_value(value)?,
            "epochs_stage2" => self.epochs_stage2 = parse_value(value)?,
            "learning_rate" => self.learning_rate = parse_value(value)?,
            "stage2_mask" => self.stage2_mask = parse_value(value)?,
            "loss" => self.loss = parse_value(value)?,
            "seed" => self.seed = parse_value(value)?,
            "threads" => self.threads = parse_value(value)?,
            "hidden" => self.hidden = parse_value(value)?,
            "fc_width" => self.fc_width = parse_value(value)?,
            "message_dim" => self.message_dim = parse_value(value)?,
            "classes" => self.classes = parse_value(value)?,
            "actions" => self.actions = parse_value(value)?,
            "centralized_epochs" => self.centralized_epochs = parse_value(value)?,
            "out_dir" => self.out_dir = value.into(),
            "resume" => self.resume = parse_value(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let auto = |v: Option<String>| v.unwrap_or_else(|| "auto".into());
        let pairs: Vec<(&str, String)> = vec![
            ("train_images", self.train_images.display().to_string()),
            ("train_labels", self.train_labels.display().to_string()),
            ("test_images", self.test_images.display().to_string()),
            ("test_labels", self.test_labels.display().to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("n_I", self.n_i.to_string()),
            ("f", self.f.to_string()),
            ("f_m", auto(self.f_m.map(|v| v.to_string()))),
            ("num_agents", self.num_agents.to_string()),
            ("horizon", self.horizon.to_string()),
            ("initial_poses", self.initial_poses.to_string()),
            ("graph", self.graph.to_string()),
            (
                "consensus_graph",
                auto(self.consensus_graph.as_ref().map(|g| g.to_string())),
            ),
            ("eval_consensus", self.eval_consensus.to_string()),
            ("push_sum_tol", format!("{:e}", self.push_sum_tol)),
            ("push_sum_max_iters", self.push_sum_max_iters.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("rollouts", self.rollouts.to_string()),
            ("epochs_stage1", self.epochs_stage1.to_string()),
            ("epochs_stage2", self.epochs_stage2.to_string()),
            ("learning_rate", format!("{:e}", self.learning_rate)),
            ("stage2_mask", self.stage2_mask.to_string()),
            ("loss", self.loss.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("hidden", self.hidden.to_string()),
            ("fc_width", self.fc_width.to_string()),
            ("message_dim", self.message_dim.to_string()),
            ("classes", self.classes.to_string()),
            ("actions", self.actions.to_string()),
            ("centralized_epochs", self.centralized_epochs.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("resume", self.resume.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn step(&self) -> usize {
        self.f_m.unwrap_or(self.f)
    }

    pub fn geometry(&self) -> Result<Geometry, ConfigError> {
        Geometry::new(self.n_i, self.f, self.step()).map_err(ConfigError::Invalid)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            image_side: self.n_i,
            frame: self.f,
            hidden: self.hidden,
            fc_width: self.fc_width,
            message_dim: self.message_dim,
            classes: self.classes,
            actions: self.actions.clone(),
            ..Architecture::new(self.n_i, self.f)
        }
    }

    pub fn comm_graph(&self) -> Result<CommGraph, GraphError> {
        self.graph.build(self.num_agents)
    }

    pub fn consensus_comm_graph(&self) -> Result<CommGraph, GraphError> {
        self.consensus_graph
            .as_ref()
            .unwrap_or(&self.graph)
            .build(self.num_agents)
    }

    pub fn push_sum(&self) -> PushSumConfig {
        PushSumConfig {
            tol: self.push_sum_tol,
            max_iters: self.push_sum_max_iters,
        }
    }

    /// Cross-field checks that single-key parsing cannot make.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        let geometry = self.geometry()?;
        self.architecture()
            .validate()
            .map_err(ConfigError::Invalid)?;
        if self.num_agents == 0 {
            return invalid("num_agents must be at least 1".into());
        }
        if self.rollouts == 0 {
            return invalid("rollouts must be at least 1".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be at least 1".into());
        }
        if self.threads == 0 {
            return invalid("threads must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return invalid("learning_rate must be positive".into());
        }
        if !(self.push_sum_tol.is_finite() && self.push_sum_tol >= 0.0) {
            return invalid("push_sum_tol must be a non-negative number".into());
        }
        self.initial_poses
            .poses(self.num_agents, &geometry)
            .map_err(ConfigError::Invalid)?;
        self.comm_graph()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.consensus_comm_graph()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
