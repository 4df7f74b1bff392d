//! Rollouts, the proxy objective, optimization, evaluation and the two-stage
//! training schedule.

mod adam;
pub mod artifacts;
pub mod baseline;
mod dump;
mod reward;
mod rollout;
mod schedule;

use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{DefaultReal, Tape, Tensor, TensorError};
use crate::config::{ConfigError, Consensus, RunConfig};
use crate::env::{DataError, Dataset, Geometry, LabeledImage, Placement, Pose};
use crate::graph::{push_sum_consensus, CommGraph, GraphError, GraphSpec};
use crate::net::{Architecture, CheckpointError, Group, GroupMask, ParameterStore};

pub use adam::{Adam, NonFiniteGradient};
pub use dump::{dump_messages, message_rows, MESSAGE_HEADER_PREFIX};
pub use reward::{group_mean, group_sum, proxy_objective, reward, reward_value};
pub use rollout::{
    argmax, predicted_category, rollout_batch, sample_index, ActionMode, BatchRollout, Episode,
    RolloutSpec, StepRecord, TrajectoryRecord,
};
pub use schedule::{
    load_datasets, load_parameters, two_stage_train, TrainOutcome, BEST, FINAL, LATEST, METRICS,
};

/// Images per parallel work item. Fixed so results do not depend on the
/// number of worker threads.
pub const TRAIN_CHUNK: usize = 8;
pub const EVAL_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    NonFinite(#[from] NonFiniteGradient),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

impl TrainError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Purpose tags mixed into episode seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Train = 1,
    Eval = 2,
    Shuffle = 3,
    Dump = 4,
    Centralized = 5,
    Init = 6,
}

/// Deterministic seed from a base seed and a list of indices (splitmix64 chain).
pub fn stream_seed(base: u64, stream: Stream, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    let mut h = mix(base ^ mix(stream as u64));
    for &p in parts {
        h = mix(h ^ p);
    }
    h
}

/// Everything derived from a config that a rollout needs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: RunConfig,
    pub arch: Architecture,
    pub geometry: Geometry,
    pub graph: CommGraph,
    pub consensus_graph: CommGraph,
    pub initial_poses: Vec<Pose>,
}

impl Setup {
    pub fn new(config: &RunConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let geometry = config.geometry()?;
        let invalid = |e: GraphError| ConfigError::Invalid(e.to_string());
        Ok(Self {
            arch: config.architecture(),
            geometry,
            graph: config.comm_graph().map_err(invalid)?,
            consensus_graph: config.consensus_comm_graph().map_err(invalid)?,
            initial_poses: config
                .initial_poses
                .poses(config.num_agents, &geometry)
                .map_err(ConfigError::Invalid)?,
            config: config.clone(),
        })
    }

    /// Same trained network run with a different agent count, horizon,
    /// graph or consensus.
    pub fn with_overrides(
        &self,
        agents: Option<usize>,
        horizon: Option<usize>,
        graph: Option<GraphSpec>,
        consensus: Option<Consensus>,
    ) -> Result<Self, ConfigError> {
        let mut cfg = self.config.clone();
        if let Some(n) = agents {
            cfg.num_agents = n;
            if let Placement::Explicit(p) = &cfg.initial_poses {
                if p.len() != n {
                    cfg.initial_poses = Placement::Diagonal;
                }
            }
        }
        if let Some(t) = horizon {
            cfg.horizon = t;
        }
        if let Some(g) = graph {
            cfg.graph = g;
            cfg.consensus_graph = None;
        }
        if let Some(c) = consensus {
            cfg.eval_consensus = c;
        }
        Setup::new(&cfg)
    }

    pub fn spec<'a>(&'a self, mode: ActionMode, record_messages: bool) -> RolloutSpec<'a> {
        RolloutSpec {
            geometry: self.geometry,
            graph: &self.graph,
            initial_poses: &self.initial_poses,
            horizon: self.config.horizon,
            actions: &self.arch.actions,
            mode,
            loss: self.config.loss,
            record_messages,
        }
    }
}

/// Groups optimized in stage 1: everything except the decision cell and policy.
pub fn stage1_mask() -> GroupMask {
    GroupMask::of(&[Group::Decision, Group::Policy]).complement()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    pub episodes: usize,
    pub correct: usize,
    pub reward_sum: f64,
    pub logp_sum: f64,
}

impl BatchStats {
    pub fn merge(&mut self, other: &BatchStats) {
        self.episodes += other.episodes;
        self.correct += other.correct;
        self.reward_sum += other.reward_sum;
        self.logp_sum += other.logp_sum;
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.episodes.max(1) as f64
    }

    pub fn mean_reward(&self) -> f64 {
        self.reward_sum / self.episodes.max(1) as f64
    }

    pub fn mean_logp(&self) -> f64 {
        self.logp_sum / self.episodes.max(1) as f64
    }
}

/// Gradient of `-Ĵ` averaged over `batch.len() * rollouts` episodes.
///
/// `batch` pairs dataset indices with images. Work is split into fixed-size
/// chunks, each on its own tape, and chunk gradients are summed in order.
pub fn batch_gradients(
    store: &ParameterStore<DefaultReal>,
    setup: &Setup,
    batch: &[(usize, &LabeledImage)],
    mode: &ActionMode,
    trainable: GroupMask,
    epoch: u64,
) -> Result<(Vec<Tensor<DefaultReal>>, BatchStats), TrainError> {
    let rollouts = setup.config.rollouts;
    let weight = 1.0 / (batch.len() * rollouts) as f64;
    let seed = setup.config.seed;
    let parts: Vec<_> = batch
        .par_chunks(TRAIN_CHUNK)
        .map(|chunk| -> Result<_, TrainError> {
            let episodes: Vec<Episode> = chunk
                .iter()
                .flat_map(|&(idx, image)| {
                    (0..rollouts).map(move |k| Episode {
                        image,
                        image_index: idx,
                        seed: stream_seed(seed, Stream::Train, &[epoch, idx as u64, k as u64]),
                    })
                })
                .collect();
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, trainable);
            let out = rollout_batch(
                &mut tape,
                &vars,
                &setup.spec(mode.clone(), false),
                &episodes,
            )?;
            let j = proxy_objective(&mut tape, out.logp, out.reward, weight)?;
            let loss = tape.neg(j);
            tape.backward(loss)?;
            let mut stats = BatchStats::default();
            for r in &out.records {
                stats.merge(&BatchStats {
                    episodes: 1,
                    correct: usize::from(r.correct),
                    reward_sum: r.reward,
                    logp_sum: r.logp,
                });
            }
            Ok((store.gradients(&tape, &vars), stats))
        })
        .collect::<Result<_, _>>()?;
    let mut grads: Vec<Tensor<DefaultReal>> = store
        .tensors()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut stats = BatchStats::default();
    for (g, s) in parts {
        for (acc, part) in grads.iter_mut().zip(&g) {
            acc.add_assign(part);
        }
        stats.merge(&s);
    }
    Ok((grads, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_logp: f64,
    /// `confusion[label][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Final consensus prediction per image.
    pub qbars: Vec<Vec<f64>>,
}

/// Accuracy and confusion matrix of consensus predictions.
pub fn score_predictions(
    qbars: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
) -> (f64, Vec<Vec<usize>>, Vec<usize>) {
    let mut confusion = vec![vec![0; classes]; classes];
    let predictions: Vec<usize> = qbars.iter().map(|q| predicted_category(q)).collect();
    let mut correct = 0;
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            correct += 1;
        }
        if l < classes && p < classes {
            confusion[l][p] += 1;
        }
    }
    (
        correct as f64 / labels.len().max(1) as f64,
        confusion,
        predictions,
    )
}

/// Single-rollout evaluation of every image in `data`.
pub fn evaluate(
    store: &ParameterStore<DefaultReal>,
    setup: &Setup,
    data: &Dataset,
    mode: &ActionMode,
) -> Result<EvalReport, TrainError> {
    let seed = setup.config.seed;
    let indexed: Vec<(usize, &LabeledImage)> = data.images.iter().enumerate().collect();
    let push_sum = setup.config.push_sum();
    let per_chunk: Vec<Vec<(Vec<f64>, f64, usize)>> = indexed
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<_, TrainError> {
            let episodes: Vec<Episode> = chunk
                .iter()
                .map(|&(idx, image)| Episode {
                    image,
                    image_index: idx,
                    seed: stream_seed(seed, Stream::Eval, &[idx as u64]),
                })
                .collect();
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, GroupMask::NONE);
            let out = rollout_batch(
                &mut tape,
                &vars,
                &setup.spec(mode.clone(), false),
                &episodes,
            )?;
            out.records
                .into_iter()
                .map(|r| {
                    let qbar = match setup.config.eval_consensus {
                        Consensus::Exact => r.qbar,
                        Consensus::PushSum => {
                            push_sum_consensus(&setup.consensus_graph, &r.q, push_sum)?
                                .estimates
                                .swap_remove(0)
                        }
                    };
                    Ok((qbar, r.logp, r.label))
                })
                .collect()
        })
        .collect::<Result<_, TrainError>>()?;
    let rows: Vec<_> = per_chunk.into_iter().flatten().collect();
    let labels: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let qbars: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
    let (accuracy, confusion, predictions) = score_predictions(&qbars, &labels, setup.arch.classes);
    let count = rows.len().max(1) as f64;
    let mean_reward = rows
        .iter()
        .map(|(q, _, l)| reward_value(q, *l, setup.config.loss))
        .sum::<f64>()
        / count;
    let mean_logp = rows.iter().map(|r| r.1).sum::<f64>() / count;
    Ok(EvalReport {
        accuracy,
        mean_reward,
        mean_logp,
        confusion,
        predictions,
        labels,
        qbars,
    })
}

#[cfg(test)]
mod tests;
