//! Per-step message export for offline embedding plots.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DefaultReal, Tape};
use crate::env::Dataset;
use crate::net::{GroupMask, ParameterStore};

use super::{
    rollout_batch, stream_seed, ActionMode, Episode, Setup, Stream, TrainError, TrajectoryRecord,
};

pub const MESSAGE_HEADER_PREFIX: &str = "trajectory_id,t,agent,label";

/// Roll out `count` randomly drawn images under the learned policy and
/// record every agent's encoder output at every step.
pub fn dump_messages(
    store: &ParameterStore<DefaultReal>,
    setup: &Setup,
    data: &Dataset,
    count: usize,
) -> Result<Vec<TrajectoryRecord>, TrainError> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let seed = setup.config.seed;
    let mut pick = ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Dump, &[]));
    let episodes: Vec<Episode> = (0..count)
        .map(|k| {
            let idx = pick.gen_range(0..data.len());
            Episode {
                image: &data.images[idx],
                image_index: idx,
                seed: stream_seed(seed, Stream::Dump, &[k as u64, idx as u64]),
            }
        })
        .collect();
    let mut records = Vec::with_capacity(count);
    for chunk in episodes.chunks(super::EVAL_CHUNK) {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, GroupMask::NONE);
        let out = rollout_batch(
            &mut tape,
            &vars,
            &setup.spec(ActionMode::Policy, true),
            chunk,
        )?;
        records.extend(out.records);
    }
    Ok(records)
}

/// CSV text `trajectory_id,t,agent,label,m_0..` with one row per agent-step.
pub fn message_rows(records: &[TrajectoryRecord], message_dim: usize) -> String {
    let mut out = String::from(MESSAGE_HEADER_PREFIX);
    for k in 0..message_dim {
        let _ = write!(out, ",m_{k}");
    }
    out.push('\n');
    for (id, r) in records.iter().enumerate() {
        for (t, agents) in r.messages.iter().enumerate() {
            for (i, m) in agents.iter().enumerate() {
                let _ = write!(out, "{id},{t},{i},{}", r.label);
                for v in m {
                    let _ = write!(out, ",{v}");
                }
                out.push('\n');
            }
        }
    }
    out
}
