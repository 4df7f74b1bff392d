//! Batched episode simulation on a tape.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::config::LossVariant;
use crate::env::{transition, ActionSet, Geometry, LabeledImage, Pose};
use crate::graph::CommGraph;
use crate::net::{
    agent_step, encode_message, normalized_poses, observation_batch, predict, LstmState, NetVars,
};

use super::reward::{group_mean, group_sum, reward};

/// How actions are chosen at every step.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionMode {
    /// Sample from the learned policy.
    Policy,
    /// Uniform random walk; the policy is not evaluated.
    Uniform,
    /// Replay the given action indices, `[t][row]`, scoring them under the policy.
    Forced(Arc<Vec<Vec<usize>>>),
}

impl ActionMode {
    fn uses_policy(&self) -> bool {
        !matches!(self, ActionMode::Uniform)
    }
}

/// One image episode inside a batch.
#[derive(Debug, Clone, Copy)]
pub struct Episode<'a> {
    pub image: &'a LabeledImage,
    pub image_index: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RolloutSpec<'a> {
    pub geometry: Geometry,
    pub graph: &'a CommGraph,
    pub initial_poses: &'a [Pose],
    pub horizon: usize,
    pub actions: &'a ActionSet,
    pub mode: ActionMode,
    pub loss: LossVariant,
    pub record_messages: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Pose at which the step's observation was taken.
    pub pose: Pose,
    pub action: usize,
    pub log_prob: f64,
}

/// Values of one finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub image_index: usize,
    pub label: usize,
    /// `[t][agent]`.
    pub steps: Vec<Vec<StepRecord>>,
    pub final_poses: Vec<Pose>,
    /// Raw prediction of each agent.
    pub q: Vec<Vec<f64>>,
    /// Exact mean of `q`.
    pub qbar: Vec<f64>,
    pub reward: f64,
    pub logp: f64,
    pub predicted: usize,
    pub correct: bool,
    /// Encoder outputs `m(h(t))` for `t = 0..T`, `[t][agent]`, when requested.
    pub messages: Vec<Vec<Vec<f64>>>,
}

/// Differentiable handles for a batch plus per-episode records.
#[derive(Debug, Clone)]
pub struct BatchRollout {
    /// `[E * N, M]`.
    pub q: Var,
    /// `[E, M]`.
    pub qbar: Var,
    /// `[E, 1]`.
    pub reward: Var,
    /// `[E, 1]`.
    pub logp: Var,
    pub records: Vec<TrajectoryRecord>,
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Predicted category `argmax softmax(q̄)`.
pub fn predicted_category(qbar: &[f64]) -> usize {
    let via_softmax = argmax(&softmax(qbar));
    debug_assert_eq!(via_softmax, argmax(qbar));
    via_softmax
}

/// Inverse-CDF draw from `probs`.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

fn rows_of<T: Real>(t: &Tensor<T>, row: usize) -> Vec<f64> {
    t.row_slice(row).iter().map(|v| v.as_f64()).collect()
}

/// Run every episode for `spec.horizon` steps in lock-step.
pub fn rollout_batch<T: Real>(
    tape: &mut Tape<T>,
    vars: &NetVars,
    spec: &RolloutSpec<'_>,
    episodes: &[Episode<'_>],
) -> Result<BatchRollout, TensorError> {
    let n = spec.graph.agent_count();
    let e_count = episodes.len();
    let rows = e_count * n;
    let frame = spec.geometry.frame;
    let n_actions = spec.actions.len();
    if spec.initial_poses.len() != n {
        return Err(TensorError::Contract(format!(
            "{} initial poses for {n} agents",
            spec.initial_poses.len()
        )));
    }
    if let ActionMode::Forced(actions) = &spec.mode {
        if actions.len() < spec.horizon
            || actions
                .iter()
                .take(spec.horizon)
                .any(|a| a.len() != rows || a.iter().any(|&x| x >= n_actions))
        {
            return Err(TensorError::Contract(
                "forced actions do not cover the batch".into(),
            ));
        }
    }
    let routing = Arc::new(spec.graph.routing_mix(e_count));
    let images: Vec<&LabeledImage> = episodes
        .iter()
        .flat_map(|ep| std::iter::repeat_n(ep.image, n))
        .collect();
    let mut poses: Vec<Pose> = (0..e_count)
        .flat_map(|_| spec.initial_poses.iter().copied())
        .collect();
    let mut rngs: Vec<ChaCha8Rng> = episodes
        .iter()
        .map(|ep| ChaCha8Rng::seed_from_u64(ep.seed))
        .collect();
    let mut steps: Vec<Vec<Vec<StepRecord>>> = vec![Vec::with_capacity(spec.horizon); e_count];
    let mut messages: Vec<Vec<Vec<Vec<f64>>>> = vec![Vec::new(); e_count];

    let record_messages = |tape: &Tape<T>, m: Var, messages: &mut Vec<Vec<Vec<Vec<f64>>>>| {
        let value = tape.value(m);
        for (e, per_episode) in messages.iter_mut().enumerate() {
            per_episode.push((0..n).map(|i| rows_of(value, e * n + i)).collect());
        }
    };
    if spec.record_messages && spec.horizon > 0 {
        let zero_h = tape.constant(Tensor::zeros(&[rows, vars.hidden]));
        let m0 = encode_message(tape, vars, zero_h)?;
        record_messages(tape, m0, &mut messages);
    }

    let mut belief = LstmState::zero();
    let mut decision = LstmState::zero();
    let mut incoming: Option<Var> = None;
    let mut logp_terms: Vec<Var> = Vec::new();
    for t in 0..spec.horizon {
        let obs = tape.constant(observation_batch(&images, &poses, frame));
        let pose_in = tape.constant(normalized_poses(&poses, &spec.geometry));
        let out = agent_step(
            tape,
            vars,
            &routing,
            &belief,
            &decision,
            incoming,
            obs,
            pose_in,
            spec.mode.uses_policy(),
        )?;

        let (chosen, log_probs): (Vec<usize>, Vec<f64>) = match (&spec.mode, out.logits) {
            (ActionMode::Uniform, _) => {
                let lp = -(n_actions as f64).ln();
                let chosen = (0..rows)
                    .map(|r| rngs[r / n].gen_range(0..n_actions))
                    .collect();
                (chosen, vec![lp; rows])
            }
            (mode, Some(logits)) => {
                let ls = tape.log_softmax(logits)?;
                let chosen: Vec<usize> = match mode {
                    ActionMode::Forced(actions) => actions[t].clone(),
                    _ => {
                        let lsv = tape.value(ls);
                        (0..rows)
                            .map(|r| {
                                let probs: Vec<f64> =
                                    rows_of(lsv, r).into_iter().map(f64::exp).collect();
                                sample_index(&probs, &mut rngs[r / n])
                            })
                            .collect()
                    }
                };
                let picked = tape.pick(ls, Arc::new(chosen.clone()))?;
                let lp = tape
                    .value(picked)
                    .data()
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                logp_terms.push(picked);
                (chosen, lp)
            }
            (_, None) => unreachable!("policy modes evaluate logits"),
        };
        for e in 0..e_count {
            steps[e].push(
                (0..n)
                    .map(|i| StepRecord {
                        pose: poses[e * n + i],
                        action: chosen[e * n + i],
                        log_prob: log_probs[e * n + i],
                    })
                    .collect(),
            );
        }
        for (p, &a) in poses.iter_mut().zip(&chosen) {
            *p = transition(*p, spec.actions.get(a), &spec.geometry);
        }
        if spec.record_messages && t + 1 < spec.horizon {
            record_messages(tape, out.message, &mut messages);
        }
        belief = out.belief;
        decision = out.decision;
        incoming = Some(out.message);
    }

    let c = belief.cell_or_zeros(tape, rows, vars.hidden);
    let q = predict(tape, vars, c)?;
    let qbar = group_mean(tape, q, e_count, n)?;
    let labels: Vec<usize> = episodes.iter().map(|ep| ep.image.label).collect();
    let reward_var = reward(tape, qbar, &labels, spec.loss)?;
    let logp = match logp_terms.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &term in rest {
                acc = tape.add(acc, term)?;
            }
            group_sum(tape, acc, e_count, n)?
        }
        None => {
            let constant = if spec.mode.uses_policy() {
                0.0
            } else {
                -((n * spec.horizon) as f64) * (n_actions as f64).ln()
            };
            tape.constant(Tensor::full(&[e_count, 1], T::lit(constant)))
        }
    };

    let (qv, qbarv, rv, lv) = (
        tape.value(q),
        tape.value(qbar),
        tape.value(reward_var),
        tape.value(logp),
    );
    let records = episodes
        .iter()
        .enumerate()
        .map(|(e, ep)| {
            let qbar_row = rows_of(qbarv, e);
            let predicted = predicted_category(&qbar_row);
            TrajectoryRecord {
                image_index: ep.image_index,
                label: ep.image.label,
                steps: std::mem::take(&mut steps[e]),
                final_poses: poses[e * n..(e + 1) * n].to_vec(),
                q: (0..n).map(|i| rows_of(qv, e * n + i)).collect(),
                qbar: qbar_row,
                reward: rv.data()[e].as_f64(),
                logp: lv.data()[e].as_f64(),
                predicted,
                correct: predicted == ep.image.label,
                messages: std::mem::take(&mut messages[e]),
            }
        })
        .collect();
    Ok(BatchRollout {
        q,
        qbar,
        reward: reward_var,
        logp,
        records,
    })
}
