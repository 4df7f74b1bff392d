//! Batched layers. Every activation is a `[rows, width]` matrix where a row
//! is one agent of one episode.

use std::sync::Arc;

use crate::autodiff::{Real, RowMix, Tape, Tensor, TensorError, Var};
use crate::env::{observe, Geometry, LabeledImage, Pose};

use super::Architecture;

#[derive(Debug, Clone, Copy)]
pub struct Dense2 {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct NetVars {
    all: Vec<Var>,
    pub belief: LstmVars,
    pub decision: LstmVars,
    pub policy: Dense2,
    pub encoder: Dense2,
    pub conv1: (Var, Var),
    pub conv2: Option<(Var, Var)>,
    pub features: (Var, Var),
    pub decoder: (Var, Var),
    pub pose: (Var, Var),
    pub predict: Dense2,
    pub hidden: usize,
    pub message_dim: usize,
}

impl NetVars {
    pub(super) fn new(arch: &Architecture, all: Vec<Var>) -> Self {
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("layout and bound vars agree");
        let belief = LstmVars {
            w_x: next(),
            w_h: next(),
            b: next(),
        };
        let decision = LstmVars {
            w_x: next(),
            w_h: next(),
            b: next(),
        };
        let mut dense = || Dense2 {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let policy = dense();
        let encoder = dense();
        let conv1 = (next(), next());
        let conv2 = arch.has_conv2().then(|| (next(), next()));
        let features = (next(), next());
        let decoder = (next(), next());
        let pose = (next(), next());
        let predict = Dense2 {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        Self {
            all,
            belief,
            decision,
            policy,
            encoder,
            conv1,
            conv2,
            features,
            decoder,
            pose,
            predict,
            hidden: arch.hidden,
            message_dim: arch.message_dim,
        }
    }

    /// Handles in layout order.
    pub fn all(&self) -> &[Var] {
        &self.all
    }
}

fn dense<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

fn relu_then_linear<T: Real>(tape: &mut Tape<T>, x: Var, p: &Dense2) -> Result<Var, TensorError> {
    let hidden = dense(tape, x, p.w1, p.b1)?;
    let hidden = tape.relu(hidden);
    dense(tape, hidden, p.w2, p.b2)
}

/// `[rows, 1, f, f]` observations to `[rows, n]` features.
pub fn extract_features<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    obs: Var,
) -> Result<Var, TensorError> {
    let rows = tape.value(obs).shape()[0];
    let x = tape.conv2d(obs, v.conv1.0, Some(v.conv1.1), 1)?;
    let mut x = tape.relu(x);
    if let Some((k, b)) = v.conv2 {
        x = tape.conv2d(x, k, Some(b), 1)?;
        x = tape.relu(x);
    }
    let flat = tape.value(x).len() / rows.max(1);
    let x = tape.reshape(x, vec![rows, flat])?;
    dense(tape, x, v.features.0, v.features.1)
}

pub fn encode_message<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    h: Var,
) -> Result<Var, TensorError> {
    relu_then_linear(tape, h, &v.encoder)
}

pub fn decode_message<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    m: Var,
) -> Result<Var, TensorError> {
    let d = dense(tape, m, v.decoder.0, v.decoder.1)?;
    Ok(tape.relu(d))
}

/// `poses` holds coordinates already scaled to `[0, 1]`.
pub fn embed_pose<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    poses: Var,
) -> Result<Var, TensorError> {
    let e = dense(tape, poses, v.pose.0, v.pose.1)?;
    Ok(tape.relu(e))
}

pub fn policy_logits<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    h_hat: Var,
) -> Result<Var, TensorError> {
    relu_then_linear(tape, h_hat, &v.policy)
}

pub fn predict<T: Real>(tape: &mut Tape<T>, v: &NetVars, c: Var) -> Result<Var, TensorError> {
    relu_then_linear(tape, c, &v.predict)
}

/// Recurrent `(h, c)` pair; `None` stands for the all-zero initial state.
#[derive(Debug, Clone, Copy, Default)]
pub struct LstmState {
    pub h: Option<Var>,
    pub c: Option<Var>,
}

impl LstmState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn cell_or_zeros<T: Real>(&self, tape: &mut Tape<T>, rows: usize, hidden: usize) -> Var {
        self.c
            .unwrap_or_else(|| tape.constant(Tensor::zeros(&[rows, hidden])))
    }

    pub fn hidden_or_zeros<T: Real>(&self, tape: &mut Tape<T>, rows: usize, hidden: usize) -> Var {
        self.h
            .unwrap_or_else(|| tape.constant(Tensor::zeros(&[rows, hidden])))
    }
}

/// Gate layout along columns is input, forget, candidate, output.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    cell: &LstmVars,
    state: &LstmState,
    u: Var,
) -> Result<LstmState, TensorError> {
    let n = tape.value(cell.w_h).shape()[0];
    let mut gates = tape.matmul(u, cell.w_x)?;
    if let Some(h) = state.h {
        let hh = tape.matmul(h, cell.w_h)?;
        gates = tape.add(gates, hh)?;
    }
    let gates = tape.add_bias(gates, cell.b)?;
    let i = tape.slice_cols(gates, 0, n)?;
    let i = tape.sigmoid(i);
    let g = tape.slice_cols(gates, 2 * n, n)?;
    let g = tape.tanh(g);
    let o = tape.slice_cols(gates, 3 * n, n)?;
    let o = tape.sigmoid(o);
    let mut c = tape.mul(i, g)?;
    if let Some(c_prev) = state.c {
        let f = tape.slice_cols(gates, n, n)?;
        let f = tape.sigmoid(f);
        let kept = tape.mul(f, c_prev)?;
        c = tape.add(kept, c)?;
    }
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(LstmState {
        h: Some(h),
        c: Some(c),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub belief: LstmState,
    pub decision: LstmState,
    /// Outgoing messages `m(t+1)`, `[rows, n_m]`.
    pub message: Var,
    /// Action logits, `[rows, |A|]`; absent when the policy is not evaluated.
    pub logits: Option<Var>,
}

/// One synchronous timestep for every row: features, routed messages, pose
/// embedding, both recurrent cells, the outgoing message and action logits.
///
/// `incoming` is `None` at `t = 0`, when every message is zero. With
/// `with_policy` false the decision cell and policy head are skipped and the
/// decision state is returned unchanged.
#[allow(clippy::too_many_arguments)]
pub fn agent_step<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
    routing: &Arc<RowMix>,
    belief: &LstmState,
    decision: &LstmState,
    incoming: Option<Var>,
    observations: Var,
    poses: Var,
    with_policy: bool,
) -> Result<StepOutput, TensorError> {
    let rows = tape.value(observations).shape()[0];
    let b = extract_features(tape, v, observations)?;
    let m = incoming.unwrap_or_else(|| tape.constant(Tensor::zeros(&[rows, v.message_dim])));
    let decoded = decode_message(tape, v, m)?;
    let d_bar = tape.row_mix(decoded, Arc::clone(routing))?;
    let lambda = embed_pose(tape, v, poses)?;
    let u = tape.concat_cols(&[b, d_bar, lambda])?;
    let belief = lstm_step(tape, &v.belief, belief, u)?;
    let message = encode_message(tape, v, belief.h.expect("stepped state"))?;
    let (decision, logits) = if with_policy {
        let next = lstm_step(tape, &v.decision, decision, u)?;
        let logits = policy_logits(tape, v, next.h.expect("stepped state"))?;
        (next, Some(logits))
    } else {
        (*decision, None)
    };
    Ok(StepOutput {
        belief,
        decision,
        message,
        logits,
    })
}

/// Crops for each row as a `[rows, 1, f, f]` tensor.
pub fn observation_batch<T: Real>(
    images: &[&LabeledImage],
    poses: &[Pose],
    frame: usize,
) -> Tensor<T> {
    debug_assert_eq!(images.len(), poses.len());
    let mut data = Vec::with_capacity(images.len() * frame * frame);
    for (im, &p) in images.iter().zip(poses) {
        data.extend(
            observe(im, p, frame)
                .into_iter()
                .map(|x| T::lit(f64::from(x))),
        );
    }
    Tensor::new(vec![images.len(), 1, frame, frame], data).expect("crop count")
}

/// Pose coordinates divided by the largest feasible coordinate, `[rows, 2]`.
pub fn normalized_poses<T: Real>(poses: &[Pose], geometry: &Geometry) -> Tensor<T> {
    let scale = geometry.max_coord().max(1) as f64;
    let data = poses
        .iter()
        .flat_map(|p| [T::lit(p.row as f64 / scale), T::lit(p.col as f64 / scale)])
        .collect();
    Tensor::new(vec![poses.len(), 2], data).expect("two coordinates per pose")
}
