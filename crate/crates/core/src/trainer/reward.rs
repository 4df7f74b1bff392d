//! Differentiable reward on the consensus prediction.

use std::sync::Arc;

use crate::autodiff::{Real, Tape, Tensor, TensorError, Var};
use crate::config::LossVariant;

/// `r = -||g(q̄) - e_label||²` per row of `qbar` (`[E, M]` to `[E, 1]`), where
/// `g` is softmax or the identity.
pub fn reward<T: Real>(
    tape: &mut Tape<T>,
    qbar: Var,
    labels: &[usize],
    variant: LossVariant,
) -> Result<Var, TensorError> {
    let (rows, classes) = tape.value(qbar).matrix_dims();
    if labels.len() != rows {
        return Err(TensorError::Contract(format!(
            "{} labels for {rows} predictions",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Contract(format!(
            "label {bad} outside 0..{classes}"
        )));
    }
    let compared = match variant {
        LossVariant::SoftmaxL2 => tape.softmax(qbar)?,
        LossVariant::RawL2 => qbar,
    };
    let mut target = Tensor::zeros(&[rows, classes]);
    for (r, &l) in labels.iter().enumerate() {
        target.data_mut()[r * classes + l] = T::one();
    }
    let target = tape.constant(target);
    let diff = tape.sub(compared, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_cols(sq);
    Ok(tape.neg(total))
}

/// Plain `f64` evaluation of [`reward`] for a single prediction.
pub fn reward_value(qbar: &[f64], label: usize, variant: LossVariant) -> f64 {
    let compared: Vec<f64> = match variant {
        LossVariant::SoftmaxL2 => {
            let max = qbar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = qbar.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / z).collect()
        }
        LossVariant::RawL2 => qbar.to_vec(),
    };
    -compared
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let t = if k == label { 1.0 } else { 0.0 };
            (v - t) * (v - t)
        })
        .sum::<f64>()
}

/// `Ĵ` scaled by `weight`: `weight * Σ_rows (logp · detach(r) + r)`.
///
/// Callers pass `weight = 1 / total_rows` so that partial sums from
/// independent chunks add up to the batch mean.
pub fn proxy_objective<T: Real>(
    tape: &mut Tape<T>,
    logp: Var,
    reward: Var,
    weight: f64,
) -> Result<Var, TensorError> {
    if tape.value(reward).is_empty() {
        return Err(TensorError::Contract(
            "proxy objective over zero trajectories".into(),
        ));
    }
    let r_d = tape.detach(reward);
    let score = tape.mul(logp, r_d)?;
    let per_row = tape.add(score, reward)?;
    let total = tape.sum(per_row);
    Ok(tape.scale(total, weight))
}

/// Sum consecutive groups of rows, `[groups * size, c] -> [groups, c]`.
pub fn group_sum<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    groups: usize,
    size: usize,
) -> Result<Var, TensorError> {
    tape.row_mix(
        x,
        Arc::new(crate::autodiff::RowMix::group_sum(groups, size)),
    )
}

/// Average consecutive groups of rows.
pub fn group_mean<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    groups: usize,
    size: usize,
) -> Result<Var, TensorError> {
    tape.row_mix(
        x,
        Arc::new(crate::autodiff::RowMix::group_mean(groups, size)),
    )
}
