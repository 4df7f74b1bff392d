//! Centralized comparison: a single CNN classifies the image with every
//! pixel outside the agents' random-walk frames set to zero.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::config::RunConfig;
use crate::env::{transition, ActionSet, Dataset, Geometry, LabeledImage, Pose};

use super::artifacts::{atomic_write, metrics_csv, write_resolved_config, MetricsRow};
use super::{
    predicted_category, reward, reward_value, stream_seed, Adam, Setup, Stream, TrainError,
};

const CHUNK: usize = 16;

/// Pixels covered by the frames each agent observes while walking uniformly
/// at random for `horizon` steps. The initial frames are always revealed.
pub fn revealed_mask(
    geometry: &Geometry,
    initial: &[Pose],
    horizon: usize,
    actions: &ActionSet,
    seed: u64,
) -> Vec<bool> {
    let side = geometry.image_side;
    let mut mask = vec![false; side * side];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut poses = initial.to_vec();
    for t in 0..horizon.max(1) {
        for p in &poses {
            for r in p.row..p.row + geometry.frame {
                mask[r * side + p.col..r * side + p.col + geometry.frame].fill(true);
            }
        }
        if t + 1 < horizon {
            for p in poses.iter_mut() {
                *p = transition(*p, actions.get(rng.gen_range(0..actions.len())), geometry);
            }
        }
    }
    mask
}

pub fn masked_pixels(image: &LabeledImage, mask: &[bool]) -> Vec<f32> {
    image
        .pixels()
        .iter()
        .zip(mask)
        .map(|(&p, &m)| if m { p } else { 0.0 })
        .collect()
}

/// Two 2x2 convolutions (8 and 16 channels) and two dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedNet {
    pub side: usize,
    pub classes: usize,
    pub tensors: Vec<Tensor<f32>>,
}

const NAMES: [&str; 8] = [
    "conv1.k", "conv1.b", "conv2.k", "conv2.b", "fc1.w", "fc1.b", "fc2.w", "fc2.b",
];

impl CentralizedNet {
    pub fn init(side: usize, width: usize, classes: usize, seed: u64) -> Self {
        let flat = 16 * (side - 2) * (side - 2);
        let shapes: [(Vec<usize>, usize); 8] = [
            (vec![8, 1, 2, 2], 4),
            (vec![8], 0),
            (vec![16, 8, 2, 2], 32),
            (vec![16], 0),
            (vec![flat, width], flat),
            (vec![width], 0),
            (vec![width, classes], width),
            (vec![classes], 0),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = shapes
            .into_iter()
            .map(|(shape, fan_in)| {
                let len = shape.iter().product();
                let data = if fan_in == 0 {
                    vec![0.0; len]
                } else {
                    let a = 1.0 / (fan_in as f32).sqrt();
                    (0..len).map(|_| rng.gen_range(-a..a)).collect()
                };
                Tensor::new(shape, data).expect("shape")
            })
            .collect();
        Self {
            side,
            classes,
            tensors,
        }
    }

    /// Raw class scores `[B, M]` for `[B, 1, side, side]` inputs.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        vars: &[Var],
        input: Var,
    ) -> Result<Var, TensorError> {
        let rows = tape.value(input).shape()[0];
        let x = tape.conv2d(input, vars[0], Some(vars[1]), 1)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, vars[2], Some(vars[3]), 1)?;
        let x = tape.relu(x);
        let flat = tape.value(x).len() / rows.max(1);
        let x = tape.reshape(x, vec![rows, flat])?;
        let x = tape.matmul(x, vars[4])?;
        let x = tape.add_bias(x, vars[5])?;
        let x = tape.relu(x);
        let x = tape.matmul(x, vars[6])?;
        tape.add_bias(x, vars[7])
    }
}

#[derive(Debug, Clone)]
pub struct CentralizedOutcome {
    pub net: CentralizedNet,
    pub metrics: Vec<MetricsRow>,
    pub best_accuracy: f64,
}

fn input_batch(items: &[(&LabeledImage, Vec<bool>)], side: usize) -> Tensor<f32> {
    let data: Vec<f32> = items
        .iter()
        .flat_map(|(im, m)| masked_pixels(im, m))
        .collect();
    Tensor::new(vec![items.len(), 1, side, side], data).expect("image batch")
}

fn evaluate_centralized(
    net: &CentralizedNet,
    setup: &Setup,
    test: &Dataset,
) -> Result<(f64, f64), TrainError> {
    let cfg = &setup.config;
    let indexed: Vec<(usize, &LabeledImage)> = test.images.iter().enumerate().collect();
    let results: Vec<Vec<(bool, f64)>> = indexed
        .par_chunks(CHUNK * 2)
        .map(|chunk| -> Result<_, TrainError> {
            let items: Vec<_> = chunk
                .iter()
                .map(|&(idx, im)| {
                    let seed = stream_seed(cfg.seed, Stream::Centralized, &[u64::MAX, idx as u64]);
                    (
                        im,
                        revealed_mask(
                            &setup.geometry,
                            &setup.initial_poses,
                            cfg.horizon,
                            &setup.arch.actions,
                            seed,
                        ),
                    )
                })
                .collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = net
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect();
            let input = tape.constant(input_batch(&items, net.side));
            let q = net.forward(&mut tape, &vars, input)?;
            let qv = tape.value(q);
            Ok(items
                .iter()
                .enumerate()
                .map(|(r, (im, _))| {
                    let row: Vec<f64> = qv.row_slice(r).iter().map(|&v| f64::from(v)).collect();
                    (
                        predicted_category(&row) == im.label,
                        reward_value(&row, im.label, cfg.loss),
                    )
                })
                .collect())
        })
        .collect::<Result<_, TrainError>>()?;
    let flat: Vec<_> = results.into_iter().flatten().collect();
    let n = flat.len().max(1) as f64;
    Ok((
        flat.iter().filter(|r| r.0).count() as f64 / n,
        flat.iter().map(|r| r.1).sum::<f64>() / n,
    ))
}

/// Train the centralized classifier for `cfg.centralized_epochs` epochs.
/// Each epoch draws fresh random walks for the training masks; test masks
/// are fixed by the seed.
pub fn train_centralized(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<CentralizedOutcome, TrainError> {
    let setup = Setup::new(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    pool.install(|| run_centralized(&setup, train, test))
}

fn run_centralized(
    setup: &Setup,
    train: &Dataset,
    test: &Dataset,
) -> Result<CentralizedOutcome, TrainError> {
    let cfg = &setup.config;
    let out = cfg.out_dir.as_path();
    write_resolved_config(out, cfg)?;
    let start = Instant::now();
    let mut net = CentralizedNet::init(
        cfg.n_i,
        cfg.fc_width,
        cfg.classes,
        stream_seed(cfg.seed, Stream::Centralized, &[]),
    );
    let mut adam = Adam::for_tensors(&net.tensors, cfg.learning_rate);
    let labels: Vec<(String, String)> = NAMES
        .iter()
        .map(|n| ("centralized".to_string(), n.to_string()))
        .collect();
    let active = vec![true; NAMES.len()];
    let mut metrics = Vec::new();
    let (acc, rew) = evaluate_centralized(&net, setup, test)?;
    metrics.push(MetricsRow {
        epoch: 0,
        stage: "centralized".into(),
        split: "test".into(),
        accuracy: acc,
        mean_reward: rew,
        mean_logp: 0.0,
        wall_seconds: start.elapsed().as_secs_f64(),
    });
    let mut best = acc;
    let indexed: Vec<(usize, &LabeledImage)> = train.images.iter().enumerate().collect();
    for epoch in 1..=cfg.centralized_epochs {
        let mut order = indexed.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            Stream::Shuffle,
            &[u64::MAX, epoch as u64],
        )));
        let (mut correct, mut reward_sum) = (0usize, 0.0f64);
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let parts: Vec<(Vec<Tensor<f32>>, usize, f64)> = batch
                .par_chunks(CHUNK)
                .map(|chunk| -> Result<_, TrainError> {
                    let items: Vec<_> = chunk
                        .iter()
                        .map(|&(idx, im)| {
                            let seed = stream_seed(
                                cfg.seed,
                                Stream::Centralized,
                                &[epoch as u64, idx as u64],
                            );
                            (
                                im,
                                revealed_mask(
                                    &setup.geometry,
                                    &setup.initial_poses,
                                    cfg.horizon,
                                    &setup.arch.actions,
                                    seed,
                                ),
                            )
                        })
                        .collect();
                    let mut tape = Tape::new();
                    let vars: Vec<Var> =
                        net.tensors.iter().map(|t| tape.param(t.clone())).collect();
                    let input = tape.constant(input_batch(&items, net.side));
                    let q = net.forward(&mut tape, &vars, input)?;
                    let chunk_labels: Vec<usize> = items.iter().map(|(im, _)| im.label).collect();
                    let r = reward(&mut tape, q, &chunk_labels, cfg.loss)?;
                    let total = tape.sum(r);
                    let loss = tape.scale(total, -weight);
                    tape.backward(loss)?;
                    let qv = tape.value(q);
                    let correct = (0..items.len())
                        .filter(|&k| {
                            let row: Vec<f64> =
                                qv.row_slice(k).iter().map(|&v| f64::from(v)).collect();
                            predicted_category(&row) == chunk_labels[k]
                        })
                        .count();
                    let grads = vars
                        .iter()
                        .zip(&net.tensors)
                        .map(|(&v, t)| {
                            tape.grad(v)
                                .cloned()
                                .unwrap_or_else(|| Tensor::zeros(t.shape()))
                        })
                        .collect();
                    Ok((grads, correct, f64::from(tape.value(total).data()[0])))
                })
                .collect::<Result<_, TrainError>>()?;
            let mut grads: Vec<Tensor<f32>> = net
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for (g, c, r) in parts {
                for (acc, part) in grads.iter_mut().zip(&g) {
                    acc.add_assign(part);
                }
                correct += c;
                reward_sum += r;
            }
            adam.step_tensors(&mut net.tensors, &grads, &active, &labels)?;
        }
        let n = train.len().max(1) as f64;
        metrics.push(MetricsRow {
            epoch,
            stage: "centralized".into(),
            split: "train".into(),
            accuracy: correct as f64 / n,
            mean_reward: reward_sum / n,
            mean_logp: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        let (acc, rew) = evaluate_centralized(&net, setup, test)?;
        log::info!("centralized epoch {epoch}: test accuracy {acc:.4}");
        best = best.max(acc);
        metrics.push(MetricsRow {
            epoch,
            stage: "centralized".into(),
            split: "test".into(),
            accuracy: acc,
            mean_reward: rew,
            mean_logp: 0.0,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        atomic_write(&out.join(super::METRICS), metrics_csv(&metrics).as_bytes())?;
    }
    atomic_write(&out.join(super::METRICS), metrics_csv(&metrics).as_bytes())?;
    Ok(CentralizedOutcome {
        net,
        metrics,
        best_accuracy: best,
    })
}
