//! The two-stage schedule: random-walk training of perception,
//! communication and prediction, then policy training with those frozen.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{DefaultReal, Tensor};
use crate::config::RunConfig;
use crate::env::{load_idx_dataset, DataError, Dataset, LabeledImage};
use crate::net::{Checkpoint, CheckpointError, GroupMask, ParameterStore};

use super::artifacts::{
    atomic_write, metrics_csv, read_checkpoint, read_metrics, write_checkpoint,
    write_resolved_config, MetricsRow,
};
use super::{
    batch_gradients, evaluate, stage1_mask, stream_seed, ActionMode, Adam, Setup, Stream,
    TrainError,
};

pub const LATEST: &str = "latest.ckpt";
pub const BEST: &str = "best.ckpt";
pub const FINAL: &str = "final.ckpt";
pub const METRICS: &str = "metrics.csv";

/// Load train and test sets, apply the configured subsets and check that
/// they fit the configured geometry and class count.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), TrainError> {
    let mut out = Vec::with_capacity(2);
    for (images, labels, subset) in [
        (&cfg.train_images, &cfg.train_labels, cfg.train_subset),
        (&cfg.test_images, &cfg.test_labels, cfg.test_subset),
    ] {
        let mut data = load_idx_dataset(images, labels)?;
        if subset > 0 {
            data = data.truncated(subset);
        }
        if let Some(side) = data.side() {
            if side != cfg.n_i {
                return Err(DataError::Invalid(format!(
                    "{} holds {side}x{side} images but n_I = {}",
                    images.display(),
                    cfg.n_i
                ))
                .into());
            }
        }
        if let Some(max) = data.max_label() {
            if max >= cfg.classes {
                return Err(DataError::Invalid(format!(
                    "{} has label {max} but classes = {}",
                    labels.display(),
                    cfg.classes
                ))
                .into());
            }
        }
        out.push(data);
    }
    let test = out.pop().expect("two datasets");
    let train = out.pop().expect("two datasets");
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore<DefaultReal>,
    pub metrics: Vec<MetricsRow>,
    pub best_stage1: Option<f64>,
    pub best_stage2: Option<f64>,
    /// Epoch the run resumed after, if it did.
    pub resumed_after: Option<usize>,
}

impl TrainOutcome {
    pub fn test_rows(&self) -> impl Iterator<Item = &MetricsRow> {
        self.metrics.iter().filter(|r| r.split == "test")
    }
}

fn best_of(rows: &[MetricsRow], stage: &str) -> Option<f64> {
    rows.iter()
        .filter(|r| r.split == "test" && r.stage == stage)
        .map(|r| r.accuracy)
        .fold(None, |acc, a| Some(acc.map_or(a, |b: f64| b.max(a))))
}

fn training_state(
    store: &ParameterStore<DefaultReal>,
    adam: &Adam<DefaultReal>,
    epoch: usize,
    wall: f64,
) -> Checkpoint {
    let mut ckpt = store.to_checkpoint();
    for (k, spec) in store.specs().iter().enumerate() {
        ckpt.tensors
            .push((format!("adam.m.{}", spec.name), adam.m[k].cast()));
        ckpt.tensors
            .push((format!("adam.v.{}", spec.name), adam.v[k].cast()));
    }
    let steps: Vec<f32> = adam.steps.iter().map(|&s| s as f32).collect();
    ckpt.tensors.push((
        "adam.steps".into(),
        Tensor::new(vec![steps.len()], steps).expect("vector"),
    ));
    ckpt.tensors.push((
        "progress".into(),
        Tensor::new(vec![2], vec![epoch as f32, wall as f32]).expect("pair"),
    ));
    ckpt
}

fn restore_training_state(
    setup: &Setup,
    ckpt: &Checkpoint,
) -> Result<(ParameterStore<DefaultReal>, Adam<DefaultReal>, usize, f64), CheckpointError> {
    let store = ParameterStore::from_checkpoint(&setup.arch, ckpt)?;
    let mut adam = Adam::new(&store, setup.config.learning_rate);
    let missing = |n: &str| CheckpointError::MissingTensor(n.to_string());
    for (k, spec) in store.specs().iter().enumerate() {
        for (prefix, slot) in [("adam.m.", &mut adam.m[k]), ("adam.v.", &mut adam.v[k])] {
            let name = format!("{prefix}{}", spec.name);
            let t = ckpt.get(&name).ok_or_else(|| missing(&name))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: slot.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *slot = t.cast();
        }
    }
    let steps = ckpt
        .get("adam.steps")
        .ok_or_else(|| missing("adam.steps"))?;
    if steps.len() != adam.steps.len() {
        return Err(missing("adam.steps"));
    }
    adam.steps = steps.data().iter().map(|&s| s as u64).collect();
    let progress = ckpt
        .get("progress")
        .filter(|p| p.len() == 2)
        .ok_or_else(|| missing("progress"))?;
    Ok((
        store,
        adam,
        progress.data()[0] as usize,
        f64::from(progress.data()[1]),
    ))
}

/// Train for `epochs_stage1 + epochs_stage2` epochs, evaluating on `test`
/// after initialization and after every epoch. Artifacts go to
/// `cfg.out_dir`; an existing `latest.ckpt` there is resumed from when
/// `cfg.resume` is set.
pub fn two_stage_train(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<TrainOutcome, TrainError> {
    let setup = Setup::new(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    pool.install(|| run(&setup, train, test))
}

fn run(setup: &Setup, train: &Dataset, test: &Dataset) -> Result<TrainOutcome, TrainError> {
    let cfg = &setup.config;
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    write_resolved_config(out, cfg)?;

    let (e1, e2) = (cfg.epochs_stage1, cfg.epochs_stage2);
    let mut store =
        ParameterStore::<DefaultReal>::init(&setup.arch, stream_seed(cfg.seed, Stream::Init, &[]));
    let mut adam = Adam::new(&store, cfg.learning_rate);
    let mut metrics: Vec<MetricsRow> = Vec::new();
    let mut done = 0;
    let mut wall_offset = 0.0;
    let mut resumed_after = None;

    let latest = out.join(LATEST);
    if cfg.resume && latest.exists() {
        let ckpt = read_checkpoint(&latest)?;
        let (s, a, epoch, wall) = restore_training_state(setup, &ckpt)?;
        store = s;
        adam = a;
        done = epoch.min(e1 + e2);
        wall_offset = wall;
        resumed_after = Some(done);
        metrics = read_metrics(&out.join(METRICS))
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.epoch <= done)
            .collect();
        log::info!("resuming {} after epoch {done}", out.display());
    }
    let start = Instant::now();
    let wall = |start: &Instant| wall_offset + start.elapsed().as_secs_f64();

    let stage_mode = |stage: usize| {
        if stage == 1 {
            ActionMode::Uniform
        } else {
            ActionMode::Policy
        }
    };
    let write_metrics =
        |rows: &[MetricsRow]| atomic_write(&out.join(METRICS), metrics_csv(rows).as_bytes());

    if resumed_after.is_none() {
        let mode = stage_mode(if e1 > 0 { 1 } else { 2 });
        let report = evaluate(&store, setup, test, &mode)?;
        log::info!("epoch 0: test accuracy {:.4}", report.accuracy);
        metrics.push(MetricsRow {
            epoch: 0,
            stage: "0".into(),
            split: "test".into(),
            accuracy: report.accuracy,
            mean_reward: report.mean_reward,
            mean_logp: report.mean_logp,
            wall_seconds: wall(&start),
        });
        write_metrics(&metrics)?;
        write_checkpoint(&latest, &training_state(&store, &adam, 0, wall(&start)))?;
    }
    let mut best = metrics
        .iter()
        .filter(|r| r.split == "test")
        .map(|r| r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);

    let indexed: Vec<(usize, &LabeledImage)> = train.images.iter().enumerate().collect();
    for epoch in done + 1..=e1 + e2 {
        let stage = if epoch <= e1 { 1 } else { 2 };
        let mode = stage_mode(stage);
        let mask: GroupMask = if stage == 1 {
            stage1_mask()
        } else {
            cfg.stage2_mask
        };
        let mut order = indexed.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
            cfg.seed,
            Stream::Shuffle,
            &[epoch as u64],
        )));
        let mut stats = super::BatchStats::default();
        for batch in order.chunks(cfg.batch_size) {
            let (grads, s) = batch_gradients(&store, setup, batch, &mode, mask, epoch as u64)?;
            adam.step(&mut store, &grads, mask)?;
            stats.merge(&s);
        }
        metrics.push(MetricsRow {
            epoch,
            stage: stage.to_string(),
            split: "train".into(),
            accuracy: stats.accuracy(),
            mean_reward: stats.mean_reward(),
            mean_logp: stats.mean_logp(),
            wall_seconds: wall(&start),
        });
        let report = evaluate(&store, setup, test, &mode)?;
        log::info!(
            "epoch {epoch} (stage {stage}): train accuracy {:.4}, test accuracy {:.4}",
            stats.accuracy(),
            report.accuracy
        );
        metrics.push(MetricsRow {
            epoch,
            stage: stage.to_string(),
            split: "test".into(),
            accuracy: report.accuracy,
            mean_reward: report.mean_reward,
            mean_logp: report.mean_logp,
            wall_seconds: wall(&start),
        });
        write_metrics(&metrics)?;
        if report.accuracy > best {
            best = report.accuracy;
            write_checkpoint(&out.join(BEST), &store.to_checkpoint())?;
        }
        if epoch == e1 {
            write_checkpoint(&out.join("stage1.ckpt"), &store.to_checkpoint())?;
        }
        if epoch == e1 + e2 && e2 > 0 {
            write_checkpoint(&out.join("stage2.ckpt"), &store.to_checkpoint())?;
        }
        write_checkpoint(&latest, &training_state(&store, &adam, epoch, wall(&start)))?;
    }
    write_checkpoint(&out.join(FINAL), &store.to_checkpoint())?;
    if !out.join(BEST).exists() {
        write_checkpoint(&out.join(BEST), &store.to_checkpoint())?;
    }
    Ok(TrainOutcome {
        best_stage1: best_of(&metrics, "1"),
        best_stage2: best_of(&metrics, "2"),
        store,
        metrics,
        resumed_after,
    })
}

/// Read a parameter checkpoint for the given setup.
pub fn load_parameters(
    setup: &Setup,
    path: &Path,
) -> Result<ParameterStore<DefaultReal>, CheckpointError> {
    ParameterStore::from_checkpoint(&setup.arch, &read_checkpoint(path)?)
}
