use std::sync::Arc;

use super::*;
use crate::env::{ActionSet, Pose};
use crate::net::ParameterStore;

fn small_config(dir: &std::path::Path) -> RunConfig {
    RunConfig {
        n_i: 8,
        f: 2,
        num_agents: 2,
        horizon: 4,
        hidden: 8,
        fc_width: 8,
        message_dim: 4,
        classes: 3,
        batch_size: 4,
        rollouts: 2,
        epochs_stage1: 1,
        epochs_stage2: 1,
        learning_rate: 1e-2,
        out_dir: dir.to_path_buf(),
        ..RunConfig::default()
    }
}

fn pattern_image(side: usize, seed: usize, label: usize) -> LabeledImage {
    let pixels = (0..side * side)
        .map(|k| ((k * 7 + seed * 13) % 11) as f32 / 10.0)
        .collect();
    LabeledImage::new(side, pixels, label).unwrap()
}

fn pattern_dataset(side: usize, count: usize, classes: usize) -> Dataset {
    Dataset::new(
        (0..count)
            .map(|k| pattern_image(side, k, k % classes))
            .collect(),
    )
    .unwrap()
}

fn store_for(setup: &Setup, seed: u64) -> ParameterStore<DefaultReal> {
    ParameterStore::init(&setup.arch, seed)
}

fn run_episodes(
    store: &ParameterStore<DefaultReal>,
    setup: &Setup,
    mode: ActionMode,
    images: &[LabeledImage],
    seed: u64,
) -> Vec<TrajectoryRecord> {
    let episodes: Vec<Episode> = images
        .iter()
        .enumerate()
        .map(|(k, image)| Episode {
            image,
            image_index: k,
            seed: seed + k as u64,
        })
        .collect();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, GroupMask::NONE);
    rollout_batch(&mut tape, &vars, &setup.spec(mode, true), &episodes)
        .unwrap()
        .records
}

#[test]
fn random_walk_log_probability_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(&small_config(dir.path())).unwrap();
    let store = store_for(&setup, 1);
    let images = [pattern_image(8, 0, 1), pattern_image(8, 1, 2)];
    for r in run_episodes(&store, &setup, ActionMode::Uniform, &images, 9) {
        assert!((r.logp - 8.0 * 0.25f64.ln()).abs() < 1e-5, "{}", r.logp);
        assert_eq!(r.steps.len(), 4);
    }
}

#[test]
fn single_action_policy_has_zero_log_probability() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.actions = "right".parse::<ActionSet>().unwrap();
    let setup = Setup::new(&cfg).unwrap();
    let store = store_for(&setup, 2);
    let r = &run_episodes(
        &store,
        &setup,
        ActionMode::Policy,
        &[pattern_image(8, 3, 0)],
        4,
    )[0];
    assert!(r.logp.abs() < 1e-6);
    assert!(r.steps.iter().flatten().all(|s| s.action == 0));
}

#[test]
fn fixed_seed_reproduces_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(&small_config(dir.path())).unwrap();
    let store = store_for(&setup, 3);
    let images = [pattern_image(8, 0, 1), pattern_image(8, 5, 0)];
    let a = run_episodes(&store, &setup, ActionMode::Policy, &images, 11);
    let b = run_episodes(&store, &setup, ActionMode::Policy, &images, 11);
    assert_eq!(a, b);
    let c = run_episodes(&store, &setup, ActionMode::Policy, &images, 12);
    assert_ne!(
        a.iter().map(|r| &r.steps).collect::<Vec<_>>(),
        c.iter().map(|r| &r.steps).collect::<Vec<_>>()
    );
}

#[test]
fn zero_horizon_ignores_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.horizon = 0;
    let setup = Setup::new(&cfg).unwrap();
    let store = store_for(&setup, 4);
    let images: Vec<_> = (0..5).map(|k| pattern_image(8, k, k % 3)).collect();
    let records = run_episodes(&store, &setup, ActionMode::Policy, &images, 0);
    for r in &records {
        assert_eq!(r.qbar, records[0].qbar);
        assert_eq!(r.logp, 0.0);
        assert!(r.messages.is_empty());
    }
}

#[test]
fn reward_is_detached_in_the_score_term() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(&small_config(dir.path())).unwrap();
    let store = store_for(&setup, 5);
    let images = [pattern_image(8, 1, 0), pattern_image(8, 2, 2)];
    let episodes: Vec<Episode> = images
        .iter()
        .enumerate()
        .map(|(k, image)| Episode {
            image,
            image_index: k,
            seed: 0,
        })
        .collect();
    let actions: Vec<Vec<usize>> = (0..4)
        .map(|t| (0..4).map(|r| (t + r) % 4).collect())
        .collect();
    let spec = setup.spec(ActionMode::Forced(Arc::new(actions)), false);

    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, GroupMask::ALL);
    let out = rollout_batch(&mut tape, &vars, &spec, &episodes).unwrap();
    let j = proxy_objective(&mut tape, out.logp, out.reward, 0.5).unwrap();
    tape.backward(j).unwrap();
    let proxy = store.gradients(&tape, &vars);

    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, GroupMask::ALL);
    let out = rollout_batch(&mut tape, &vars, &spec, &episodes).unwrap();
    let r_const = tape.constant(tape.value(out.reward).clone());
    let score = tape.mul(out.logp, r_const).unwrap();
    let both = tape.add(score, out.reward).unwrap();
    let total = tape.sum(both);
    let manual = tape.scale(total, 0.5);
    tape.backward(manual).unwrap();
    let expected = store.gradients(&tape, &vars);

    for (a, b) in proxy.iter().zip(&expected) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
    let policy = store.index_of("policy.w2").unwrap();
    assert!(proxy[policy].data().iter().any(|&g| g != 0.0));
}

#[test]
fn stage_one_leaves_decision_and_policy_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.epochs_stage2 = 0;
    cfg.epochs_stage1 = 2;
    let data = pattern_dataset(8, 8, 3);
    let setup = Setup::new(&cfg).unwrap();
    let init = store_for(&setup, stream_seed(cfg.seed, Stream::Init, &[]));
    let out = two_stage_train(&cfg, &data, &data).unwrap();
    for group in [Group::Decision, Group::Policy] {
        assert_eq!(
            out.store.group_values(group),
            init.group_values(group),
            "{group}"
        );
    }
    assert_ne!(
        out.store.group_values(Group::Predict),
        init.group_values(Group::Predict)
    );
}

#[test]
fn arcless_graph_gives_no_message_gradients() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.graph = GraphSpec::Arcs(Vec::new());
    let setup = Setup::new(&cfg).unwrap();
    let store = store_for(&setup, 6);
    let data = pattern_dataset(8, 4, 3);
    let batch: Vec<_> = data.images.iter().enumerate().collect();
    let (grads, _) = batch_gradients(
        &store,
        &setup,
        &batch,
        &ActionMode::Policy,
        GroupMask::ALL,
        1,
    )
    .unwrap();
    for (spec, g) in store.specs().iter().zip(&grads) {
        if matches!(spec.group, Group::Encoder | Group::Decoder) {
            assert!(g.data().iter().all(|&x| x == 0.0), "{}", spec.name);
        }
    }
    let k = store.index_of("predict.w2").unwrap();
    assert!(grads[k].data().iter().any(|&x| x != 0.0));
}

#[test]
fn relabeling_agents_permutes_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.num_agents = 3;
    cfg.initial_poses =
        Placement::Explicit(vec![Pose::new(0, 2), Pose::new(4, 4), Pose::new(6, 0)]);
    cfg.graph = "arcs:(0,1);(1,2);(2,0);(0,2)".parse().unwrap();
    let setup = Setup::new(&cfg).unwrap();
    let store = store_for(&setup, 7);
    let perm = [2usize, 0, 1];
    let mut permuted = cfg.clone();
    permuted.initial_poses = match &cfg.initial_poses {
        Placement::Explicit(p) => {
            let mut q = vec![Pose::new(0, 0); 3];
            for (i, &pi) in perm.iter().enumerate() {
                q[pi] = p[i];
            }
            Placement::Explicit(q)
        }
        Placement::Diagonal => unreachable!(),
    };
    permuted.graph = GraphSpec::Arcs(vec![
        (perm[0], perm[1]),
        (perm[1], perm[2]),
        (perm[2], perm[0]),
        (perm[0], perm[2]),
    ]);
    let psetup = Setup::new(&permuted).unwrap();

    let base: Vec<Vec<usize>> = (0..4)
        .map(|t| (0..3).map(|i| (t * 3 + i) % 4).collect())
        .collect();
    let moved: Vec<Vec<usize>> = base
        .iter()
        .map(|row| {
            let mut m = vec![0; 3];
            for (i, &pi) in perm.iter().enumerate() {
                m[pi] = row[i];
            }
            m
        })
        .collect();
    let image = [pattern_image(8, 4, 1)];
    let a = &run_episodes(
        &store,
        &setup,
        ActionMode::Forced(Arc::new(base)),
        &image,
        0,
    )[0];
    let b = &run_episodes(
        &store,
        &psetup,
        ActionMode::Forced(Arc::new(moved)),
        &image,
        0,
    )[0];
    for (i, &pi) in perm.iter().enumerate() {
        for (x, y) in a.q[i].iter().zip(&b.q[pi]) {
            assert!((x - y).abs() < 1e-5);
        }
    }
    for (x, y) in a.qbar.iter().zip(&b.qbar) {
        assert!((x - y).abs() < 1e-5);
    }
    assert!((a.logp - b.logp).abs() < 1e-4);
}

#[test]
fn push_sum_evaluation_matches_exact_consensus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.num_agents = 3;
    cfg.graph = GraphSpec::Ring;
    let data = pattern_dataset(8, 12, 3);
    let exact = Setup::new(&RunConfig {
        eval_consensus: Consensus::Exact,
        ..cfg.clone()
    })
    .unwrap();
    let pushed = Setup::new(&cfg).unwrap();
    let store = store_for(&exact, 8);
    let a = evaluate(&store, &exact, &data, &ActionMode::Policy).unwrap();
    let b = evaluate(&store, &pushed, &data, &ActionMode::Policy).unwrap();
    assert_eq!(a.predictions, b.predictions);
    for (x, y) in a.qbars.iter().flatten().zip(b.qbars.iter().flatten()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn perfect_predictions_score_one() {
    let labels = [0usize, 2, 1, 2];
    let qbars: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| (0..3).map(|c| if c == l { 1.0 } else { 0.0 }).collect())
        .collect();
    let (acc, confusion, predictions) = score_predictions(&qbars, &labels, 3);
    assert_eq!(acc, 1.0);
    assert_eq!(predictions, labels);
    assert_eq!(confusion[2][2], 2);
    assert_eq!(confusion.iter().flatten().sum::<usize>(), 4);
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(&small_config(dir.path())).unwrap();
    let store = store_for(&setup, 9);
    let data = pattern_dataset(8, 40, 3);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&store, &setup, &data, &ActionMode::Policy).unwrap())
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn learns_bright_versus_dark() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.classes = 2;
    cfg.epochs_stage1 = 3;
    cfg.epochs_stage2 = 0;
    cfg.batch_size = 8;
    cfg.learning_rate = 1e-2;
    let images = (0..64)
        .map(|k| LabeledImage::constant(8, if k % 2 == 0 { 1.0 } else { 0.0 }, k % 2))
        .collect();
    let data = Dataset::new(images).unwrap();
    let out = two_stage_train(&cfg, &data, &data).unwrap();
    let best = out.best_stage1.unwrap();
    assert!(best >= 0.99, "{best}");
}

#[test]
fn zero_epochs_record_one_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.epochs_stage1 = 0;
    cfg.epochs_stage2 = 0;
    let data = pattern_dataset(8, 6, 3);
    let out = two_stage_train(&cfg, &data, &data).unwrap();
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].epoch, 0);
    let csv = std::fs::read_to_string(dir.path().join(METRICS)).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(dir.path().join(FINAL).exists());
    assert!(dir.path().join(artifacts::RESOLVED_CONFIG).exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let data = pattern_dataset(8, 8, 3);
    let straight = tempfile::tempdir().unwrap();
    let full = two_stage_train(&small_config(straight.path()), &data, &data).unwrap();

    let split = tempfile::tempdir().unwrap();
    let mut first = small_config(split.path());
    first.epochs_stage2 = 0;
    two_stage_train(&first, &data, &data).unwrap();
    let resumed = two_stage_train(&small_config(split.path()), &data, &data).unwrap();

    assert_eq!(resumed.resumed_after, Some(1));
    assert_eq!(resumed.store, full.store);
    let acc = |o: &TrainOutcome| {
        o.metrics
            .iter()
            .map(|r| (r.epoch, r.split.clone(), r.accuracy))
            .collect::<Vec<_>>()
    };
    assert_eq!(acc(&resumed), acc(&full));
}

#[test]
fn message_dump_shape() {
    let dir = tempfile::tempdir().unwrap();
    let setup = Setup::new(&small_config(dir.path())).unwrap();
    let store = store_for(&setup, 10);
    let data = pattern_dataset(8, 10, 3);
    let records = dump_messages(&store, &setup, &data, 7).unwrap();
    assert_eq!(records.len(), 7);
    let csv = message_rows(&records, 4);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "trajectory_id,t,agent,label,m_0,m_1,m_2,m_3");
    assert_eq!(lines.len(), 1 + 7 * 4 * 2);
    assert!(lines.iter().all(|l| l.split(',').count() == 8));
    let first: Vec<&str> = lines[1..]
        .iter()
        .filter(|l| l.split(',').nth(1) == Some("0"))
        .map(|l| l.splitn(5, ',').nth(4).unwrap())
        .collect();
    assert_eq!(first.len(), 14);
    assert!(first.iter().all(|m| *m == first[0]));
}

#[test]
fn stream_seeds_separate_purposes() {
    assert_ne!(
        stream_seed(0, Stream::Train, &[1]),
        stream_seed(0, Stream::Eval, &[1])
    );
    assert_ne!(
        stream_seed(0, Stream::Train, &[1, 2]),
        stream_seed(0, Stream::Train, &[2, 1])
    );
    assert_eq!(
        stream_seed(5, Stream::Dump, &[3]),
        stream_seed(5, Stream::Dump, &[3])
    );
}
