use std::sync::Arc;

use super::gradcheck::{check_gradients, GradCheckConfig};
use super::*;
use crate::autodiff::RowMix;
use crate::env::{Geometry, LabeledImage, Pose};

fn arch(frame: usize) -> Architecture {
    Architecture::new(28, frame)
}

fn random_rows<T: Real>(rows: usize, cols: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

#[test]
fn layout_covers_every_group_once_per_name() {
    for f in [2, 4, 6, 8] {
        let a = arch(f);
        let specs = a.layout();
        for g in Group::ALL {
            assert!(specs.iter().any(|s| s.group == g), "{g} missing for f={f}");
        }
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
        let groups: Vec<_> = specs.iter().map(|s| s.group).collect();
        assert!(groups.windows(2).all(|w| w[0] <= w[1]), "stacking order");
    }
    assert!(!arch(2).has_conv2());
    assert_eq!(arch(2).flat_features(), 8);
    assert_eq!(arch(4).flat_features(), 64);
    assert!(arch(1).validate().is_err());
}

#[test]
fn digest_tracks_shape_relevant_fields() {
    assert_eq!(arch(4).digest(), arch(4).digest());
    assert_ne!(arch(4).digest(), arch(2).digest());
    let mut wide = arch(4);
    wide.message_dim = 13;
    assert_ne!(wide.digest(), arch(4).digest());
}

#[test]
fn group_mask_parse_and_display() {
    let m: GroupMask = "theta2,theta3".parse().unwrap();
    assert_eq!(m, GroupMask::of(&[Group::Decision, Group::Policy]));
    assert_eq!(m.to_string(), "theta2,theta3");
    assert_eq!("decision,policy".parse::<GroupMask>().unwrap(), m);
    assert_eq!(m.complement().groups().len(), 6);
    assert!("theta9".parse::<GroupMask>().is_err());
}

#[test]
fn forget_bias_initialised_to_one() {
    let store = ParameterStore::<f32>::init(&arch(2), 3);
    let b = store.get("belief.b").unwrap().data();
    assert!(b[..64].iter().all(|&x| x == 0.0));
    assert!(b[64..128].iter().all(|&x| x == 1.0));
    assert!(b[128..].iter().all(|&x| x == 0.0));
    let w = store.get("belief.w_x").unwrap().data();
    let bound = 1.0 / (192f32).sqrt();
    assert!(w.iter().all(|x| x.abs() <= bound));
}

#[test]
fn zero_observation_gives_zero_features() {
    let store = ParameterStore::<f64>::init(&arch(4), 1);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let obs = tape.constant(Tensor::zeros(&[3, 1, 4, 4]));
    let b = extract_features(&mut tape, &v, obs).unwrap();
    assert_eq!(tape.value(b).shape(), &[3, 64]);
    assert!(tape.value(b).data().iter().all(|&x| x == 0.0));
}

#[test]
fn encoder_decoder_and_pose_contracts() {
    let store = ParameterStore::<f64>::init(&arch(2), 2);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let zero_h = tape.constant(Tensor::zeros(&[1, 64]));
    let m = encode_message(&mut tape, &v, zero_h).unwrap();
    assert_eq!(tape.value(m).shape(), &[1, 12]);
    assert!(tape.value(m).data().iter().all(|&x| x == 0.0));

    let mut same = random_rows::<f64>(1, 64, 5).into_data();
    same.extend_from_within(..);
    let h = tape.constant(Tensor::new(vec![2, 64], same).unwrap());
    let m = encode_message(&mut tape, &v, h).unwrap();
    assert_eq!(tape.value(m).row_slice(0), tape.value(m).row_slice(1));

    let zero_m = tape.constant(Tensor::zeros(&[1, 12]));
    let d = decode_message(&mut tape, &v, zero_m).unwrap();
    assert!(tape.value(d).data().iter().all(|&x| x == 0.0));
    let rand_m = tape.constant(random_rows(16, 12, 9));
    let d1 = decode_message(&mut tape, &v, rand_m).unwrap();
    let d2 = decode_message(&mut tape, &v, rand_m).unwrap();
    assert!(tape.value(d1).data().iter().all(|&x| x >= 0.0));
    assert_eq!(tape.value(d1), tape.value(d2));

    let g = Geometry::new(28, 2, 2).unwrap();
    let poses = tape.constant(normalized_poses(&[Pose::new(13, 4)], &g));
    let e1 = embed_pose(&mut tape, &v, poses).unwrap();
    let e2 = embed_pose(&mut tape, &v, poses).unwrap();
    assert_eq!(tape.value(e1).shape(), &[1, 64]);
    assert_eq!(tape.value(e1), tape.value(e2));

    let zero = ParameterStore::<f64>::zeros(&arch(2));
    let mut tape = Tape::new();
    let v = zero.bind(&mut tape, GroupMask::NONE);
    let poses = tape.constant(normalized_poses(&[Pose::new(26, 0), Pose::new(5, 5)], &g));
    let e = embed_pose(&mut tape, &v, poses).unwrap();
    assert!(tape.value(e).data().iter().all(|&x| x == 0.0));
    let c = tape.constant(random_rows(2, 64, 1));
    let q = predict(&mut tape, &v, c).unwrap();
    assert_eq!(tape.value(q).shape(), &[2, 10]);
    assert!(tape.value(q).data().iter().all(|&x| x == 0.0));
}

#[test]
fn zero_lstm_stays_zero() {
    let mut zero = ParameterStore::<f64>::zeros(&arch(2));
    zero.get_mut("belief.b").unwrap().data_mut()[64..128].fill(1.0);
    let mut tape = Tape::new();
    let v = zero.bind(&mut tape, GroupMask::NONE);
    let u = tape.constant(Tensor::zeros(&[1, 192]));
    let s = lstm_step(&mut tape, &v.belief, &LstmState::zero(), u).unwrap();
    let s = lstm_step(&mut tape, &v.belief, &s, u).unwrap();
    for x in [s.h.unwrap(), s.c.unwrap()] {
        assert_eq!(tape.value(x).shape(), &[1, 64]);
        assert!(tape.value(x).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn lstm_matches_scalar_reference() {
    let store = ParameterStore::<f64>::init(&arch(2), 11);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let u_val = random_rows::<f64>(1, 192, 2);
    let h_val = random_rows::<f64>(1, 64, 3);
    let c_val = random_rows::<f64>(1, 64, 4);
    let (u, h, c) = (
        tape.constant(u_val.clone()),
        tape.constant(h_val.clone()),
        tape.constant(c_val.clone()),
    );
    let next = lstm_step(
        &mut tape,
        &v.belief,
        &LstmState {
            h: Some(h),
            c: Some(c),
        },
        u,
    )
    .unwrap();

    let wx = store.get("belief.w_x").unwrap();
    let wh = store.get("belief.w_h").unwrap();
    let b = store.get("belief.b").unwrap();
    let gate = |col: usize| {
        let mut z = b.data()[col];
        for k in 0..192 {
            z += u_val.data()[k] * wx.at(k, col);
        }
        for k in 0..64 {
            z += h_val.data()[k] * wh.at(k, col);
        }
        z
    };
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for j in [0, 17, 63] {
        let (i, f, g, o) = (
            sig(gate(j)),
            sig(gate(64 + j)),
            gate(128 + j).tanh(),
            sig(gate(192 + j)),
        );
        let c_new = f * c_val.data()[j] + i * g;
        let h_new = o * c_new.tanh();
        assert!((tape.value(next.c.unwrap()).data()[j] - c_new).abs() < 1e-12);
        assert!((tape.value(next.h.unwrap()).data()[j] - h_new).abs() < 1e-12);
    }
}

#[test]
fn policy_distribution_contracts() {
    let zero = ParameterStore::<f64>::zeros(&arch(2));
    let mut tape = Tape::new();
    let v = zero.bind(&mut tape, GroupMask::NONE);
    let h = tape.constant(Tensor::zeros(&[1, 64]));
    let logits = policy_logits(&mut tape, &v, h).unwrap();
    let p = tape.softmax(logits).unwrap();
    assert_eq!(tape.value(p).data(), &[0.25; 4]);

    let mut store = ParameterStore::<f64>::init(&arch(2), 4);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let h = tape.constant(random_rows(5, 64, 8));
    let logits = policy_logits(&mut tape, &v, h).unwrap();
    let p = tape.softmax(logits).unwrap();
    let before = tape.value(p).clone();
    for r in 0..5 {
        let s: f64 = before.row_slice(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(before.row_slice(r).iter().all(|&x| x > 0.0));
    }
    store
        .get_mut("policy.b2")
        .unwrap()
        .data_mut()
        .iter_mut()
        .for_each(|x| *x += 3.7);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let h = tape.constant(random_rows(5, 64, 8));
    let logits = policy_logits(&mut tape, &v, h).unwrap();
    let p = tape.softmax(logits).unwrap();
    for (a, b) in tape.value(p).data().iter().zip(before.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn equal_cell_states_give_equal_predictions() {
    let store = ParameterStore::<f64>::init(&arch(2), 4);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let mut data = random_rows::<f64>(1, 64, 6).into_data();
    data.extend_from_within(..);
    let c = tape.constant(Tensor::new(vec![2, 64], data).unwrap());
    let q = predict(&mut tape, &v, c).unwrap();
    assert_eq!(tape.value(q).row_slice(0), tape.value(q).row_slice(1));
}

fn conv_probe<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
) -> Result<Var, crate::autodiff::TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let data: Vec<T> = (0..3 * 16)
        .map(|_| T::lit(rng.gen_range(0.0..1.0)))
        .collect();
    let obs = tape.constant(Tensor::new(vec![3, 1, 4, 4], data).unwrap());
    let b = extract_features(tape, v, obs)?;
    let w = tape.constant(random_rows(3, 64, 22));
    let y = tape.mul(b, w)?;
    Ok(tape.sum(y))
}

#[test]
fn feature_gradients_match_finite_differences() {
    let store = ParameterStore::<f32>::init(&arch(4), 5);
    let cfg = GradCheckConfig {
        coords_per_group: 24,
        ..GradCheckConfig::default()
    };
    let checks = check_gradients(
        &store,
        &conv_probe::<f32>,
        &conv_probe::<f64>,
        GroupMask::of(&[Group::Features]),
        &cfg,
    )
    .unwrap();
    assert!(checks.iter().any(|c| c.tensor.starts_with("conv")));
    for c in &checks {
        assert!(c.relative < 1e-3, "{c:?}");
    }
}

fn lstm_chain_probe<T: Real>(
    tape: &mut Tape<T>,
    v: &NetVars,
) -> Result<Var, crate::autodiff::TensorError> {
    let mut state = LstmState::zero();
    for t in 0..9 {
        let u = tape.constant(random_rows(2, 192, 100 + t));
        state = lstm_step(tape, &v.belief, &state, u)?;
    }
    let w = tape.constant(random_rows(2, 64, 7));
    let y = tape.mul(state.c.unwrap(), w)?;
    let z = tape.mul(state.h.unwrap(), w)?;
    let s = tape.add(y, z)?;
    Ok(tape.sum(s))
}

#[test]
fn nine_step_lstm_gradients_match_finite_differences() {
    let store = ParameterStore::<f32>::init(&arch(2), 6);
    let cfg = GradCheckConfig {
        coords_per_group: 32,
        ..GradCheckConfig::default()
    };
    let checks = check_gradients(
        &store,
        &lstm_chain_probe::<f32>,
        &lstm_chain_probe::<f64>,
        GroupMask::of(&[Group::Belief]),
        &cfg,
    )
    .unwrap();
    assert_eq!(checks.len(), 32);
    for c in &checks {
        assert!(c.relative < 1e-3, "{c:?}");
    }
}

#[test]
fn agent_step_shapes_and_zero_start() {
    let a = arch(2);
    let store = ParameterStore::<f64>::init(&a, 8);
    let mut tape = Tape::new();
    let v = store.bind(&mut tape, GroupMask::NONE);
    let g = Geometry::new(28, 2, 2).unwrap();
    let im = LabeledImage::constant(28, 0.5, 0);
    let poses = [Pose::new(0, 0), Pose::new(26, 26)];
    let obs = tape.constant(observation_batch(&[&im, &im], &poses, 2));
    let p = tape.constant(normalized_poses(&poses, &g));
    let mut mix = RowMix::new(2, 2);
    mix.push(0, 1, 1.0);
    mix.push(1, 0, 1.0);
    let routing = Arc::new(mix);
    let out = agent_step(
        &mut tape,
        &v,
        &routing,
        &LstmState::zero(),
        &LstmState::zero(),
        None,
        obs,
        p,
        true,
    )
    .unwrap();
    assert_eq!(tape.value(out.message).shape(), &[2, 12]);
    assert_eq!(tape.value(out.logits.unwrap()).shape(), &[2, 4]);
    let again = agent_step(
        &mut tape,
        &v,
        &routing,
        &out.belief,
        &out.decision,
        Some(out.message),
        obs,
        p,
        true,
    )
    .unwrap();
    assert!(tape.value(again.logits.unwrap()).all_finite());
}

#[test]
fn checkpoint_roundtrip_and_digest_refusal() {
    let store = ParameterStore::<f32>::init(&arch(4), 9);
    let bytes = encode_checkpoint(&store.to_checkpoint());
    let back =
        ParameterStore::<f32>::from_checkpoint(&arch(4), &decode_checkpoint(&bytes).unwrap())
            .unwrap();
    assert_eq!(back, store);
    let err = ParameterStore::<f32>::from_checkpoint(&arch(2), &decode_checkpoint(&bytes).unwrap())
        .unwrap_err();
    assert!(matches!(err, CheckpointError::DigestMismatch { .. }));
}
