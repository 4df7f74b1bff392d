//! The shared per-agent network: parameter groups, layers and the batched
//! single-timestep update.

mod checkpoint;
pub mod gradcheck;
mod layers;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::env::ActionSet;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION, MAGIC,
};
pub use layers::{
    agent_step, decode_message, embed_pose, encode_message, extract_features, lstm_step,
    normalized_poses, observation_batch, policy_logits, predict, LstmState, NetVars, StepOutput,
};

/// The eight parameter groups, in stacking order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Belief,
    Decision,
    Policy,
    Encoder,
    Features,
    Decoder,
    Pose,
    Predict,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Belief,
        Group::Decision,
        Group::Policy,
        Group::Encoder,
        Group::Features,
        Group::Decoder,
        Group::Pose,
        Group::Predict,
    ];

    /// 1-based index in the stacked parameter vector.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn label(self) -> &'static str {
        match self {
            Group::Belief => "belief",
            Group::Decision => "decision",
            Group::Policy => "policy",
            Group::Encoder => "encoder",
            Group::Features => "features",
            Group::Decoder => "decoder",
            Group::Pose => "pose",
            Group::Predict => "predict",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "theta{} ({})", self.number(), self.label())
    }
}

impl FromStr for Group {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Group::ALL
            .into_iter()
            .find(|g| s == g.label() || s == format!("theta{}", g.number()))
            .ok_or_else(|| format!("unknown parameter group {s:?}"))
    }
}

/// Set of parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GroupMask(u8);

impl GroupMask {
    pub const NONE: GroupMask = GroupMask(0);
    pub const ALL: GroupMask = GroupMask(0xff);

    pub fn of(groups: &[Group]) -> Self {
        GroupMask(groups.iter().fold(0, |m, g| m | (1 << (*g as u8))))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << (g as u8)) != 0
    }

    pub fn complement(self) -> Self {
        GroupMask(!self.0)
    }

    pub fn groups(self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| self.contains(*g))
            .collect()
    }
}

impl FromStr for GroupMask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "all" => return Ok(GroupMask::ALL),
            "none" | "" => return Ok(GroupMask::NONE),
            _ => {}
        }
        let groups = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<Group>, _>>()?;
        Ok(GroupMask::of(&groups))
    }
}

impl fmt::Display for GroupMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == GroupMask::ALL {
            return write!(f, "all");
        }
        if *self == GroupMask::NONE {
            return write!(f, "none");
        }
        let names: Vec<String> = self
            .groups()
            .iter()
            .map(|g| format!("theta{}", g.number()))
            .collect();
        write!(f, "{}", names.join(","))
    }
}

/// Shape-determining network configuration. Agent count, horizon and graph
/// are runtime choices and deliberately absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub image_side: usize,
    pub frame: usize,
    pub hidden: usize,
    pub fc_width: usize,
    pub message_dim: usize,
    pub classes: usize,
    pub actions: ActionSet,
    pub conv_channels: (usize, usize),
    pub kernel: usize,
}

impl Architecture {
    pub fn new(image_side: usize, frame: usize) -> Self {
        Self {
            image_side,
            frame,
            hidden: 64,
            fc_width: 64,
            message_dim: 12,
            classes: 10,
            actions: ActionSet::default(),
            conv_channels: (8, 16),
            kernel: 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.frame < self.kernel {
            return Err(format!(
                "frame size {} is smaller than the {}x{} kernel",
                self.frame, self.kernel, self.kernel
            ));
        }
        if self.frame > self.image_side {
            return Err(format!(
                "frame size {} exceeds image side {}",
                self.frame, self.image_side
            ));
        }
        for (name, v) in [
            ("hidden", self.hidden),
            ("fc_width", self.fc_width),
            ("message_dim", self.message_dim),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Spatial side after the first convolution.
    pub fn conv1_side(&self) -> usize {
        self.frame - self.kernel + 1
    }

    pub fn has_conv2(&self) -> bool {
        self.conv1_side() > 1 && self.conv1_side() >= self.kernel
    }

    /// Length of the flattened convolutional features.
    pub fn flat_features(&self) -> usize {
        let (c1, c2) = self.conv_channels;
        if self.has_conv2() {
            let s = self.conv1_side() - self.kernel + 1;
            c2 * s * s
        } else {
            let s = self.conv1_side();
            c1 * s * s
        }
    }

    /// SHA-256 of the canonical description.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = format!(
            "swarm-net/1;n_I={};f={};n={};fc={};n_m={};M={};A={};conv={},{};k={}",
            self.image_side,
            self.frame,
            self.hidden,
            self.fc_width,
            self.message_dim,
            self.classes,
            self.actions,
            self.conv_channels.0,
            self.conv_channels.1,
            self.kernel
        );
        Sha256::digest(canonical.as_bytes()).into()
    }

    /// Every parameter tensor in stacking order.
    pub fn layout(&self) -> Vec<ParamSpec> {
        let (n, w, nm) = (self.hidden, self.fc_width, self.message_dim);
        let (c1, c2) = self.conv_channels;
        let k = self.kernel;
        let mut out = Vec::new();
        let mut add = |group, name: &str, shape: Vec<usize>, init| {
            out.push(ParamSpec {
                group,
                name: name.to_string(),
                shape,
                init,
            })
        };
        for (g, prefix) in [(Group::Belief, "belief"), (Group::Decision, "decision")] {
            add(
                g,
                &format!("{prefix}.w_x"),
                vec![3 * n, 4 * n],
                Init::Uniform(3 * n),
            );
            add(
                g,
                &format!("{prefix}.w_h"),
                vec![n, 4 * n],
                Init::Uniform(n),
            );
            add(g, &format!("{prefix}.b"), vec![4 * n], Init::ForgetBias(n));
        }
        add(Group::Policy, "policy.w1", vec![n, w], Init::Uniform(n));
        add(Group::Policy, "policy.b1", vec![w], Init::Zero);
        add(
            Group::Policy,
            "policy.w2",
            vec![w, self.actions.len()],
            Init::Uniform(w),
        );
        add(
            Group::Policy,
            "policy.b2",
            vec![self.actions.len()],
            Init::Zero,
        );
        add(Group::Encoder, "encoder.w1", vec![n, w], Init::Uniform(n));
        add(Group::Encoder, "encoder.b1", vec![w], Init::Zero);
        add(Group::Encoder, "encoder.w2", vec![w, nm], Init::Uniform(w));
        add(Group::Encoder, "encoder.b2", vec![nm], Init::Zero);
        add(
            Group::Features,
            "conv1.k",
            vec![c1, 1, k, k],
            Init::Uniform(k * k),
        );
        add(Group::Features, "conv1.b", vec![c1], Init::Zero);
        if self.has_conv2() {
            add(
                Group::Features,
                "conv2.k",
                vec![c2, c1, k, k],
                Init::Uniform(c1 * k * k),
            );
            add(Group::Features, "conv2.b", vec![c2], Init::Zero);
        }
        let flat = self.flat_features();
        add(
            Group::Features,
            "features.w",
            vec![flat, n],
            Init::Uniform(flat),
        );
        add(Group::Features, "features.b", vec![n], Init::Zero);
        add(Group::Decoder, "decoder.w", vec![nm, n], Init::Uniform(nm));
        add(Group::Decoder, "decoder.b", vec![n], Init::Zero);
        add(Group::Pose, "pose.w", vec![2, n], Init::Uniform(2));
        add(Group::Pose, "pose.b", vec![n], Init::Zero);
        add(Group::Predict, "predict.w1", vec![n, w], Init::Uniform(n));
        add(Group::Predict, "predict.b1", vec![w], Init::Zero);
        add(
            Group::Predict,
            "predict.w2",
            vec![w, self.classes],
            Init::Uniform(w),
        );
        add(Group::Predict, "predict.b2", vec![self.classes], Init::Zero);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Zero,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform(usize),
    /// Zero except `+1` on the forget-gate block of width `n`.
    ForgetBias(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub group: Group,
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// The single shared copy of every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    arch: Architecture,
    specs: Vec<ParamSpec>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParameterStore<T> {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let specs = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| {
                let len: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zero => vec![T::zero(); len],
                    Init::Uniform(fan_in) => {
                        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
                        (0..len).map(|_| T::lit(rng.gen_range(-a..a))).collect()
                    }
                    Init::ForgetBias(n) => (0..len)
                        .map(|i| {
                            if (n..2 * n).contains(&i) {
                                T::one()
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                };
                Tensor::new(s.shape.clone(), data).expect("layout shape")
            })
            .collect();
        Self {
            arch: arch.clone(),
            specs,
            tensors,
        }
    }

    /// All-zero parameters (forget bias included).
    pub fn zeros(arch: &Architecture) -> Self {
        let specs = arch.layout();
        let tensors = specs.iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self {
            arch: arch.clone(),
            specs,
            tensors,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn group_len(&self, group: Group) -> usize {
        self.specs
            .iter()
            .zip(&self.tensors)
            .filter(|(s, _)| s.group == group)
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Concatenation of one group's tensors in layout order.
    pub fn group_values(&self, group: Group) -> Vec<T> {
        self.specs
            .iter()
            .zip(&self.tensors)
            .filter(|(s, _)| s.group == group)
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            arch: self.arch.clone(),
            specs: self.specs.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Record every tensor on `tape`: groups in `trainable` as gradient
    /// leaves, the rest as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: GroupMask) -> NetVars {
        let vars: Vec<Var> = self
            .specs
            .iter()
            .zip(&self.tensors)
            .map(|(s, t)| {
                if trainable.contains(s.group) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        NetVars::new(&self.arch, vars)
    }

    /// Gradients of the bound leaves, in layout order (zeros where absent).
    pub fn gradients(&self, tape: &Tape<T>, vars: &NetVars) -> Vec<Tensor<T>> {
        vars.all()
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            digest: self.arch.digest(),
            tensors: self
                .specs
                .iter()
                .zip(&self.tensors)
                .map(|(s, t)| (s.name.clone(), t.cast::<f32>()))
                .collect(),
        }
    }

    /// Rebuild from a checkpoint; the architecture digest must match.
    pub fn from_checkpoint(
        arch: &Architecture,
        ckpt: &Checkpoint,
    ) -> Result<Self, CheckpointError> {
        let expected = arch.digest();
        if ckpt.digest != expected {
            return Err(CheckpointError::DigestMismatch {
                expected: hex(&expected),
                found: hex(&ckpt.digest),
            });
        }
        let specs = arch.layout();
        let tensors = specs
            .iter()
            .map(|s| {
                let t = ckpt
                    .get(&s.name)
                    .ok_or_else(|| CheckpointError::MissingTensor(s.name.clone()))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(CheckpointError::ShapeMismatch {
                        name: s.name.clone(),
                        expected: s.shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
                Ok(t.cast())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            arch: arch.clone(),
            specs,
            tensors,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
