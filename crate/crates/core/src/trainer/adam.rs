//! Masked adaptive-moment optimizer.

use thiserror::Error;

use crate::autodiff::{Real, Tensor};
use crate::net::{GroupMask, ParameterStore};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("non-finite gradient in {group} tensor {tensor}")]
pub struct NonFiniteGradient {
    pub group: String,
    pub tensor: String,
}

/// Minimizes the supplied gradients (the gradient of `-Ĵ`).
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Update count per tensor; masked tensors keep theirs.
    pub steps: Vec<u64>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParameterStore<T>, learning_rate: f64) -> Self {
        Self::for_tensors(store.tensors(), learning_rate)
    }

    pub fn for_tensors(tensors: &[Tensor<T>], learning_rate: f64) -> Self {
        let zeros: Vec<Tensor<T>> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: vec![0; zeros.len()],
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update to the tensors whose group is in `mask`. Nothing is
    /// modified when any masked-in gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &[Tensor<T>],
        mask: GroupMask,
    ) -> Result<(), NonFiniteGradient> {
        let specs = store.specs().to_vec();
        let active: Vec<bool> = specs.iter().map(|s| mask.contains(s.group)).collect();
        let labels: Vec<(String, String)> = specs
            .iter()
            .map(|s| (s.group.to_string(), s.name.clone()))
            .collect();
        self.step_tensors(store.tensors_mut(), grads, &active, &labels)
    }

    /// Update `params[k]` wherever `active[k]`; `labels` name `(group, tensor)`
    /// for diagnostics.
    pub fn step_tensors(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Tensor<T>],
        active: &[bool],
        labels: &[(String, String)],
    ) -> Result<(), NonFiniteGradient> {
        for k in 0..params.len() {
            if active[k] && !grads[k].all_finite() {
                return Err(NonFiniteGradient {
                    group: labels[k].0.clone(),
                    tensor: labels[k].1.clone(),
                });
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for k in 0..params.len() {
            if !active[k] {
                continue;
            }
            self.steps[k] += 1;
            let t = self.steps[k] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, &g), mk), vk) in params[k]
                .data_mut()
                .iter_mut()
                .zip(grads[k].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.as_f64();
                let mn = b1 * mk.as_f64() + (1.0 - b1) * g;
                let vn = b2 * vk.as_f64() + (1.0 - b2) * g * g;
                *mk = T::lit(mn);
                *vk = T::lit(vn);
                let update = self.learning_rate * (mn / c1) / ((vn / c2).sqrt() + self.epsilon);
                *p = T::lit(p.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Architecture, Group};

    fn store() -> ParameterStore<f32> {
        ParameterStore::init(&Architecture::new(28, 2), 1)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let grads: Vec<_> = s
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut adam = Adam::new(&s, 1e-3);
        adam.step(&mut s, &grads, GroupMask::ALL).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn mask_freezes_other_groups_bitwise() {
        let mut s = store();
        let before = s.clone();
        let grads: Vec<_> = s
            .tensors()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.3))
            .collect();
        let mask: GroupMask = "theta2,theta3".parse().unwrap();
        let mut adam = Adam::new(&s, 1e-3);
        adam.step(&mut s, &grads, mask).unwrap();
        for ((spec, a), b) in s.specs().iter().zip(s.tensors()).zip(before.tensors()) {
            if mask.contains(spec.group) {
                assert_ne!(a, b, "{}", spec.name);
            } else {
                assert_eq!(a, b, "{}", spec.name);
            }
        }
        for (k, spec) in s.specs().iter().enumerate() {
            assert_eq!(adam.steps[k] == 1, mask.contains(spec.group));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let k = s.index_of("policy.b2").unwrap();
        let before = s.tensors()[k].data()[0];
        let mut grads: Vec<_> = s
            .tensors()
            .iter()
            .map(|t| Tensor::<f32>::zeros(t.shape()))
            .collect();
        grads[k].data_mut()[0] = 1.0;
        let mut adam = Adam::new(&s, 0.1);
        adam.step(&mut s, &grads, GroupMask::ALL).unwrap();
        assert!((before - s.tensors()[k].data()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_group() {
        let mut s = store();
        let mut grads: Vec<_> = s
            .tensors()
            .iter()
            .map(|t| Tensor::<f32>::zeros(t.shape()))
            .collect();
        let k = s.index_of("decoder.w").unwrap();
        grads[k].data_mut()[3] = f32::NAN;
        let before = s.clone();
        let err = Adam::new(&s, 1e-3)
            .step(&mut s, &grads, GroupMask::ALL)
            .unwrap_err();
        assert_eq!(err.group, Group::Decoder.to_string());
        assert!(err.to_string().contains("theta6"));
        assert_eq!(s, before);
        assert!(Adam::new(&s, 1e-3)
            .step(&mut s, &grads, "theta2".parse().unwrap())
            .is_ok());
    }
}
