//! Finite-difference verification of parameter gradients.
//!
//! The analytic side runs in `f32`; the numeric side re-evaluates the same
//! loss in `f64` on the same parameter values so that the difference quotient
//! is not swamped by single-precision rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::check::relative_error;
use crate::autodiff::{Tape, TensorError, Var};

use super::{Group, GroupMask, NetVars, ParameterStore};

pub type LossFn<T> = dyn Fn(&mut Tape<T>, &NetVars) -> Result<Var, TensorError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub group: Group,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub coords_per_group: usize,
    pub step: f64,
    /// Magnitude below which differences are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            coords_per_group: 8,
            step: 1e-5,
            floor: 1e-4,
            seed: 0,
        }
    }
}

/// Compare analytic and central-difference gradients on random coordinates
/// of every group in `groups`.
pub fn check_gradients(
    store: &ParameterStore<f32>,
    loss32: &LossFn<f32>,
    loss64: &LossFn<f64>,
    groups: GroupMask,
    config: &GradCheckConfig,
) -> Result<Vec<CoordCheck>, TensorError> {
    let mut tape = Tape::<f32>::new();
    let vars = store.bind(&mut tape, GroupMask::ALL);
    let root = loss32(&mut tape, &vars)?;
    tape.backward(root)?;
    let grads = store.gradients(&tape, &vars);

    let mut wide = store.cast::<f64>();
    let eval = |p: &ParameterStore<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::<f64>::new();
        let v = p.bind(&mut t, GroupMask::NONE);
        let r = loss64(&mut t, &v)?;
        Ok(t.value(r).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    for group in groups.groups() {
        let members: Vec<usize> = (0..store.specs().len())
            .filter(|&k| store.specs()[k].group == group)
            .collect();
        let total: usize = members.iter().map(|&k| store.tensors()[k].len()).sum();
        if total == 0 {
            continue;
        }
        for _ in 0..config.coords_per_group {
            let mut flat = rng.gen_range(0..total);
            let mut slot = members[0];
            for &k in &members {
                let len = store.tensors()[k].len();
                if flat < len {
                    slot = k;
                    break;
                }
                flat -= len;
            }
            let original = wide.tensors()[slot].data()[flat];
            wide.tensors_mut()[slot].data_mut()[flat] = original + config.step;
            let plus = eval(&wide)?;
            wide.tensors_mut()[slot].data_mut()[flat] = original - config.step;
            let minus = eval(&wide)?;
            wide.tensors_mut()[slot].data_mut()[flat] = original;
            let numeric = (plus - minus) / (2.0 * config.step);
            let analytic = f64::from(grads[slot].data()[flat]);
            out.push(CoordCheck {
                group,
                tensor: store.specs()[slot].name.clone(),
                index: flat,
                analytic,
                numeric,
                relative: relative_error(analytic, numeric, config.floor),
            });
        }
    }
    Ok(out)
}
