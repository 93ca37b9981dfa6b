//! ADAM with bias correction and a multiplicative step-decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelParams, ModelSpec, Tensor, WeightEntry, WeightFile};

/// `lr = initial_lr · decay^⌊epoch / period⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub decay: f64,
    pub period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 0.001,
            decay: 0.9,
            period: 20,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} must lie in (0, 1]", self.decay)));
        }
        if self.period == 0 {
            return Err(Error::Config("decay period must be at least 1 epoch".into()));
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let steps = (epoch / schedule.period) as i32;
    schedule.initial_lr * schedule.decay.powi(steps)
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    pub fn new(spec: &ModelSpec) -> Result<Self> {
        Ok(Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: ModelParams::zeros(spec)?,
            v: ModelParams::zeros(spec)?,
        })
    }

    /// Serialized as `adam.m.<name>`, `adam.v.<name>` and `adam.step` weight-file entries.
    pub fn to_entries(&self) -> Vec<WeightEntry> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (prefix, moments) in [("adam.m.", &self.m), ("adam.v.", &self.v)] {
            for i in 0..moments.len() {
                out.push(WeightEntry {
                    name: format!("{prefix}{}", moments.names()[i]),
                    dims: moments.dims(i),
                    data: moments.tensors()[i].data().to_vec(),
                });
            }
        }
        // u64 step split into two exactly representable halves
        out.push(WeightEntry {
            name: "adam.step".into(),
            dims: vec![2],
            data: vec![(self.step >> 20) as f32, (self.step & 0xF_FFFF) as f32],
        });
        out
    }

    pub fn from_weight_file(file: &WeightFile, spec: &ModelSpec) -> Result<Self> {
        let mut state = Self::new(spec)?;
        let pick = |prefix: &str| -> Result<ModelParams<f32>> {
            let named = file
                .entries
                .iter()
                .filter_map(|e| {
                    e.name
                        .strip_prefix(prefix)
                        .map(|n| (n.to_string(), e.dims.clone(), e.data.clone()))
                })
                .collect();
            ModelParams::from_named(spec, named)
        };
        state.m = pick("adam.m.")?;
        state.v = pick("adam.v.")?;
        let step = file
            .get("adam.step")
            .filter(|e| e.data.len() == 2)
            .ok_or_else(|| Error::format("SUNW weight", "missing adam.step"))?;
        state.step = ((step.data[0] as u64) << 20) | step.data[1] as u64;
        Ok(state)
    }
}

/// One ADAM update:
/// `m ← β1·m + (1−β1)·g`, `v ← β2·v + (1−β2)·g²`,
/// `θ ← θ − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β1^t)`, `v̂ = v/(1−β2^t)`.
pub fn adam_step(params: &mut ModelParams<f32>, grads: &ModelParams<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    if !params.same_layout(grads) || !params.same_layout(&state.m) || !params.same_layout(&state.v) {
        return Err(Error::ShapeMismatch("parameters, gradients and optimizer state differ in layout".into()));
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = (1.0 - (b1 as f64).powi(t)) as f32;
    let c2 = (1.0 - (b2 as f64).powi(t)) as f32;
    let lr = lr as f32;
    let tensors = params.tensors_mut().iter_mut();
    let moments = state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut().iter_mut());
    for ((theta, g), (m, v)) in tensors.zip(grads.tensors()).zip(moments) {
        update(theta, g, m, v, b1, b2, c1, c2, eps, lr);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn update(
    theta: &mut Tensor<f32>,
    g: &Tensor<f32>,
    m: &mut Tensor<f32>,
    v: &mut Tensor<f32>,
    b1: f32,
    b2: f32,
    c1: f32,
    c2: f32,
    eps: f32,
    lr: f32,
) {
    let it = theta
        .data_mut()
        .iter_mut()
        .zip(g.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (m, v)) in it {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
