//! Adam with bias correction and a per-path trainable filter.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterTree, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moments per parameter path, plus the global step.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, path: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(path).map(|(m, v)| (m, v))
    }
}

/// One Adam update of every parameter accepted by `trainable`. Rejected
/// parameters and their moments are left untouched; the step counter
/// advances once per call.
pub fn adam_step(
    params: &mut ParameterTree,
    grads: &ParameterTree,
    state: &mut AdamState,
    hyper: &AdamConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let entries = params.iter_mut().filter(|(p, _)| trainable(p));
    update(entries, |p| grads.get(p).ok(), state, hyper)
}

/// [`adam_step`] over a plain path-to-tensor map (auxiliary heads).
pub fn adam_step_map(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    let entries = params.iter_mut().map(|(k, v)| (k.as_str(), v));
    update(entries, |p| grads.get(p), state, hyper)
}

fn update<'a, 'g>(
    entries: impl Iterator<Item = (&'a str, &'a mut Tensor)>,
    grad_of: impl Fn(&str) -> Option<&'g Tensor>,
    state: &mut AdamState,
    hyper: &AdamConfig,
) -> Result<()> {
    let mut work = Vec::new();
    for (path, param) in entries {
        let grad = grad_of(path).ok_or_else(|| Error::MissingParameter(path.to_string()))?;
        if grad.shape() != param.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} for `{path}` {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(path.to_string()));
        }
        work.push((path, param, grad));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    for (path, param, grad) in work {
        let (m, v) = state
            .moments
            .entry(path.to_string())
            .or_insert_with(|| (Tensor::zeros(param.shape()), Tensor::zeros(param.shape())));
        let it = param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &g), (mi, vi)) in it {
            let g = g as f64;
            let mn = hyper.beta1 * *mi as f64 + (1.0 - hyper.beta1) * g;
            let vn = hyper.beta2 * *vi as f64 + (1.0 - hyper.beta2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = hyper.lr * (mn / c1) / ((vn / c2).sqrt() + hyper.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}
