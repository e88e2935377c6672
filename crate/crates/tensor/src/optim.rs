use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub first: BTreeMap<String, Tensor>,
    #[serde(skip)]
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Moment buffers flattened into one map (`m.<name>`, `v.<name>`) for checkpoints.
    pub fn moments(&self) -> BTreeMap<String, Tensor> {
        let m = self.first.iter().map(|(k, t)| (format!("m.{k}"), t.clone()));
        let v = self.second.iter().map(|(k, t)| (format!("v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore_moments(&mut self, flat: &BTreeMap<String, Tensor>) {
        self.first.clear();
        self.second.clear();
        for (k, t) in flat {
            if let Some(name) = k.strip_prefix("m.") {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                self.second.insert(name.to_string(), t.clone());
            }
        }
    }
}

/// Applies one Adam update to every parameter named in `grads`.
///
/// Parameters without a gradient entry are left untouched.
pub fn adam_step(params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(TensorError::mismatch("adam_step", p.shape(), g.shape()));
        }
        for buf in [&state.first, &state.second] {
            if let Some(m) = buf.get(name) {
                if m.shape() != g.shape() {
                    return Err(TensorError::mismatch("adam_step", m.shape(), g.shape()));
                }
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);

    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            let gi = f64::from(gi);
            let mi = b1 * f64::from(md[i]) + (1.0 - b1) * gi;
            let vi = b2 * f64::from(vd[i]) + (1.0 - b2) * gi * gi;
            md[i] = mi as f32;
            vd[i] = vi as f32;
            let update = state.lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            pd[i] = (f64::from(pd[i]) - update) as f32;
        }
    }
    Ok(())
}
