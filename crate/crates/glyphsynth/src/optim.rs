//! Adam optimizer with bias correction and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the update counter. Moments are
/// created lazily per parameter name, so one state can serve a stage that
/// only ever touches a subset of the store.
#[derive(Default, Clone, Debug)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(step: u64, m: BTreeMap<String, Tensor>, v: BTreeMap<String, Tensor>) -> Self {
        Self { step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor>, &BTreeMap<String, Tensor>) {
        (&self.m, &self.v)
    }

    /// One Adam update over every gradient in `grads`. Increments the step
    /// counter once per call (a call is one optimization step over a batch).
    pub fn apply(
        &mut self,
        cfg: &AdamConfig,
        lr: f64,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - cfg.beta1.powi(t);
        let bias2 = 1.0 - cfg.beta2.powi(t);

        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient shape {:?} does not match parameter {name:?} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            g.ensure_finite(&format!("gradient of {name}"))?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));

            let (pd, md, vd, gd) = (p.data_mut(), m.data_mut(), v.data_mut(), g.data());
            for i in 0..gd.len() {
                md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
                vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bias1;
                let v_hat = vd[i] / bias2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(Tensor::sq_norm)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}
