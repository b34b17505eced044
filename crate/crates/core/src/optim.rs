//! AdamW with decoupled weight decay and per-parameter learning-rate
//! multipliers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Weight decay applies to matrices named `*.weight` only (not to biases,
/// norm parameters, embeddings or gate scalars).
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: ParamStore,
    v: ParamStore,
    steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: params.names().map(|n| (n.clone(), 0)).collect(),
        }
    }

    /// Updates every parameter with `lr(name)`; names for which `lr` returns
    /// `None` are left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &ParamStore,
        lr: impl Fn(&str) -> Option<f64>,
    ) {
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (name, p) in params.iter_mut() {
            let Some(lr) = lr(name) else { continue };
            let g = grads.get(name).expect("gradient for every parameter");
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            let t = self.steps.get_mut(name).expect("step for every parameter");
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let wd = if decays(name) { weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * wd * p.data[i];
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Moments as prefixed tensors, for checkpointing.
    pub fn state_tensors(&self) -> ParamStore {
        let mut out = ParamStore::new();
        out.merge_prefixed(M_PREFIX.trim_end_matches('.'), &self.m);
        out.merge_prefixed(V_PREFIX.trim_end_matches('.'), &self.v);
        out
    }

    pub fn state_steps(&self) -> &BTreeMap<String, u64> {
        &self.steps
    }

    /// Restores moments and step counts saved by [`AdamW::state_tensors`].
    pub fn restore(
        config: AdamWConfig,
        params: &ParamStore,
        tensors: &ParamStore,
        steps: BTreeMap<String, u64>,
    ) -> Result<Self> {
        let mut opt = AdamW::new(config, params);
        for (prefix, store) in [(M_PREFIX, &mut opt.m), (V_PREFIX, &mut opt.v)] {
            for (name, slot) in store.iter_mut() {
                let key = format!("{prefix}{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("optimizer state lacks `{key}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::ShapeMismatch {
                        name: key,
                        expected: slot.shape(),
                        found: t.shape(),
                    });
                }
                *slot = t.clone();
            }
        }
        for name in params.names() {
            let t = steps.get(name).ok_or_else(|| {
                Error::Config(format!("optimizer state lacks step count for `{name}`"))
            })?;
            opt.steps.insert(name.clone(), *t);
        }
        Ok(opt)
    }

    pub fn is_state_tensor(name: &str) -> bool {
        name.starts_with(M_PREFIX) || name.starts_with(V_PREFIX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Mat;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamStore::new();
        p.insert("a.bias", Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = ParamStore::new();
        g.insert("a.bias", Mat::from_vec(1, 2, vec![0.5, -2.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, |_| Some(0.1));
        let d = p.get("a.bias").unwrap();
        assert!((d.data[0] - 0.9).abs() < 1e-7);
        assert!((d.data[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled_and_weight_only() {
        let mut p = ParamStore::new();
        p.insert("l.weight", Mat::scalar(2.0));
        p.insert("l.bias", Mat::scalar(2.0));
        let g = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, |_| Some(0.1));
        assert_eq!(p.get("l.weight").unwrap().item(), 2.0 - 0.1 * 0.05 * 2.0);
        assert_eq!(p.get("l.bias").unwrap().item(), 2.0);
    }

    #[test]
    fn skipped_parameters_are_untouched() {
        let mut p = ParamStore::new();
        p.insert("backbone.w.weight", Mat::scalar(1.0));
        let mut g = ParamStore::new();
        g.insert("backbone.w.weight", Mat::scalar(3.0));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, |_| None);
        assert_eq!(p.get("backbone.w.weight").unwrap().item(), 1.0);
        assert_eq!(opt.state_steps()["backbone.w.weight"], 0);
    }

    #[test]
    fn state_round_trips() {
        let mut p = ParamStore::new();
        p.insert("x.weight", Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let mut g = ParamStore::new();
        g.insert("x.weight", Mat::from_vec(1, 2, vec![0.3, -0.1]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, |_| Some(0.01));
        let back = AdamW::restore(
            opt.config,
            &p,
            &opt.state_tensors(),
            opt.state_steps().clone(),
        )
        .unwrap();
        assert_eq!(back, opt);
    }
}
