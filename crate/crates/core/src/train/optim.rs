use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and optional decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

const M_PREFIX: &str = "optim.m.";
const V_PREFIX: &str = "optim.v.";

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies the accumulated gradients. Parameters without a gradient are
    /// left alone.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr}")));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let Some(g) = &p.grad else { continue };
            let shape = p.value.shape().to_vec();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(&shape));
            if m.shape() != shape.as_slice() || v.shape() != shape.as_slice() {
                return Err(Error::shape("adam", format!("moment buffers for {name} do not match {shape:?}")));
            }
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps) + c.weight_decay * *w;
                *w -= lr * update;
            }
        }
        Ok(())
    }

    /// Moment buffers as checkpoint entries.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("{M_PREFIX}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{V_PREFIX}{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Restores moment buffers from checkpoint entries, checking them against
    /// `params`.
    pub fn restore<'a>(
        config: AdamConfig,
        step: u64,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        params: &ParamStore,
    ) -> Result<Self> {
        let mut adam = Adam::new(config);
        adam.step = step;
        for (name, t) in entries {
            let (map, key) = if let Some(k) = name.strip_prefix(M_PREFIX) {
                (&mut adam.m, k)
            } else if let Some(k) = name.strip_prefix(V_PREFIX) {
                (&mut adam.v, k)
            } else {
                continue;
            };
            match params.get(key) {
                Some(p) if p.shape() == t.shape() => {
                    map.insert(key.to_string(), t.clone());
                }
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "optimizer state {name} has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("optimizer state for unknown parameter {key}"))),
            }
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_lr_and_zero_grad_leave_params() {
        let mut s = store();
        let before = s.get("w").unwrap().clone();
        s.add_grad("w", &Tensor::new(vec![3], vec![0.3, 0.1, -4.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, 0.0).unwrap();
        assert!(s.get("w").unwrap().bit_eq(&before));

        let mut s = store();
        s.add_grad("w", &Tensor::zeros(&[3])).unwrap();
        Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap();
        assert!(s.get("w").unwrap().bit_eq(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut s = store();
        s.add_grad("w", &Tensor::new(vec![3], vec![2.0, -3.0, 0.0]).unwrap()).unwrap();
        Adam::new(AdamConfig::default()).step(&mut s, 0.1).unwrap();
        let w = s.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn state_round_trip() {
        let mut s = store();
        s.add_grad("w", &Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, 0.01).unwrap();
        let st = adam.state_tensors();
        let back = Adam::restore(adam.config, adam.step, st.iter().map(|(k, t)| (k.as_str(), t)), &s).unwrap();
        assert_eq!(back, adam);
    }
}
