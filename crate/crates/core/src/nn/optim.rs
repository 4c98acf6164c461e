use serde::{Deserialize, Serialize};

use super::layers::{Grads, Params, Sequential};
use super::weights::TensorStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with per-layer first/second moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Params>>,
    v: Vec<Option<Params>>,
}

fn update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], cfg: &AdamConfig, c1: f64, c2: f64) {
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

impl Adam {
    pub fn new(net: &Sequential, config: AdamConfig) -> Self {
        let zeros: Vec<Option<Params>> = net
            .layers
            .iter()
            .map(|l| l.params().map(Params::zeros_like))
            .collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update to every layer that has a gradient buffer.
    pub fn step(&mut self, net: &mut Sequential, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.config.beta1.powi(t);
        let c2 = 1.0 - self.config.beta2.powi(t);
        for (i, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = net.layers[i].params_mut().expect("grad for parameterized layer");
            let m = self.m[i].as_mut().expect("moment buffer");
            let v = self.v[i].as_mut().expect("moment buffer");
            update(
                p.weight.as_slice_mut().expect("contiguous"),
                g.weight.as_slice().expect("contiguous"),
                m.weight.as_slice_mut().expect("contiguous"),
                v.weight.as_slice_mut().expect("contiguous"),
                &self.config,
                c1,
                c2,
            );
            update(
                p.bias.as_slice_mut().expect("contiguous"),
                g.bias.as_slice().expect("contiguous"),
                m.bias.as_slice_mut().expect("contiguous"),
                v.bias.as_slice_mut().expect("contiguous"),
                &self.config,
                c1,
                c2,
            );
        }
    }

    pub fn export(&self, store: &mut TensorStore, prefix: &str) {
        for (kind, moments) in [("m", &self.m), ("v", &self.v)] {
            for (i, p) in moments.iter().enumerate() {
                if let Some(p) = p {
                    let (r, c) = p.weight.dim();
                    store.insert(format!("{prefix}{kind}.{i}.weight"), vec![r, c], p.weight.iter().copied().collect());
                    store.insert(format!("{prefix}{kind}.{i}.bias"), vec![p.bias.len()], p.bias.to_vec());
                }
            }
        }
        store.set_metadata(format!("{prefix}step"), self.step.to_string());
    }

    pub fn import(&mut self, store: &TensorStore, prefix: &str) -> Result<()> {
        for (kind, moments) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (i, p) in moments.iter_mut().enumerate() {
                if let Some(p) = p {
                    for (suffix, dst) in [("weight", p.weight.as_slice_mut()), ("bias", p.bias.as_slice_mut())] {
                        let name = format!("{prefix}{kind}.{i}.{suffix}");
                        let (_, data) = store.get(&name).ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
                        let dst = dst.expect("contiguous");
                        if data.len() != dst.len() {
                            return Err(Error::Shape(format!("{name}: {} values, expected {}", data.len(), dst.len())));
                        }
                        dst.copy_from_slice(data);
                    }
                }
            }
        }
        self.step = store
            .metadata(&format!("{prefix}step"))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Weights(format!("missing {prefix}step")))?;
        Ok(())
    }
}
