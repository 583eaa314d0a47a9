//! Polynomial learning-rate decay and AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Element, Gradients, Tensor};

/// `base_lr * (1 - iter / max_iters)^power`; `iter` is clamped to `max_iters`.
pub fn poly_lr(iter: usize, base_lr: f64, max_iters: usize, power: f64) -> f64 {
    let iter = iter.min(max_iters);
    if iter == max_iters {
        return 0.0;
    }
    let frac = 1.0 - iter as f64 / max_iters as f64;
    if power == 1.0 {
        base_lr * frac
    } else {
        base_lr * frac.powf(power)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First and second moments for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Element> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One AdamW update of a flat parameter; `step` is the 1-based count
/// including this update.
pub fn adamw_update<T: Element>(
    p: &mut [T],
    g: &[T],
    state: &mut Moments<T>,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let t = T::from_f64;
    let (b1t, b2t, c1t, c2t) = (t(b1), t(b2), t(c1), t(c2));
    let (lrt, decay, eps) = (t(lr), t(lr * cfg.weight_decay), t(cfg.eps));
    let one = T::one();
    for i in 0..p.len() {
        let gi = g[i];
        p[i] = p[i] - decay * p[i];
        let m = b1t * state.m[i] + (one - b1t) * gi;
        let v = b2t * state.v[i] + (one - b2t) * gi * gi;
        state.m[i] = m;
        state.v[i] = v;
        let m_hat = m / c1t;
        let v_hat = v / c2t;
        p[i] = p[i] - lrt * m_hat / (v_hat.sqrt() + eps);
    }
}

/// AdamW over every parameter of a store, in registration order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub step: u64,
    state: Vec<Moments<T>>,
}

impl<T: Element> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        AdamW {
            config,
            step: 0,
            state: store
                .ids()
                .map(|id| Moments::zeros(store.value(id).numel()))
                .collect(),
        }
    }

    pub fn moments(&self) -> &[Moments<T>] {
        &self.state
    }

    /// Parameters without a gradient are treated as having a zero gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.state.len() != store.len() {
            return Err(Error::dim(
                "param",
                "optimizer state does not match the parameter store",
            ));
        }
        for id in store.ids() {
            if let Some(g) = grads.param(id.index()) {
                if g.shape() != store.value(id).shape() {
                    return Err(Error::dim(
                        "param",
                        format!("gradient of {} has shape {:?}", store.name(id), g.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
                }
            }
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let zeros;
            let g = match grads.param(id.index()) {
                Some(g) => g,
                None => {
                    zeros = Tensor::zeros(store.value(id).shape().to_vec());
                    &zeros
                }
            };
            let state = &mut self.state[id.index()];
            adamw_update(
                store.value_mut(id).data_mut(),
                g.data(),
                state,
                self.step,
                lr,
                &self.config,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_endpoints() {
        assert_eq!(poly_lr(0, 9e-5, 2000, 1.0), 9e-5);
        assert_eq!(poly_lr(2000, 9e-5, 2000, 1.0), 0.0);
        assert_eq!(poly_lr(1000, 9e-5, 2000, 1.0), 4.5e-5);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![1.0f64, 1.0, 1.0];
        let mut s = Moments::zeros(3);
        adamw_update(&mut p, &[0.3, -2.0, 0.0], &mut s, 1, 0.01, &cfg);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] - 1.01).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn pure_decay() {
        let mut p = vec![1.0f64];
        let mut s = Moments::zeros(1);
        adamw_update(&mut p, &[0.0], &mut s, 1, 0.1, &AdamWConfig::default());
        assert!((p[0] - 0.995).abs() < 1e-15);
    }
}
