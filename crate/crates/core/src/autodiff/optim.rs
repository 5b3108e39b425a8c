use std::collections::BTreeMap;

use super::{ParamStore, Real};
use crate::error::{Error, Result};

fn clip_factor(store: &ParamStore, clip: Option<Real>) -> Result<Real> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    Ok(match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    })
}

/// Plain gradient descent with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: Real,
    pub clip: Option<Real>,
}

impl Sgd {
    pub fn new(lr: Real, clip: Option<Real>) -> Self {
        Sgd { lr, clip }
    }

    /// Applies the accumulated gradients and zeroes them. Returns the
    /// gradient norm before clipping.
    pub fn step(&self, store: &mut ParamStore) -> Result<Real> {
        let norm = store.grad_norm();
        let scale = clip_factor(store, self.clip)? * self.lr;
        store.for_each_mut(|_, value, grad| {
            for (v, g) in value.iter_mut().zip(grad.iter_mut()) {
                *v -= scale * *g;
                *g = 0.0;
            }
        });
        Ok(norm)
    }
}

/// Adam with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
    pub clip: Option<Real>,
    t: i32,
    moments: BTreeMap<String, (Vec<Real>, Vec<Real>)>,
}

impl Adam {
    pub fn new(lr: Real, clip: Option<Real>) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<Real> {
        let norm = store.grad_norm();
        let scale = clip_factor(store, self.clip)?;
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let moments = &mut self.moments;
        store.for_each_mut(|name, value, grad| {
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; value.len()], vec![0.0; value.len()]));
            for i in 0..value.len() {
                let g = grad[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                value[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                grad[i] = 0.0;
            }
        });
        Ok(norm)
    }
}
