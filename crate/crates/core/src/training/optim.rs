use std::collections::HashMap;

use crate::params::ParamSet;

/// Adam with decoupled weight decay. Moments are keyed by parameter name,
/// so several parameter sets can share one optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(epsilon: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            epsilon,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new step; call once before the `update`s of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<P: ParamSet>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let t = self.step.max(1) as i32;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.epsilon, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        params.visit_with(grads, &mut |name, p, g| {
            let (m, v) = moments
                .entry(name.to_owned())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * p[i]);
            }
        });
    }
}

/// Linear warmup to `base`, then linear decay to zero at `total` steps.
pub fn scheduled_lr(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup.max(1) as f64;
    }
    let remaining = total.saturating_sub(step) as f64;
    base * (remaining / total.saturating_sub(warmup).max(1) as f64).max(0.0)
}

/// Scales gradients so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(sets: &mut [&mut dyn ClipTarget], max_norm: f64) -> f64 {
    let norm = sets.iter().map(|s| s.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for s in sets.iter_mut() {
            s.scale_by(factor);
        }
    }
    norm
}

/// Object-safe view of a gradient set for clipping.
pub trait ClipTarget {
    fn sq_norm(&self) -> f64;
    fn scale_by(&mut self, factor: f64);
}

impl<P: ParamSet> ClipTarget for P {
    fn sq_norm(&self) -> f64 {
        self.squared_norm()
    }

    fn scale_by(&mut self, factor: f64) {
        self.scale(factor)
    }
}

pub fn add_assign<P: ParamSet>(acc: &mut P, other: &P) {
    acc.visit_with(other, &mut |_, a, b| {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    });
}
