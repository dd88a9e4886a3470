//! Adam with decoupled weight decay.

use crate::autograd::{Grads, Mat};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    t: i32,
    moments: Vec<Option<(Mat, Mat)>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, t: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update to every unfrozen parameter that has a gradient.
    /// Returns the number of tensors touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> usize {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let mut touched = 0;
        for (id, g) in grads.params() {
            if store.is_frozen(id) {
                continue;
            }
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Mat::zeros(g.dim()), Mat::zeros(g.dim())));
            m.zip_mut_with(g, |m, &g| *m = c.beta1 * *m + (1.0 - c.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = c.beta2 * *v + (1.0 - c.beta2) * g * g);
            let p = store.value_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + c.eps);
                *p -= c.lr * (update + c.weight_decay * *p);
            });
            touched += 1;
        }
        touched
    }
}
