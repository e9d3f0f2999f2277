//! Adam optimizer over a [`ParamStore`].

use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        let v = store.ids().map(|id| ArrayD::zeros(store.get(id).raw_dim())).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    /// One update. `grads` is aligned with the store's parameter order; a
    /// `None` entry is treated as a zero gradient (moments still decay), so a
    /// step is one deterministic transition of the full optimizer state.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<&ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<ParamId>>().into_iter().enumerate() {
            match grads[i] {
                Some(g) => {
                    self.m[i].zip_mut_with(g, |m, &gv| {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * gv
                    });
                    self.v[i].zip_mut_with(g, |v, &gv| {
                        *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv
                    });
                }
                None => {
                    self.m[i].mapv_inplace(|m| self.beta1 * m);
                    self.v[i].mapv_inplace(|v| self.beta2 * v);
                }
            }
            let p = store.get_mut(id);
            ndarray::Zip::from(&mut *p)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    pub fn iterations(&self) -> u64 {
        self.t
    }

    /// State access for checkpointing: (t, first moments, second moments).
    pub fn state(&self) -> (u64, &[ArrayD<f64>], &[ArrayD<f64>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: Vec<ArrayD<f64>>, v: Vec<ArrayD<f64>>) {
        assert_eq!(m.len(), self.m.len(), "adam state size mismatch");
        assert_eq!(v.len(), self.v.len(), "adam state size mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
