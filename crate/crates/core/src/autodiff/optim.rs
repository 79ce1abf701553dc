use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// SGD or bias-corrected Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub adam: AdamHyper,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            adam: AdamHyper::default(),
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn adam(lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect()
        };
        Self {
            kind: OptimizerKind::Adam,
            lr,
            adam: AdamHyper::default(),
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore<T>) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(lr),
            OptimizerKind::Adam => Self::adam(lr, store),
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if !store.grads_ready() {
            return Err(AutodiffError::MissingGrads);
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::lit(self.lr);
                for id in store.ids().collect::<Vec<_>>() {
                    let g = store.grad(id).data().to_vec();
                    for (p, gv) in store.value_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != store.len() {
                    return Err(AutodiffError::InvalidArgument(format!(
                        "optimizer tracks {} tensors, store has {}",
                        self.first_moment.len(),
                        store.len()
                    )));
                }
                let AdamHyper { beta1, beta2, eps } = self.adam;
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
                let step_size = T::lit(self.lr / c1);
                let c2_sqrt = T::lit(c2.sqrt());
                let eps = T::lit(eps);
                for id in store.ids().collect::<Vec<_>>() {
                    let g = store.grad(id).data().to_vec();
                    let m = self.first_moment[id.index()].data_mut();
                    let v = self.second_moment[id.index()].data_mut();
                    let p = store.value_mut(id).data_mut();
                    for i in 0..g.len() {
                        m[i] = b1 * m[i] + one_b1 * g[i];
                        v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                        let denom = v[i].sqrt() / c2_sqrt + eps;
                        p[i] -= step_size * m[i] / denom;
                    }
                }
            }
        }
        store.zero_grad();
        Ok(())
    }
}
