use serde::{Deserialize, Serialize};

use super::{contract_err, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `v ← μ·v + g; p ← p − lr·v`
    Sgd { lr: f64, momentum: f64 },
    /// Bias-corrected first/second moment update.
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

/// Optimizer state: per-parameter moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    first: Vec<Option<Vec<T>>>,
    second: Vec<Option<Vec<T>>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Apply one update. `grads` holds one optional slot per store entry;
    /// empty slots and non-trainable entries are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(contract_err(
                "optimizer_step",
                format!("{} gradient slots for {} parameters", grads.len(), store.len()),
            ));
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.steps += 1;
        let t = self.steps as i32;
        for (i, (entry, grad)) in store.entries_mut().iter_mut().zip(grads).enumerate() {
            let Some(grad) = grad else { continue };
            if !entry.trainable {
                continue;
            }
            if grad.shape() != entry.value.shape() {
                return Err(contract_err(
                    "optimizer_step",
                    format!("gradient {:?} for {} {:?}", grad.shape(), entry.name, entry.value.shape()),
                ));
            }
            let p = entry.value.data_mut();
            let g = grad.data();
            let n = p.len();
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let (lr, mu) = (T::lit(lr), T::lit(momentum));
                    let v = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
                    for k in 0..n {
                        v[k] = mu * v[k] + g[k];
                        p[k] -= lr * v[k];
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, eps } => {
                    let m = self.first[i].get_or_insert_with(|| vec![T::zero(); n]);
                    let v = self.second[i].get_or_insert_with(|| vec![T::zero(); n]);
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let c1 = T::lit(1.0 - beta1.powi(t));
                    let c2 = T::lit(1.0 - beta2.powi(t));
                    let (lr, eps) = (T::lit(lr), T::lit(eps));
                    for k in 0..n {
                        m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                        v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                        let mhat = m[k] / c1;
                        let vhat = v[k] / c2;
                        p[k] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
