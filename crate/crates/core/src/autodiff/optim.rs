use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    GradientDescent,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer { kind, weight_decay }
    }

    /// Applies one update to `ids` with learning rate `lr`, then clears their gradients.
    ///
    /// Weight decay enters as `grad + weight_decay * p` for both kinds.
    pub fn step(&self, store: &mut ParamStore, ids: &[ParamId], lr: f64) -> Result<()> {
        if let Some(id) = ids
            .iter()
            .find(|id| !store.get(**id).frozen && store.get(**id).grad.is_none())
        {
            return Err(Error::ContractViolation(format!(
                "optimizer step on parameter {} without a gradient",
                id.index()
            )));
        }
        for &id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let grad = p.grad.take().expect("checked above");
            p.step += 1;
            let wd = self.weight_decay;
            match self.kind {
                OptimizerKind::GradientDescent => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * (g + wd * *w);
                    }
                }
                OptimizerKind::Adam => {
                    let t = p.step as i32;
                    let bias1 = 1.0 - ADAM_BETA1.powi(t);
                    let bias2 = 1.0 - ADAM_BETA2.powi(t);
                    let values = p.value.data_mut();
                    for i in 0..values.len() {
                        let g = grad[i] + wd * values[i];
                        let m = ADAM_BETA1 * p.first_moment[i] + (1.0 - ADAM_BETA1) * g;
                        let v = ADAM_BETA2 * p.second_moment[i] + (1.0 - ADAM_BETA2) * g * g;
                        p.first_moment[i] = m;
                        p.second_moment[i] = v;
                        let m_hat = m / bias1;
                        let v_hat = v / bias2;
                        values[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
