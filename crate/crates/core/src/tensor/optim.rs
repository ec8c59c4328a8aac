use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    AdaGrad,
}

/// Optimizer hyper-parameters plus per-parameter state keyed by parameter name.
///
/// SGD: `v <- momentum * v + g + wd * p; p <- p - lr * v`.
/// AdaGrad: `g' = g + wd * p; G <- G + g'^2; p <- p - lr * g' / (sqrt(G) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub kind: OptimKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub buffers: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(kind: OptimKind, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            momentum,
            weight_decay,
            eps: 1e-10,
            buffers: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable parameter, then clears gradients.
    ///
    /// Fails without touching anything if a trainable parameter has no gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.trainable && p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        for p in store.iter_mut().filter(|p| p.trainable) {
            let g = p.grad.take().expect("checked above");
            let buf = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let w = &mut p.value.data;
            match self.kind {
                OptimKind::Sgd => {
                    for ((v, gi), wi) in buf.iter_mut().zip(&g).zip(w.iter_mut()) {
                        *v = self.momentum * *v + gi + self.weight_decay * *wi;
                        *wi -= lr * *v;
                    }
                }
                OptimKind::AdaGrad => {
                    for ((acc, gi), wi) in buf.iter_mut().zip(&g).zip(w.iter_mut()) {
                        let gd = gi + self.weight_decay * *wi;
                        *acc += gd * gd;
                        *wi -= lr * gd / (acc.sqrt() + self.eps);
                    }
                }
            }
        }
        store.zero_grad();
        Ok(())
    }

    /// State buffers as named tensors (`opt.<param>`), for checkpoints.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        self.buffers
            .iter()
            .map(|(k, v)| {
                (
                    format!("opt.{k}"),
                    Tensor {
                        shape: vec![v.len()],
                        data: v.clone(),
                    },
                )
            })
            .collect()
    }

    pub fn load_tensors<'a>(&mut self, tensors: impl IntoIterator<Item = &'a (String, Tensor)>) {
        for (name, t) in tensors {
            if let Some(k) = name.strip_prefix("opt.") {
                self.buffers.insert(k.to_string(), t.data.clone());
            }
        }
    }
}
