use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NamedTensors, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Optimizer hyperparameters plus per-parameter moments, keyed by the same
/// names as the parameters they track.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real = f64> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: IndexMap<String, Vec<T>>,
    second: IndexMap<String, Vec<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: IndexMap::new(),
            second: IndexMap::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr)
    }

    /// First and second moment buffers for `name`, if Adam has seen it.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        Some((self.first.get(name)?, self.second.get(name)?))
    }

    /// Applies one update to every parameter. All gradients are validated
    /// before anything is written, so a failed call leaves `params` intact.
    pub fn step<P: ParamStore<T> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &NamedTensors<T>,
    ) -> Result<()> {
        let mut problem = None;
        let mut seen = 0;
        params.visit_params_mut(&mut |name, p| {
            seen += 1;
            if problem.is_some() {
                return;
            }
            match grads.get(name) {
                None => {
                    problem = Some(format!("no gradient for parameter `{name}`"));
                }
                Some(g) if g.shape() != p.shape() => {
                    problem = Some(format!(
                        "gradient for `{name}` has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    ));
                }
                Some(_) => {}
            }
        });
        if problem.is_none() && seen != grads.len() {
            problem = Some(format!(
                "{} gradients supplied for {seen} parameters",
                grads.len()
            ));
        }
        if let Some(msg) = problem {
            return Err(Error::InconsistentGradient(msg));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::lit(self.lr);
                params.visit_params_mut(&mut |name, p| {
                    let g = grads[name].data();
                    p.data_mut()
                        .iter_mut()
                        .zip(g)
                        .for_each(|(w, &d)| *w -= lr * d);
                });
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
                let (c1, c2) = (T::one() - b1, T::one() - b2);
                let bc1 = T::lit(1.0 - self.beta1.powi(t));
                let bc2 = T::lit(1.0 - self.beta2.powi(t));
                let lr = T::lit(self.lr);
                let eps = T::lit(self.eps);
                let (first, second) = (&mut self.first, &mut self.second);
                params.visit_params_mut(&mut |name, p| {
                    let g = grads[name].data();
                    let m = first
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    let v = second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![T::zero(); g.len()]);
                    for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *m = b1 * *m + c1 * d;
                        *v = b2 * *v + c2 * d * d;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                });
            }
        }
        Ok(())
    }
}

/// Anything exposing named, mutable parameter tensors in a stable order.
pub trait ParamStore<T: Real> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

impl<T: Real> ParamStore<T> for NamedTensors<T> {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, p) in self.iter_mut() {
            f(name, p);
        }
    }
}

/// Convenience for building a gradient map that mirrors `params` with zeros.
pub fn zeros_like<T: Real>(params: &NamedTensors<T>) -> NamedTensors<T> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect()
}
