//! SGD and Adam with bias correction. The optimizer owns its moment state,
//! keyed positionally to the parameter-tensor order handed to [`Optimizer::step`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Adam => write!(f, "adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::arg(format!("unknown optimizer '{other}' (expected sgd|adam)"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamParams<T> {
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
}

impl<T: Element> Default for AdamParams<T> {
    fn default() -> Self {
        AdamParams {
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            epsilon: T::of(1e-8),
        }
    }
}

pub struct Optimizer<T> {
    kind: OptimizerKind,
    learning_rate: T,
    adam: AdamParams<T>,
    step_count: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: T) -> Self {
        Optimizer {
            kind,
            learning_rate,
            adam: AdamParams::default(),
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_adam_params(mut self, adam: AdamParams<T>) -> Self {
        self.adam = adam;
        self
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update. `params` and `grads` must align positionally with
    /// each other (and with previous calls). A non-finite gradient anywhere
    /// aborts the step before any parameter or state is touched.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer step", params.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::shape(format!("optimizer tensor {i}"), p.len(), g.len()));
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {i}")));
            }
        }

        if self.m.is_empty() && self.kind == OptimizerKind::Adam {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::shape("optimizer state", self.m.len(), params.len()));
        }

        self.step_count += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, &gv) in p.iter_mut().zip(*g) {
                        *pv -= self.learning_rate * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let AdamParams { beta1, beta2, epsilon } = self.adam;
                let t = T::of(self.step_count as f64);
                let bc1 = T::one() - beta1.powf(t);
                let bc2 = T::one() - beta2.powf(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gv = g[i];
                        m[i] = beta1 * m[i] + (T::one() - beta1) * gv;
                        v[i] = beta2 * v[i] + (T::one() - beta2) * gv * gv;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
