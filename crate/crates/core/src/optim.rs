//! SGD and Adam over a flat parameter vector.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        Self::adam()
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OptimizerKind::Sgd => f.write_str("sgd"),
            OptimizerKind::Adam { .. } => f.write_str("adam"),
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::adam()),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected sgd or adam)"
            ))),
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Self {
        let adam = matches!(kind, OptimizerKind::Adam { .. }).then(|| AdamState::new(n_params));
        Optimizer {
            kind,
            learning_rate,
            adam,
        }
    }

    /// Resumes from saved moments. Ignored for SGD.
    pub fn with_state(mut self, state: Option<AdamState>) -> Self {
        if let (Some(s), Some(_)) = (state, self.adam.as_ref()) {
            self.adam = Some(s);
        }
        self
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let lr = self.learning_rate;
        match (self.kind, self.adam.as_mut()) {
            (OptimizerKind::Adam { beta1, beta2, eps }, Some(s)) => {
                s.t += 1;
                let bc1 = 1.0 - beta1.powi(s.t as i32);
                let bc2 = 1.0 - beta2.powi(s.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                    s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                    let m_hat = s.m[i] / bc1;
                    let v_hat = s.v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            _ => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
        }
    }
}
