use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamStore};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam with bias correction and a fixed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros = || -> Vec<Vec<f64>> { params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect() };
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Rebuilds optimizer state from saved moments, checking them against `params`.
    pub fn from_parts(lr: f64, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, params: &ParamStore) -> Result<Self> {
        let fits = |x: &[Vec<f64>]| {
            x.len() == params.len() && x.iter().zip(params.iter()).all(|(a, (_, p))| a.len() == p.value.len())
        };
        if !fits(&m) || !fits(&v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameter shapes".into()));
        }
        Ok(Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t,
            m,
            v,
        })
    }

    /// Applies one update. Parameters without a gradient are left unchanged
    /// and their moments are not decayed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let g = g.data();
            let w = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
