//! Adam optimizer over the parameter prefix of a graph.
//!
//! Moment buffers are stored in f32 like the parameters, but each element
//! update runs in f64 so bias correction stays accurate at small t. Gradients
//! are checked for finiteness before anything is mutated: a bad gradient
//! aborts the step with the offending tensor named and leaves parameters,
//! moments, and the step counter untouched.

use crate::error::{Error, Result};
use crate::tensor::Graph;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// Zeroed state for the first `num_params` tensors of the graph.
    pub fn new(graph: &Graph, num_params: usize) -> Adam {
        let m = (0..num_params).map(|p| vec![0.0; graph.numel(p)]).collect::<Vec<_>>();
        let v = m.clone();
        Adam { t: 0, m, v }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn num_params(&self) -> usize {
        self.m.len()
    }

    /// One update of every parameter from its accumulated gradient.
    pub fn step(&mut self, graph: &mut Graph, lr: f32) -> Result<()> {
        for p in 0..self.m.len() {
            if let Some(i) = graph.grad(p).iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "adam step {}: non-finite gradient in parameter tensor {p} at element {i}",
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let lr = lr as f64;
        for p in 0..self.m.len() {
            let (data, grad) = graph.data_and_grad_mut(p);
            let (mp, vp) = (&mut self.m[p], &mut self.v[p]);
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let m = BETA1 * mp[i] as f64 + (1.0 - BETA1) * g;
                let v = BETA2 * vp[i] as f64 + (1.0 - BETA2) * g * g;
                mp[i] = m as f32;
                vp[i] = v as f32;
                let update = lr * (m / bc1) / ((v / bc2).sqrt() + EPS);
                data[i] = (data[i] as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Reset accumulated gradients on the parameter prefix.
pub fn zero_grads(graph: &mut Graph, num_params: usize) {
    for p in 0..num_params {
        graph.zero_grad(p);
    }
}
