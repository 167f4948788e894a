//! Adam with the AMSGrad maximum of second moments.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{ModelError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub amsgrad: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            amsgrad: true,
        }
    }
}

pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    v_max: Vec<Vec<S>>,
}

impl<S: Element> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = || params.iter().map(|p| vec![S::zero(); p.len()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &[Option<Tensor<S>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(ModelError::Shape("optimizer state does not match the parameters".into()));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2_sqrt = S::lit((1.0 - c.beta2.powi(t)).sqrt());
        let step_size = S::lit(c.learning_rate / bias1);
        let eps = S::lit(c.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.shape() != p.shape() {
                return Err(ModelError::Shape(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape())));
            }
            let (m, v, vmax) = (&mut self.m[i], &mut self.v[i], &mut self.v_max[i]);
            for (j, (w, &gj)) in p.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                m[j] = b1 * m[j] + (S::one() - b1) * gj;
                v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
                let second = if c.amsgrad {
                    vmax[j] = vmax[j].max(v[j]);
                    vmax[j]
                } else {
                    v[j]
                };
                let denom = second.sqrt() / bias2_sqrt + eps;
                *w -= step_size * m[j] / denom;
            }
        }
        Ok(())
    }
}
