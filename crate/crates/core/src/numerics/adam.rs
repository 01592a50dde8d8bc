use super::ParamSet;
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    /// One update from the parameters' accumulated gradients. Parameters
    /// without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[self.m.len()]));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(Error::shape("adam_step", p.shape(), &[self.m[i].len()]));
            }
            let grad = p.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for k in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                data[k] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to `params` using their gradients.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    state.step(params)
}
