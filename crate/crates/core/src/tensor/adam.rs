use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn for_param(p: &Tensor<T>) -> Self {
        AdamState {
            first_moment: vec![T::zero(); p.numel()],
            second_moment: vec![T::zero(); p.numel()],
            step_count: 0,
        }
    }
}

/// Bias-corrected Adam over an ordered set of parameters.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub params: AdamParams,
    pub states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new<'a>(params: AdamParams, tensors: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        Adam {
            params,
            states: tensors.into_iter().map(AdamState::for_param).collect(),
        }
    }

    /// Applies one update in place. Gradients are left for the caller to reset.
    pub fn step<'a>(&mut self, tensors: impl IntoIterator<Item = &'a mut Tensor<T>>, lr: f64) -> Result<()> {
        let tensors: Vec<&mut Tensor<T>> = tensors.into_iter().collect();
        if tensors.len() != self.states.len() {
            return Err(Error::Contract(format!(
                "adam holds {} states but got {} parameters",
                self.states.len(),
                tensors.len()
            )));
        }
        for (i, (p, s)) in tensors.iter().zip(&self.states).enumerate() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {i} has no gradient")));
            }
            if s.first_moment.len() != p.numel() || s.second_moment.len() != p.numel() {
                return Err(Error::dim(format!(
                    "adam state {i} has {} moments for {} values",
                    s.first_moment.len(),
                    p.numel()
                )));
            }
        }
        let AdamParams { beta1, beta2, eps } = self.params;
        for (p, s) in tensors.into_iter().zip(&mut self.states) {
            s.step_count += 1;
            let t = s.step_count as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let grad = p.grad.take().expect("checked above");
            let data = p.data_mut();
            for (((w, &g), m), v) in data
                .iter_mut()
                .zip(&grad)
                .zip(&mut s.first_moment)
                .zip(&mut s.second_moment)
            {
                let g64 = g.as_f64();
                let m64 = beta1 * m.as_f64() + (1.0 - beta1) * g64;
                let v64 = beta2 * v.as_f64() + (1.0 - beta2) * g64 * g64;
                *m = T::from_f64(m64);
                *v = T::from_f64(v64);
                let m_hat = m64 / bc1;
                let v_hat = v64 / bc2;
                *w = T::from_f64(w.as_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
