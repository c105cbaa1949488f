//! Bias-corrected Adam parameter updates.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Optimizer state: one pair of moment tensors per parameter, shapes
/// mirroring the parameters they update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_shapes: &[Vec<usize>], learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = param_shapes
            .iter()
            .map(|s| vec![0.0; s.iter().product()])
            .collect();
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One update over the full parameter list. `params` and `grads` must
    /// be index-aligned with the shapes the state was built from.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, state holds {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(&mut self.second_moment))
        {
            if p.numel() != g.numel() || p.numel() != m.len() {
                return Err(Error::Shape(format!(
                    "adam: param {:?} vs grad {:?} vs moment {}",
                    p.shape(),
                    g.shape(),
                    m.len()
                )));
            }
            let gd = g.data();
            let pd = p.data_mut();
            for i in 0..gd.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
