use serde::{Deserialize, Serialize};

use super::{NdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
///
/// One first/second moment tensor per parameter, matching its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Checks that the moments line up with `params` (e.g. after loading).
    pub fn check_shapes(&self, params: &[Tensor]) -> Result<(), NdError> {
        if self.first.len() != params.len() || self.second.len() != params.len() {
            return Err(NdError::shape(
                "adam",
                format!(
                    "{} moment tensors for {} parameters",
                    self.first.len(),
                    params.len()
                ),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if self.first[i].shape() != p.shape() || self.second[i].shape() != p.shape() {
                return Err(NdError::shape(
                    "adam",
                    format!("moment {i} does not match parameter shape {:?}", p.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Applies one update in place. `grads[i]` must match `params[i]`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NdError> {
        self.check_shapes(params)?;
        if grads.len() != params.len() {
            return Err(NdError::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        if let Some((i, g)) = grads
            .iter()
            .enumerate()
            .find(|(i, g)| g.shape() != params[*i].shape())
        {
            return Err(NdError::shape(
                "adam",
                format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    params[i].shape()
                ),
            ));
        }

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = vec![Tensor::vector(vec![0.5, -0.5, 2.0])];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let grads = vec![Tensor::vector(vec![3.0, -0.2, 1e-3])];
        adam.update(&mut params, &grads).unwrap();
        // m̂ = g and v̂ = g² on the first step, so Δ = lr·g/(|g|+ε) ≈ lr·sign(g).
        let expected = [0.5 - 0.001, -0.5 + 0.001, 2.0 - 0.001];
        for (p, e) in params[0].data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-8, "{p} vs {e}");
        }
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_on_fresh_state() {
        let before = Tensor::vector(vec![1.0, 2.0]);
        let mut params = vec![before.clone()];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.update(&mut params, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(params[0], before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn descends_on_quadratic() {
        let f = |w: f64| w * w;
        let mut params = vec![Tensor::vector(vec![1.0])];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        let mut last = f(1.0);
        for _ in 0..2 {
            let w = params[0].data()[0];
            adam.update(&mut params, &[Tensor::vector(vec![2.0 * w])]).unwrap();
            let now = f(params[0].data()[0]);
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut params = vec![Tensor::zeros(&[2, 2])];
        let mut adam = AdamState::new(&params, AdamConfig::default());
        assert!(adam.update(&mut params, &[Tensor::zeros(&[4])]).is_err());
        assert!(adam.update(&mut params, &[]).is_err());
        assert_eq!(adam.step_count(), 0);
    }
}
