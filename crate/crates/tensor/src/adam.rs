use crate::error::{Result, TensorError};
use crate::params::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of Adam for one [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One bias-corrected Adam update; clears the gradients afterwards.
    ///
    /// Every parameter must carry a gradient.
    pub fn update(&mut self, params: &mut ModelParams) -> Result<()> {
        if self.first_moment.len() != params.len()
            || params
                .iter()
                .zip(&self.first_moment)
                .any(|(p, m)| p.value.numel() != m.len())
        {
            return Err(TensorError::Contract(
                "optimizer state does not match parameter shapes".into(),
            ));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::Contract(format!(
                "parameter {} has no gradient",
                p.name
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let g = p.grad.take().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn scalar_params(v: f64) -> ModelParams {
        let mut p = ModelParams::new();
        p.add("x", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = scalar_params(0.3);
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            p.iter_mut().for_each(|q| q.grad = Some(vec![0.0]));
            st.update(&mut p).unwrap();
        }
        assert_eq!(p.iter().next().unwrap().value.data(), &[0.3]);
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..100 {
            p.iter_mut().for_each(|q| q.grad = Some(vec![2.5]));
            st.update(&mut p).unwrap();
            let now = p.iter().next().unwrap().value.data()[0];
            assert!(now < prev);
            prev = now;
        }
        assert_eq!(st.step, 100);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        assert!(matches!(st.update(&mut p), Err(TensorError::Contract(_))));
    }

    #[test]
    fn gradients_are_cleared() {
        let mut p = scalar_params(1.0);
        let mut st = AdamState::new(&p, AdamConfig::default());
        p.iter_mut().for_each(|q| q.grad = Some(vec![1.0]));
        st.update(&mut p).unwrap();
        assert!(p.iter().all(|q| q.grad.is_none()));
    }
}
