//! Adaptive-moment optimizer with decoupled weight decay, plus the stepped
//! exponential learning-rate schedule.

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, n_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update over `params` given `grads`, both flat. Weight decay is
    /// decoupled: applied directly to the parameters, not mixed into the
    /// moment estimates.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "gradient count mismatch");
        self.t += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.t as i32);
        let bias2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + c.epsilon) + c.weight_decay * params[i]);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Learning rate in effect at 1-based `step`: the base rate decays by
/// `factor` once every `every` steps, so step 99 still runs at the base
/// rate and step 100 at base*factor.
pub fn lr_for_step(base: f64, factor: f64, every: u64, step: u64) -> f64 {
    assert!(every > 0, "decay interval must be positive");
    base * factor.powi((step / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_decays_at_the_interval() {
        assert_eq!(lr_for_step(1e-6, 0.9, 100, 1), 1e-6);
        assert_eq!(lr_for_step(1e-6, 0.9, 100, 99), 1e-6);
        assert_eq!(lr_for_step(1e-6, 0.9, 100, 100), 9e-7);
        assert_eq!(lr_for_step(1e-6, 0.9, 100, 199), 9e-7);
        assert!((lr_for_step(1e-6, 0.9, 100, 200) - 8.1e-7).abs() < 1e-20);
    }

    #[test]
    fn step_moves_against_the_gradient() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            2,
        );
        let mut params = vec![1.0, -1.0];
        opt.step(&mut params, &[0.5, -0.5], 0.1);
        assert!(params[0] < 1.0);
        assert!(params[1] > -1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters_without_gradient() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
            1,
        );
        let mut params = vec![2.0];
        opt.step(&mut params, &[0.0], 0.5);
        // pure decay: 2.0 - 0.5*0.1*2.0 = 1.9
        assert!((params[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_bias_corrected() {
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                epsilon: 0.0,
                ..Default::default()
            },
            1,
        );
        let mut params = vec![0.0];
        opt.step(&mut params, &[3.0], 0.01);
        // m_hat/sqrt(v_hat) == g/|g| on the first step
        assert!((params[0] + 0.01).abs() < 1e-12);
    }
}
