/// Adaptive-moment gradient descent with bias correction. Decay parameters
/// are the conventional (0.9, 0.999); no weight decay, no schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut opt = Adam::new(0.01, 2);
        let mut params = vec![1.0, -1.0];
        opt.step(&mut params, &[0.5, -2.0]);
        assert_abs_diff_eq!(params[0], 1.0 - 0.01, epsilon = 1e-6);
        assert_abs_diff_eq!(params[1], -1.0 + 0.01, epsilon = 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut opt = Adam::new(0.05, 1);
        let mut params = vec![3.0];
        for _ in 0..2000 {
            let g = 2.0 * (params[0] - 1.25);
            opt.step(&mut params, &[g]);
        }
        assert_abs_diff_eq!(params[0], 1.25, epsilon = 1e-4);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point_from_rest() {
        let mut opt = Adam::new(0.1, 3);
        let mut params = vec![1.0, 2.0, 3.0];
        let before = params.clone();
        opt.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);
    }
}
