use serde::{Deserialize, Serialize};

use super::Mlp;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; num_params],
            second: vec![0.0; num_params],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(
            params.len(),
            self.first.len(),
            "Adam state / parameter shape"
        );
        assert_eq!(grad.len(), self.first.len(), "Adam state / gradient shape");
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grad[i];
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] -= self.learning_rate * m / (v.sqrt() + self.epsilon);
        }
    }

    /// Apply one update to a network's parameters.
    pub fn step_net(&mut self, net: &mut Mlp, grad: &[f64]) {
        let mut theta = net.params();
        self.step(&mut theta, grad);
        net.set_params(&theta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3, 1e-3);
        for _ in 0..100 {
            s.step(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut theta = vec![0.0];
        let mut s = AdamState::new(1, 0.1);
        for _ in 0..500 {
            let g = [2.0 * (theta[0] - 3.0)];
            s.step(&mut theta, &g);
        }
        assert!((theta[0] - 3.0).abs() <= 1e-3, "theta {}", theta[0]);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut theta = vec![0.5, -0.5];
            let mut s = AdamState::new(2, 0.01);
            for k in 0..50 {
                let g = [theta[0] * k as f64, theta[1].sin()];
                s.step(&mut theta, &g);
            }
            theta
        };
        assert_eq!(run(), run());
    }
}
