use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moment estimation.
    #[default]
    Adam,
    /// `theta <- theta - lr * grad`.
    Gradient,
}

/// Minimizing update rule with its running state.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
    Gradient,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                m: vec![0.0; n_params],
                v: vec![0.0; n_params],
                t: 0,
            },
            OptimizerKind::Gradient => Optimizer::Gradient,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Gradient => {
                for (p, g) in theta.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for i in 0..theta.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    theta[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2);
        let mut theta = vec![1.0, -1.0];
        opt.step(&mut theta, &[3.0, -0.5], 0.1);
        assert!((theta[0] - 0.9).abs() < 1e-6);
        assert!((theta[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn gradient_step() {
        let mut opt = Optimizer::new(OptimizerKind::Gradient, 1);
        let mut theta = vec![1.0];
        opt.step(&mut theta, &[2.0], 0.25);
        assert_eq!(theta, vec![0.5]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1);
        let mut theta = vec![5.0];
        for _ in 0..2000 {
            let g = 2.0 * (theta[0] - 2.0);
            opt.step(&mut theta, &[g], 0.05);
        }
        assert!((theta[0] - 2.0).abs() < 1e-3);
    }
}
