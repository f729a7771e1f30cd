//! Adaptive-moment gradient ascent with independent parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers of one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentBuffers {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl MomentBuffers {
    pub fn zeros(n: usize) -> Self {
        MomentBuffers {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// Adam state. The step counter is shared by all groups, so every call to
/// [`Adam::step`] must update every group (pass zero gradients to hold one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub groups: Vec<MomentBuffers>,
}

impl Adam {
    pub fn new(group_sizes: &[usize], weight_decay: f64) -> Self {
        Adam {
            beta1: BETA1,
            beta2: BETA2,
            epsilon: EPSILON,
            weight_decay,
            steps: 0,
            groups: group_sizes.iter().map(|&n| MomentBuffers::zeros(n)).collect(),
        }
    }

    /// One ascent step: each `params[g]` moves along its bias-corrected
    /// moment ratio scaled by `rates[g]`. Gradients are of the objective to
    /// maximize.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], rates: &[f64]) -> Result<()> {
        if params.len() != self.groups.len() || grads.len() != self.groups.len() || rates.len() != self.groups.len() {
            return Err(Error::shape("optimizer groups", self.groups.len(), params.len()));
        }
        for (g, (p, d)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.groups[g].first.len() || d.len() != p.len() {
                return Err(Error::shape("optimizer group size", self.groups[g].first.len(), d.len()));
            }
            if d.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue(format!("gradient in parameter group {g}")));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (g, (p, d)) in params.iter_mut().zip(grads).enumerate() {
            let buf = &mut self.groups[g];
            let lr = rates[g];
            for i in 0..p.len() {
                // decoupled from ascent direction: decay pulls toward zero
                let grad = d[i] - self.weight_decay * p[i];
                buf.first[i] = self.beta1 * buf.first[i] + (1.0 - self.beta1) * grad;
                buf.second[i] = self.beta2 * buf.second[i] + (1.0 - self.beta2) * grad * grad;
                let m_hat = buf.first[i] / c1;
                let v_hat = buf.second[i] / c2;
                p[i] += lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::new(&[2], 0.0);
        opt.groups[0].first = vec![0.5, -0.5];
        opt.groups[0].second = vec![0.25, 0.25];
        let mut p = vec![1.0, 2.0];
        let g = vec![0.0, 0.0];
        // with stored moments the step moves; check the pure zero case first
        let mut fresh = Adam::new(&[2], 0.0);
        fresh.step(&mut [p.as_mut_slice()], &[g.as_slice()], &[0.1]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        opt.step(&mut [p.as_mut_slice()], &[g.as_slice()], &[0.0]).unwrap();
        assert_eq!(opt.groups[0].first, vec![0.45, -0.45]);
        assert!((opt.groups[0].second[0] - 0.25 * 0.999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.7, -0.02, 1e4] {
            let mut opt = Adam::new(&[1], 0.0);
            let mut p = vec![0.5];
            opt.step(&mut [p.as_mut_slice()], &[&[g]], &[0.001]).unwrap();
            // m_hat = g, v_hat = g^2
            let expected = 0.5 + 0.001 * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15);
            assert!(((p[0] - 0.5).abs() - 0.001).abs() < 1e-9);
        }
    }

    #[test]
    fn groups_use_their_own_rates() {
        let mut opt = Adam::new(&[1, 2], 0.0);
        let mut a = vec![0.0];
        let mut b = vec![0.0, 0.0];
        opt.step(&mut [a.as_mut_slice(), b.as_mut_slice()], &[&[1.0], &[1.0, -1.0]], &[0.001, 0.01]).unwrap();
        assert!((a[0] - 0.001).abs() < 1e-10);
        assert!((b[0] - 0.01).abs() < 1e-9 && (b[1] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut opt = Adam::new(&[1], 0.0);
        let mut p = vec![0.0];
        assert!(matches!(
            opt.step(&mut [p.as_mut_slice()], &[&[f64::NAN]], &[0.1]),
            Err(Error::NonFiniteValue(_))
        ));
        assert_eq!(opt.steps, 0);
    }

    #[test]
    fn maximizes_a_concave_quadratic() {
        let mut opt = Adam::new(&[1], 0.0);
        let mut p = vec![5.0];
        for _ in 0..3000 {
            let g = -2.0 * (p[0] - 1.5);
            opt.step(&mut [p.as_mut_slice()], &[&[g]], &[0.01]).unwrap();
        }
        assert!((p[0] - 1.5).abs() < 1e-2);
    }
}
