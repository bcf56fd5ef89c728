//! Adam with decoupled weight decay, operating on the flat parameter vector.

use crate::num::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamState<F: Real> {
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained non-finite values; parameters and moments were
    /// left untouched.
    SkippedNonFinite,
}

impl<F: Real> AdamState<F> {
    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![F::zero(); n_params],
            v: vec![F::zero(); n_params],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64, wd: f64) -> StepOutcome {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter size mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/parameter size mismatch");
        if grads.iter().any(|g| !g.is_finite()) {
            return StepOutcome::SkippedNonFinite;
        }
        self.t += 1;
        let b1 = F::of_f64(BETA1);
        let b2 = F::of_f64(BETA2);
        let eps = F::of_f64(EPS);
        let lr_f = F::of_f64(lr);
        let bc1 = F::of_f64(1.0 - BETA1.powi(self.t as i32));
        let bc2 = F::of_f64(1.0 - BETA2.powi(self.t as i32));
        let decay = F::of_f64(lr * wd);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (F::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (F::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            // decoupled weight decay: applied directly to the parameter,
            // not through the moment estimates
            params[i] = params[i] - lr_f * m_hat / (v_hat.sqrt() + eps) - decay * params[i];
        }
        StepOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grads_zero_wd_no_change() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![0.0f64; 3];
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            assert_eq!(st.step(&mut p, &g, 1e-2, 0.0), StepOutcome::Applied);
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert!(st.m.iter().all(|&v| v == 0.0));
        assert!(st.v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_direction_opposes_gradient() {
        let mut p = vec![0.0f64, 0.0, 0.0];
        let g = vec![0.3f64, -1.7, 0.001];
        let mut st = AdamState::new(3);
        st.step(&mut p, &g, 1e-2, 0.0);
        for (pi, gi) in p.iter().zip(&g) {
            assert!(pi * gi < 0.0, "update must oppose the gradient sign");
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = w^2, grad = 2w
        let mut p = vec![3.0f64];
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let g = vec![2.0 * p[0]];
            st.step(&mut p, &g, 1e-2, 0.0);
        }
        assert!(p[0].abs() < 1e-4, "w={}", p[0]);
    }

    #[test]
    fn non_finite_grads_skip_step() {
        let mut p = vec![1.0f64, 2.0];
        let mut st = AdamState::new(2);
        let g = vec![f64::NAN, 0.1];
        assert_eq!(st.step(&mut p, &g, 1e-2, 1e-2), StepOutcome::SkippedNonFinite);
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.steps_taken(), 0);
    }

    #[test]
    fn weight_decay_shrinks_params() {
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        st.step(&mut p, &[0.0], 1e-2, 1e-1);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-12);
    }
}
