//! Adam with bias correction over a flat parameter vector.

use crate::error::{Error, Result};
use crate::scalar::{real, Real};

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone)]
pub struct Adam<R> {
    lr: R,
    beta1: R,
    beta2: R,
    eps: R,
    t: u64,
    m: Vec<R>,
    v: Vec<R>,
}

impl<R: Real> Adam<R> {
    /// Standard coefficients (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
    pub fn new(n_params: usize, lr: R) -> Self {
        Self {
            lr,
            beta1: real(0.9),
            beta2: real(0.999),
            eps: real(1e-8),
            t: 0,
            m: vec![R::zero(); n_params],
            v: vec![R::zero(); n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Optimizer state for checkpointing: step count, first moments, second moments.
    pub fn state(&self) -> (u64, &[R], &[R]) {
        (self.t, &self.m, &self.v)
    }

    /// Restore state captured by [`Adam::state`].
    pub fn restore(&mut self, t: u64, m: &[R], v: &[R]) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::usage(format!(
                "adam: restoring {} / {} moments into an optimizer sized for {}",
                m.len(),
                v.len(),
                self.m.len()
            )));
        }
        self.t = t;
        self.m.copy_from_slice(m);
        self.v.copy_from_slice(v);
        Ok(())
    }

    /// One update step.
    ///
    /// A non-finite gradient anywhere rejects the whole step with
    /// [`Error::Numeric`] and leaves parameters, moments, and the step count
    /// untouched, so the caller can skip the update and keep training.
    pub fn step(&mut self, params: &mut [R], grad: &[R]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::usage(format!(
                "adam: expected {} parameters, got params {} / grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numeric("adam: non-finite gradient, step rejected"));
        }
        self.t += 1;
        let one = R::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn first_step_matches_hand_recurrence() {
        // Oracle: one step from zero moments, written out term by term.
        let lr = 1e-3f64;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let g = 1.0f64;
        let m = (1.0 - b1) * g;
        let v = (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1);
        let v_hat = v / (1.0 - b2);
        let expected = 0.0 - lr * m_hat / (v_hat.sqrt() + eps);

        let mut opt = Adam::new(1, lr);
        let mut p = vec![0.0];
        opt.step(&mut p, &[g]).unwrap();
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut opt = Adam::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        let mut opt = Adam::new(1, 0.05);
        let mut p = vec![0.0];
        let mut last = p[0];
        for _ in 0..20 {
            opt.step(&mut p, &[2.5]).unwrap();
            assert!(p[0] < last, "position must strictly decrease under a constant positive gradient");
            last = p[0];
        }
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_side_effects() {
        let mut opt = Adam::new(2, 0.01);
        let mut p = vec![1.0, 2.0];
        let err = opt.step(&mut p, &[0.1, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(opt.steps_taken(), 0);
        // The optimizer still works afterwards.
        opt.step(&mut p, &[0.1, 0.1]).unwrap();
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let mut opt = Adam::new(2, 0.01);
        let mut p = vec![0.3f64, -0.7];
        for _ in 0..3 {
            opt.step(&mut p, &[0.4, -1.1]).unwrap();
        }
        let (t, m, v) = opt.state();
        let (m, v) = (m.to_vec(), v.to_vec());
        let p_snap = p.clone();

        let mut resumed = Adam::new(2, 0.01);
        resumed.restore(t, &m, &v).unwrap();
        let mut p_resumed = p_snap;
        for _ in 0..2 {
            opt.step(&mut p, &[0.2, 0.9]).unwrap();
            resumed.step(&mut p_resumed, &[0.2, 0.9]).unwrap();
        }
        assert_eq!(p[0].to_bits(), p_resumed[0].to_bits());
        assert_eq!(p[1].to_bits(), p_resumed[1].to_bits());
        assert!(resumed.restore(1, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn length_mismatch_is_a_usage_error() {
        let mut opt = Adam::new(2, 0.01);
        let mut p = vec![1.0];
        assert!(matches!(opt.step(&mut p, &[0.1]), Err(Error::Usage(_))));
    }
}
