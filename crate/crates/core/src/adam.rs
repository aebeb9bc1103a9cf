//! Adam with bias correction over a flat parameter vector.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
}

impl AdamState {
    /// Zeroed accumulators with the default `β1 = 0.9, β2 = 0.999, ε = 1e-8`.
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            learning_rate,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.first_moment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_moment.is_empty()
    }

    /// One update. A non-finite gradient leaves both parameters and state
    /// untouched and is reported as [`Error::Numeric`].
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::shape(
                "adam_update",
                format!("{} parameters", self.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            log::warn!(
                "adam: non-finite gradient at index {i} (step {}), update skipped",
                self.step + 1
            );
            return Err(Error::Numeric(format!("non-finite gradient at index {i}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            let step = self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            // skipping zero steps keeps -0.0 parameters bitwise intact
            if step != 0.0 {
                *p -= step;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = AdamState::new(3, 0.1);
        let mut p = vec![1.0, -2.0, 3.0];
        s.update(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.step_count(), 1);
    }

    /// Hand-rolled scalar Adam, written independently of `update`.
    fn scalar_adam(w0: f64, grad: impl Fn(f64) -> f64, lr: f64, steps: usize) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut w) = (0.0, 0.0, w0);
        for t in 1..=steps {
            let g = grad(w);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        w
    }

    #[test]
    fn first_step_matches_scalar_oracle() {
        for &g in &[0.5, -3.0, 1e-4] {
            let mut s = AdamState::new(1, 0.01);
            let mut p = vec![2.0];
            s.update(&mut p, &[g]).unwrap();
            let oracle = scalar_adam(2.0, |_| g, 0.01, 1);
            assert_eq!(p[0], oracle);
            // first bias-corrected step is -lr * g / (|g| + eps)
            assert!((p[0] - (2.0 - 0.01 * g / (g.abs() + 1e-8))).abs() < 1e-15);
        }
    }

    #[test]
    fn quadratic_descent() {
        let mut s = AdamState::new(1, 0.1);
        let mut w = vec![0.0];
        for _ in 0..100 {
            let g = 2.0 * (w[0] - 3.0);
            s.update(&mut w, &[g]).unwrap();
        }
        let oracle = scalar_adam(0.0, |w| 2.0 * (w - 3.0), 0.1, 100);
        assert!((w[0] - oracle).abs() < 1e-12);
        assert!((w[0] - 3.0).abs() < 0.05, "w = {}", w[0]);
    }

    #[test]
    fn non_finite_gradient_rejected_without_advancing() {
        let mut s = AdamState::new(2, 0.1);
        let mut p = vec![1.0, 1.0];
        s.update(&mut p, &[0.3, 0.1]).unwrap();
        let before = (p.clone(), s.clone());
        assert!(matches!(
            s.update(&mut p, &[f64::NAN, 0.0]),
            Err(Error::Numeric(_))
        ));
        assert_eq!(p, before.0);
        assert_eq!(s, before.1);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut s = AdamState::new(3, 0.0);
        let mut p = vec![0.123456789, -9.87654321, -0.0];
        let orig = p.clone();
        for _ in 0..5 {
            s.update(&mut p, &[1.5, -0.2, 0.7]).unwrap();
        }
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&orig));
    }
}
