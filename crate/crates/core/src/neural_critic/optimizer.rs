use crate::scalar::Real;

/// Adaptive-moment ascent with the amsgrad correction (the denominator uses
/// the running maximum of the second moment) and decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AmsGrad<T: Real> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    v_max: Vec<T>,
    t: u64,
}

impl<T: Real> Default for AmsGrad<T> {
    fn default() -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: Vec::new(),
            v: Vec::new(),
            v_max: Vec::new(),
            t: 0,
        }
    }
}

impl<T: Real> AmsGrad<T> {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Forgets all moments; the next step starts from scratch.
    pub fn reset(&mut self) {
        self.m.clear();
        self.v.clear();
        self.v_max.clear();
        self.t = 0;
    }

    pub fn moments_finite(&self) -> bool {
        self.m.iter().chain(&self.v).chain(&self.v_max).all(|x| x.is_finite_value())
    }

    /// One step *up* the gradient: `ξ ← ξ + η m̂/(√v̂ + eps) − η wd ξ`.
    pub fn ascent_step(&mut self, params: &mut [T], grad: &[T], lr: T, weight_decay: T) {
        assert_eq!(params.len(), grad.len(), "parameter and gradient lengths differ");
        if self.m.len() != params.len() {
            self.m = vec![T::zero(); params.len()];
            self.v = vec![T::zero(); params.len()];
            self.v_max = vec![T::zero(); params.len()];
            self.t = 0;
        }
        self.t += 1;
        let one = T::one();
        let exponent = i32::try_from(self.t).unwrap_or(i32::MAX);
        let bias1 = one - self.beta1.powi(exponent);
        let bias2 = one - self.beta2.powi(exponent);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = self.beta1 * self.m[k] + (one - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (one - self.beta2) * g * g;
            if self.v[k] > self.v_max[k] {
                self.v_max[k] = self.v[k];
            }
            let m_hat = self.m[k] / bias1;
            let v_hat = self.v_max[k] / bias2;
            params[k] = params[k] + lr * m_hat / (v_hat.sqrt() + self.eps) - lr * weight_decay * params[k];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AmsGrad::<f64>::default();
        let mut p = vec![1.0, -2.0];
        opt.ascent_step(&mut p, &[0.5, -3.0], 0.1, 0.0);
        // bias-corrected first step is η·sign(g) up to eps
        assert!((p[0] - 1.1).abs() < 1e-7);
        assert!((p[1] + 2.1).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn maximizes_concave_quadratic() {
        let mut opt = AmsGrad::<f64>::default();
        let mut p = vec![0.0];
        for _ in 0..3000 {
            let g = -2.0 * (p[0] - 3.0);
            opt.ascent_step(&mut p, &[g], 0.01, 0.0);
        }
        assert!((p[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn second_moment_never_decreases() {
        let mut opt = AmsGrad::<f64>::default();
        let mut p = vec![0.0];
        opt.ascent_step(&mut p, &[10.0], 0.1, 0.0);
        let before = opt.v_max[0];
        opt.ascent_step(&mut p, &[0.0], 0.1, 0.0);
        assert!(opt.v_max[0] >= before);
        // the first moment still pushes upward after a zero gradient
        assert!(p[0] > 0.1);
    }

    #[test]
    fn decoupled_weight_decay_shrinks_without_gradient() {
        let mut opt = AmsGrad::<f64>::default();
        let mut p = vec![2.0];
        opt.ascent_step(&mut p, &[0.0], 0.1, 0.5);
        assert!((p[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn reset_clears_state() {
        let mut opt = AmsGrad::<f64>::default();
        let mut p = vec![0.0];
        opt.ascent_step(&mut p, &[1.0], 0.1, 0.0);
        opt.reset();
        assert_eq!(opt.steps(), 0);
        assert!(opt.moments_finite());
    }
}
