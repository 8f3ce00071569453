//! Adam optimizer with bias correction.

use crate::Scalar;
use ndarray::ArrayD;

/// Adam state for one parameter list. Moment buffers are allocated on the
/// first step and keyed by position, so the caller must pass parameters in
/// the same order every step.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: F, beta1: F, beta2: F, eps: F) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update to every (parameter, gradient) pair. The pair order
    /// must be stable across steps.
    pub fn step<'a, 'b, I>(&mut self, pairs: I)
    where
        I: IntoIterator<Item = (&'a mut ArrayD<F>, &'b ArrayD<F>)>,
        F: 'b,
    {
        self.t += 1;
        let t = self.t as i32;
        let corr1 = F::one() - self.beta1.powi(t);
        let corr2 = F::one() - self.beta2.powi(t);
        let one = F::one();
        let mut count = 0usize;
        for (i, (param, grad)) in pairs.into_iter().enumerate() {
            assert_eq!(
                param.shape(),
                grad.shape(),
                "adam: parameter/gradient shape mismatch at slot {i}"
            );
            if self.m.len() <= i {
                self.m.push(ArrayD::zeros(param.raw_dim()));
                self.v.push(ArrayD::zeros(param.raw_dim()));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let m_hat = *m / corr1;
                    let v_hat = *v / corr2;
                    *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
            count += 1;
        }
        debug_assert!(
            self.m.len() == count,
            "adam: parameter count changed between steps"
        );
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Moment buffers, first order then second order, in slot order.
    pub fn moments(&self) -> (&[ArrayD<F>], &[ArrayD<F>]) {
        (&self.m, &self.v)
    }

    /// Restore a previously captured state.
    pub fn set_state(&mut self, t: u64, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        assert_eq!(m.len(), v.len(), "adam: moment list length mismatch");
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn first_step_moves_by_lr_in_gradient_direction() {
        // With bias correction the first update is exactly lr * sign(g).
        let mut opt = Adam::<f64>::new(0.1, 0.9, 0.999, 0.0);
        let mut p = arr1(&[1.0, -2.0]).into_dyn();
        let g = arr1(&[0.5, -3.0]).into_dyn();
        opt.step([(&mut p, &g)]);
        assert!((p[[0]] - 0.9).abs() < 1e-12);
        assert!((p[[1]] + 1.9).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut opt = Adam::<f32>::new(0.0, 0.5, 0.999, 1e-8);
        let mut p = arr1(&[0.25f32, -1.5, 3.0e-7]).into_dyn();
        let before = p.clone();
        let g = arr1(&[1.0f32, -2.0, 0.001]).into_dyn();
        for _ in 0..5 {
            opt.step([(&mut p, &g)]);
        }
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
