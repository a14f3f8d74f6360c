use crate::error::{bail, Result};

use super::{Real, Tensor};

/// Adam hyperparameters. Weight decay is decoupled: `p <- p - lr*wd*p`
/// happens before the moment update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamState<T> {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamState { config, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.v
    }

    /// One bias-corrected update of every parameter in place.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            bail!(Dimension, "adam tracks {} tensors, got {} params / {} grads", self.m.len(), params.len(), grads.len());
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                bail!(Dimension, "adam shape mismatch: param {:?}, grad {:?}, state {:?}", p.shape(), g.shape(), m.shape());
            }
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (lr, b1, b2, eps, wd) =
            (T::from_f64(c.lr), T::from_f64(c.beta1), T::from_f64(c.beta2), T::from_f64(c.eps), T::from_f64(c.weight_decay));
        let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
        let one = T::one();
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                if wd != T::zero() {
                    pd[i] = pd[i] - lr * wd * pd[i];
                }
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig { weight_decay: wd, ..AdamConfig::default() }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut st = AdamState::new(cfg(0.0), &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() + 1e-4 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_without_decay() {
        let mut p = Tensor::<f32>::full([2, 1, 1, 1], 0.3);
        let g = Tensor::zeros([2, 1, 1, 1]);
        let mut st = AdamState::new(cfg(0.0), &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.data().iter().all(|&v| v == 0.3));
        assert!(st.second_moments()[0].data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn descends_abs_objective_monotonically() {
        let c = 0.01;
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::new(cfg(0.0), &[&p]);
        let mut last = (p.item() - c).abs();
        for _ in 0..10 {
            let g = Tensor::scalar((p.item() - c).signum());
            st.step(&mut [&mut p], &[&g]).unwrap();
            let now = (p.item() - c).abs();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn decoupled_decay_shrinks_before_update() {
        let mut p = Tensor::<f64>::scalar(2.0);
        let g = Tensor::scalar(0.0);
        let mut st = AdamState::new(AdamConfig { lr: 0.1, weight_decay: 0.5, ..AdamConfig::default() }, &[&p]);
        st.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f32>::scalar(0.0);
        let g = Tensor::zeros([2, 1, 1, 1]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(st.step(&mut [&mut p], &[&g]).is_err());
    }
}
