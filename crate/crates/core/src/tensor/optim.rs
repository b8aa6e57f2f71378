use std::collections::BTreeMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Velocity buffers plus the hyperparameters of heavy-ball SGD.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty coefficient added to every gradient.
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor<F>>,
}

/// SGD with momentum, learning rate folded into the velocity:
/// `v <- momentum * v + lr * (g + weight_decay * w)`, `w <- w - v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum<F> {
    pub state: OptimizerState<F>,
}

impl<F: Float> SgdMomentum<F> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        SgdMomentum {
            state: OptimizerState { learning_rate, momentum, weight_decay: 0.0, velocity: BTreeMap::new() },
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.state.weight_decay = weight_decay;
        self
    }

    pub fn with_state(state: OptimizerState<F>) -> Self {
        SgdMomentum { state }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.state.learning_rate = lr;
    }

    pub fn learning_rate(&self) -> f64 {
        self.state.learning_rate
    }

    /// Update one named parameter in place. A missing velocity starts at zero.
    pub fn step(&mut self, name: &str, param: &mut Tensor<F>, grad: &Tensor<F>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{name}: param {:?} grad {:?}", param.shape(), grad.shape()),
            ));
        }
        let mu = F::of(self.state.momentum);
        let lr = F::of(self.state.learning_rate);
        let wd = F::of(self.state.weight_decay);
        let v = self
            .state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.shape().to_vec()));
        if v.shape() != param.shape() {
            return Err(Error::shape(
                "sgd_momentum_step",
                format!("{name}: velocity {:?} param {:?}", v.shape(), param.shape()),
            ));
        }
        for ((w, v), &g) in param.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
            *v = mu * *v + lr * (g + wd * *w);
            *w = *w - *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_plain_gradient_step() {
        let mut opt = SgdMomentum::<f64>::new(0.1, 0.9);
        let mut w = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let g = Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap();
        opt.step("w", &mut w, &g).unwrap();
        assert_eq!(w.data(), &[1.0 - 0.05, 2.0 + 0.1]);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut opt = SgdMomentum::<f64>::new(0.2, 0.0);
        let mut w = Tensor::from_f64(vec![1], &[0.0]).unwrap();
        let mut reference = 0.0;
        for g in [1.0, -3.0, 0.5, 2.0] {
            opt.step("w", &mut w, &Tensor::from_f64(vec![1], &[g]).unwrap()).unwrap();
            reference -= 0.2 * g;
            assert_eq!(w.data()[0], reference);
        }
    }

    #[test]
    fn two_step_recurrence() {
        // v1 = 0.1, w1 = -0.1; v2 = 0.09 + 0.1 = 0.19, w2 = -0.29
        let mut opt = SgdMomentum::<f64>::new(0.1, 0.9);
        let mut w = Tensor::zeros(vec![1]);
        let g = Tensor::ones(vec![1]);
        opt.step("w", &mut w, &g).unwrap();
        opt.step("w", &mut w, &g).unwrap();
        assert!((w.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_adds_l2_gradient() {
        let mut opt = SgdMomentum::<f64>::new(0.1, 0.9).with_weight_decay(0.5);
        let mut w = Tensor::from_f64(vec![1], &[2.0]).unwrap();
        opt.step("w", &mut w, &Tensor::zeros(vec![1])).unwrap();
        assert!((w.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = SgdMomentum::<f64>::new(0.1, 0.9);
        let mut w = Tensor::zeros(vec![2]);
        assert!(opt.step("w", &mut w, &Tensor::zeros(vec![3])).is_err());
    }
}
