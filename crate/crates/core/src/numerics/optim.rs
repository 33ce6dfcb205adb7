//! Momentum SGD with L2 regularization and step learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::RealArray;
use super::params::ParamStore;
use super::tape::Gradients;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub velocities: BTreeMap<String, RealArray>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl OptimizerState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        decay_every: u64,
        decay_factor: f64,
    ) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Invalid(format!("learning rate {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Invalid(format!("momentum {momentum} outside [0,1)")));
        }
        if weight_decay < 0.0 || decay_every == 0 || decay_factor <= 0.0 {
            return Err(Error::Invalid(
                "weight decay must be >= 0, decay_every > 0, decay_factor > 0".into(),
            ));
        }
        Ok(Self {
            velocities: BTreeMap::new(),
            learning_rate,
            momentum,
            weight_decay,
            step_count: 0,
            decay_every,
            decay_factor,
        })
    }

    pub fn effective_lr(&self) -> f64 {
        let drops = (self.step_count / self.decay_every) as i32;
        self.learning_rate * self.decay_factor.powi(drops)
    }
}

/// One update of every trainable parameter:
/// `v <- momentum * v + (grad + weight_decay * p)`, `p <- p - lr * v`.
/// Trainable parameters without a gradient entry are treated as having a
/// zero gradient.
pub fn sgd_step(params: &mut ParamStore, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: param {:?} grad {:?}", p.shape(), g.shape()),
            ));
        }
        g.ensure_finite("sgd_step (gradient)")?;
    }
    let lr = state.effective_lr();
    for name in params.trainable() {
        let p = params.get_mut(&name)?;
        let v = state
            .velocities
            .entry(name.clone())
            .or_insert_with(|| RealArray::zeros(p.shape()));
        if v.shape() != p.shape() {
            return Err(Error::shape("sgd_step", format!("{name}: stale velocity shape")));
        }
        let g = grads.get(&name);
        for (i, (pv, vv)) in p.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            *vv = state.momentum * *vv + (gi + state.weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    state.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(p: f64, g: f64) -> (ParamStore, Gradients) {
        let mut params = ParamStore::new();
        params.insert("p", RealArray::scalar(p).with_grad(true));
        let mut grads = Gradients::new();
        grads.insert("p".into(), RealArray::scalar(g));
        (params, grads)
    }

    #[test]
    fn hand_evaluated_momentum_step() {
        let (mut p, g) = single(1.0, 0.5);
        let mut s = OptimizerState::new(0.1, 0.9, 0.0, 4000, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((s.velocities["p"].item() - 0.5).abs() < 1e-15);
        assert!((p.get("p").unwrap().item() - 0.95).abs() < 1e-15);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let (mut p, g) = single(1.0, 0.0);
        let mut s = OptimizerState::new(0.1, 0.9, 0.0, 10, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn l2_term_enters_velocity() {
        let (mut p, g) = single(2.0, 0.0);
        let mut s = OptimizerState::new(0.1, 0.0, 0.1, 10, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert!((s.velocities["p"].item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn step_decay_schedule() {
        let mut s = OptimizerState::new(0.1, 0.9, 0.0, 4000, 0.1).unwrap();
        s.step_count = 3999;
        assert_eq!(s.effective_lr(), 0.1);
        s.step_count = 4000;
        assert!((s.effective_lr() - 0.01).abs() < 1e-15);
        s.step_count = 8001;
        assert!((s.effective_lr() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_and_errors() {
        let (mut p, mut g) = single(1.0, 0.5);
        p.get_mut("p").unwrap().requires_grad = false;
        let mut s = OptimizerState::new(0.1, 0.9, 0.0, 10, 0.1).unwrap();
        sgd_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p.get("p").unwrap().item(), 1.0);

        g.insert("p".into(), RealArray::zeros(&[2, 1]));
        assert!(sgd_step(&mut p, &g, &mut s).is_err());
        g.insert("p".into(), RealArray::scalar(f64::NAN));
        assert!(sgd_step(&mut p, &g, &mut s).is_err());
        assert!(OptimizerState::new(0.1, 1.0, 0.0, 10, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn plain_gradient_descent_without_momentum(p0 in -10.0f64..10.0, g0 in -10.0f64..10.0,
                                                    lr in 0.0f64..1.0) {
            let (mut p, g) = single(p0, g0);
            let mut s = OptimizerState::new(lr, 0.0, 0.0, 10, 0.1).unwrap();
            sgd_step(&mut p, &g, &mut s).unwrap();
            prop_assert_eq!(p.get("p").unwrap().item(), p0 - lr * (g0 + 0.0 * p0));
        }
    }
}
