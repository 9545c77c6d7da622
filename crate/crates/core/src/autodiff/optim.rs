use std::collections::BTreeMap;

use super::graph::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with momentum and L2 weight decay.
///
/// Each step applies `v <- momentum * v + grad + weight_decay * w` and then
/// `w <- w - lr * v`. Velocities persist between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::usage(format!("momentum {momentum} outside [0, 1)")));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::usage(format!("weight decay {weight_decay} must be >= 0")));
        }
        Ok(SgdMomentum {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::usage(format!("learning rate {lr} must be finite and >= 0")));
        }
        for (name, w) in params.iter() {
            let g = grads.get(name)?;
            if g.shape() != w.shape() {
                return Err(Error::shape(
                    "sgd_momentum_step",
                    format!("{name}: parameter {:?} vs gradient {:?}", w.shape(), g.shape()),
                ));
            }
            if let Some(v) = self.velocity.get(name) {
                if v.len() != w.len() {
                    return Err(Error::shape("sgd_momentum_step", format!("{name}: stale velocity")));
                }
            }
        }
        for (name, w) in params.iter_mut() {
            let g = grads.get(name)?.data();
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, wi), gi) in v.iter_mut().zip(w.data_mut()).zip(g) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Velocity buffers as tensors shaped like their parameters.
    pub fn velocity(&self, params: &ParamStore) -> ParamStore {
        params
            .iter()
            .map(|(name, w)| {
                let data = self
                    .velocity
                    .get(name)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; w.len()]);
                (name.to_string(), Tensor::new(w.shape().to_vec(), data).expect("velocity shape"))
            })
            .collect()
    }

    pub fn set_velocity(&mut self, velocity: &ParamStore) {
        self.velocity = velocity
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w])).unwrap();
        s
    }

    #[test]
    fn plain_step_subtracts_gradient() {
        let mut p = store(1.0);
        let mut opt = SgdMomentum::new(0.0, 0.0).unwrap();
        opt.step(&mut p, &store(1.0), 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn momentum_accumulates_over_two_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut p = store(0.0);
        let mut opt = SgdMomentum::new(0.9, 0.0).unwrap();
        opt.step(&mut p, &store(g), lr).unwrap();
        let after_first = p.get("w").unwrap().data()[0];
        opt.step(&mut p, &store(g), lr).unwrap();
        let second_update = after_first - p.get("w").unwrap().data()[0];
        assert!((second_update - lr * 1.9 * g).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = store(0.7);
        let mut opt = SgdMomentum::new(0.9, 0.0).unwrap();
        for _ in 0..10 {
            opt.step(&mut p, &store(0.0), 0.5).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut p = store(2.0);
        let mut opt = SgdMomentum::new(0.0, 0.5).unwrap();
        opt.step(&mut p, &store(0.0), 0.1).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(1.0);
        let mut g = ParamStore::new();
        g.insert("w", Tensor::zeros(&[2])).unwrap();
        let mut opt = SgdMomentum::new(0.0, 0.0).unwrap();
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(Error::Shape { .. })));
    }
}
