use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Gradients, Param, ParamId, Tensor};

/// SGD with classical momentum: v <- m*v + g, p <- p - lr*v.
#[derive(Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr < 0.0 {
            return Err(Error::InvalidInput("learning rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidInput("momentum must be in [0, 1)".into()));
        }
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    /// Adjust the learning rate mid-run (schedules); velocity is kept.
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one step to every unfrozen parameter in `params`.
    ///
    /// Missing gradient for an unfrozen parameter is an invalid state: it
    /// means the parameter never reached the loss on the last tape.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Param>,
        grads: &Gradients,
    ) -> Result<()> {
        for p in params {
            if !p.requires_grad {
                continue;
            }
            let g = grads.get(&p.id).ok_or_else(|| {
                Error::InvalidState(format!("no gradient for unfrozen parameter {}", p.id))
            })?;
            let v = self
                .velocity
                .entry(p.id.clone())
                .or_insert_with(|| Tensor::zeros(&p.value.shape));
            for i in 0..p.value.numel() {
                v.data[i] = self.momentum * v.data[i] + g.data[i];
                p.value.data[i] -= self.lr * v.data[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamId;

    fn param(vals: &[f64]) -> Param {
        Param::new(
            ParamId::new("p", "w"),
            Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap(),
        )
    }

    fn grads_for(p: &Param, g: &[f64]) -> Gradients {
        let mut gr = Gradients::default();
        gr.by_param.insert(
            p.id.clone(),
            Tensor::from_vec(&[g.len()], g.to_vec()).unwrap(),
        );
        gr
    }

    #[test]
    fn zero_momentum_is_plain_descent() {
        let mut p = param(&[1.0, -2.0]);
        let g = grads_for(&p, &[0.5, 0.25]);
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        opt.step(std::iter::once(&mut p), &g).unwrap();
        assert_eq!(p.value.data, vec![1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = param(&[3.0]);
        let g = grads_for(&p, &[0.0]);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(std::iter::once(&mut p), &g).unwrap();
        assert_eq!(p.value.data, vec![3.0]);
    }

    #[test]
    fn two_steps_with_momentum_follow_recurrence() {
        // constant grad g: update1 = lr*g, update2 = lr*(0.9*g + g) = 1.9*lr*g
        let mut p = param(&[0.0]);
        let g = grads_for(&p, &[1.0]);
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(std::iter::once(&mut p), &g).unwrap();
        opt.step(std::iter::once(&mut p), &g).unwrap();
        let expected = -0.1 * (1.0 + 1.9);
        assert!((p.value.data[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_param_is_skipped() {
        let mut p = param(&[1.0]);
        p.requires_grad = false;
        let g = Gradients::default();
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        opt.step(std::iter::once(&mut p), &g).unwrap();
        assert_eq!(p.value.data, vec![1.0]);
    }

    #[test]
    fn missing_gradient_is_invalid_state() {
        let mut p = param(&[1.0]);
        let g = Gradients::default();
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        assert!(opt.step(std::iter::once(&mut p), &g).is_err());
    }
}
