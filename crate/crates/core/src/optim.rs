//! Adam and plain SGD with coupled L2 weight decay, plus global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Hyperparameters of one optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay,
        }
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Mutable optimizer state. Adam keeps first/second moments per parameter
/// name; SGD keeps none.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments<T>>,
}

/// One parameter update request.
pub struct Update<'a, T> {
    pub name: &'a str,
    pub param: &'a mut Tensor<T>,
    pub grad: &'a [T],
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one descent step to every parameter in `updates`.
    ///
    /// Gradients are checked for NaN/Inf before any parameter is touched.
    pub fn step(&mut self, updates: &mut [Update<'_, T>]) -> Result<()> {
        for u in updates.iter() {
            if u.grad.len() != u.param.len() {
                return Err(Error::shape("optimizer_step", u.param.shape(), &[u.grad.len()]));
            }
            if u.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(u.name.to_string()));
            }
        }
        self.step += 1;
        let lr = T::lit(self.config.learning_rate);
        let l2 = T::lit(self.config.weight_decay);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for u in updates.iter_mut() {
                    for (p, &g) in u.param.data_mut().iter_mut().zip(u.grad) {
                        *p -= lr * (g + l2 * *p);
                    }
                }
            }
            OptimizerKind::Adam => {
                let b1 = T::lit(ADAM_BETA1);
                let b2 = T::lit(ADAM_BETA2);
                let eps = T::lit(ADAM_EPS);
                let t = self.step as i32;
                let c1 = T::one() - T::lit(ADAM_BETA1.powi(t));
                let c2 = T::one() - T::lit(ADAM_BETA2.powi(t));
                for u in updates.iter_mut() {
                    let n = u.param.len();
                    let mom = self.moments.entry(u.name.to_string()).or_insert_with(|| Moments {
                        m: vec![T::zero(); n],
                        v: vec![T::zero(); n],
                    });
                    if mom.m.len() != n {
                        return Err(Error::shape("adam moments", u.param.shape(), &[mom.m.len()]));
                    }
                    let params = u.param.data_mut();
                    for i in 0..n {
                        let g = u.grad[i] + l2 * params[i];
                        mom.m[i] = b1 * mom.m[i] + (T::one() - b1) * g;
                        mom.v[i] = b2 * mom.v[i] + (T::one() - b2) * g * g;
                        let m_hat = mom.m[i] / c1;
                        let v_hat = mom.v[i] / c2;
                        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let scale = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Tensor<f64> {
        Tensor::new(vec![1], vec![x]).unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut p = scalar_param(1.0);
        opt.step(&mut [Update {
            name: "p",
            param: &mut p,
            grad: &[2.0],
        }])
        .unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
        assert_eq!(opt.step, 1);
        assert!(opt.moments.is_empty());
    }

    #[test]
    fn sgd_converges_on_square() {
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut p = scalar_param(1.0);
        for _ in 0..200 {
            let g = 2.0 * p.item();
            opt.step(&mut [Update {
                name: "x",
                param: &mut p,
                grad: &[g],
            }])
            .unwrap();
        }
        // x_{n+1} = 0.8 x_n, so |x_200| = 0.8^200 ≈ 4e-20
        assert!(p.item().abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_is_sign_scaled() {
        for g in [3.0, -0.25, 1e-3] {
            let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01, 0.0));
            let mut p = scalar_param(0.5);
            opt.step(&mut [Update {
                name: "p",
                param: &mut p,
                grad: &[g],
            }])
            .unwrap();
            let expected = 0.5 - 0.01 * g / (g.abs() + ADAM_EPS);
            assert!((p.item() - expected).abs() < 1e-12, "g={g}");
            assert_eq!(opt.moments["p"].m.len(), 1);
        }
    }

    #[test]
    fn coupled_weight_decay_enters_gradient() {
        let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.5, 0.1));
        let mut p = scalar_param(2.0);
        opt.step(&mut [Update {
            name: "p",
            param: &mut p,
            grad: &[0.0],
        }])
        .unwrap();
        assert!((p.item() - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01, 0.0));
        let mut p = scalar_param(0.5);
        let err = opt
            .step(&mut [Update {
                name: "decoder.weight",
                param: &mut p,
                grad: &[f64::NAN],
            }])
            .unwrap_err();
        assert!(err.to_string().contains("decoder.weight"));
        assert_eq!(opt.step, 0);
        assert_eq!(p.item(), 0.5);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut grads = vec![vec![3.0f64, 0.0], vec![4.0]];
        let before = clip_global_norm(&mut grads, 1.0);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((grads[0][0] - 0.6).abs() < 1e-12);
        assert!((grads[1][0] - 0.8).abs() < 1e-12);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
