use serde::{Deserialize, Serialize};

use super::model::{Params, TinyLM};
use crate::error::{Error, Result};

/// Momentum SGD: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Option<Params>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(Self {
            momentum,
            velocity: None,
        })
    }

    pub fn step(&mut self, model: &mut TinyLM, grads: &Params, lr: f64) -> Result<()> {
        if !model.params().same_shape(grads) {
            return Err(Error::ShapeMismatch("gradient shapes differ from parameters".into()));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient (training diverged)".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and nonnegative"));
        }
        let v = self.velocity.get_or_insert_with(|| Params::zeros_like(grads));
        let mu = self.momentum;
        for ((w, vel), g) in model
            .params_mut()
            .tensors_mut()
            .into_iter()
            .zip(v.tensors_mut())
            .zip(grads.tensors())
        {
            for ((wi, vi), &gi) in w.iter_mut().zip(vel.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One stateless momentum step; returns the updated model.
pub fn sgd_step(model: &TinyLM, grads: &Params, lr: f64, momentum: f64, velocity: &mut Option<Params>) -> Result<TinyLM> {
    let mut opt = Sgd {
        momentum,
        velocity: velocity.take(),
    };
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::invalid("momentum must lie in [0, 1)"));
    }
    let mut next = model.clone();
    opt.step(&mut next, grads, lr)?;
    *velocity = opt.velocity;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr: f64 },
    /// Cosine decay from `lr` to `min_lr` over `total_steps`.
    Cosine { lr: f64, min_lr: f64, total_steps: usize },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { lr, min_lr, total_steps } => {
                if total_steps == 0 {
                    return lr;
                }
                let frac = (step.min(total_steps) as f64) / total_steps as f64;
                min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::TokenizerSpec;

    fn model() -> TinyLM {
        TinyLM::new(TokenizerSpec::char_level("ab").unwrap(), 2, 2, 3, 1).unwrap()
    }

    fn grads_like(m: &TinyLM, value: f64) -> Params {
        let mut g = Params::zeros_like(m.params());
        g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = value));
        g
    }

    #[test]
    fn zero_lr_is_identity() {
        let m = model();
        let next = sgd_step(&m, &grads_like(&m, 1.0), 0.0, 0.9, &mut None).unwrap();
        assert_eq!(next.params(), m.params());
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let m = model();
        let g = grads_like(&m, 0.5);
        let next = sgd_step(&m, &g, 0.1, 0.0, &mut None).unwrap();
        for (a, b) in next.params().flat().iter().zip(m.params().flat()) {
            assert_eq!(*a, b - 0.1 * 0.5);
        }
    }

    #[test]
    fn descends_a_quadratic() {
        // f(w) = Σ w², ∇f = 2w
        let m = model();
        let f = |p: &Params| p.flat().iter().map(|w| w * w).sum::<f64>();
        let mut g = m.params().clone();
        g.scale(2.0);
        let next = sgd_step(&m, &g, 0.01, 0.0, &mut None).unwrap();
        assert!(f(next.params()) < f(m.params()));
    }

    #[test]
    fn momentum_accumulates() {
        let m = model();
        let g = grads_like(&m, 1.0);
        let mut vel = None;
        let m1 = sgd_step(&m, &g, 0.1, 0.5, &mut vel).unwrap();
        let m2 = sgd_step(&m1, &g, 0.1, 0.5, &mut vel).unwrap();
        let w0 = m.params().b_out[0];
        assert!((m2.params().b_out[0] - (w0 - 0.1 - 0.15)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let m = model();
        let g = grads_like(&m, f64::NAN);
        assert!(matches!(sgd_step(&m, &g, 0.1, 0.0, &mut None), Err(Error::NonFinite(_))));
        assert!(Sgd::new(1.0).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine {
            lr: 1.0,
            min_lr: 0.1,
            total_steps: 10,
        };
        assert!((s.at(0) - 1.0).abs() < 1e-12);
        assert!((s.at(10) - 0.1).abs() < 1e-12);
        assert!((s.at(5) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_norm() {
        let m = model();
        let mut g = grads_like(&m, 10.0);
        let before = clip_grad_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.l2_norm() - 1.0).abs() < 1e-12);
    }
}
