use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, ParamId, ParameterSet, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam moments with decoupled weight decay:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Option<Vec<T>>>,
    v: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(ps: &ParameterSet<T>, config: AdamWConfig) -> Self {
        let zeros = |trainable: bool, n: usize| trainable.then(|| vec![T::zero(); n]);
        Self {
            config,
            step: 0,
            m: ps
                .iter()
                .map(|p| zeros(p.trainable, p.value.len()))
                .collect(),
            v: ps
                .iter()
                .map(|p| zeros(p.trainable, p.value.len()))
                .collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, ps: &mut ParameterSet<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if !grads.all_finite() {
            return Err(NnError::NonFinite {
                op: "adamw gradients",
            });
        }
        if grads.len() != ps.len() || self.m.len() != ps.len() {
            return Err(NnError::Shape {
                op: "adamw",
                detail: format!(
                    "{} params, {} grads, {} moments",
                    ps.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        let lr_t = T::from_f64(lr);
        let wd = T::from_f64(c.weight_decay);

        for i in 0..ps.len() {
            let id = ParamId(i);
            let (Some(m), Some(v), Some(g)) =
                (self.m[i].as_mut(), self.v[i].as_mut(), grads.get(id))
            else {
                continue;
            };
            let theta = ps.get_mut(id);
            if g.len() != theta.len() || m.len() != theta.len() {
                return Err(NnError::Shape {
                    op: "adamw",
                    detail: format!(
                        "parameter {i}: {} entries, gradient {}",
                        theta.len(),
                        g.len()
                    ),
                });
            }
            for j in 0..theta.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                let m_hat = m[j] * inv_bc1;
                let v_hat = v[j] * inv_bc2;
                theta[j] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * theta[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::{Init, Tensor};

    fn scalar_param(v: f64) -> ParameterSet<f64> {
        let mut ps = ParameterSet::new();
        ps.insert("theta", Tensor::new(vec![1], vec![v]).unwrap())
            .unwrap();
        ps
    }

    fn grads_of(ps: &ParameterSet<f64>, g: f64) -> Gradients<f64> {
        let mut gr = Gradients::for_params(ps);
        gr.slot_mut(ParamId(0)).unwrap()[0] = g;
        gr
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut ps = ParameterSet::<f64>::new();
        ps.init("w", vec![5], Init::TruncNormal(1.0), 3).unwrap();
        let before = ps.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamWState::new(&ps, cfg);
        let g = Gradients::for_params(&ps);
        for _ in 0..3 {
            opt.step(&mut ps, &g, 0.1).unwrap();
        }
        assert_eq!(ps, before);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let mut ps = scalar_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamWState::new(&ps, cfg);
        let g = grads_of(&ps, 1.0);
        opt.step(&mut ps, &g, 0.1).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.get(ParamId(0))[0] - want).abs() < 1e-15);
        assert!((ps.get(ParamId(0))[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn pure_decoupled_decay() {
        let mut ps = scalar_param(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamWState::new(&ps, cfg);
        let g = grads_of(&ps, 0.0);
        opt.step(&mut ps, &g, 0.1).unwrap();
        assert!((ps.get(ParamId(0))[0] - 0.999).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut ps = scalar_param(1.0);
        let mut opt = AdamWState::new(&ps, AdamWConfig::default());
        let g = grads_of(&ps, f64::NAN);
        assert!(opt.step(&mut ps, &g, 0.1).is_err());
        assert_eq!(ps.get(ParamId(0))[0], 1.0);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut ps = ParameterSet::<f64>::new();
        ps.init("a", vec![2], Init::Ones, 0).unwrap();
        ps.init("b", vec![2], Init::Ones, 0).unwrap();
        ps.iter_mut().next().unwrap().trainable = false;
        let mut opt = AdamWState::new(&ps, AdamWConfig::default());
        let mut g = Gradients::for_params(&ps);
        g.slot_mut(ParamId(1)).unwrap().fill(1.0);
        opt.step(&mut ps, &g, 0.1).unwrap();
        assert_eq!(ps.get(ParamId(0)), &[1.0, 1.0]);
        assert!(ps.get(ParamId(1))[0] < 1.0);
    }
}
