use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ParameterSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update from the gradients accumulated in `params`.
    ///
    /// Fails without touching any parameter if a gradient is non-finite.
    pub fn step(&mut self, params: &mut ParameterSet) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = &p.grad {
                if let Some(i) = g.values().iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!(
                            "gradient of {name}[{i}] = {} at step {}",
                            g.values()[i],
                            self.t + 1
                        ),
                    });
                }
            }
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for (name, p) in params.iter_mut() {
            let Some(g) = &p.grad else { continue };
            let n = g.len();
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; n]);
            for (((w, &gi), mi), vi) in p
                .value
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_set(x: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::vector(vec![x]));
        ps
    }

    fn set_grad(ps: &mut ParameterSet, g: f64) {
        ps.zero_grad();
        ps.accumulate_grad("x", &Tensor::vector(vec![g])).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut ps = scalar_set(0.75);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..50 {
            set_grad(&mut ps, 0.0);
            adam.step(&mut ps).unwrap();
        }
        assert_eq!(ps.value("x").unwrap().values(), &[0.75]);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut ps = scalar_set(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        let mut last = 0.0;
        for _ in 0..2000 {
            set_grad(&mut ps, 3.0);
            let before = ps.value("x").unwrap().values()[0];
            adam.step(&mut ps).unwrap();
            last = before - ps.value("x").unwrap().values()[0];
        }
        assert!((last - 1e-3).abs() < 1e-6, "last step {last}");
    }

    #[test]
    fn minimizes_square() {
        // Independent scalar simulation of f(x) = x², gradient 2x.
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(x.abs() < 0.1);

        let mut ps = scalar_set(1.0);
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..100 {
            let xv = ps.value("x").unwrap().values()[0];
            set_grad(&mut ps, 2.0 * xv);
            adam.step(&mut ps).unwrap();
        }
        let got = ps.value("x").unwrap().values()[0];
        assert!(got.abs() < 0.1);
        assert!((got - x).abs() < 1e-12, "{got} vs oracle {x}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut ps = scalar_set(1.0);
        set_grad(&mut ps, f64::NAN);
        let mut adam = Adam::new(AdamConfig::default());
        assert!(matches!(adam.step(&mut ps), Err(Error::NonFinite { .. })));
        assert_eq!(ps.value("x").unwrap().values(), &[1.0]);
    }
}
