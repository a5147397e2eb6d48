//! RAdam with decoupled weight decay and a triangular cyclic learning rate.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for RAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl RAdamConfig {
    /// Maximum length of the approximated simple moving average.
    pub fn rho_inf(&self) -> f64 {
        2.0 / (1.0 - self.beta2) - 1.0
    }

    /// Length of the approximated simple moving average at step `t >= 1`.
    pub fn rho(&self, t: u64) -> f64 {
        let b2t = self.beta2.powi(t as i32);
        self.rho_inf() - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }
}

/// Moment estimates and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct RAdam {
    pub config: RAdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// Which update branch a step took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateKind {
    Momentum,
    Rectified,
}

impl RAdam {
    pub fn new(config: RAdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. `grads` holds one gradient per parameter in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<UpdateKind> {
        if grads.len() != store.params().len() {
            return Err(Error::InvalidConfig(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.params().len()
            )));
        }
        for (p, g) in store.params().iter().zip(grads) {
            if g.len() != p.len() {
                return Err(Error::InvalidConfig(format!("gradient length mismatch for `{}`", p.name)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step;
        let bias1 = 1.0 - c.beta1.powi(t as i32);
        let bias2 = 1.0 - c.beta2.powi(t as i32);
        let rho_inf = c.rho_inf();
        let rho = c.rho(t);
        let rectifier = (rho > 4.0).then(|| {
            (((rho - 4.0) * (rho - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        });

        for (((p, g), m), v) in store
            .params_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.values.len() {
                let mut theta = p.values[i] as f64;
                if c.weight_decay != 0.0 {
                    theta -= lr * c.weight_decay * theta;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                theta -= match rectifier {
                    Some(r) => lr * r * m_hat * bias2.sqrt() / (v[i].sqrt() + c.eps),
                    None => lr * m_hat,
                };
                p.values[i] = theta as f32;
            }
        }
        Ok(if rectifier.is_some() {
            UpdateKind::Rectified
        } else {
            UpdateKind::Momentum
        })
    }
}

/// Triangular cyclic learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclicLr {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations.
    pub step_size: u64,
}

impl CyclicLr {
    pub fn new(base_lr: f64, max_lr: f64, step_size: u64) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr <= max_lr) || step_size == 0 {
            return Err(Error::InvalidConfig(format!(
                "cyclic lr needs 0 < base ({base_lr}) <= max ({max_lr}) and step_size >= 1"
            )));
        }
        Ok(Self {
            base_lr,
            max_lr,
            step_size,
        })
    }

    pub fn lr(&self, iteration: u64) -> f64 {
        let period = 2 * self.step_size;
        let pos = iteration % period;
        let x = if pos <= self.step_size {
            pos as f64 / self.step_size as f64
        } else {
            (period - pos) as f64 / self.step_size as f64
        };
        self.base_lr + (self.max_lr - self.base_lr) * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f32>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("w", &[n], values);
        s
    }

    #[test]
    fn first_step_takes_momentum_branch() {
        let cfg = RAdamConfig::default();
        // rho_1 = rho_inf - 2 beta2 / (1 - beta2) = 1999 - 1998 = 1
        assert!((cfg.rho(1) - 1.0).abs() < 1e-9);
        let mut store = store_with(vec![1.0, -2.0]);
        let mut opt = RAdam::new(RAdamConfig { weight_decay: 0.0, ..cfg }, &store);
        let kind = opt.step(&mut store, &[vec![0.5, -0.5]], 0.1).unwrap();
        assert_eq!(kind, UpdateKind::Momentum);
        // m_hat equals the gradient on step 1
        assert_eq!(store.params()[0].values, vec![0.95, -1.95]);
    }

    #[test]
    fn rectified_branch_starts_once_rho_exceeds_four() {
        let cfg = RAdamConfig::default();
        let first = (1..100).find(|&t| cfg.rho(t) > 4.0).unwrap();
        assert_eq!(first, 5);
        let mut store = store_with(vec![0.0]);
        let mut opt = RAdam::new(cfg, &store);
        let kinds: Vec<_> = (0..5)
            .map(|_| opt.step(&mut store, &[vec![1.0]], 1e-3).unwrap())
            .collect();
        assert!(kinds[..4].iter().all(|k| *k == UpdateKind::Momentum));
        assert_eq!(kinds[4], UpdateKind::Rectified);
    }

    #[test]
    fn zero_gradients_without_decay_leave_params_unchanged() {
        let mut store = store_with(vec![0.3, -1.25, 7.0]);
        let before = store.clone();
        let mut opt = RAdam::new(
            RAdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..20 {
            opt.step(&mut store, &[vec![0.0; 3]], 1e-2).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut store = store_with(vec![1.0]);
        let mut opt = RAdam::new(RAdamConfig::default(), &store);
        let err = opt.step(&mut store, &[vec![f64::NAN]], 1e-3).unwrap_err();
        assert_eq!(err, Error::NonFiniteGradient("w".into()));
    }

    #[test]
    fn triangular_schedule_hits_base_peak_base() {
        let s = CyclicLr::new(1e-4, 1e-3, 8).unwrap();
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(8), 1e-3);
        assert_eq!(s.lr(16), 1e-4);
        assert!((s.lr(4) - 5.5e-4).abs() < 1e-15);
        assert!((s.lr(12) - 5.5e-4).abs() < 1e-15);
        for it in 0..100 {
            let lr = s.lr(it);
            assert!((1e-4..=1e-3).contains(&lr));
        }
    }

    #[test]
    fn invalid_schedule_rejected() {
        assert!(CyclicLr::new(1e-3, 1e-4, 4).is_err());
        assert!(CyclicLr::new(1e-4, 1e-3, 0).is_err());
        assert!(CyclicLr::new(0.0, 1e-3, 4).is_err());
    }
}
