use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate to `min_lr` over `total_steps`.
    Cosine { total_steps: u64, min_lr: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine { total_steps, min_lr } => {
                let frac = (self.step as f64 / total_steps.max(1) as f64).min(1.0);
                min_lr + 0.5 * (self.config.lr - min_lr) * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// One decoupled-weight-decay Adam update of every parameter in `params`.
///
/// Fails before touching any parameter if a gradient is not finite.
pub fn adamw_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    for (name, e) in params.iter() {
        if !e.grad.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient for `{name}`")));
        }
    }
    let lr = state.current_lr();
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (name, e) in params.iter_mut() {
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(e.value.shape()));
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(e.value.shape()));
        let g = e.grad.data();
        let p = e.value.data_mut();
        for i in 0..p.len() {
            let mi = &mut m.data_mut()[i];
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * g[i];
            let vi = &mut v.data_mut()[i];
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * g[i] * g[i];
            let mhat = m.data()[i] / bc1;
            let vhat = v.data()[i] / bc2;
            p[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![v])).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore, g: f64) {
        s.zero_grad();
        s.accumulate_grad("p", &Tensor::from_vec(vec![g])).unwrap();
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.25);
        let mut st = OptimizerState::new(AdamWConfig::default());
        for _ in 0..10 {
            set_grad(&mut s, 0.0);
            adamw_step(&mut s, &mut st).unwrap();
        }
        assert_eq!(s.value("p").unwrap().item(), 1.25);
    }

    #[test]
    fn moves_against_constant_gradient() {
        for g in [0.3, -2.0] {
            let mut s = scalar_store(0.0);
            let mut st = OptimizerState::new(AdamWConfig { lr: 1e-2, ..Default::default() });
            for _ in 0..50 {
                set_grad(&mut s, g);
                adamw_step(&mut s, &mut st).unwrap();
            }
            let p = s.value("p").unwrap().item();
            assert!(p * g < 0.0, "g={g} p={p}");
        }
    }

    fn bowl(start: f64, steps: usize) -> f64 {
        // minimise (p - 3)^2
        let mut s = scalar_store(start);
        let mut st = OptimizerState::new(AdamWConfig { lr: 1e-2, ..Default::default() });
        for _ in 0..steps {
            let p = s.value("p").unwrap().item();
            set_grad(&mut s, 2.0 * (p - 3.0));
            adamw_step(&mut s, &mut st).unwrap();
        }
        s.value("p").unwrap().item()
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        let p = bowl(1.0, 500);
        assert!((p - 3.0).abs() < 0.1, "p={p}");
    }

    #[test]
    fn matches_reference_adamw_trajectory() {
        // torch.optim.AdamW(lr=1e-2, weight_decay=0), float64, 500 steps from 0
        assert!((bowl(0.0, 500) - 2.8070188741156334).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_fails_fast() {
        let mut s = scalar_store(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default());
        set_grad(&mut s, f64::NAN);
        assert!(adamw_step(&mut s, &mut st).is_err());
        assert_eq!(s.value("p").unwrap().item(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_schedule_anneals() {
        let cfg = AdamWConfig {
            lr: 1.0,
            schedule: LrSchedule::Cosine { total_steps: 10, min_lr: 0.0 },
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg);
        assert_eq!(st.current_lr(), 1.0);
        st.step = 5;
        assert!((st.current_lr() - 0.5).abs() < 1e-12);
        st.step = 10;
        assert!(st.current_lr().abs() < 1e-12);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut s = scalar_store(0.5);
            let mut st = OptimizerState::new(AdamWConfig { weight_decay: 0.01, ..Default::default() });
            let mut traj = Vec::new();
            for i in 0..20 {
                set_grad(&mut s, (i as f64).sin());
                adamw_step(&mut s, &mut st).unwrap();
                traj.push(s.value("p").unwrap().item().to_bits());
            }
            traj
        };
        assert_eq!(run(), run());
    }
}
