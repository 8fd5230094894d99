//! Mean-reverting SDE `dx = θ_t (μ − x) dt + σ_t dw` on a discrete grid.
//!
//! With `σ_t² = 2λ²θ_t` the forward marginal is Gaussian:
//! `x_t | x_0 ~ N(μ + (x_0 − μ) e^{−θ̄_t}, λ²(1 − e^{−2θ̄_t}))`, where
//! `θ̄_t = Σ_{z≤t} θ_z`. Steps have unit length (`dt = 1`), so the step
//! integral `θ'_t = θ̄_t − θ̄_{t−1}` equals `θ_t`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Cosine,
}

/// Terminal cumulative rate: `e^{−θ̄_T} = 1e-4`.
pub fn terminal_theta_bar() -> f64 {
    1e4f64.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    steps: usize,
    lambda2: f64,
    kind: ScheduleKind,
    /// `theta[t - 1]` is `θ_t` for `t = 1..=T`.
    theta: Vec<f64>,
    sigma2: Vec<f64>,
    /// `theta_bar[t]` for `t = 0..=T`.
    theta_bar: Vec<f64>,
}

/// JSON form recorded in run reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleReport {
    #[serde(rename = "T")]
    pub steps: usize,
    pub lambda2: f64,
    pub kind: ScheduleKind,
    pub theta_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, lambda2: f64, kind: ScheduleKind) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return invalid("diffusion needs at least one step");
    }
    if !(lambda2 > 0.0 && lambda2.is_finite()) {
        return invalid(format!("lambda2 must be positive, got {lambda2}"));
    }
    let total = terminal_theta_bar();
    let theta_bar: Vec<f64> = match kind {
        ScheduleKind::Cosine => (0..=steps)
            .map(|t| total * (1.0 - (PI * t as f64 / steps as f64).cos()) / 2.0)
            .collect(),
    };
    let theta: Vec<f64> = theta_bar.windows(2).map(|w| w[1] - w[0]).collect();
    let sigma2 = theta.iter().map(|th| 2.0 * lambda2 * th).collect();
    Ok(DiffusionSchedule {
        steps,
        lambda2,
        kind,
        theta,
        sigma2,
        theta_bar,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        1.0
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return invalid(format!("step {t} outside 1..={}", self.steps));
        }
        Ok(())
    }

    fn check_time(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return invalid(format!("time {t} outside 0..={}", self.steps));
        }
        Ok(())
    }

    /// `θ_t`, `1 ≤ t ≤ T`.
    pub fn theta(&self, t: usize) -> f64 {
        self.theta[t - 1]
    }

    /// `σ_t²`, `1 ≤ t ≤ T`.
    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t - 1]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// `θ̄_t`, `0 ≤ t ≤ T`.
    pub fn theta_bar(&self, t: usize) -> f64 {
        self.theta_bar[t]
    }

    /// Marginal variance `v_t`.
    pub fn variance(&self, t: usize) -> f64 {
        self.lambda2 * (1.0 - (-2.0 * self.theta_bar[t]).exp())
    }

    pub fn report(&self) -> ScheduleReport {
        ScheduleReport {
            steps: self.steps,
            lambda2: self.lambda2,
            kind: self.kind,
            theta_bar: self.theta_bar.clone(),
        }
    }
}

fn gaussian<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `(m_t, v_t)` of `x_t | x_0`.
pub fn forward_marginal(x0: &Tensor, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<(Tensor, f64)> {
    sched.check_time(t)?;
    let decay = (-sched.theta_bar(t)).exp();
    let m = x0.zip_map(mu, |x, m| x * decay + m * (1.0 - decay))?;
    Ok((m, sched.variance(t)))
}

/// Draws `x_t ~ p(x_t | x_0)`.
pub fn forward_sample<R: Rng>(
    x0: &Tensor,
    mu: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (m, v) = forward_marginal(x0, mu, t, sched)?;
    let noise = gaussian(m.shape(), rng);
    m.zip_map(&noise, |a, e| a + v.sqrt() * e)
}

/// Mean decay `e^{−(θ̄_t − θ̄_s)}` and variance of `x_t | x_s`.
pub fn transition_moments(s: usize, t: usize, sched: &DiffusionSchedule) -> Result<(f64, f64)> {
    sched.check_time(t)?;
    if s >= t {
        return invalid(format!("transition needs s < t, got s={s} t={t}"));
    }
    let gap = sched.theta_bar(t) - sched.theta_bar(s);
    Ok(((-gap).exp(), sched.lambda2 * (1.0 - (-2.0 * gap).exp())))
}

/// Draws `x_t ~ p(x_t | x_s)` for `s < t`.
pub fn forward_transition<R: Rng>(
    x_s: &Tensor,
    mu: &Tensor,
    s: usize,
    t: usize,
    sched: &DiffusionSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (decay, var) = transition_moments(s, t, sched)?;
    let noise = gaussian(x_s.shape(), rng);
    let mean = x_s.zip_map(mu, |x, m| x * decay + m * (1.0 - decay))?;
    mean.zip_map(&noise, |a, e| a + var.sqrt() * e)
}

/// Reverse-step coefficients at step `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReverseCoeffs {
    pub g: f64,
    pub h: f64,
    pub theta_prime: f64,
    /// Weight on `x_t − μ` in the posterior mean, `G_t + θ'_t + 1`.
    pub coef_a: f64,
}

pub fn reverse_coeffs(t: usize, sched: &DiffusionSchedule) -> Result<ReverseCoeffs> {
    sched.check_step(t)?;
    let (tb, tb_prev) = (sched.theta_bar(t), sched.theta_bar(t - 1));
    let tp = tb - tb_prev;
    let denom = 1.0 - (-2.0 * tb).exp();
    let coef_a = (1.0 - (-2.0 * tb_prev).exp()) / denom * (-tp).exp();
    let h = (1.0 - (-2.0 * tp).exp()) / denom * (-tb_prev).exp();
    Ok(ReverseCoeffs {
        g: coef_a - tp - 1.0,
        h,
        theta_prime: tp,
        coef_a,
    })
}

/// `∇ log p(x_t | x_0) = −(x_t − m_t) / v_t`.
pub fn conditional_score(
    x_t: &Tensor,
    x0: &Tensor,
    mu: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let (m, v) = forward_marginal(x0, mu, t, sched)?;
    if v <= 0.0 {
        return Err(Error::Numerical(format!("marginal variance is zero at t={t}")));
    }
    x_t.zip_map(&m, |x, m| -(x - m) / v)
}

/// The score in the scale used by the clean-image extraction:
/// `(G_t x_t + H_t x_0 − (H_t + G_t) μ) / (σ_t² dt)`.
pub fn optimal_score(
    x_t: &Tensor,
    x0: &Tensor,
    mu: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let c = reverse_coeffs(t, sched)?;
    let denom = sched.sigma2(t) * sched.dt();
    let partial = x_t.zip_map(x0, |x, z| c.g * x + c.h * z)?;
    partial.zip_map(mu, |p, m| (p - (c.h + c.g) * m) / denom)
}

/// Per-step gap between one Euler–Maruyama step and the exact transition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDeviation {
    pub t: usize,
    /// `|(1 − θ'_t) − e^{−θ'_t}| / e^{−θ'_t}`: mean error per unit of `x − μ`.
    pub mean_rel: f64,
    /// `|σ_t² dt − λ²(1 − e^{−2θ'_t})| / λ²`: variance error on the stationary scale.
    pub var_rel: f64,
    /// Variance error relative to the exact step variance (first order in `θ'_t`).
    pub var_rel_exact: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DdpmReport {
    pub steps: Vec<StepDeviation>,
    pub max_mean_rel: f64,
    pub max_var_rel: f64,
    pub max_var_rel_exact: f64,
}

/// Compares `x_t ≈ x_{t−1} − θ'_t (x_{t−1} − μ) + σ_t √dt ε` with the exact
/// OU transition `t − 1 → t` at every step.
pub fn ddpm_correspondence_check(sched: &DiffusionSchedule) -> DdpmReport {
    let steps: Vec<StepDeviation> = (1..=sched.steps())
        .map(|t| {
            let tp = sched.theta_bar(t) - sched.theta_bar(t - 1);
            let exact_decay = (-tp).exp();
            let exact_var = sched.lambda2 * (1.0 - (-2.0 * tp).exp());
            let euler_var = sched.sigma2(t) * sched.dt();
            StepDeviation {
                t,
                mean_rel: ((1.0 - tp) - exact_decay).abs() / exact_decay,
                var_rel: (euler_var - exact_var).abs() / sched.lambda2,
                var_rel_exact: (euler_var - exact_var).abs() / exact_var,
            }
        })
        .collect();
    let max = |f: fn(&StepDeviation) -> f64| steps.iter().map(f).fold(0.0, f64::max);
    DdpmReport {
        max_mean_rel: max(|s| s.mean_rel),
        max_var_rel: max(|s| s.var_rel),
        max_var_rel_exact: max(|s| s.var_rel_exact),
        steps,
    }
}

/// Relative gap between the Euler and exact means of `x_t | x_{t−1}` for a
/// concrete state.
pub fn euler_mean_deviation(x_prev: &Tensor, mu: &Tensor, t: usize, sched: &DiffusionSchedule) -> Result<f64> {
    let (decay, _) = transition_moments(t - 1, t, sched)?;
    let tp = sched.theta(t);
    let euler = x_prev.zip_map(mu, |x, m| x - tp * (x - m))?;
    let exact = x_prev.zip_map(mu, |x, m| x * decay + m * (1.0 - decay))?;
    let disp = exact.sub(mu)?.norm_l2();
    Ok(euler.sub(&exact)?.norm_l2() / disp.max(f64::MIN_POSITIVE))
}
