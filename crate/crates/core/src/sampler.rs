//! Reverse sampler with range-space rectification, time travel and
//! sample averaging.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::mrsde::{forward_transition, reverse_coeffs, DiffusionSchedule};
use crate::numerics::Tensor;
use crate::pinv::Operator;
use crate::score::ScoreFunction;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    /// `α` in `Γ_t = clamp(α σ_t √dt / H_t, 0, 1)`.
    pub rescale_alpha: f64,
    /// Rectify iff `t mod β ≠ 0`; `β = 1` never rectifies.
    pub skip_beta: usize,
    pub travel_l: usize,
    pub travel_r: usize,
    pub sa_count: usize,
    pub seed: u64,
    /// Clip range applied to every `x_{0|t}` estimate before rectification.
    #[serde(default)]
    pub clip_x0: Option<[f64; 2]>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            rescale_alpha: 0.5,
            skip_beta: 3,
            travel_l: 4,
            travel_r: 1,
            sa_count: 1,
            seed: 0,
            clip_x0: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &DiffusionSchedule) -> Result<()> {
        if self.steps != sched.steps() {
            return invalid(format!("sampler T={} but schedule has T={}", self.steps, sched.steps()));
        }
        if self.skip_beta == 0 || self.travel_l == 0 || self.travel_r == 0 || self.sa_count == 0 {
            return invalid("skip_beta, travel_l, travel_r and sa_count must be >= 1");
        }
        if !(self.rescale_alpha >= 0.0) || !self.rescale_alpha.is_finite() {
            return invalid(format!("rescale_alpha must be finite and >= 0, got {}", self.rescale_alpha));
        }
        if let Some([lo, hi]) = self.clip_x0 {
            if !(lo < hi) {
                return invalid(format!("clip_x0 range [{lo}, {hi}] is empty"));
            }
        }
        Ok(())
    }

    /// Copy without rectification.
    pub fn unrectified(&self) -> Self {
        Self { skip_beta: 1, ..*self }
    }
}

/// Total step count `T + 2 l (r − 1) ⌊(T − 1) / l⌋ + 1`.
pub fn total_iterations(steps: usize, travel_l: usize, travel_r: usize) -> usize {
    let jumps = steps.saturating_sub(1) / travel_l.max(1);
    steps + 2 * travel_l * travel_r.saturating_sub(1) * jumps + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Draw of `x_T`.
    Init,
    Reverse,
    /// One-step forward re-noising during a time-travel jump.
    Travel,
}

impl StepKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Init => "init",
            Self::Reverse => "reverse",
            Self::Travel => "travel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub kind: StepKind,
    /// `‖A x̂_{0|t} − y‖₂` of the estimate fed to the update (reverse steps
    /// with a measurement only).
    pub consistency_error: Option<f64>,
    /// The same before rectification.
    pub raw_consistency_error: Option<f64>,
    pub gamma: f64,
    pub rectified: bool,
}

impl TraceRecord {
    fn plain(t: usize, kind: StepKind) -> Self {
        Self {
            t,
            kind,
            consistency_error: None,
            raw_consistency_error: None,
            gamma: 0.0,
            rectified: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleTrace {
    pub seed: u64,
    pub records: Vec<TraceRecord>,
}

impl SampleTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Consistency error of the last reverse step.
    pub fn final_consistency(&self) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.kind == StepKind::Reverse)
            .and_then(|r| r.consistency_error)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,t,kind,consistency_error,raw_consistency_error,gamma,rectified\n");
        let opt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        for (i, r) in self.records.iter().enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{:e},{}",
                r.t,
                r.kind.as_str(),
                opt(r.consistency_error),
                opt(r.raw_consistency_error),
                r.gamma,
                r.rectified
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Clean-image estimate from a score in the extraction scale:
/// `−(G/H) x_t + (σ²/H) s dt + (1 + G/H) μ`.
pub fn extract_x0(x_t: &Tensor, mu: &Tensor, t: usize, score: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    let c = reverse_coeffs(t, sched)?;
    if c.h == 0.0 {
        return Err(Error::Numerical(format!("H_t is zero at t={t}")));
    }
    let (a, b, m) = (-c.g / c.h, sched.sigma2(t) * sched.dt() / c.h, 1.0 + c.g / c.h);
    let partial = x_t.zip_map(score, |x, s| a * x + b * s)?;
    partial.zip_map(mu, |p, u| p + m * u)
}

/// Converts a marginal score `∇ log p_t(x_t)` to the extraction scale via
/// the posterior mean `E[x_0 | x_t] = μ + (x_t − μ + v_t s) e^{θ̄_t}`.
pub fn marginal_to_extraction_score(
    x_t: &Tensor,
    mu: &Tensor,
    t: usize,
    marginal: &Tensor,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let c = reverse_coeffs(t, sched)?;
    let (v, grow) = (sched.variance(t), sched.theta_bar(t).exp());
    let denom = sched.sigma2(t) * sched.dt();
    let x0 = x_t
        .zip_map(marginal, |x, s| x + v * s)?
        .zip_map(mu, |d, u| u + (d - u) * grow)?;
    let partial = x_t.zip_map(&x0, |x, z| c.g * x + c.h * z)?;
    partial.zip_map(mu, |p, u| (p - (c.h + c.g) * u) / denom)
}

/// `x_{0|t}` from a score model.
pub fn estimate_x0(
    x_t: &Tensor,
    mu: &Tensor,
    t: usize,
    score: &dyn ScoreFunction,
    sched: &DiffusionSchedule,
) -> Result<Tensor> {
    let s = score.evaluate(x_t, mu, t, sched)?;
    let s = marginal_to_extraction_score(x_t, mu, t, &s, sched)?;
    extract_x0(x_t, mu, t, &s, sched)
}

fn gaussian(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

/// `x_{t−1} = A_t (x_t − μ) + H_t (x̂_0 − μ) + μ + σ_t √dt ε`. Without an
/// rng the noise is omitted; at `t = 1` the result is `x̂_0`.
pub fn reverse_step<R: Rng>(
    x_t: &Tensor,
    x0_hat: &Tensor,
    mu: &Tensor,
    t: usize,
    sched: &DiffusionSchedule,
    rng: Option<&mut R>,
) -> Result<Tensor> {
    let c = reverse_coeffs(t, sched)?;
    x_t.check_same_shape(x0_hat, "clean estimate")?;
    x_t.check_same_shape(mu, "conditioning image")?;
    if t == 1 {
        return Ok(x0_hat.clone());
    }
    let mut mean = Tensor::zeros(x_t.shape());
    for (((o, &x), &z), &u) in mean.data_mut().iter_mut().zip(x_t.data()).zip(x0_hat.data()).zip(mu.data()) {
        *o = c.coef_a * (x - u) + c.h * (z - u) + u;
    }
    match rng {
        Some(rng) => {
            let sd = sched.sigma(t) * sched.dt().sqrt();
            let noise = gaussian(mean.shape(), rng);
            mean.zip_map(&noise, |m, e| m + sd * e)
        }
        None => Ok(mean),
    }
}

/// Rectification strength `Γ_t` for step `t`, zero on skipped steps.
pub fn rectification_gamma(t: usize, sched: &DiffusionSchedule, cfg: &SamplerConfig) -> Result<f64> {
    if t % cfg.skip_beta == 0 {
        return Ok(0.0);
    }
    let c = reverse_coeffs(t, sched)?;
    Ok((cfg.rescale_alpha * sched.sigma(t) * sched.dt().sqrt() / c.h).clamp(0.0, 1.0))
}

/// Measurement operator and observations for guided sampling.
#[derive(Clone, Copy)]
pub struct Guidance<'a> {
    pub op: &'a dyn Operator,
    pub y: &'a [Tensor],
}

struct Chains<'a> {
    mu: &'a [Tensor],
    x: Vec<Tensor>,
    rngs: Vec<ChaCha8Rng>,
    traces: Vec<SampleTrace>,
    guidance: Option<Guidance<'a>>,
    pinv_y: Vec<Tensor>,
}

impl Chains<'_> {
    fn check(&self, t: usize) -> Result<()> {
        for (i, x) in self.x.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::SamplingAborted {
                    step: t,
                    trace: Box::new(self.traces[i].clone()),
                });
            }
        }
        Ok(())
    }

    fn consistency(&self, x: &[Tensor]) -> Result<Option<Vec<f64>>> {
        let Some(g) = self.guidance else { return Ok(None) };
        let ax = g.op.forward_many(x)?;
        ax.iter()
            .zip(g.y)
            .map(|(a, y)| Ok(a.sub(y)?.norm_l2()))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn reverse(&mut self, t: usize, score: &dyn ScoreFunction, sched: &DiffusionSchedule, cfg: &SamplerConfig) -> Result<()> {
        let s = score.evaluate_many(&self.x, self.mu, t, sched)?;
        let mut x0 = Vec::with_capacity(self.x.len());
        for ((x, m), s) in self.x.iter().zip(self.mu).zip(&s) {
            let s = marginal_to_extraction_score(x, m, t, s, sched)?;
            let z = extract_x0(x, m, t, &s, sched)?;
            x0.push(match cfg.clip_x0 {
                Some([lo, hi]) => z.map(|v| v.clamp(lo, hi)),
                None => z,
            });
        }
        let raw = self.consistency(&x0)?;
        let gamma = if self.guidance.is_some() {
            rectification_gamma(t, sched, cfg)?
        } else {
            0.0
        };
        let rectified = gamma > 0.0;
        if rectified {
            let op = self.guidance.expect("guidance present").op;
            let back = op.pinv_many(&op.forward_many(&x0)?)?;
            for ((z, b), py) in x0.iter_mut().zip(&back).zip(&self.pinv_y) {
                let corr = b.sub(py)?;
                *z = z.zip_map(&corr, |a, c| a - gamma * c)?;
            }
        }
        let fixed = if rectified { self.consistency(&x0)? } else { raw.clone() };
        for i in 0..self.x.len() {
            self.x[i] = reverse_step(&self.x[i], &x0[i], &self.mu[i], t, sched, Some(&mut self.rngs[i]))?;
            self.traces[i].records.push(TraceRecord {
                t,
                kind: StepKind::Reverse,
                consistency_error: fixed.as_ref().map(|v| v[i]),
                raw_consistency_error: raw.as_ref().map(|v| v[i]),
                gamma,
                rectified,
            });
        }
        self.check(t)
    }

    fn renoise(&mut self, s: usize, sched: &DiffusionSchedule) -> Result<()> {
        for i in 0..self.x.len() {
            self.x[i] = forward_transition(&self.x[i], &self.mu[i], s, s + 1, sched, &mut self.rngs[i])?;
            self.traces[i].records.push(TraceRecord::plain(s + 1, StepKind::Travel));
        }
        self.check(s + 1)
    }
}

/// Runs one chain per `(mu[i], seeds[i])`, evaluating the score for all
/// chains together at each step. Each chain draws only from its own seeded
/// stream, so its result does not depend on the other chains.
pub fn sample_many(
    mu: &[Tensor],
    seeds: &[u64],
    guidance: Option<Guidance<'_>>,
    score: &dyn ScoreFunction,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<Vec<(Tensor, SampleTrace)>> {
    cfg.validate(sched)?;
    if mu.len() != seeds.len() {
        return shape_err(format!("{} conditioning images but {} seeds", mu.len(), seeds.len()));
    }
    let pinv_y = match guidance {
        Some(g) => {
            if g.y.len() != mu.len() {
                return shape_err(format!("{} measurements for {} chains", g.y.len(), mu.len()));
            }
            g.op.pinv_many(g.y)?
        }
        None => Vec::new(),
    };
    for (i, p) in pinv_y.iter().enumerate() {
        mu[i].check_same_shape(p, "pseudo-inverse of the measurement")?;
    }
    let lambda = sched.lambda2().sqrt();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let x = mu
        .iter()
        .zip(rngs.iter_mut())
        .map(|(m, rng)| {
            let e = gaussian(m.shape(), rng);
            m.zip_map(&e, |u, e| u + lambda * e)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = total_iterations(cfg.steps, cfg.travel_l, cfg.travel_r);
    let traces = seeds
        .iter()
        .map(|&seed| {
            let mut records = Vec::with_capacity(total);
            records.push(TraceRecord::plain(cfg.steps, StepKind::Init));
            SampleTrace { seed, records }
        })
        .collect();
    let mut ch = Chains {
        mu,
        x,
        rngs,
        traces,
        guidance,
        pinv_y,
    };
    let (steps, l) = (cfg.steps, cfg.travel_l);
    let mut t = steps;
    while t >= 1 {
        ch.reverse(t, score, sched, cfg)?;
        t -= 1;
        if cfg.travel_r > 1 && t >= 1 && (steps - t) % l == 0 {
            for _ in 1..cfg.travel_r {
                for s in t..t + l {
                    ch.renoise(s, sched)?;
                }
                for s in (t + 1..=t + l).rev() {
                    ch.reverse(s, score, sched, cfg)?;
                }
            }
        }
    }
    Ok(ch.x.into_iter().zip(ch.traces).collect())
}

/// A single chain seeded with `cfg.seed`.
pub fn sample(
    mu: &Tensor,
    guidance: Option<(&dyn Operator, &Tensor)>,
    score: &dyn ScoreFunction,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<(Tensor, SampleTrace)> {
    let ys;
    let g = match guidance {
        Some((op, y)) => {
            ys = [y.clone()];
            Some(Guidance { op, y: &ys })
        }
        None => None,
    };
    let mut out = sample_many(std::slice::from_ref(mu), &[cfg.seed], g, score, sched, cfg)?;
    Ok(out.pop().expect("one chain"))
}

/// Seeds of the `sa_count` chains averaged by [`sample_average`]; the first
/// is `cfg.seed`.
pub fn average_seeds(cfg: &SamplerConfig) -> Vec<u64> {
    (0..cfg.sa_count as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
}

/// Pixel-wise mean of `sa_count` independent samples.
pub fn sample_average(
    mu: &Tensor,
    guidance: Option<(&dyn Operator, &Tensor)>,
    score: &dyn ScoreFunction,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let seeds = average_seeds(cfg);
    let mus = vec![mu.clone(); seeds.len()];
    let ys;
    let g = match guidance {
        Some((op, y)) => {
            ys = vec![y.clone(); seeds.len()];
            Some(Guidance { op, y: &ys })
        }
        None => None,
    };
    let runs = sample_many(&mus, &seeds, g, score, sched, cfg)?;
    average(runs.iter().map(|(x, _)| x))
}

/// Pixel-wise mean.
pub fn average<'a>(items: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut it = items.into_iter();
    let mut acc = match it.next() {
        Some(first) => first.clone(),
        None => return invalid("cannot average zero samples"),
    };
    let mut n = 1.0;
    for x in it {
        acc.axpy(1.0, x)?;
        n += 1.0;
    }
    Ok(acc.scale(1.0 / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mrsde::{forward_marginal, make_schedule, optimal_score, ScheduleKind};
    use crate::pinv::MaskOperator;
    use crate::score::GaussianOracle;

    fn sched(t: usize) -> DiffusionSchedule {
        make_schedule(t, 0.01, ScheduleKind::Cosine).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn iteration_counts() {
        assert_eq!(total_iterations(200, 4, 2), 593);
        assert_eq!(total_iterations(200, 8, 2), 585);
        assert_eq!(total_iterations(200, 4, 1), 201);
        assert_eq!(total_iterations(10, 3, 3), 10 + 2 * 3 * 2 * 3 + 1);
    }

    #[test]
    fn trace_length_matches_iteration_count() {
        let s = sched(20);
        let mu = Tensor::zeros(&[3]);
        let oracle = GaussianOracle::new(Tensor::full(&[3], 0.5), Tensor::full(&[3], 0.04)).unwrap();
        for (l, r) in [(1, 1), (4, 2), (3, 3), (7, 2), (20, 2), (19, 2)] {
            let cfg = SamplerConfig {
                steps: 20,
                travel_l: l,
                travel_r: r,
                ..Default::default()
            };
            let (_, trace) = sample(&mu, None, &oracle, &s, &cfg).unwrap();
            assert_eq!(trace.len(), total_iterations(20, l, r), "l={l} r={r}");
            assert_eq!(trace.records[0].kind, StepKind::Init);
            assert_eq!(trace.records.last().unwrap().t, 1);
        }
    }

    #[test]
    fn extraction_inverts_the_optimal_score() {
        let s = sched(200);
        let mu = random(&[8, 8], 1);
        for (t, seed) in [(1, 2), (57, 3), (200, 4)] {
            let x0 = random(&[8, 8], seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let xt = crate::mrsde::forward_sample(&x0, &mu, t, &s, &mut rng).unwrap();
            let sc = optimal_score(&xt, &x0, &mu, t, &s).unwrap();
            let back = extract_x0(&xt, &mu, t, &sc, &s).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn extraction_fixed_point_and_superposition() {
        let s = sched(50);
        let mu = random(&[4, 4], 5);
        let zero = Tensor::zeros(&[4, 4]);
        let at_mu = extract_x0(&mu, &mu, 20, &zero, &s).unwrap();
        assert!(at_mu.max_abs_diff(&mu).unwrap() <= 1e-12);
        let (x1, s1, x2, s2) = (random(&[4, 4], 6), random(&[4, 4], 7), random(&[4, 4], 8), random(&[4, 4], 9));
        let f = |x: &Tensor, sc: &Tensor| extract_x0(x, &mu, 20, sc, &s).unwrap();
        let base = f(&zero, &zero);
        let lhs = f(&x1.add(&x2).unwrap(), &s1.add(&s2).unwrap());
        let rhs = f(&x1, &s1).add(&f(&x2, &s2)).unwrap().sub(&base).unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-6);
    }

    #[test]
    fn oracle_estimate_is_the_posterior_mean() {
        // for a point-mass prior the posterior mean is the prior itself
        let s = sched(100);
        let x0 = random(&[5], 10);
        let oracle = GaussianOracle::new(x0.clone(), Tensor::zeros(&[5])).unwrap();
        let mu = random(&[5], 11);
        let xt = random(&[5], 12);
        let est = estimate_x0(&xt, &mu, 40, &oracle, &s).unwrap();
        assert!(est.max_abs_diff(&x0).unwrap() <= 1e-8);
    }

    #[test]
    fn last_step_returns_the_estimate() {
        let s = sched(30);
        let (x, z, mu) = (random(&[6], 1), random(&[6], 2), random(&[6], 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(reverse_step(&x, &z, &mu, 1, &s, Some(&mut rng)).unwrap(), z);
    }

    #[test]
    fn noiseless_step_follows_the_posterior_mean() {
        let s = sched(200);
        let (x0, mu) = (random(&[16], 1), random(&[16], 2));
        for t in [2, 50, 199, 200] {
            let (mt, _) = forward_marginal(&x0, &mu, t, &s).unwrap();
            let (mp, _) = forward_marginal(&x0, &mu, t - 1, &s).unwrap();
            let out = reverse_step::<ChaCha8Rng>(&mt, &x0, &mu, t, &s, None).unwrap();
            assert!(out.max_abs_diff(&mp).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn step_is_deterministic_per_seed() {
        let s = sched(30);
        let (x, z, mu) = (random(&[6], 1), random(&[6], 2), random(&[6], 3));
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            reverse_step(&x, &z, &mu, 10, &s, Some(&mut rng)).unwrap()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn gamma_respects_skip_and_clamp() {
        let s = sched(60);
        let cfg = SamplerConfig {
            steps: 60,
            ..Default::default()
        };
        assert_eq!(rectification_gamma(30, &s, &cfg).unwrap(), 0.0);
        for t in 1..=60 {
            let g = rectification_gamma(t, &s, &cfg).unwrap();
            assert!((0.0..=1.0).contains(&g));
        }
        assert!(rectification_gamma(31, &s, &cfg.unrectified()).unwrap() == 0.0);
    }

    #[test]
    fn full_rectification_with_exact_inverse_is_consistent() {
        let s = sched(30);
        let op = MaskOperator::rows(8, 8, 2).unwrap();
        let truth = random(&[8, 8], 1);
        let y = op.forward(&truth).unwrap();
        let mu = random(&[8, 8], 2);
        let oracle = GaussianOracle::new(random(&[8, 8], 3), Tensor::full(&[8, 8], 0.02)).unwrap();
        let cfg = SamplerConfig {
            steps: 30,
            rescale_alpha: 1e6,
            skip_beta: 1000,
            ..Default::default()
        };
        let (x, trace) = sample(&mu, Some((&op, &y)), &oracle, &s, &cfg).unwrap();
        for r in trace.records.iter().filter(|r| r.kind == StepKind::Reverse) {
            assert_eq!(r.gamma, 1.0);
            assert!(r.consistency_error.unwrap() <= 1e-12);
        }
        assert!(op.forward(&x).unwrap().sub(&y).unwrap().norm_l2() <= 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_average_of_one_is_a_sample() {
        let s = sched(25);
        let op = MaskOperator::rows(6, 6, 2).unwrap();
        let y = op.forward(&random(&[6, 6], 1)).unwrap();
        let mu = random(&[6, 6], 2);
        let oracle = GaussianOracle::new(random(&[6, 6], 3), Tensor::full(&[6, 6], 0.03)).unwrap();
        let cfg = SamplerConfig {
            steps: 25,
            travel_r: 2,
            seed: 9,
            ..Default::default()
        };
        let (a, ta) = sample(&mu, Some((&op, &y)), &oracle, &s, &cfg).unwrap();
        let (b, tb) = sample(&mu, Some((&op, &y)), &oracle, &s, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let avg = sample_average(&mu, Some((&op, &y)), &oracle, &s, &cfg).unwrap();
        assert_eq!(avg, a);
        let two = sample_average(&mu, Some((&op, &y)), &oracle, &s, &SamplerConfig { sa_count: 2, ..cfg }).unwrap();
        assert_ne!(two, a);
    }

    #[test]
    fn batched_chains_match_single_chains() {
        let s = sched(15);
        let oracle = GaussianOracle::new(Tensor::full(&[4], 0.5), Tensor::full(&[4], 0.04)).unwrap();
        let mus = vec![random(&[4], 1), random(&[4], 2)];
        let cfg = SamplerConfig {
            steps: 15,
            ..Default::default()
        };
        let many = sample_many(&mus, &[3, 4], None, &oracle, &s, &cfg).unwrap();
        let one = sample(&mus[1], None, &oracle, &s, &SamplerConfig { seed: 4, ..cfg }).unwrap();
        assert_eq!(many[1], one);
    }

    #[test]
    fn average_approaches_the_posterior_mean() {
        // prior N(m0, v0); without a measurement the chain samples the prior
        let s = sched(100);
        let n = 4000;
        let oracle = GaussianOracle::new(Tensor::full(&[n], 0.3), Tensor::full(&[n], 0.02)).unwrap();
        let mu = Tensor::zeros(&[n]);
        let cfg = SamplerConfig {
            steps: 100,
            seed: 1,
            ..Default::default()
        };
        let (x, _) = sample(&mu, None, &oracle, &s, &cfg).unwrap();
        let mean = x.mean();
        assert!((mean - 0.3).abs() < 4.0 * (0.0204f64 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn configuration_errors() {
        let s = sched(10);
        let oracle = GaussianOracle::new(Tensor::zeros(&[2]), Tensor::full(&[2], 0.1)).unwrap();
        let mu = Tensor::zeros(&[2]);
        let bad = [
            SamplerConfig { steps: 11, ..Default::default() },
            SamplerConfig { steps: 10, skip_beta: 0, ..Default::default() },
            SamplerConfig { steps: 10, sa_count: 0, ..Default::default() },
            SamplerConfig { steps: 10, rescale_alpha: -1.0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(sample(&mu, None, &oracle, &s, &cfg).is_err());
        }
        let op = MaskOperator::rows(2, 2, 1).unwrap();
        let y = Tensor::zeros(&[4]);
        let cfg = SamplerConfig { steps: 10, ..Default::default() };
        assert!(matches!(sample(&mu, Some((&op, &y)), &oracle, &s, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn divergence_aborts_with_trace() {
        struct Exploding;
        impl ScoreFunction for Exploding {
            fn evaluate(&self, x: &Tensor, _: &Tensor, t: usize, _: &DiffusionSchedule) -> Result<Tensor> {
                Ok(x.map(|_| if t < 8 { f64::NAN } else { 0.0 }))
            }
        }
        let s = sched(10);
        let cfg = SamplerConfig { steps: 10, ..Default::default() };
        match sample(&Tensor::zeros(&[3]), None, &Exploding, &s, &cfg) {
            Err(Error::SamplingAborted { step, trace }) => {
                assert_eq!(step, 7);
                assert_eq!(trace.len(), 5);
            }
            other => panic!("expected abort, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn csv_has_one_row_per_record() {
        let trace = SampleTrace {
            seed: 1,
            records: vec![
                TraceRecord::plain(3, StepKind::Init),
                TraceRecord {
                    t: 3,
                    kind: StepKind::Reverse,
                    consistency_error: Some(0.5),
                    raw_consistency_error: Some(1.0),
                    gamma: 0.25,
                    rectified: true,
                },
            ],
        };
        let csv = trace.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "0,3,init,,,0e0,false");
        assert_eq!(lines[2], "1,3,reverse,5e-1,1e0,2.5e-1,true");
    }
}
