//! Image-quality metrics and the total-variation baseline.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::numerics::Tensor;
use crate::tomography::{Image, RadonOperator, Sinogram};

/// `10 log10(peak² / MSE)`; `+∞` when the images are identical.
pub fn psnr(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.check_same_shape(reference, "psnr reference")?;
    if x.is_empty() {
        return invalid("psnr of an empty image");
    }
    let mse = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of an `[h, w]` buffer.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5) over the
/// positions where the window fits, `C1 = (0.01 L)²`, `C2 = (0.03 L)²`.
pub fn ssim(x: &Tensor, reference: &Tensor, peak: f64) -> Result<f64> {
    x.check_same_shape(reference, "ssim reference")?;
    let (h, w) = match *x.shape() {
        [h, w] => (h, w),
        _ => return shape_err(format!("ssim expects [H, W], got {:?}", x.shape())),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return invalid(format!("image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"));
    }
    let k = gaussian_window();
    let (a, b) = (x.data(), reference.data());
    let prod = |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|p, _| p * p), h, w, &k);
    let bb = filter_valid(&prod(&|_, q| q * q), h, w, &k);
    let ab = filter_valid(&prod(&|p, q| p * q), h, w, &k);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// `‖A x − y‖₂` over the measured views.
pub fn consistency_error(x: &Image, y: &Sinogram, op: &RadonOperator) -> Result<f64> {
    op.geometry().ensure_matches(y.geometry())?;
    let ax = op.project(x)?;
    Ok(ax.values().sub(y.values())?.norm_l2())
}

/// Forward-difference gradient with Neumann boundary.
fn grad(x: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            gx[k] = if j + 1 < w { x[k + 1] - x[k] } else { 0.0 };
            gy[k] = if i + 1 < h { x[k + w] - x[k] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`grad`].
fn div(px: &[f64], py: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for i in 0..h {
        for j in 0..w {
            let k = i * w + j;
            let mut v = 0.0;
            if j + 1 < w {
                v += px[k];
            }
            if j > 0 {
                v -= px[k - 1];
            }
            if i + 1 < h {
                v += py[k];
            }
            if i > 0 {
                v -= py[k - w];
            }
            out[k] = v;
        }
    }
}

/// Isotropic total variation `Σ |∇x|`.
pub fn total_variation(x: &[f64], h: usize, w: usize) -> f64 {
    let (mut gx, mut gy) = (vec![0.0; h * w], vec![0.0; h * w]);
    grad(x, h, w, &mut gx, &mut gy);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).sum()
}

/// `‖AᵀA‖` by power iteration.
pub fn normal_operator_norm(op: &RadonOperator, iters: usize) -> f64 {
    let n = op.image_size();
    let a = op.geometry().num_angles();
    let mut v = vec![1.0 / n as f64; n * n];
    let mut sino = vec![0.0; a * n];
    let mut next = vec![0.0; n * n];
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        op.forward(&v, &mut sino);
        op.transpose(&sino, &mut next);
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (d, s) in v.iter_mut().zip(&next) {
            *d = s / norm;
        }
    }
    est
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    pub lambda: f64,
    pub iters: usize,
    /// Dual iterations per proximal step.
    pub inner_iters: usize,
    pub nonnegative: bool,
}

impl Default for TvConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            iters: 200,
            inner_iters: 20,
            nonnegative: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TvResult {
    pub image: Image,
    /// Objective after every accepted iterate, starting from `x = 0`.
    pub objective: Vec<f64>,
    pub rejected: usize,
}

/// Dual projection solver for `argmin_x ½‖x − f‖² + t TV(x)`, warm-started
/// from `(px, py)`.
fn tv_prox(f: &[f64], t: f64, h: usize, w: usize, iters: usize, px: &mut [f64], py: &mut [f64]) -> Vec<f64> {
    let n = h * w;
    let mut d = vec![0.0; n];
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let tau = 0.125;
    if t > 0.0 {
        for _ in 0..iters {
            div(px, py, h, w, &mut d);
            for (dv, fv) in d.iter_mut().zip(f) {
                *dv -= fv / t;
            }
            grad(&d, h, w, &mut gx, &mut gy);
            for k in 0..n {
                let m = 1.0 + tau * gx[k].hypot(gy[k]);
                px[k] = (px[k] + tau * gx[k]) / m;
                py[k] = (py[k] + tau * gy[k]) / m;
            }
        }
    }
    div(px, py, h, w, &mut d);
    f.iter().zip(&d).map(|(fv, dv)| fv - t * dv).collect()
}

/// Proximal-gradient minimisation of `½‖Ax − y‖² + λ TV(x)`. The step is
/// `1/‖AᵀA‖` and halves whenever a candidate would raise the objective, so
/// the recorded objective never increases.
pub fn tv_reconstruct(y: &Sinogram, op: &RadonOperator, cfg: &TvConfig) -> Result<TvResult> {
    op.geometry().ensure_matches(y.geometry())?;
    if !(cfg.lambda > 0.0) || !cfg.lambda.is_finite() {
        return invalid(format!("lambda_tv must be > 0, got {}", cfg.lambda));
    }
    if cfg.iters == 0 {
        return invalid("tv iterations must be >= 1");
    }
    let n = op.image_size();
    let m = y.values().len();
    let yv = y.values().data();
    let objective = |x: &[f64], r: &mut [f64]| {
        op.forward(x, r);
        let fid: f64 = r.iter().zip(yv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * 0.5;
        fid + cfg.lambda * total_variation(x, n, n)
    };
    let lip = normal_operator_norm(op, 50);
    if lip == 0.0 {
        return invalid("projection operator is zero");
    }
    let mut step = 1.0 / lip;
    let mut x = vec![0.0; n * n];
    let mut resid = vec![0.0; m];
    let mut g = vec![0.0; n * n];
    let (mut px, mut py) = (vec![0.0; n * n], vec![0.0; n * n]);
    let mut current = objective(&x, &mut resid);
    let mut history = vec![current];
    let mut rejected = 0;
    for _ in 0..cfg.iters {
        op.forward(&x, &mut resid);
        for (r, b) in resid.iter_mut().zip(yv) {
            *r -= b;
        }
        op.transpose(&resid, &mut g);
        loop {
            let f: Vec<f64> = x.iter().zip(&g).map(|(a, d)| a - step * d).collect();
            let (mut qx, mut qy) = (px.clone(), py.clone());
            let mut cand = tv_prox(&f, step * cfg.lambda, n, n, cfg.inner_iters, &mut qx, &mut qy);
            if cfg.nonnegative {
                cand.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let value = objective(&cand, &mut resid);
            if !value.is_finite() {
                return Err(Error::Numerical("tv objective diverged".into()));
            }
            if value <= current {
                x = cand;
                px = qx;
                py = qy;
                current = value;
                history.push(value);
                break;
            }
            rejected += 1;
            step *= 0.5;
            if step * lip < 1e-8 {
                return Ok(TvResult {
                    image: Image::new(Tensor::new(vec![n, n], x)?)?,
                    objective: history,
                    rejected,
                });
            }
        }
    }
    Ok(TvResult {
        image: Image::new(Tensor::new(vec![n, n], x)?)?,
        objective: history,
        rejected,
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        }
    }
}

/// Quality of one reconstruction against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    /// `None` stands for an exact match (infinite PSNR).
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub consistency: f64,
}

pub fn image_metrics(x: &Image, truth: &Image, y: &Sinogram, op: &RadonOperator) -> Result<ImageMetrics> {
    let p = psnr(x.pixels(), truth.pixels(), 1.0)?;
    Ok(ImageMetrics {
        psnr: p.is_finite().then_some(p),
        ssim: ssim(x.pixels(), truth.pixels(), 1.0)?,
        consistency: consistency_error(x, y, op)?,
    })
}
