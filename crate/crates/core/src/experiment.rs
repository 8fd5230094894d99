//! Method comparison over a test split: FBP, TV, the learned
//! pseudo-inverse, the MMSE restorer and the diffusion sampler with and
//! without rectification and with sample averaging.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::MuSource;
use crate::error::{invalid, Result};
use crate::eval::{image_metrics, tv_reconstruct, ImageMetrics, Summary, TvConfig};
use crate::mrsde::DiffusionSchedule;
use crate::numerics::Tensor;
use crate::phantoms::Item;
use crate::pinv::LearnablePinv;
use crate::restorer::Restorer;
use crate::sampler::{average, sample_many, Guidance, SamplerConfig};
use crate::score::ScoreFunction;
use crate::tomography::{Image, RadonOperator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "FBP")]
    Fbp,
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "pinv")]
    Pinv,
    #[serde(rename = "MMSE")]
    Restorer,
    #[serde(rename = "RN-SDE w/o rectification")]
    SdeUnrectified,
    #[serde(rename = "RN-SDE")]
    Sde,
    #[serde(rename = "RN-SDE SA")]
    SdeAverage,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Fbp,
        Method::Tv,
        Method::Pinv,
        Method::Restorer,
        Method::SdeUnrectified,
        Method::Sde,
        Method::SdeAverage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::Fbp => "FBP",
            Method::Tv => "TV",
            Method::Pinv => "pinv",
            Method::Restorer => "MMSE",
            Method::SdeUnrectified => "RN-SDE w/o rectification",
            Method::Sde => "RN-SDE",
            Method::SdeAverage => "RN-SDE SA",
        }
    }
}

/// Metrics of one method on one item; sampler methods average over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    pub theta_miss: f64,
    pub psnr: Summary,
    pub ssim: Summary,
    pub consistency: Summary,
    pub items: Vec<ItemResult>,
}

impl MethodRow {
    fn new(method: Method, theta_miss: f64, items: Vec<ItemResult>) -> Self {
        let col = |f: fn(&ItemResult) -> f64| Summary::of(&items.iter().map(f).collect::<Vec<_>>());
        Self {
            method,
            theta_miss,
            psnr: col(|r| r.psnr),
            ssim: col(|r| r.ssim),
            consistency: col(|r| r.consistency),
            items,
        }
    }
}

/// Trained components for one missing-wedge scenario.
pub struct ScenarioModels<'a> {
    pub pinv: &'a LearnablePinv,
    pub restorer: Option<&'a Restorer>,
    pub score: &'a dyn ScoreFunction,
    pub mu: MuSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub sampler: SamplerConfig,
    /// Independent sampler runs per item (seeds `seed..seed + runs`).
    pub runs: usize,
    pub tv: TvConfig,
    /// Chains evaluated together per network call.
    pub chunk: usize,
    pub methods: Vec<Method>,
}

/// PSNR capped at 100 dB so exact matches stay finite in averages.
fn metrics_row(id: &str, m: ImageMetrics) -> ItemResult {
    ItemResult {
        id: id.to_string(),
        psnr: m.psnr.unwrap_or(100.0),
        ssim: m.ssim,
        consistency: m.consistency,
    }
}

/// Conditioning images for `items`.
pub fn conditioning(items: &[Item], source: MuSource, restorer: Option<&Restorer>) -> Result<Vec<Tensor>> {
    match source {
        MuSource::Fbp => Ok(items.iter().map(|it| it.fbp.pixels().clone()).collect()),
        MuSource::Restorer => {
            let Some(r) = restorer else {
                return invalid("conditioning on the restorer needs a trained restorer");
            };
            items.iter().map(|it| r.restore_tensor(it.fbp.pixels())).collect()
        }
    }
}

/// Runs `runs` sampler chains per item; returns `samples[item][run]`.
pub fn sample_items(
    items: &[Item],
    mu: &[Tensor],
    models: &ScenarioModels<'_>,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    runs: usize,
    chunk: usize,
) -> Result<Vec<Vec<Tensor>>> {
    let mut jobs = Vec::with_capacity(items.len() * runs);
    for i in 0..items.len() {
        for r in 0..runs {
            jobs.push((i, cfg.seed.wrapping_add(r as u64)));
        }
    }
    let batches = jobs
        .par_chunks(chunk.max(1))
        .map(|batch| {
            let mus: Vec<Tensor> = batch.iter().map(|&(i, _)| mu[i].clone()).collect();
            let ys: Vec<Tensor> = batch.iter().map(|&(i, _)| items[i].sino.values().clone()).collect();
            let seeds: Vec<u64> = batch.iter().map(|&(_, s)| s).collect();
            let guidance = Guidance {
                op: models.pinv,
                y: &ys,
            };
            sample_many(&mus, &seeds, Some(guidance), models.score, sched, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = vec![Vec::with_capacity(runs); items.len()];
    for (&(i, _), (x, _)) in jobs.iter().zip(batches.into_iter().flatten()) {
        out[i].push(x);
    }
    Ok(out)
}

fn mean_of(rows: &[ItemResult], id: &str) -> ItemResult {
    let n = rows.len() as f64;
    ItemResult {
        id: id.to_string(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        consistency: rows.iter().map(|r| r.consistency).sum::<f64>() / n,
    }
}

/// Evaluates the requested methods on `items` for one scenario.
pub fn evaluate_scenario(
    items: &[Item],
    theta_miss: f64,
    op: &Arc<RadonOperator>,
    models: &ScenarioModels<'_>,
    sched: &DiffusionSchedule,
    settings: &EvalSettings,
) -> Result<Vec<MethodRow>> {
    if items.is_empty() {
        return invalid("no test items");
    }
    if settings.runs == 0 {
        return invalid("runs must be >= 1");
    }
    let metric = |x: &Tensor, it: &Item| -> Result<ItemResult> {
        let m = image_metrics(&Image::new(x.clone())?, &it.image, &it.sino, op)?;
        Ok(metrics_row(&it.id, m))
    };
    let wants = |m: Method| settings.methods.contains(&m);
    let mut rows = Vec::new();
    if wants(Method::Fbp) {
        let r = items.par_iter().map(|it| metric(it.fbp.pixels(), it)).collect::<Result<_>>()?;
        rows.push(MethodRow::new(Method::Fbp, theta_miss, r));
    }
    if wants(Method::Tv) {
        let r = items
            .par_iter()
            .map(|it| metric(tv_reconstruct(&it.sino, op, &settings.tv)?.image.pixels(), it))
            .collect::<Result<_>>()?;
        rows.push(MethodRow::new(Method::Tv, theta_miss, r));
    }
    if wants(Method::Pinv) {
        let r = items
            .par_iter()
            .map(|it| metric(&models.pinv.apply_tensor(it.sino.values())?, it))
            .collect::<Result<_>>()?;
        rows.push(MethodRow::new(Method::Pinv, theta_miss, r));
    }
    if wants(Method::Restorer) {
        if let Some(rest) = models.restorer {
            let r = items
                .par_iter()
                .map(|it| metric(&rest.restore_tensor(it.fbp.pixels())?, it))
                .collect::<Result<_>>()?;
            rows.push(MethodRow::new(Method::Restorer, theta_miss, r));
        }
    }
    let sde = [Method::SdeUnrectified, Method::Sde, Method::SdeAverage];
    if sde.iter().any(|&m| wants(m)) {
        let mu = conditioning(items, models.mu, models.restorer)?;
        if wants(Method::SdeUnrectified) {
            let cfg = settings.sampler.unrectified();
            let samples = sample_items(items, &mu, models, sched, &cfg, settings.runs, settings.chunk)?;
            let r = items
                .par_iter()
                .zip(&samples)
                .map(|(it, xs)| Ok(mean_of(&xs.iter().map(|x| metric(x, it)).collect::<Result<Vec<_>>>()?, &it.id)))
                .collect::<Result<_>>()?;
            rows.push(MethodRow::new(Method::SdeUnrectified, theta_miss, r));
        }
        if wants(Method::Sde) || wants(Method::SdeAverage) {
            let runs = settings.runs.max(if wants(Method::SdeAverage) { settings.sampler.sa_count } else { 1 });
            let samples = sample_items(items, &mu, models, sched, &settings.sampler, runs, settings.chunk)?;
            if wants(Method::Sde) {
                let r = items
                    .par_iter()
                    .zip(&samples)
                    .map(|(it, xs)| {
                        let per = xs[..settings.runs].iter().map(|x| metric(x, it)).collect::<Result<Vec<_>>>()?;
                        Ok(mean_of(&per, &it.id))
                    })
                    .collect::<Result<_>>()?;
                rows.push(MethodRow::new(Method::Sde, theta_miss, r));
            }
            if wants(Method::SdeAverage) {
                let r = items
                    .par_iter()
                    .zip(&samples)
                    .map(|(it, xs)| metric(&average(&xs[..settings.sampler.sa_count])?, it))
                    .collect::<Result<_>>()?;
                rows.push(MethodRow::new(Method::SdeAverage, theta_miss, r));
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: serde_json::Value,
    pub rows: Vec<MethodRow>,
}

impl MetricReport {
    pub fn row(&self, method: Method, theta_miss: f64) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method && r.theta_miss == theta_miss)
    }

    /// Plain-text table of mean PSNR / SSIM / consistency.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<26} {:>6} {:>8} {:>7} {:>11}\n",
            "method", "miss", "PSNR", "SSIM", "‖Ax−y‖₂"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<26} {:>6} {:>8.2} {:>7.4} {:>11.4}\n",
                r.method.label(),
                r.theta_miss,
                r.psnr.mean,
                r.ssim.mean,
                r.consistency.mean
            ));
        }
        out
    }
}
