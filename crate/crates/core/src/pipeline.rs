//! End-to-end wiring from a [`RunConfig`]: training each component of a
//! missing-wedge scenario, checkpoint loading and the method comparison.

use std::path::Path;
use std::sync::Arc;

use serde_json::json;

use crate::config::{MuSource, RunConfig};
use crate::error::{invalid, Error, Result};
use crate::experiment::{conditioning, evaluate_scenario, EvalSettings, Method, MethodRow, MetricReport, ScenarioModels};
use crate::mrsde::DiffusionSchedule;
use crate::numerics::Tensor;
use crate::phantoms::{load_split, read_manifest, Item, Split};
use crate::pinv::{train_pinv, LearnablePinv, PinvTrainReport};
use crate::restorer::{train_restorer, Restorer, RestorerReport};
use crate::score::{train_score, CondDenoiser};
use crate::tomography::{Geometry, RadonOperator};

/// Trailing training items held out for checkpoint selection.
pub fn holdout(n_train: usize) -> usize {
    (n_train / 5).clamp(1, 16)
}

fn split_train(train: &[Item]) -> Result<(&[Item], &[Item])> {
    if train.len() < 2 {
        return invalid("training needs at least two items");
    }
    Ok(train.split_at(train.len() - holdout(train.len())))
}

pub fn fit_pinv(cfg: &RunConfig, geometry: &Geometry, train: &[Item]) -> Result<(LearnablePinv, PinvTrainReport)> {
    let (fit, val) = split_train(train)?;
    let images = |items: &[Item]| items.iter().map(|it| it.image.pixels().clone()).collect::<Vec<_>>();
    let mut model = LearnablePinv::new(geometry, cfg.pinv.model, cfg.pinv.train.seed)?;
    let report = train_pinv(&images(fit), &images(val), &mut model, &cfg.pinv.train)?;
    Ok((model, report))
}

pub fn fit_restorer(cfg: &RunConfig, train: &[Item]) -> Result<(Restorer, RestorerReport)> {
    let (fit, val) = split_train(train)?;
    let pairs = |items: &[Item]| {
        items
            .iter()
            .map(|it| (it.fbp.pixels().clone(), it.image.pixels().clone()))
            .collect::<Vec<_>>()
    };
    let mut model = Restorer::new(cfg.restorer.model, cfg.restorer.train.seed)?;
    let report = train_restorer(&pairs(fit), &pairs(val), &mut model, &cfg.restorer.train)?;
    Ok((model, report))
}

/// Trains the score network on `(x0, μ)` with μ from `cfg.score.mu`.
pub fn fit_score(
    cfg: &RunConfig,
    sched: &DiffusionSchedule,
    train: &[Item],
    restorer: Option<&Restorer>,
) -> Result<(CondDenoiser, Vec<f64>)> {
    let mu = conditioning(train, cfg.score.mu, restorer)?;
    let pairs: Vec<(Tensor, Tensor)> = train.iter().zip(mu).map(|(it, m)| (it.image.pixels().clone(), m)).collect();
    let mut model = CondDenoiser::new(cfg.score.model, cfg.score.train.seed)?;
    let losses = train_score(&pairs, sched, &mut model, &cfg.score.train)?;
    Ok((model, losses))
}

/// Metadata stored with a score checkpoint and checked on load.
pub fn score_metadata(cfg: &RunConfig) -> serde_json::Value {
    json!({ "T": cfg.schedule.steps, "lambda2": cfg.schedule.lambda2, "mu": cfg.score.mu })
}

/// Trained components of one missing-wedge scenario.
pub struct Scenario {
    pub theta_miss: f64,
    pub geometry: Geometry,
    pub op: Arc<RadonOperator>,
    pub pinv: LearnablePinv,
    pub restorer: Option<Restorer>,
    pub score: CondDenoiser,
    pub mu: MuSource,
}

impl Scenario {
    pub fn models(&self) -> ScenarioModels<'_> {
        ScenarioModels {
            pinv: &self.pinv,
            restorer: self.restorer.as_ref(),
            score: &self.score,
            mu: self.mu,
        }
    }
}

/// Trains the pseudo-inverse, restorer and score network in memory.
pub fn train_scenario(cfg: &RunConfig, theta_miss: f64, train: &[Item]) -> Result<Scenario> {
    let geometry = cfg.geometry_for(theta_miss)?;
    let sched = cfg.schedule()?;
    let (pinv, _) = fit_pinv(cfg, &geometry, train)?;
    let (restorer, _) = fit_restorer(cfg, train)?;
    let (score, _) = fit_score(cfg, &sched, train, Some(&restorer))?;
    Ok(Scenario {
        theta_miss,
        op: pinv.radon().clone(),
        geometry,
        pinv,
        restorer: Some(restorer),
        score,
        mu: cfg.score.mu,
    })
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingDependency(format!("{what} checkpoint {} not found", path.display())))
    }
}

/// Loads the checkpoints of one scenario from `cfg.paths.checkpoints`.
pub fn load_scenario(cfg: &RunConfig, theta_miss: f64) -> Result<Scenario> {
    let geometry = cfg.geometry_for(theta_miss)?;
    let pinv_path = cfg.pinv_checkpoint(theta_miss);
    require(&pinv_path, "pseudo-inverse")?;
    let pinv = LearnablePinv::load(&pinv_path, &geometry)?;
    let score_path = cfg.score_checkpoint(theta_miss);
    require(&score_path, "score")?;
    let (score, meta) = CondDenoiser::load(&score_path)?;
    let expected = score_metadata(cfg);
    if meta != expected {
        return invalid(format!(
            "score checkpoint {} was trained with {meta}, config asks for {expected}",
            score_path.display()
        ));
    }
    let rest_path = cfg.restorer_checkpoint(theta_miss);
    let restorer = if cfg.score.mu == MuSource::Restorer || rest_path.exists() {
        require(&rest_path, "restorer")?;
        let (r, size) = Restorer::load(&rest_path)?;
        if size != cfg.geometry.size {
            return Err(Error::GeometryMismatch(format!(
                "restorer trained on {size}x{size} images, config has {}",
                cfg.geometry.size
            )));
        }
        Some(r)
    } else {
        None
    };
    Ok(Scenario {
        theta_miss,
        op: pinv.radon().clone(),
        geometry,
        pinv,
        restorer,
        score,
        mu: cfg.score.mu,
    })
}

/// Reads one split of the dataset stored for `theta_miss`.
pub fn load_items(cfg: &RunConfig, theta_miss: f64, split: Split) -> Result<Vec<Item>> {
    let root = cfg.data_dir(theta_miss);
    let manifest = read_manifest(&root)?;
    cfg.geometry_for(theta_miss)?.ensure_matches(&manifest.geometry)?;
    load_split(&root, &manifest, split)
}

/// Evaluation settings derived from the config.
pub fn eval_settings(cfg: &RunConfig, methods: &[Method]) -> EvalSettings {
    EvalSettings {
        sampler: cfg.sampler(),
        runs: cfg.eval.runs,
        tv: cfg.eval.tv,
        chunk: cfg.eval.chunk,
        methods: methods.to_vec(),
    }
}

/// Evaluates every configured scenario and assembles the report.
pub fn run_experiment(cfg: &RunConfig, scenarios: &[(Scenario, Vec<Item>)], methods: &[Method]) -> Result<MetricReport> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let settings = eval_settings(cfg, methods);
    let mut rows: Vec<MethodRow> = Vec::new();
    for (sc, test) in scenarios {
        rows.extend(evaluate_scenario(test, sc.theta_miss, &sc.op, &sc.models(), &sched, &settings)?);
    }
    Ok(MetricReport {
        config: serde_json::to_value(cfg)?,
        rows,
    })
}
