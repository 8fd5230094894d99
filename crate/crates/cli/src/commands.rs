use std::path::Path;

use rnsde::config::{MuSource, RunConfig};
use rnsde::eval::{image_metrics, ImageMetrics, Summary};
use rnsde::experiment::{evaluate_scenario, Method};
use rnsde::numerics::container::read_tensor;
use rnsde::numerics::Tensor;
use rnsde::phantoms::{build_dataset, read_manifest, Split, MANIFEST};
use rnsde::pipeline::{
    eval_settings, fit_pinv, fit_restorer, fit_score, load_items, load_scenario, run_experiment, score_metadata,
};
use rnsde::restorer::Restorer;
use rnsde::sampler::{average, average_seeds, sample_many, total_iterations, Guidance};
use rnsde::score::{smooth, CondDenoiser};
use rnsde::tomography::{fbp, Image, RadonOperator, Sinogram};
use rnsde::{Error, Result};
use serde::Serialize;
use serde_json::json;

use crate::run::RunDir;
use crate::{Cli, Command, Common, DatasetAction};

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

/// Config file, then `--set` overrides, then `--seed`; validated.
pub fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.sampler.seed = s;
        cfg.pinv.train.seed = s;
        cfg.restorer.train.seed = s;
        cfg.score.train.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(common: &Common, command: &str, cfg: &RunConfig) -> Result<RunDir> {
    let Some(out) = &common.out else {
        return usage(format!("`{command}` needs an explicit --out directory"));
    };
    let mut run = RunDir::create(out, command, cfg)?;
    if let Some(c) = &common.config {
        run.input(c);
    }
    Ok(run)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        if n == 0 {
            return usage("--threads must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let cfg = load_config(&cli.common)?;
    let c = &cli.common;
    match &cli.command {
        Command::Defaults => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
        Command::Dataset {
            action: DatasetAction::Build { all },
        } => dataset_build(c, &cfg, *all),
        Command::Project { input } => project(c, &cfg, input),
        Command::Fbp { input } => fbp_cmd(c, &cfg, input),
        Command::TrainPinv => train_pinv_cmd(c, &cfg),
        Command::TrainRestorer => train_restorer_cmd(c, &cfg),
        Command::TrainScore => train_score_cmd(c, &cfg),
        Command::Sample { item, input } => sample_cmd(c, &cfg, item.as_deref(), input.as_deref()),
        Command::Evaluate { methods } => evaluate_cmd(c, &cfg, methods),
        Command::Ablate { sweep, with_unrectified } => ablate_cmd(c, &cfg, sweep, *with_unrectified),
    }
}

fn dataset_build(c: &Common, cfg: &RunConfig, all: bool) -> Result<()> {
    let mut run = run_dir(c, "dataset build", cfg)?;
    let thetas = if all {
        cfg.eval.theta_miss.clone()
    } else {
        vec![cfg.geometry.theta_miss]
    };
    let mut built = Vec::new();
    for theta in thetas {
        let root = cfg.data_dir(theta);
        let m = build_dataset(
            &cfg.dataset.phantom,
            cfg.dataset.n_train,
            cfg.dataset.n_test,
            &cfg.geometry_for(theta)?,
            &root,
        )?;
        eprintln!("dataset {} ({} train, {} test)", root.display(), m.train.len(), m.test.len());
        built.push(json!({
            "theta_miss": theta,
            "root": root,
            "checksum": m.checksum,
            "n_train": m.train.len(),
            "n_test": m.test.len(),
        }));
    }
    run.seeds(&[cfg.dataset.phantom.seed]);
    run.write_json("report.json", &built)?;
    run.finish()
}

fn project(c: &Common, cfg: &RunConfig, input: &Path) -> Result<()> {
    let mut run = run_dir(c, "project", cfg)?;
    run.input(input);
    let image = Image::new(read_tensor(input)?)?;
    let op = RadonOperator::new(&cfg.geometry()?)?;
    let sino = op.project(&image)?;
    run.write_tensor("sino.rnt", sino.values())?;
    if c.export_png {
        let hi = sino.values().data().iter().cloned().fold(f64::MIN_POSITIVE, f64::max);
        let p = run.path("sino.png");
        rnsde::export::write_png(&p, sino.values(), 0.0, hi)?;
    }
    run.finish()
}

fn fbp_cmd(c: &Common, cfg: &RunConfig, input: &Path) -> Result<()> {
    let mut run = run_dir(c, "fbp", cfg)?;
    run.input(input);
    let sino = Sinogram::new(cfg.geometry()?, read_tensor(input)?)?;
    let image = fbp(&sino)?;
    run.write_tensor("fbp.rnt", image.pixels())?;
    if c.export_png {
        run.write_png("fbp.png", image.pixels())?;
    }
    run.finish()
}

fn record_dataset(run: &mut RunDir, cfg: &RunConfig, theta: f64) {
    run.input(&cfg.data_dir(theta).join(MANIFEST));
}

fn checkpoint_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.paths.checkpoints)?;
    Ok(())
}

fn train_pinv_cmd(c: &Common, cfg: &RunConfig) -> Result<()> {
    let mut run = run_dir(c, "train-pinv", cfg)?;
    let theta = cfg.geometry.theta_miss;
    let train = load_items(cfg, theta, Split::Train)?;
    record_dataset(&mut run, cfg, theta);
    let (model, report) = fit_pinv(cfg, &cfg.geometry()?, &train)?;
    checkpoint_dir(cfg)?;
    let path = cfg.pinv_checkpoint(theta);
    model.save(&path)?;
    eprintln!(
        "pseudo-inverse relative error {:.4} -> {:.4}, saved {}",
        report.initial_validation,
        report.best_validation,
        path.display()
    );
    run.seeds(&[cfg.pinv.train.seed]);
    run.write_json("report.json", &json!({ "checkpoint": path, "training": report }))?;
    run.finish()
}

fn train_restorer_cmd(c: &Common, cfg: &RunConfig) -> Result<()> {
    let mut run = run_dir(c, "train-restorer", cfg)?;
    let theta = cfg.geometry.theta_miss;
    let train = load_items(cfg, theta, Split::Train)?;
    record_dataset(&mut run, cfg, theta);
    let (model, report) = fit_restorer(cfg, &train)?;
    checkpoint_dir(cfg)?;
    let path = cfg.restorer_checkpoint(theta);
    model.save(&path, cfg.geometry.size)?;
    eprintln!("restorer validation MSE {:.3e}, saved {}", report.best_validation, path.display());
    run.seeds(&[cfg.restorer.train.seed]);
    run.write_json("report.json", &json!({ "checkpoint": path, "training": report }))?;
    run.finish()
}

fn load_restorer(cfg: &RunConfig, theta: f64, run: &mut RunDir) -> Result<Restorer> {
    let path = cfg.restorer_checkpoint(theta);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "restorer checkpoint {} not found",
            path.display()
        )));
    }
    run.input(&path);
    Ok(Restorer::load(&path)?.0)
}

fn train_score_cmd(c: &Common, cfg: &RunConfig) -> Result<()> {
    let mut run = run_dir(c, "train-score", cfg)?;
    let theta = cfg.geometry.theta_miss;
    let train = load_items(cfg, theta, Split::Train)?;
    record_dataset(&mut run, cfg, theta);
    let restorer = match cfg.score.mu {
        MuSource::Restorer => Some(load_restorer(cfg, theta, &mut run)?),
        MuSource::Fbp => None,
    };
    let (model, losses) = fit_score(cfg, &cfg.schedule()?, &train, restorer.as_ref())?;
    checkpoint_dir(cfg)?;
    let path = cfg.score_checkpoint(theta);
    model.save(&path, score_metadata(cfg))?;
    let smoothed = smooth(&losses, 50);
    eprintln!(
        "score loss {:.4} -> {:.4}, saved {}",
        smoothed.first().copied().unwrap_or(f64::NAN),
        smoothed.last().copied().unwrap_or(f64::NAN),
        path.display()
    );
    run.seeds(&[cfg.score.train.seed]);
    run.write_json("report.json", &json!({ "checkpoint": path, "losses": losses }))?;
    run.finish()
}

#[derive(Serialize)]
struct SampleRecord {
    seed: u64,
    consistency: f64,
    metrics: Option<ImageMetrics>,
}

fn sample_cmd(c: &Common, cfg: &RunConfig, item: Option<&str>, input: Option<&Path>) -> Result<()> {
    let mut run = run_dir(c, "sample", cfg)?;
    let theta = cfg.geometry.theta_miss;
    let sc = load_scenario(cfg, theta)?;
    for p in [cfg.pinv_checkpoint(theta), cfg.score_checkpoint(theta)] {
        run.input(&p);
    }
    if sc.restorer.is_some() {
        run.input(&cfg.restorer_checkpoint(theta));
    }
    let (id, sino, truth, low) = match input {
        Some(p) => {
            run.input(p);
            let sino = Sinogram::new(sc.geometry.clone(), read_tensor(p)?)?;
            let low = fbp(&sino)?;
            (p.display().to_string(), sino, None, low)
        }
        None => {
            let root = cfg.data_dir(theta);
            let manifest = read_manifest(&root)?;
            record_dataset(&mut run, cfg, theta);
            let wanted = match item {
                Some(id) => id.to_string(),
                None => manifest.test.first().map(|m| m.id.clone()).unwrap_or_default(),
            };
            let items = load_items(cfg, theta, Split::Test)?;
            let Some(it) = items.into_iter().find(|it| it.id == wanted) else {
                return usage(format!("no test item `{wanted}`"));
            };
            (it.id, it.sino, Some(it.image), it.fbp)
        }
    };
    let mu = match (sc.mu, &sc.restorer) {
        (MuSource::Restorer, Some(r)) => r.restore_tensor(low.pixels())?,
        (MuSource::Restorer, None) => return usage("conditioning on the restorer needs its checkpoint"),
        (MuSource::Fbp, _) => low.pixels().clone(),
    };
    let scfg = cfg.sampler();
    let seeds = average_seeds(&scfg);
    let started = std::time::Instant::now();
    run.seeds(&seeds);
    let mus = vec![mu.clone(); seeds.len()];
    let ys = vec![sino.values().clone(); seeds.len()];
    let out = sample_many(
        &mus,
        &seeds,
        Some(Guidance { op: &sc.pinv, y: &ys }),
        &sc.score,
        &cfg.schedule()?,
        &scfg,
    )?;
    let mut records = Vec::new();
    for (x, trace) in &out {
        let img = Image::new(x.clone())?;
        let metrics = match &truth {
            Some(t) => Some(image_metrics(&img, t, &sino, &sc.op)?),
            None => None,
        };
        records.push(SampleRecord {
            seed: trace.seed,
            consistency: rnsde::eval::consistency_error(&img, &sino, &sc.op)?,
            metrics,
        });
        let p = run.path(&format!("trace_seed{}.csv", trace.seed));
        trace.write_csv(&p)?;
    }
    let first = &out[0].0;
    run.write_tensor("sample.rnt", first)?;
    let avg = average(out.iter().map(|(x, _)| x))?;
    let avg_img = Image::new(avg.clone())?;
    let avg_metrics = match &truth {
        Some(t) => Some(image_metrics(&avg_img, t, &sino, &sc.op)?),
        None => None,
    };
    if out.len() > 1 {
        run.write_tensor("average.rnt", &avg)?;
    }
    if c.export_png {
        let mut panels: Vec<Tensor> = Vec::new();
        if let Some(t) = &truth {
            panels.push(t.pixels().clone());
        }
        panels.extend([low.pixels().clone(), mu.clone(), first.clone(), avg]);
        run.write_png("sample.png", &Tensor::stack(&panels)?)?;
    }
    let psnrs: Vec<f64> = records.iter().filter_map(|r| r.metrics.and_then(|m| m.psnr)).collect();
    run.write_json(
        "report.json",
        &json!({
            "item": id,
            "theta_miss": theta,
            "samples": records,
            "average": avg_metrics,
            "psnr": Summary::of(&psnrs),
            "T_tt": total_iterations(scfg.steps, scfg.travel_l, scfg.travel_r),
            "wall_time_s": started.elapsed().as_secs_f64(),
            "panels": if truth.is_some() { "truth, fbp, mu, sample, average" } else { "fbp, mu, sample, average" },
        }),
    )?;
    run.finish()
}

fn parse_methods(labels: &[String]) -> Result<Vec<Method>> {
    if labels.is_empty() {
        return Ok(Method::ALL.to_vec());
    }
    labels
        .iter()
        .map(|l| {
            Method::ALL
                .iter()
                .copied()
                .find(|m| m.label() == l.trim())
                .ok_or_else(|| {
                    let known: Vec<&str> = Method::ALL.iter().map(|m| m.label()).collect();
                    Error::InvalidArgument(format!("unknown method `{l}`; known: {}", known.join(", ")))
                })
        })
        .collect()
}

fn evaluate_cmd(c: &Common, cfg: &RunConfig, methods: &[String]) -> Result<()> {
    let methods = parse_methods(methods)?;
    let mut run = run_dir(c, "evaluate", cfg)?;
    let mut scenarios = Vec::new();
    for &theta in &cfg.eval.theta_miss {
        let sc = load_scenario(cfg, theta)?;
        run.input(&cfg.pinv_checkpoint(theta));
        run.input(&cfg.score_checkpoint(theta));
        if sc.restorer.is_some() {
            run.input(&cfg.restorer_checkpoint(theta));
        }
        let test = load_items(cfg, theta, Split::Test)?;
        record_dataset(&mut run, cfg, theta);
        scenarios.push((sc, test));
    }
    let report = run_experiment(cfg, &scenarios, &methods)?;
    let seeds = average_seeds(&rnsde::sampler::SamplerConfig {
        sa_count: cfg.eval.runs.max(cfg.sampler.sa_count),
        ..cfg.sampler()
    });
    run.seeds(&seeds);
    let table = report.table();
    print!("{table}");
    run.write_text("table.txt", &table)?;
    run.write_json("report.json", &report)?;
    run.finish()
}

#[derive(Serialize)]
struct AblationRow {
    value: serde_json::Value,
    method: Method,
    psnr: Summary,
    ssim: Summary,
    consistency: Summary,
}

fn expand_key(key: &str) -> &str {
    match key {
        "T" => "schedule.T",
        "mu" => "score.mu",
        "lambda2" => "schedule.lambda2",
        "alpha" => "sampler.rescale_alpha",
        "beta" => "sampler.skip_beta",
        other => other,
    }
}

fn ablate_cmd(c: &Common, cfg: &RunConfig, sweep: &str, with_unrectified: bool) -> Result<()> {
    let Some((key, values)) = sweep.split_once('=') else {
        return usage(format!("--sweep `{sweep}` is not KEY=v1,v2,..."));
    };
    let key = expand_key(key.trim());
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return usage("--sweep needs at least one value");
    }
    let variants = values
        .iter()
        .map(|v| {
            let vc = cfg.with_overrides(&[format!("{key}={v}")])?;
            vc.validate()?;
            Ok(vc)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut run = run_dir(c, "ablate", cfg)?;
    let theta = cfg.geometry.theta_miss;
    let retrain = key.starts_with("schedule.") || key.starts_with("score.");
    let test = load_items(cfg, theta, Split::Test)?;
    let train = if retrain {
        load_items(cfg, theta, Split::Train)?
    } else {
        Vec::new()
    };
    record_dataset(&mut run, cfg, theta);
    let mut methods = vec![Method::Sde];
    if with_unrectified {
        methods.insert(0, Method::SdeUnrectified);
    }
    let mut rows = Vec::new();
    for (v, vc) in values.iter().zip(&variants) {
        let mut sc = if retrain {
            // reuse the base pseudo-inverse and restorer; the score model follows the variant
            let mut base = vc.clone();
            base.score = cfg.score.clone();
            base.schedule = cfg.schedule.clone();
            load_pinv_restorer(&base, theta, vc.score.mu, &mut run)?
        } else {
            let sc = load_scenario(vc, theta)?;
            run.input(&vc.score_checkpoint(theta));
            sc
        };
        if retrain {
            let path = run.root.join(format!("score_{}.rnt", sanitize(v)));
            sc.score = match CondDenoiser::load(&path) {
                Ok((m, meta)) if meta == score_metadata(vc) => m,
                _ => {
                    let (m, _) = fit_score(vc, &vc.schedule()?, &train, sc.restorer.as_ref())?;
                    m.save(&path, score_metadata(vc))?;
                    m
                }
            };
            run.path(&format!("score_{}.rnt", sanitize(v)));
        }
        let settings = eval_settings(vc, &methods);
        for r in evaluate_scenario(&test, theta, &sc.op, &sc.models(), &vc.schedule()?, &settings)? {
            eprintln!("{key}={v} {}: PSNR {:.2} dB", r.method.label(), r.psnr.mean);
            rows.push(AblationRow {
                value: serde_json::from_str(v).unwrap_or_else(|_| json!(v)),
                method: r.method,
                psnr: r.psnr,
                ssim: r.ssim,
                consistency: r.consistency,
            });
        }
    }
    run.seeds(&average_seeds(&rnsde::sampler::SamplerConfig {
        sa_count: cfg.eval.runs,
        ..cfg.sampler()
    }));
    let report = json!({ "sweep": key, "theta_miss": theta, "rows": rows });
    run.write_json("report.json", &report)?;
    run.finish()
}

fn sanitize(v: &str) -> String {
    v.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

/// The scenario's pseudo-inverse and restorer, with a placeholder score
/// network to be replaced by the caller.
fn load_pinv_restorer(
    cfg: &RunConfig,
    theta: f64,
    mu: MuSource,
    run: &mut RunDir,
) -> Result<rnsde::pipeline::Scenario> {
    let geometry = cfg.geometry_for(theta)?;
    let path = cfg.pinv_checkpoint(theta);
    if !path.exists() {
        return Err(Error::MissingDependency(format!(
            "pseudo-inverse checkpoint {} not found",
            path.display()
        )));
    }
    run.input(&path);
    let pinv = rnsde::pinv::LearnablePinv::load(&path, &geometry)?;
    let restorer = match mu {
        MuSource::Restorer => Some(load_restorer(cfg, theta, run)?),
        MuSource::Fbp => None,
    };
    Ok(rnsde::pipeline::Scenario {
        theta_miss: theta,
        op: pinv.radon().clone(),
        geometry,
        pinv,
        restorer,
        score: CondDenoiser::new(cfg.score.model, 0)?,
        mu,
    })
}
