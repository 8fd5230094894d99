//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 1 5 12`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rnsde::config::{MuSource, RunConfig};
use rnsde::eval::psnr;
use rnsde::experiment::{evaluate_scenario, Method, MetricReport};
use rnsde::mrsde::{
    ddpm_correspondence_check, forward_marginal, forward_sample, make_schedule, optimal_score, reverse_coeffs,
    DiffusionSchedule, ScheduleKind,
};
use rnsde::numerics::gradcheck::check_gradients;
use rnsde::numerics::{ParamStore, Tensor};
use rnsde::phantoms::{make_items, split_indices, Item};
use rnsde::pinv::{null_project, pinv_loss, range_project, rectify, LearnablePinv, MaskOperator, Operator, PinvConfig};
use rnsde::pipeline::{eval_settings, fit_pinv, fit_restorer, fit_score, Scenario};
use rnsde::restorer::{restorer_loss, Restorer, RestorerConfig};
use rnsde::sampler::{sample, total_iterations, SamplerConfig};
use rnsde::score::{score_loss, CondDenoiser, DenoiserConfig, GaussianOracle, NoisyBatch};
use rnsde::tomography::{disk_phantom, fbp, radon, Geometry};
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

fn cosine(steps: usize) -> DiffusionSchedule {
    make_schedule(steps, 0.01, ScheduleKind::Cosine).unwrap()
}

fn iteration_counts() -> Outcome {
    let a = total_iterations(200, 4, 2);
    let b = total_iterations(200, 8, 2);
    let s = cosine(200);
    let oracle = GaussianOracle::new(Tensor::full(&[2], 0.5), Tensor::full(&[2], 0.04)).unwrap();
    let mu = Tensor::zeros(&[2]);
    let mut lens = Vec::new();
    for l in [4, 8] {
        let cfg = SamplerConfig {
            steps: 200,
            travel_l: l,
            travel_r: 2,
            ..Default::default()
        };
        lens.push(sample(&mu, None, &oracle, &s, &cfg).unwrap().1.len());
    }
    check(
        a == 593 && b == 585 && lens == [593, 585],
        format!("T_tt = {a}, {b}; trace lengths {lens:?}"),
    )
}

fn extraction_identity() -> Outcome {
    let s = cosine(200);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x0 = random(&[32, 32], &mut rng);
        let mu = random(&[32, 32], &mut rng);
        let t = rng.random_range(1..=200);
        let xt = forward_sample(&x0, &mu, t, &s, &mut rng).unwrap();
        let sc = optimal_score(&xt, &x0, &mu, t, &s).unwrap();
        let back = rnsde::sampler::extract_x0(&xt, &mu, t, &sc, &s).unwrap();
        worst = worst.max(back.max_abs_diff(&x0).unwrap());
    }
    check(worst <= 1e-5, format!("max |x0 - extracted| = {worst:.2e} over 100 instances"))
}

fn posterior_mean_identity() -> Outcome {
    let s = cosine(200);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = random(&[64], &mut rng).map(|v| 2.0 * v - 0.5);
    let mu = random(&[64], &mut rng);
    let mut worst: f64 = 0.0;
    for t in 1..=200 {
        let c = reverse_coeffs(t, &s).unwrap();
        let (mt, _) = forward_marginal(&x0, &mu, t, &s).unwrap();
        let (mprev, _) = forward_marginal(&x0, &mu, t - 1, &s).unwrap();
        for i in 0..x0.len() {
            let (m, x, z) = (mu.data()[i], mt.data()[i], x0.data()[i]);
            let got = c.coef_a * (x - m) + c.h * (z - m) + m;
            worst = worst.max((got - mprev.data()[i]).abs());
        }
    }
    check(worst <= 1e-6, format!("max deviation {worst:.2e} over t = 1..200"))
}

fn gaussian_oracle() -> Outcome {
    let n = 10_000;
    let s = cosine(200);
    let oracle = GaussianOracle::new(Tensor::full(&[n], 0.5), Tensor::full(&[n], 0.04)).unwrap();
    let cfg = SamplerConfig {
        steps: 200,
        seed: 4,
        ..Default::default()
    }
    .unrectified();
    let (x, _) = sample(&Tensor::zeros(&[n]), None, &oracle, &s, &cfg).unwrap();
    let mean = x.mean();
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    check(
        (mean - 0.5).abs() <= 0.01 && (var / 0.04 - 1.0).abs() <= 0.05,
        format!("mean {mean:.4}, variance {var:.5} from {n} samples"),
    )
}

fn moore_penrose_case() -> Outcome {
    let op = MaskOperator::rows(16, 16, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = op.forward(&random(&[16, 16], &mut rng)).unwrap();
    let x = random(&[16, 16], &mut rng);
    let r = rectify(&x, &y, &op, 1.0).unwrap();
    let err = op.forward(&r).unwrap().sub(&y).unwrap().norm_l2();
    let parts = range_project(&x, &op).unwrap().add(&null_project(&x, &op).unwrap()).unwrap();
    check(
        err <= 1e-6 && parts == x,
        format!("||A x_hat - y|| = {err:.1e}; decomposition bitwise exact: {}", parts == x),
    )
}

fn fbp_anchor() -> Outcome {
    let g = Geometry::limited(32, 2.0, 90.0).unwrap();
    let model = LearnablePinv::new(&g, PinvConfig::default(), 1).unwrap();
    let s = radon(&disk_phantom(32, 9.0, 0.7), &g).unwrap();
    let gap = model.apply(&s).unwrap().pixels().max_abs_diff(fbp(&s).unwrap().pixels()).unwrap();
    let truth = disk_phantom(64, 16.0, 1.0);
    let full = Geometry::full(64, 1.0).unwrap();
    let rec = fbp(&radon(&truth, &full).unwrap()).unwrap();
    let p = psnr(rec.pixels(), truth.pixels(), 1.0).unwrap();
    check(
        gap <= 1e-5 && p >= 30.0,
        format!("identity pinv vs FBP {gap:.1e}; full-angle disk PSNR {p:.2} dB"),
    )
}

fn desk_config() -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let cfg = RunConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    cfg
}

fn pinv_training() -> Outcome {
    let cfg = desk_config()
        .with_overrides(&[
            "geometry.size=64",
            "dataset.phantom.size=64",
            "dataset.n_train=120",
            "pinv.model.levels=4",
            "pinv.train.batch_size=4",
            "pinv.train.steps=2000",
            "pinv.train.phase1_steps=1600",
            "pinv.train.eval_every=100",
        ])
        .unwrap();
    let g = cfg.geometry_for(90.0).unwrap();
    let (train, _) = split_indices(cfg.dataset.n_train, 0);
    let items = make_items(&cfg.dataset.phantom, &train, &g).unwrap();
    let (_, report) = fit_pinv(&cfg, &g, &items).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let k = 10.min(report.l1.len());
    let drop = mean(&report.l1[..k]) / mean(&report.l1[report.l1.len() - k..]);
    check(
        drop >= 10.0 && report.best_validation <= 0.05,
        format!(
            "training l1 drop {drop:.1}x; held-out relative error {:.4} -> {:.4} (step {}); rollbacks at {:?}",
            report.initial_validation, report.best_validation, report.best_step, report.recoveries
        ),
    )
}

/// Trained models and test items per missing wedge, shared by the
/// sampling criteria.
struct Desk {
    cfg: RunConfig,
    train: BTreeMap<u64, Vec<Item>>,
    test: BTreeMap<u64, Vec<Item>>,
    pinv: BTreeMap<u64, LearnablePinv>,
}

fn desk() -> &'static std::sync::Mutex<Desk> {
    static DESK: OnceLock<std::sync::Mutex<Desk>> = OnceLock::new();
    DESK.get_or_init(|| {
        let cfg = desk_config();
        std::sync::Mutex::new(Desk {
            cfg,
            train: BTreeMap::new(),
            test: BTreeMap::new(),
            pinv: BTreeMap::new(),
        })
    })
}

impl Desk {
    fn prepare(&mut self, theta: f64) -> (Vec<Item>, Vec<Item>, LearnablePinv) {
        let key = theta as u64;
        if !self.pinv.contains_key(&key) {
            let g = self.cfg.geometry_for(theta).unwrap();
            let (tr, te) = split_indices(self.cfg.dataset.n_train, self.cfg.dataset.n_test);
            let train = make_items(&self.cfg.dataset.phantom, &tr, &g).unwrap();
            let test = make_items(&self.cfg.dataset.phantom, &te, &g).unwrap();
            let (pinv, _) = fit_pinv(&self.cfg, &g, &train).unwrap();
            self.train.insert(key, train);
            self.test.insert(key, test);
            self.pinv.insert(key, pinv);
        }
        (self.train[&key].clone(), self.test[&key].clone(), self.pinv[&key].clone())
    }

    fn scenario(&mut self, theta: f64, mu: MuSource) -> (Scenario, Vec<Item>, RunConfig) {
        let (train, test, pinv) = self.prepare(theta);
        let mut cfg = self.cfg.clone();
        cfg.score.mu = mu;
        let restorer = match mu {
            MuSource::Restorer => Some(fit_restorer(&cfg, &train).unwrap().0),
            MuSource::Fbp => None,
        };
        let (score, _) = fit_score(&cfg, &cfg.schedule().unwrap(), &train, restorer.as_ref()).unwrap();
        let sc = Scenario {
            theta_miss: theta,
            geometry: pinv.geometry().clone(),
            op: pinv.radon().clone(),
            pinv,
            restorer,
            score,
            mu,
        };
        (sc, test, cfg)
    }
}

fn evaluate(sc: &Scenario, test: &[Item], cfg: &RunConfig, methods: &[Method]) -> MetricReport {
    let rows = evaluate_scenario(
        test,
        sc.theta_miss,
        &sc.op,
        &sc.models(),
        &cfg.schedule().unwrap(),
        &eval_settings(cfg, methods),
    )
    .unwrap();
    MetricReport { config: Value::Null, rows }
}

fn rectification_benefit() -> Outcome {
    let mut desk = desk().lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut notes = Vec::new();
    for theta in [60.0, 90.0] {
        let (sc, test, cfg) = desk.scenario(theta, MuSource::Fbp);
        let rep = evaluate(&sc, &test, &cfg, &[Method::SdeUnrectified, Method::Sde]);
        let off = rep.row(Method::SdeUnrectified, theta).unwrap();
        let on = rep.row(Method::Sde, theta).unwrap();
        ok &= on.psnr.mean > off.psnr.mean && on.consistency.mean < off.consistency.mean;
        notes.push(format!(
            "{theta}°: PSNR {:.2} vs {:.2} dB, consistency {:.3} vs {:.3}",
            on.psnr.mean, off.psnr.mean, on.consistency.mean, off.consistency.mean
        ));
        println!("  {}", rep.table().replace('\n', "\n  "));
    }
    check(
        ok,
        format!("rectified vs unrectified over {} seeds: {}", desk.cfg.eval.runs, notes.join("; ")),
    )
}

fn method_ordering() -> Outcome {
    let mut desk = desk().lock().unwrap_or_else(|e| e.into_inner());
    let mut ok = true;
    let mut notes = Vec::new();
    for theta in [60.0, 90.0, 120.0] {
        let (sc, test, cfg) = desk.scenario(theta, MuSource::Restorer);
        let rep = evaluate(
            &sc,
            &test,
            &cfg,
            &[Method::Fbp, Method::Tv, Method::Restorer, Method::Sde, Method::SdeAverage],
        );
        let p = |m| rep.row(m, theta).unwrap().psnr.mean;
        let single = rep.row(Method::Sde, theta).unwrap();
        let avg = rep.row(Method::SdeAverage, theta).unwrap();
        let wins = single.items.iter().zip(&avg.items).filter(|(s, a)| a.psnr >= s.psnr).count();
        let frac = wins as f64 / single.items.len() as f64;
        ok &= p(Method::Fbp) < p(Method::Tv) && p(Method::Tv) < p(Method::Sde) && frac >= 0.9;
        notes.push(format!(
            "{theta}°: FBP {:.2} / TV {:.2} / RN-SDE {:.2} / SA {:.2} dB, SA >= single in {wins}/{}",
            p(Method::Fbp),
            p(Method::Tv),
            p(Method::Sde),
            p(Method::SdeAverage),
            single.items.len()
        ));
        println!("  {}", rep.table().replace('\n', "\n  "));
    }
    check(ok, notes.join("; "))
}

fn randomise(params: &mut ParamStore, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in params.names().map(str::to_string).collect::<Vec<_>>() {
        let shape = params.value(&name).unwrap().shape().to_vec();
        params.set_value(&name, random(&shape, &mut rng).map(|v| scale * (v - 0.5))).unwrap();
    }
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let den = CondDenoiser::new(
        DenoiserConfig {
            width: 2,
            blocks: 3,
            emb_dim: 4,
            dropout: 0.1,
        },
        3,
    )
    .unwrap();
    let (x0, mu) = (random(&[8, 8], &mut rng), random(&[8, 8], &mut rng));
    let batch = NoisyBatch::draw(&[(&x0, &mu), (&mu, &x0)], &cosine(100), &mut rng).unwrap();
    let d = check_gradients(&den.params, 1e-6, |g, p| {
        let mut drop = ChaCha8Rng::seed_from_u64(7);
        score_loss(&den, p, g, &batch, Some(&mut drop))
    })
    .unwrap();

    let mut rest = Restorer::new(RestorerConfig { width: 2, levels: 2 }, 4).unwrap();
    randomise(&mut rest.params, 0.8, 11);
    let (x, y) = (random(&[2, 8, 8], &mut rng), random(&[2, 8, 8], &mut rng));
    let r = check_gradients(&rest.params, 1e-6, |g, p| restorer_loss(&rest, p, g, &x, &y)).unwrap();

    let geo = Geometry::limited(8, 20.0, 60.0).unwrap();
    let mut pinv = LearnablePinv::new(
        &geo,
        PinvConfig {
            width: 2,
            levels: 2,
            postproc: true,
        },
        4,
    )
    .unwrap();
    randomise(&mut pinv.params, 0.6, 12);
    let imgs = random(&[2, 8, 8], &mut rng);
    let p = check_gradients(&pinv.params, 1e-6, |g, ps| Ok(pinv_loss(&pinv, ps, g, &imgs, 0.2)?.loss)).unwrap();

    let worst = [d.max_error(), r.max_error(), p.max_error()];
    check(
        worst.iter().all(|&e| e < 1e-4),
        format!(
            "max relative error: denoiser {:.1e}, restorer {:.1e}, pseudo-inverse {:.1e}",
            worst[0], worst[1], worst[2]
        ),
    )
}

const TINY: &str = r#"{
  "name": "determinism",
  "geometry": { "size": 16, "angle_step": 6.0, "theta_miss": 90.0 },
  "schedule": { "T": 8 },
  "sampler": { "sa_count": 2 },
  "dataset": { "n_train": 6, "n_test": 2, "phantom": { "size": 16 } },
  "paths": { "data": "data", "checkpoints": "ckpt" },
  "pinv": { "model": { "width": 4, "levels": 2 }, "train": { "steps": 6, "phase1_steps": 3, "batch_size": 2, "eval_every": 3 } },
  "restorer": { "model": { "width": 4, "levels": 2 }, "train": { "steps": 6, "batch_size": 2, "eval_every": 3 } },
  "score": { "model": { "width": 4, "blocks": 1, "emb_dim": 8 }, "train": { "steps": 6, "batch_size": 2 } },
  "eval": { "theta_miss": [90.0], "runs": 2, "chunk": 3, "tv": { "iters": 5 } }
}"#;

fn run_all_commands(root: &Path) -> Result<(), String> {
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    fs::write(root.join("c.json"), TINY).map_err(|e| e.to_string())?;
    let steps: &[&[&str]] = &[
        &["dataset", "build", "--out", "runs/dataset"],
        &["project", "--input", "data/miss90/test/p000006.img.rnt", "--out", "runs/project", "--export-png"],
        &["fbp", "--input", "runs/project/sino.rnt", "--out", "runs/fbp"],
        &["train-pinv", "--out", "runs/pinv"],
        &["train-restorer", "--out", "runs/restorer"],
        &["train-score", "--out", "runs/score"],
        &["sample", "--seed", "3", "--out", "runs/sample", "--export-png"],
        &["evaluate", "--out", "runs/evaluate"],
        &["ablate", "--sweep", "alpha=0.5,2", "--with-unrectified", "--out", "runs/ablate"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_rnsde"))
            .current_dir(root)
            .args(*args)
            .args(["--config", "c.json"])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let mut bytes = fs::read(&p).unwrap();
                if p.file_name().is_some_and(|n| n == "report.json") {
                    let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                    if let Some(obj) = v.as_object_mut() {
                        obj.remove("wall_time_s");
                    }
                    bytes = serde_json::to_vec(&v).unwrap();
                }
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all_commands(&a)?;
    run_all_commands(&b)?;
    let (fa, fb) = (files(&a), files(&b));
    let differ: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = fa.keys().eq(fb.keys());
    check(
        same_set && differ.is_empty(),
        format!("{} artifacts from 9 commands compared; differing: {differ:?}", fa.len()),
    )
}

fn ddpm_correspondence() -> Outcome {
    let r = ddpm_correspondence_check(&cosine(1000));
    check(
        r.max_mean_rel <= 1e-3 && r.max_var_rel <= 1e-3,
        format!("max relative deviation: mean {:.2e}, variance {:.2e}", r.max_mean_rel, r.max_var_rel),
    )
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "iteration counts", iteration_counts),
        (2, "clean-image extraction", extraction_identity),
        (3, "posterior-mean identity", posterior_mean_identity),
        (4, "Gaussian oracle sampling", gaussian_oracle),
        (5, "Moore-Penrose exact case", moore_penrose_case),
        (6, "FBP anchor", fbp_anchor),
        (7, "pseudo-inverse training", pinv_training),
        (8, "rectification benefit", rectification_benefit),
        (9, "method ordering", method_ordering),
        (10, "gradient correctness", gradient_checks),
        (11, "determinism", determinism),
        (12, "DDPM correspondence", ddpm_correspondence),
    ];
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !picked.is_empty() && !picked.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n} ({name}): PASS [{secs:.1} s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1} s] {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
