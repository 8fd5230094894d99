//! MMSE restorer mapping FBP reconstructions to clean-image estimates, used
//! as the conditioning image of the diffusion sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nets::{add_unet, as_batch, unet};
use crate::numerics::container::{read_store, write_store};
use crate::numerics::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tomography::Image;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerConfig {
    pub width: usize,
    pub levels: usize,
}

impl Default for RestorerConfig {
    fn default() -> Self {
        Self { width: 16, levels: 3 }
    }
}

/// Residual U-Net: `restore(x) = x + f(x)`, with `f = 0` at initialisation.
#[derive(Clone, Debug)]
pub struct Restorer {
    pub config: RestorerConfig,
    pub params: ParamStore,
}

impl Restorer {
    pub fn new(config: RestorerConfig, seed: u64) -> Result<Self> {
        if config.width == 0 || config.levels == 0 {
            return invalid("restorer needs width and levels >= 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        add_unet(&mut params, "net", 1, config.width, config.levels, true, &mut rng)?;
        Ok(Self { config, params })
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let div = 1 << (self.config.levels - 1);
        if h % div != 0 || w % div != 0 {
            return shape_err(format!("image {h}x{w} not divisible by {div} for {} levels", self.config.levels));
        }
        Ok(())
    }

    /// `x: [B, 1, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let r = unet(g, params, "net", self.config.levels, x)?;
        g.add(x, r)
    }

    /// Restores `[H, W]` or `[B, H, W]` inputs.
    pub fn restore_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape().to_vec();
        let xb = as_batch(x)?;
        self.check_size(xb.shape()[2], xb.shape()[3])?;
        let mut g = Graph::new();
        let v = g.input(xb);
        let out = self.forward_graph(&mut g, &self.params, v)?;
        g.value(out).clone().reshape(&shape)
    }

    pub fn restore(&self, fbp: &Image) -> Result<Image> {
        Image::new(self.restore_tensor(fbp.pixels())?)
    }

    pub fn save(&self, path: &Path, image_size: usize) -> Result<()> {
        write_store(
            path,
            &self.params,
            json!({ "kind": "restorer", "config": self.config, "image_size": image_size }),
        )
    }

    /// Loads a checkpoint and the image size it was trained on.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let (params, meta) = read_store(path)?;
        if meta["kind"] != "restorer" {
            return Err(Error::Format(format!("{} is not a restorer checkpoint", path.display())));
        }
        let config: RestorerConfig = serde_json::from_value(meta["config"].clone())?;
        let size = meta["image_size"]
            .as_u64()
            .ok_or_else(|| Error::Format("restorer checkpoint lacks image_size".into()))?;
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::Format("restorer checkpoint has unexpected entries".into()));
        }
        for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
            model.params.set_value(&name, params.value(&name)?.clone())?;
        }
        Ok((model, size as usize))
    }
}

/// Mean squared error of `restore(inputs)` against `targets`, both `[B, H, W]`.
pub fn restorer_loss(model: &Restorer, params: &ParamStore, g: &mut Graph, inputs: &Tensor, targets: &Tensor) -> Result<Var> {
    inputs.check_same_shape(targets, "restorer targets")?;
    let x = g.input(as_batch(inputs)?);
    let y = g.input(as_batch(targets)?);
    let out = model.forward_graph(g, params, x)?;
    g.mse_loss(out, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for RestorerTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 1e-3,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorerReport {
    pub losses: Vec<f64>,
    /// `(step, mean validation MSE)`.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_validation: f64,
}

/// Mean MSE of the restorer over `(input, target)` pairs.
pub fn validation_mse(model: &Restorer, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return invalid("no validation pairs");
    }
    let mut total = 0.0;
    for chunk in pairs.chunks(8) {
        let x = Tensor::stack(&chunk.iter().map(|p| p.0.clone()).collect::<Vec<_>>())?;
        let y = Tensor::stack(&chunk.iter().map(|p| p.1.clone()).collect::<Vec<_>>())?;
        let out = model.restore_tensor(&x)?;
        let se: f64 = out.sub(&y)?.data().iter().map(|d| d * d).sum();
        total += se / (y.len() / chunk.len()) as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains on `(fbp, truth)` pairs with an L2 loss, keeping the parameters
/// with the lowest validation MSE.
pub fn train_restorer(
    train: &[(Tensor, Tensor)],
    validation: &[(Tensor, Tensor)],
    model: &mut Restorer,
    cfg: &RestorerTrainConfig,
) -> Result<RestorerReport> {
    if train.is_empty() || validation.is_empty() {
        return invalid("restorer training needs train and validation pairs");
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return invalid("steps, batch_size and eval_every must be >= 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::new(AdamWConfig {
        lr: cfg.lr,
        schedule: LrSchedule::Cosine {
            total_steps: cfg.steps as u64,
            min_lr: cfg.lr * 0.01,
        },
        ..Default::default()
    });
    let initial = validation_mse(model, validation)?;
    let mut report = RestorerReport {
        losses: Vec::with_capacity(cfg.steps),
        validation: vec![(0, initial)],
        best_step: 0,
        best_validation: initial,
    };
    let mut best = model.params.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        while xs.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            xs.push(train[order[cursor]].0.clone());
            ys.push(train[order[cursor]].1.clone());
            cursor += 1;
        }
        let mut g = Graph::new();
        let loss = restorer_loss(model, &model.params, &mut g, &Tensor::stack(&xs)?, &Tensor::stack(&ys)?)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!("restorer loss is {value} at step {step}")));
        }
        report.losses.push(value);
        model.params.zero_grad();
        g.backward(loss, &mut model.params)?;
        adamw_step(&mut model.params, &mut opt)?;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let v = validation_mse(model, validation)?;
            report.validation.push((step + 1, v));
            if v < report.best_validation {
                report.best_validation = v;
                report.best_step = step + 1;
                best = model.params.clone();
            }
        }
    }
    model.params = best;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::phantoms::{generate_phantom, PhantomSpec};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    fn small() -> RestorerConfig {
        RestorerConfig { width: 4, levels: 2 }
    }

    #[test]
    fn fresh_model_is_identity_and_shape_preserving() {
        let m = Restorer::new(RestorerConfig::default(), 1).unwrap();
        let x = random(&[16, 16], 2);
        let y = m.restore_tensor(&x).unwrap();
        assert_eq!(y.shape(), &[16, 16]);
        assert!(y.is_finite());
        assert!(y.max_abs_diff(&x).unwrap() < 1e-12);
        assert!(m.restore_tensor(&random(&[15, 15], 3)).is_err());
        assert_eq!(m.restore_tensor(&x).unwrap(), y);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut m = Restorer::new(RestorerConfig { width: 2, levels: 2 }, 4).unwrap();
        for name in m.params.names().map(str::to_string).collect::<Vec<_>>() {
            let shape = m.params.value(&name).unwrap().shape().to_vec();
            let v = random(&shape, name.len() as u64).map(|v| 0.8 * (v - 0.5));
            m.params.set_value(&name, v).unwrap();
        }
        let (x, y) = (random(&[2, 8, 8], 5), random(&[2, 8, 8], 6));
        let r = check_gradients(&m.params, 1e-6, |g, p| restorer_loss(&m, p, g, &x, &y)).unwrap();
        assert!(r.max_error() < 1e-4, "{:?}", r.worst());
    }

    #[test]
    fn overfits_a_single_pair() {
        let spec = PhantomSpec { size: 16, ..Default::default() };
        let target = generate_phantom(&spec, 0).unwrap().into_tensor();
        let input = target.map(|v| 0.6 * v + 0.1);
        let pairs = vec![(input, target)];
        let mut m = Restorer::new(small(), 7).unwrap();
        let cfg = RestorerTrainConfig {
            steps: 300,
            batch_size: 1,
            lr: 1e-2,
            eval_every: 300,
            seed: 1,
        };
        let r = train_restorer(&pairs, &pairs, &mut m, &cfg).unwrap();
        assert!(r.best_validation < 0.01 * r.validation[0].1, "{:?}", r.validation);
    }

    #[test]
    fn training_is_reproducible_and_checkpoints_round_trip() {
        let spec = PhantomSpec { size: 16, ..Default::default() };
        let pairs: Vec<_> = (0..4)
            .map(|i| {
                let t = generate_phantom(&spec, i).unwrap().into_tensor();
                (t.map(|v| 0.8 * v), t)
            })
            .collect();
        let cfg = RestorerTrainConfig {
            steps: 12,
            batch_size: 2,
            eval_every: 4,
            ..Default::default()
        };
        let run = || {
            let mut m = Restorer::new(small(), 2).unwrap();
            let r = train_restorer(&pairs[..3], &pairs[3..], &mut m, &cfg).unwrap();
            (r, m)
        };
        let (a, m) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.rnt");
        m.save(&path, 16).unwrap();
        let (back, size) = Restorer::load(&path).unwrap();
        assert_eq!(size, 16);
        assert_eq!(back.restore_tensor(&pairs[0].0).unwrap(), m.restore_tensor(&pairs[0].0).unwrap());
        assert!(matches!(Restorer::load(&dir.path().join("x.rnt")), Err(Error::MissingDependency(_))));
    }
}
