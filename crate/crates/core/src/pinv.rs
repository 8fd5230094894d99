//! Learned Radon pseudo-inverse and the range/null-space projectors.
//!
//! The learned operator filters every projection with a ramp whose
//! per-frequency gains are `exp(g_f)`, back-projects, weights by the
//! angular step and adds the output of a bias-free U-Net. With `g = 0` and
//! the U-Net's zero-initialised output layer it is exactly FBP.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, shape_err, Error, Result};
use crate::nets::{add_unet, unet};
use crate::numerics::container::{read_store, write_store};
use crate::numerics::filter::RowFilter;
use crate::numerics::optim::{adamw_step, AdamWConfig, LrSchedule, OptimizerState};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::tomography::{ramp_row_filter, BackProjector, Geometry, Image, RadonOperator, Sinogram, Window};

/// A linear forward operator paired with an (approximate) pseudo-inverse.
pub trait Operator: Sync {
    /// `A x`.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    /// `Â† y`.
    fn pinv(&self, y: &Tensor) -> Result<Tensor>;

    fn forward_many(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        x.iter().map(|v| self.forward(v)).collect()
    }

    fn pinv_many(&self, y: &[Tensor]) -> Result<Vec<Tensor>> {
        y.iter().map(|v| self.pinv(v)).collect()
    }
}

fn split(t: Tensor, n: usize) -> Result<Vec<Tensor>> {
    (0..n).map(|i| t.index_outer(i)).collect()
}

/// `Â† A x`.
pub fn range_project(x: &Tensor, op: &dyn Operator) -> Result<Tensor> {
    op.pinv(&op.forward(x)?)
}

/// `x − Â† A x`.
pub fn null_project(x: &Tensor, op: &dyn Operator) -> Result<Tensor> {
    x.sub(&range_project(x, op)?)
}

/// Range-space correction `x − γ (Â† A x − Â† y)`. With `γ = 1` this is
/// `Â† y + (I − Â† A) x`; for a linear `Â†` it equals
/// `x − γ Â†(A x − y)`.
pub fn rectify(x: &Tensor, y: &Tensor, op: &dyn Operator, gamma: f64) -> Result<Tensor> {
    if !(gamma >= 0.0) {
        return invalid(format!("rectification strength must be >= 0, got {gamma}"));
    }
    if gamma == 0.0 {
        return Ok(x.clone());
    }
    let ax = op.pinv(&op.forward(x)?)?;
    let ay = op.pinv(y)?;
    let corr = ax.sub(&ay)?;
    x.zip_map(&corr, |a, c| a - gamma * c)
}

/// Pixel subsampling `A x = x[keep]` with the exact pseudo-inverse
/// `A† y` = zero-fill.
#[derive(Clone, Debug)]
pub struct MaskOperator {
    shape: Vec<usize>,
    keep: Vec<usize>,
}

impl MaskOperator {
    pub fn new(shape: &[usize], mut keep: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        keep.sort_unstable();
        keep.dedup();
        if keep.iter().any(|&k| k >= n) {
            return invalid("mask index out of range");
        }
        Ok(Self {
            shape: shape.to_vec(),
            keep,
        })
    }

    /// Keeps every `stride`-th row of an `[H, W]` image.
    pub fn rows(height: usize, width: usize, stride: usize) -> Result<Self> {
        let keep = (0..height)
            .step_by(stride.max(1))
            .flat_map(|i| (0..width).map(move |j| i * width + j))
            .collect();
        Self::new(&[height, width], keep)
    }
}

impl Operator for MaskOperator {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.shape.as_slice() {
            return shape_err(format!("mask operator expects {:?}, got {:?}", self.shape, x.shape()));
        }
        Ok(Tensor::from_vec(self.keep.iter().map(|&k| x.data()[k]).collect()))
    }

    fn pinv(&self, y: &Tensor) -> Result<Tensor> {
        if y.shape() != [self.keep.len()] {
            return shape_err(format!("mask measurement must be [{}]", self.keep.len()));
        }
        let mut out = Tensor::zeros(&self.shape);
        for (&k, &v) in self.keep.iter().zip(y.data()) {
            out.data_mut()[k] = v;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinvConfig {
    /// Disable to get the purely linear learned-filter FBP.
    pub postproc: bool,
    pub width: usize,
    pub levels: usize,
}

impl Default for PinvConfig {
    fn default() -> Self {
        Self {
            postproc: true,
            width: 16,
            levels: 3,
        }
    }
}

/// `Â†_η`: learnable ramp gains, back-projection and a bias-free U-Net
/// residual.
#[derive(Clone)]
pub struct LearnablePinv {
    pub config: PinvConfig,
    pub params: ParamStore,
    geometry: Geometry,
    radon: Arc<RadonOperator>,
    filter: Arc<RowFilter>,
}

impl std::fmt::Debug for LearnablePinv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LearnablePinv")
            .field("config", &self.config)
            .field("views", &self.geometry.num_angles())
            .field("detectors", &self.geometry.num_detectors)
            .finish()
    }
}

const GAINS: &str = "filter.log_gain";

impl LearnablePinv {
    pub fn new(geometry: &Geometry, config: PinvConfig, seed: u64) -> Result<Self> {
        let n = geometry.num_detectors;
        if config.postproc {
            if config.width == 0 || config.levels == 0 {
                return invalid("post-processor needs width and levels >= 1");
            }
            let div = 1 << (config.levels - 1);
            if n % div != 0 {
                return shape_err(format!("image size {n} not divisible by {div} for {} levels", config.levels));
            }
        }
        let radon = Arc::new(RadonOperator::new(geometry)?);
        let filter = Arc::new(ramp_row_filter(n, Window::None)?);
        let mut params = ParamStore::new();
        params.insert(GAINS, Tensor::zeros(&[filter.num_bins()]))?;
        if config.postproc {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            add_unet(&mut params, "pp", 1, config.width, config.levels, false, &mut rng)?;
        }
        Ok(Self {
            config,
            params,
            geometry: geometry.clone(),
            radon,
            filter,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn radon(&self) -> &Arc<RadonOperator> {
        &self.radon
    }

    pub fn image_size(&self) -> usize {
        self.geometry.num_detectors
    }

    /// Records `Â†` on `params` for `sino: [B, A, D]`; returns `[B, 1, N, N]`.
    pub fn forward_graph(&self, g: &mut Graph, params: &ParamStore, sino: Var) -> Result<Var> {
        let b = g.value(sino).shape()[0];
        let n = self.image_size();
        let gains = g.param(params, GAINS)?;
        let filtered = g.row_filter(sino, gains, self.filter.clone())?;
        let bp = g.map(filtered, Arc::new(BackProjector(self.radon.clone())))?;
        let bp = g.scale(bp, self.geometry.angular_weight());
        let bp = g.reshape(bp, &[b, 1, n, n])?;
        if !self.config.postproc {
            return Ok(bp);
        }
        let r = unet(g, params, "pp", self.config.levels, bp)?;
        g.add(bp, r)
    }

    /// Applies `Â†` to `[A, D]` or `[B, A, D]` data, returning `[N, N]` or
    /// `[B, N, N]`.
    pub fn apply_tensor(&self, y: &Tensor) -> Result<Tensor> {
        let (a, d) = (self.geometry.num_angles(), self.geometry.num_detectors);
        let (batch, single) = match *y.shape() {
            [ya, yd] if ya == a && yd == d => (y.clone().reshape(&[1, a, d])?, true),
            [_, ya, yd] if ya == a && yd == d => (y.clone(), false),
            _ => {
                return Err(Error::GeometryMismatch(format!(
                    "pseudo-inverse expects [{a}, {d}] projections, got {:?}",
                    y.shape()
                )))
            }
        };
        let b = batch.shape()[0];
        let n = self.image_size();
        let mut g = Graph::new();
        let s = g.input(batch);
        let out = self.forward_graph(&mut g, &self.params, s)?;
        let shape: &[usize] = if single { &[n, n] } else { &[b, n, n] };
        g.value(out).clone().reshape(shape)
    }

    /// `Â† y` for a sinogram of the model's geometry.
    pub fn apply(&self, sino: &Sinogram) -> Result<Image> {
        self.geometry.ensure_matches(sino.geometry())?;
        Image::new(self.apply_tensor(sino.values())?)
    }

    /// `A x` for `[N, N]` or `[B, N, N]` images.
    pub fn project_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let n = self.image_size();
        let a = self.geometry.num_angles();
        let (b, single) = match *x.shape() {
            [h, w] if h == n && w == n => (1, true),
            [b, h, w] if h == n && w == n => (b, false),
            _ => return shape_err(format!("expected [{n}, {n}] images, got {:?}", x.shape())),
        };
        let mut out = vec![0.0; b * a * n];
        for (src, dst) in x.data().chunks(n * n).zip(out.chunks_mut(a * n)) {
            self.radon.forward(src, dst);
        }
        let shape = if single { vec![a, n] } else { vec![b, a, n] };
        Tensor::new(shape, out)
    }

    pub fn metadata(&self) -> serde_json::Value {
        json!({
            "kind": "pinv",
            "config": self.config,
            "geometry": {
                "theta_miss": self.geometry.theta_miss,
                "angle_step": self.geometry.angle_step,
                "num_detectors": self.geometry.num_detectors,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_store(path, &self.params, self.metadata())
    }

    /// Loads a checkpoint, refusing one trained for another geometry.
    pub fn load(path: &Path, geometry: &Geometry) -> Result<Self> {
        let (params, meta) = read_store(path)?;
        if meta["kind"] != "pinv" {
            return Err(Error::Format(format!("{} is not a pseudo-inverse checkpoint", path.display())));
        }
        let tag = &meta["geometry"];
        let same = tag["theta_miss"].as_f64() == Some(geometry.theta_miss)
            && tag["angle_step"].as_f64() == Some(geometry.angle_step)
            && tag["num_detectors"].as_u64() == Some(geometry.num_detectors as u64);
        if !same {
            return Err(Error::GeometryMismatch(format!(
                "checkpoint {} was trained for {tag}, run uses wedge {}° step {}° with {} detectors",
                path.display(),
                geometry.theta_miss,
                geometry.angle_step,
                geometry.num_detectors
            )));
        }
        let config: PinvConfig = serde_json::from_value(meta["config"].clone())?;
        let mut model = Self::new(geometry, config, 0)?;
        for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
            model.params.set_value(&name, params.value(&name)?.clone())?;
        }
        if params.len() != model.params.len() {
            return Err(Error::Format("checkpoint has unexpected entries".into()));
        }
        Ok(model)
    }
}

impl Operator for LearnablePinv {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.project_tensor(x)
    }

    fn pinv(&self, y: &Tensor) -> Result<Tensor> {
        self.apply_tensor(y)
    }

    fn forward_many(&self, x: &[Tensor]) -> Result<Vec<Tensor>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        split(self.project_tensor(&Tensor::stack(x)?)?, x.len())
    }

    fn pinv_many(&self, y: &[Tensor]) -> Result<Vec<Tensor>> {
        if y.is_empty() {
            return Ok(Vec::new());
        }
        split(self.apply_tensor(&Tensor::stack(y)?)?, y.len())
    }
}

/// `(ℓ₁, ℓ₂)` graph nodes and the combined loss.
pub struct PinvLoss {
    pub loss: Var,
    pub l1: Var,
    pub l2: Option<Var>,
}

/// Records `(1 − α)·mean|y − A Â† y| + α·mean|Â† y − Â† A Â† y|` with
/// `y = A x` for the images `x: [B, N, N]`.
pub fn pinv_loss(model: &LearnablePinv, params: &ParamStore, g: &mut Graph, images: &Tensor, alpha: f64) -> Result<PinvLoss> {
    if !(0.0..=1.0).contains(&alpha) {
        return invalid(format!("alpha_pinv {alpha} outside [0, 1]"));
    }
    if images.ndim() != 3 || images.shape()[0] == 0 {
        return shape_err(format!("pinv loss needs a non-empty [B, N, N] batch, got {:?}", images.shape()));
    }
    let b = images.shape()[0];
    let (a, n) = (model.geometry.num_angles(), model.image_size());
    let radon: Arc<dyn crate::numerics::LinearMap> = model.radon.clone();
    let y = g.input(model.project_tensor(images)?);
    let xr = model.forward_graph(g, params, y)?;
    let xr_flat = g.reshape(xr, &[b, n, n])?;
    let ay = g.map(xr_flat, radon.clone())?;
    let l1 = g.l1_loss(y, ay)?;
    if alpha == 0.0 {
        return Ok(PinvLoss { loss: l1, l2: None, l1 });
    }
    let again = g.reshape(ay, &[b, a, n])?;
    let xrr = model.forward_graph(g, params, again)?;
    let l2 = g.l1_loss(xr, xrr)?;
    let w1 = g.scale(l1, 1.0 - alpha);
    let w2 = g.scale(l2, alpha);
    let loss = g.add(w1, w2)?;
    Ok(PinvLoss { loss, l1, l2: Some(l2) })
}

/// Aggregate held-out error `Σ‖A x − A Â† A x‖₁ / Σ‖A x‖₁`.
pub fn relative_consistency(model: &LearnablePinv, images: &[Tensor]) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for chunk in images.chunks(8) {
        let x = Tensor::stack(chunk)?;
        let y = model.project_tensor(&x)?;
        let ayr = model.project_tensor(&model.apply_tensor(&y)?)?;
        num += y.sub(&ayr)?.norm_l1();
        den += y.norm_l1();
    }
    if den == 0.0 {
        return invalid("held-out images have empty projections");
    }
    Ok(num / den)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinvTrainConfig {
    pub steps: usize,
    /// Steps trained with `alpha = 0` before switching to `alpha`.
    pub phase1_steps: usize,
    pub alpha: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PinvTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            phase1_steps: 800,
            alpha: 0.2,
            batch_size: 8,
            lr: 1e-3,
            eval_every: 50,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinvTrainReport {
    pub alpha_schedule: Vec<f64>,
    pub losses: Vec<f64>,
    pub l1: Vec<f64>,
    /// `(step, held-out relative ℓ₁)` at each evaluation.
    pub validation: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_validation: f64,
    pub initial_validation: f64,
    /// Steps at which a diverging run was rolled back to the last good
    /// evaluation with half the learning rate.
    #[serde(default)]
    pub recoveries: Vec<usize>,
}

/// Rollbacks allowed before training gives up.
const MAX_RECOVERIES: usize = 5;
/// A step loss this many times the first one counts as divergence.
const SPIKE_FACTOR: f64 = 100.0;

/// Two-phase training (ℓ₁ only, then the balanced loss), keeping the
/// parameters with the best held-out relative ℓ₁.
///
/// The gated post-processor is polynomial in its input and can blow up
/// suddenly. A non-finite or spiking loss, or a held-out error above ten
/// times the initial one, restores the parameters and optimizer state of
/// the last good evaluation and halves the learning rate.
pub fn train_pinv(
    train: &[Tensor],
    validation: &[Tensor],
    model: &mut LearnablePinv,
    cfg: &PinvTrainConfig,
) -> Result<PinvTrainReport> {
    if train.is_empty() || validation.is_empty() {
        return invalid("pseudo-inverse training needs train and validation images");
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.eval_every == 0 {
        return invalid("steps, batch_size and eval_every must be >= 1");
    }
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return invalid(format!("alpha_pinv {} outside [0, 1]", cfg.alpha));
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
    let initial = relative_consistency(model, validation)?;
    let mut report = PinvTrainReport {
        alpha_schedule: vec![0.0, cfg.alpha],
        losses: Vec::with_capacity(cfg.steps),
        l1: Vec::with_capacity(cfg.steps),
        validation: vec![(0, initial)],
        best_step: 0,
        best_validation: initial,
        initial_validation: initial,
        recoveries: Vec::new(),
    };
    let mut best = model.params.clone();
    let mut good = (model.params.clone(), opt.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let batch = Tensor::stack(&picks)?;
        let alpha = if step < cfg.phase1_steps { 0.0 } else { cfg.alpha };
        let mut g = Graph::new();
        let terms = pinv_loss(model, &model.params, &mut g, &batch, alpha)?;
        let loss = g.value(terms.loss).item();
        let spiked = report.losses.first().is_some_and(|&l0| loss > SPIKE_FACTOR * l0);
        if !loss.is_finite() || spiked {
            recover(model, &mut opt, &good, &mut report, step, loss)?;
            continue;
        }
        report.losses.push(loss);
        report.l1.push(g.value(terms.l1).item());
        model.params.zero_grad();
        g.backward(terms.loss, &mut model.params)?;
        adamw_step(&mut model.params, &mut opt)?;
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let v = relative_consistency(model, validation)?;
            if !v.is_finite() || v > 10.0 * initial {
                recover(model, &mut opt, &good, &mut report, step, v)?;
                continue;
            }
            report.validation.push((step + 1, v));
            good = (model.params.clone(), opt.clone());
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

fn recover(
    model: &mut LearnablePinv,
    opt: &mut OptimizerState,
    good: &(ParamStore, OptimizerState),
    report: &mut PinvTrainReport,
    step: usize,
    value: f64,
) -> Result<()> {
    if report.recoveries.len() == MAX_RECOVERIES {
        return Err(Error::Numerical(format!(
            "pseudo-inverse training diverged at step {step} ({value:e}) after {MAX_RECOVERIES} rollbacks"
        )));
    }
    report.recoveries.push(step);
    let mut config = opt.config;
    config.lr *= 0.5;
    if let LrSchedule::Cosine { min_lr, .. } = &mut config.schedule {
        *min_lr *= 0.5;
    }
    model.params = good.0.clone();
    *opt = good.1.clone();
    opt.config = config;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;
    use crate::tomography::{disk_phantom, fbp, radon};
    use rand::Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random::<f64>())
    }

    #[test]
    fn identity_initialisation_is_fbp() {
        let g = Geometry::limited(32, 3.0, 60.0).unwrap();
        let model = LearnablePinv::new(&g, PinvConfig::default(), 1).unwrap();
        let s = radon(&disk_phantom(32, 9.0, 0.7), &g).unwrap();
        let a = model.apply(&s).unwrap();
        let b = fbp(&s).unwrap();
        assert!(a.pixels().max_abs_diff(b.pixels()).unwrap() < 1e-5);
    }

    #[test]
    fn zero_sinogram_maps_to_zero() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let mut model = LearnablePinv::new(&g, PinvConfig { width: 4, levels: 2, postproc: true }, 2).unwrap();
        for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
            let shape = model.params.value(&name).unwrap().shape().to_vec();
            model.params.set_value(&name, random(&shape, 3).map(|v| v - 0.5)).unwrap();
        }
        let out = model.apply(&Sinogram::zeros(g).unwrap()).unwrap();
        assert!(out.pixels().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_mode_is_homogeneous() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let mut model = LearnablePinv::new(&g, PinvConfig { postproc: false, ..Default::default() }, 2).unwrap();
        let bins = model.params.value(GAINS).unwrap().len();
        model.params.set_value(GAINS, random(&[bins], 5).map(|v| v - 0.5)).unwrap();
        let y = random(&[g.num_angles(), 16], 6);
        let a = model.apply_tensor(&y.scale(2.5)).unwrap();
        let b = model.apply_tensor(&y).unwrap().scale(2.5);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let model = LearnablePinv::new(&g, PinvConfig::default(), 0).unwrap();
        let other = Geometry::limited(16, 6.0, 60.0).unwrap();
        assert!(matches!(model.apply(&Sinogram::zeros(other).unwrap()), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn alpha_zero_loss_is_l1() {
        let g = Geometry::limited(16, 10.0, 90.0).unwrap();
        let model = LearnablePinv::new(&g, PinvConfig { width: 4, levels: 2, postproc: true }, 0).unwrap();
        let x = random(&[2, 16, 16], 1);
        let mut gr = Graph::new();
        let t = pinv_loss(&model, &model.params, &mut gr, &x, 0.0).unwrap();
        assert_eq!(gr.value(t.loss).item(), gr.value(t.l1).item());
        assert!(pinv_loss(&model, &model.params, &mut gr, &Tensor::zeros(&[0, 16, 16]), 0.0).is_err());
    }

    #[test]
    fn exact_inverse_has_zero_loss() {
        // a single view of a 2x2 image is not invertible, but the toy mask
        // operator is; its pseudo-inverse zero-fills exactly
        let op = MaskOperator::rows(6, 6, 1).unwrap();
        let x = random(&[6, 6], 2);
        let y = op.forward(&x).unwrap();
        let back = op.forward(&op.pinv(&y).unwrap()).unwrap();
        assert_eq!(back.sub(&y).unwrap().norm_l1(), 0.0);
    }

    #[test]
    fn diverging_training_rolls_back() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let images: Vec<Tensor> = (0..6).map(|i| random(&[16, 16], 20 + i)).collect();
        let mut model = LearnablePinv::new(&g, PinvConfig { width: 4, levels: 2, postproc: true }, 1).unwrap();
        let cfg = PinvTrainConfig {
            steps: 40,
            phase1_steps: 40,
            batch_size: 2,
            lr: 0.3,
            eval_every: 5,
            ..Default::default()
        };
        let r = train_pinv(&images[..4], &images[4..], &mut model, &cfg).unwrap();
        assert!(!r.recoveries.is_empty());
        assert!(r.best_validation <= r.initial_validation);
        assert!(r.losses.iter().all(|l| l.is_finite()));
        let hopeless = PinvTrainConfig { lr: 1e3, ..cfg };
        let err = train_pinv(&images[..4], &images[4..], &mut model, &hopeless).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }

    #[test]
    fn pinv_loss_gradients_match_finite_differences() {
        let g = Geometry::limited(8, 20.0, 60.0).unwrap();
        let mut model = LearnablePinv::new(&g, PinvConfig { width: 2, levels: 2, postproc: true }, 4).unwrap();
        // move off the identity so every parameter carries gradient
        for name in model.params.names().map(str::to_string).collect::<Vec<_>>() {
            let shape = model.params.value(&name).unwrap().shape().to_vec();
            let v = random(&shape, 7 + name.len() as u64).map(|v| 0.6 * (v - 0.5));
            model.params.set_value(&name, v).unwrap();
        }
        let x = random(&[2, 8, 8], 9);
        let report = check_gradients(&model.params, 1e-6, |gr, p| Ok(pinv_loss(&model, p, gr, &x, 0.2)?.loss)).unwrap();
        assert!(report.max_error() < 1e-4, "{:?}", report.worst());
    }

    #[test]
    fn decomposition_is_exact_for_the_mask_operator() {
        let op = MaskOperator::rows(8, 8, 3).unwrap();
        let x = random(&[8, 8], 11);
        let r = range_project(&x, &op).unwrap();
        let n = null_project(&x, &op).unwrap();
        assert_eq!(r.add(&n).unwrap(), x);
        assert_eq!(op.forward(&n).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn rectification_with_exact_inverse_is_consistent() {
        let op = MaskOperator::rows(8, 8, 2).unwrap();
        let truth = random(&[8, 8], 12);
        let y = op.forward(&truth).unwrap();
        let x = random(&[8, 8], 13);
        assert_eq!(rectify(&x, &y, &op, 0.0).unwrap(), x);
        let r = rectify(&x, &y, &op, 1.0).unwrap();
        assert!(op.forward(&r).unwrap().sub(&y).unwrap().norm_l2() <= 1e-6);
        // the two algebraic forms agree
        let alt = op.pinv(&y).unwrap().add(&null_project(&x, &op).unwrap()).unwrap();
        assert!(r.max_abs_diff(&alt).unwrap() <= 1e-12);
        let lin = x.sub(&op.pinv(&op.forward(&x).unwrap().sub(&y).unwrap()).unwrap()).unwrap();
        assert!(r.max_abs_diff(&lin).unwrap() <= 1e-12);
    }

    #[test]
    fn rectify_forms_agree_for_linear_radon_pinv() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let model = LearnablePinv::new(&g, PinvConfig { postproc: false, ..Default::default() }, 0).unwrap();
        let x = random(&[16, 16], 14);
        let y = model.project_tensor(&disk_phantom(16, 5.0, 1.0).into_tensor()).unwrap();
        let r = rectify(&x, &y, &model, 1.0).unwrap();
        let alt = model.pinv(&y).unwrap().add(&null_project(&x, &model).unwrap()).unwrap();
        assert!(r.max_abs_diff(&alt).unwrap() <= 1e-5);
        let resid = model.project_tensor(&x).unwrap().sub(&y).unwrap();
        let lin = x.sub(&model.pinv(&resid).unwrap()).unwrap();
        assert!(r.max_abs_diff(&lin).unwrap() <= 1e-5);
        assert!(rectify(&x, &y, &model, -1.0).is_err());
    }

    #[test]
    fn checkpoints_carry_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pinv.rnt");
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let mut model = LearnablePinv::new(&g, PinvConfig { width: 4, levels: 2, postproc: true }, 0).unwrap();
        model.params.set_value(GAINS, random(&[model.filter.num_bins()], 1)).unwrap();
        model.save(&path).unwrap();
        let back = LearnablePinv::load(&path, &g).unwrap();
        assert_eq!(back.params.value(GAINS).unwrap(), model.params.value(GAINS).unwrap());
        let other = Geometry::limited(16, 6.0, 60.0).unwrap();
        assert!(matches!(LearnablePinv::load(&path, &other), Err(Error::GeometryMismatch(_))));
        assert!(matches!(
            LearnablePinv::load(&dir.path().join("missing.rnt"), &g),
            Err(Error::MissingDependency(_))
        ));
    }

    #[test]
    fn short_training_is_deterministic_and_improves() {
        let g = Geometry::limited(16, 6.0, 90.0).unwrap();
        let imgs: Vec<Tensor> = (0..6)
            .map(|i| disk_phantom(16, 3.0 + i as f64, 0.5 + 0.05 * i as f64).into_tensor())
            .collect();
        let cfg = PinvTrainConfig {
            steps: 30,
            phase1_steps: 20,
            batch_size: 2,
            eval_every: 10,
            ..Default::default()
        };
        let run = || {
            let mut m = LearnablePinv::new(&g, PinvConfig { width: 4, levels: 2, postproc: true }, 3).unwrap();
            let r = train_pinv(&imgs[..4], &imgs[4..], &mut m, &cfg).unwrap();
            (r, m)
        };
        let (a, ma) = run();
        let (b, _) = run();
        assert_eq!(a.alpha_schedule, vec![0.0, 0.2]);
        assert_eq!(
            a.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.best_validation < a.initial_validation);
        let v = relative_consistency(&ma, &imgs[4..]).unwrap();
        assert_eq!(v, a.best_validation);
    }
}
