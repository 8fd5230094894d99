//! Run configuration: one JSON document with defaults for every field and
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Error, Result};
use crate::eval::TvConfig;
use crate::mrsde::{make_schedule, DiffusionSchedule, ScheduleKind};
use crate::phantoms::PhantomSpec;
use crate::pinv::{PinvConfig, PinvTrainConfig};
use crate::restorer::{RestorerConfig, RestorerTrainConfig};
use crate::sampler::SamplerConfig;
use crate::score::{DenoiserConfig, TrainConfig};
use crate::tomography::Geometry;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    pub size: usize,
    pub angle_step: f64,
    pub theta_miss: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        Self {
            size: 32,
            angle_step: 2.0,
            theta_miss: 90.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub steps: usize,
    pub lambda2: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 100,
            lambda2: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub rescale_alpha: f64,
    pub skip_beta: usize,
    pub travel_l: usize,
    pub travel_r: usize,
    pub sa_count: usize,
    pub seed: u64,
    /// Range the clean-image estimates are clipped to during sampling.
    pub clip_x0: Option<[f64; 2]>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            rescale_alpha: d.rescale_alpha,
            skip_beta: d.skip_beta,
            travel_l: d.travel_l,
            travel_r: d.travel_r,
            sa_count: 10,
            seed: d.seed,
            clip_x0: Some([0.0, 1.0]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuSource {
    /// The stored FBP reconstruction.
    Fbp,
    /// The trained MMSE restorer applied to the FBP reconstruction.
    Restorer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            n_train: 400,
            n_test: 24,
            phantom: PhantomSpec {
                size: 32,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Dataset root holding `manifest.json`.
    pub data: PathBuf,
    pub checkpoints: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            checkpoints: PathBuf::from("checkpoints"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinvSection {
    pub model: PinvConfig,
    pub train: PinvTrainConfig,
}

impl Default for PinvSection {
    fn default() -> Self {
        Self {
            model: PinvConfig::default(),
            train: PinvTrainConfig {
                steps: 600,
                phase1_steps: 480,
                ..Default::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSection {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    /// Conditioning image the score model is trained and sampled with.
    pub mu: MuSource,
}

impl Default for ScoreSection {
    fn default() -> Self {
        Self {
            model: DenoiserConfig {
                width: 16,
                blocks: 2,
                emb_dim: 32,
                dropout: 0.0,
            },
            train: TrainConfig {
                steps: 3000,
                lr: 1e-3,
                ..Default::default()
            },
            mu: MuSource::Restorer,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestorerSection {
    pub model: RestorerConfig,
    pub train: RestorerTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub theta_miss: Vec<f64>,
    /// Sampler runs averaged per test item.
    pub runs: usize,
    /// Sampler chains advanced together per network call.
    pub chunk: usize,
    pub tv: TvConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            theta_miss: vec![60.0, 90.0, 120.0],
            runs: 10,
            chunk: 16,
            tv: TvConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub geometry: GeometrySection,
    pub schedule: ScheduleSection,
    pub sampler: SamplerSection,
    pub dataset: DatasetSection,
    pub paths: PathsSection,
    pub pinv: PinvSection,
    pub score: ScoreSection,
    pub restorer: RestorerSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            geometry: GeometrySection::default(),
            schedule: ScheduleSection::default(),
            sampler: SamplerSection::default(),
            dataset: DatasetSection::default(),
            paths: PathsSection::default(),
            pinv: PinvSection::default(),
            score: ScoreSection::default(),
            restorer: RestorerSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `a.b.c` in `doc`; every segment must already exist.
fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let slot = match cur {
            Value::Object(map) => map.get_mut(*part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|k| items.get_mut(k)),
            _ => None,
        };
        let Some(slot) = slot else {
            return invalid(format!("unknown config key `{}`", parts[..=i].join(".")));
        };
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    invalid("empty config key")
}

impl RunConfig {
    /// Reads a JSON file; missing fields take their defaults.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::InvalidArgument(format!("config {} not found", path.display())),
            _ => Error::Io(e),
        })?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    /// Applies `key=value` overrides; values parse as JSON, falling back to
    /// a plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let Some((key, raw)) = o.split_once('=') else {
                return invalid(format!("override `{o}` is not key=value"));
            };
            set_path(&mut doc, key.trim(), parse_scalar(raw.trim()))?;
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("override: {e}")))
    }

    pub fn geometry(&self) -> Result<Geometry> {
        self.geometry_for(self.geometry.theta_miss)
    }

    pub fn geometry_for(&self, theta_miss: f64) -> Result<Geometry> {
        Geometry::limited(self.geometry.size, self.geometry.angle_step, theta_miss)
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.schedule.steps, self.schedule.lambda2, ScheduleKind::Cosine)
    }

    pub fn sampler(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            steps: self.schedule.steps,
            rescale_alpha: s.rescale_alpha,
            skip_beta: s.skip_beta,
            travel_l: s.travel_l,
            travel_r: s.travel_r,
            sa_count: s.sa_count,
            seed: s.seed,
            clip_x0: s.clip_x0,
        }
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return invalid("experiment name is empty");
        }
        self.geometry()?;
        for &m in &self.eval.theta_miss {
            self.geometry_for(m)?;
        }
        let sched = self.schedule()?;
        self.sampler().validate(&sched)?;
        let d = &self.dataset;
        d.phantom.validate()?;
        if d.phantom.size != self.geometry.size {
            return invalid(format!(
                "dataset.phantom.size {} differs from geometry.size {}",
                d.phantom.size, self.geometry.size
            ));
        }
        if d.n_test == 0 || d.n_train < 2 {
            return invalid("dataset needs n_train >= 2 and n_test >= 1");
        }
        if self.eval.runs == 0 || self.eval.chunk == 0 {
            return invalid("eval.runs and eval.chunk must be >= 1");
        }
        if !(self.eval.tv.lambda > 0.0) {
            return invalid("eval.tv.lambda must be > 0");
        }
        Ok(())
    }

    pub fn pinv_checkpoint(&self, theta_miss: f64) -> PathBuf {
        self.paths.checkpoints.join(format!("pinv_miss{theta_miss}.rnt"))
    }

    pub fn restorer_checkpoint(&self, theta_miss: f64) -> PathBuf {
        self.paths.checkpoints.join(format!("restorer_miss{theta_miss}.rnt"))
    }

    pub fn score_checkpoint(&self, theta_miss: f64) -> PathBuf {
        self.paths.checkpoints.join(format!("score_miss{theta_miss}.rnt"))
    }

    /// Dataset root for one missing-wedge scenario.
    pub fn data_dir(&self, theta_miss: f64) -> PathBuf {
        self.paths.data.join(format!("miss{theta_miss}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
        let partial: RunConfig = serde_json::from_str(r#"{"name":"x","schedule":{"T":50}}"#).unwrap();
        assert_eq!(partial.schedule.steps, 50);
        assert_eq!(partial.schedule.lambda2, 0.01);
        let expected = SamplerConfig {
            steps: 50,
            sa_count: 10,
            clip_x0: Some([0.0, 1.0]),
            ..SamplerConfig::default()
        };
        assert_eq!(partial.sampler(), expected);
    }

    #[test]
    fn overrides_are_typed_and_checked() {
        let c = RunConfig::default()
            .with_overrides(&["schedule.T=200", "name=abl", "eval.theta_miss=[90]", "score.mu=fbp"])
            .unwrap();
        assert_eq!(c.schedule.steps, 200);
        assert_eq!(c.name, "abl");
        assert_eq!(c.eval.theta_miss, vec![90.0]);
        assert_eq!(c.score.mu, MuSource::Fbp);
        assert!(RunConfig::default().with_overrides(&["schedule.steps=3"]).is_err());
        assert!(RunConfig::default().with_overrides(&["schedule.T=abc"]).is_err());
        assert!(RunConfig::default().with_overrides(&["novalue"]).is_err());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus":1}"#).is_err());
        let bad = RunConfig::default().with_overrides(&["sampler.skip_beta=0"]).unwrap();
        assert!(bad.validate().is_err());
        let bad = RunConfig::default().with_overrides(&["geometry.size=48"]).unwrap();
        assert!(bad.validate().is_err());
    }
}
