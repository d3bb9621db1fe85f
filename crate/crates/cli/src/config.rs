use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use steerkit::harness::model::Pooling;
use steerkit::harness::pipeline::ExperimentConfig;
use steerkit::steering::DEFAULT_ALPHA;
use steerkit::textualizer::RemoteBackendConfig;
use steerkit::{Error, FactConfig, Result, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub annotations: Option<PathBuf>,
    pub rasters: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            annotations: None,
            rasters: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Template,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextualizerConfig {
    pub backend: BackendKind,
    pub remote: RemoteBackendConfig,
    /// Questions per image.
    pub n: usize,
    pub seed: u64,
}

impl Default for TextualizerConfig {
    fn default() -> Self {
        TextualizerConfig {
            backend: BackendKind::Template,
            remote: RemoteBackendConfig::default(),
            n: 6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// `None` picks the default for the model's head count.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub alpha: f32,
    pub pooling: Pooling,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        SteeringConfig {
            k: None,
            alpha: DEFAULT_ALPHA,
            pooling: Pooling::LastToken,
        }
    }
}

/// The whole pipeline's settings as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub facts: FactConfig,
    pub textualizer: TextualizerConfig,
    pub steering: SteeringConfig,
    pub training: TrainConfig,
    pub harness: ExperimentConfig,
}

impl PipelineConfig {
    /// Reads `path` (or defaults), then applies `overrides` in order.
    /// Each override is a dotted field path that must exist in the default
    /// document, and a value; values that do not parse as JSON are strings.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::MalformedFile {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?
            }
            None => Value::Object(Default::default()),
        };
        let known = serde_json::to_value(PipelineConfig::default())?;
        for (key, raw) in overrides {
            if key.split('.').try_fold(&known, |node, part| node.get(part)).is_none() {
                return Err(Error::InvalidArgument(format!("unknown config field '{key}'")));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut doc, key, value)?;
        }
        let cfg: PipelineConfig =
            serde_json::from_value(doc).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.steering.alpha >= 0.0 && self.steering.alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!("--alpha must be finite and >= 0, got {}", self.steering.alpha)));
        }
        if self.textualizer.n == 0 {
            return Err(Error::InvalidArgument("--n must be at least 1".into()));
        }
        self.training.validate()?;
        self.experiment().validate()
    }

    /// The harness settings with the steering and training sections applied.
    pub fn experiment(&self) -> ExperimentConfig {
        let mut e = self.harness.clone();
        e.k = self.steering.k.or(e.k);
        e.alpha = self.steering.alpha;
        e.model.pooling = self.steering.pooling;
        e.estimator = TrainConfig { seed: self.seed, ..self.training };
        e
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::InvalidArgument(format!("--set: empty field name in '{key}'")));
        }
        let obj = match node {
            Value::Object(map) => map,
            other => {
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just made an object")
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}
