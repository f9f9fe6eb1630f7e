//! JSON run configuration, dot-path overrides and config digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::attack::AttackConfig;
use crate::data::{load_idx, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::eval::AlphaPolicy;
use crate::nn::{Layer, NetworkSpec};
use crate::rng;
use crate::scalar::{Precision, Real};
use crate::trainer::TrainConfig;

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted,
/// no whitespace).
pub fn digest_of<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    let hash = Sha256::digest(canonical.as_bytes());
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    MnistCnn,
    Mlp {
        hidden: usize,
        classes: usize,
    },
    Custom {
        layers: Vec<Layer>,
    },
}

impl ModelConfig {
    pub fn spec(&self) -> NetworkSpec {
        match self {
            Self::MnistCnn => NetworkSpec::mnist_cnn(),
            Self::Mlp { hidden, classes } => NetworkSpec::small_mlp(*hidden, *classes),
            Self::Custom { layers } => NetworkSpec {
                layers: layers.clone(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Random subset of the training set (all samples when absent).
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    Blobs {
        blobs: BlobSpec,
        train_per_class: usize,
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
}

impl DataConfig {
    /// `(train, test)`. Relative IDX paths resolve against `base_dir`.
    pub fn load<F: Real>(&self, base_dir: &Path) -> Result<(Dataset<F>, Dataset<F>)> {
        match self {
            Self::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                train_subset,
                test_subset,
            } => {
                let p = |q: &PathBuf| base_dir.join(q);
                let train: Dataset<F> = load_idx(&p(train_images), &p(train_labels))?;
                let test: Dataset<F> = load_idx(&p(test_images), &p(test_labels))?;
                let classes = train.classes().max(test.classes());
                let train = match train_subset {
                    Some(n) => train.sample(*n, rng::derive_seed(&[0x7a11, *n as u64]))?,
                    None => train,
                };
                let test = match test_subset {
                    Some(n) => test.sample(*n, rng::derive_seed(&[0x7e57, *n as u64]))?,
                    None => test,
                };
                Ok((train.with_classes(classes)?, test.with_classes(classes)?))
            }
            Self::Blobs {
                blobs,
                train_per_class,
                test_per_class,
                seed,
            } => Ok((
                blobs.generate(*train_per_class, rng::derive_seed(&[*seed, 0]))?,
                blobs.generate(*test_per_class, rng::derive_seed(&[*seed, 1]))?,
            )),
        }
    }
}

fn default_sweep_steps() -> Vec<usize> {
    vec![10]
}
fn default_sweep_epsilons() -> Vec<f64> {
    vec![0.0, 0.05, 0.1, 0.15, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_sweep_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "default_sweep_epsilons")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub alpha_policy: AlphaPolicy,
    /// Test samples evaluated (all when absent).
    #[serde(default)]
    pub samples: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            steps: default_sweep_steps(),
            epsilons: default_sweep_epsilons(),
            alpha_policy: AlphaPolicy::default(),
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Seeds evaluation subsets and attack starts; defaults to the training
    /// seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Test samples for profiling and adversary dumps (all when absent).
    #[serde(default)]
    pub samples: Option<usize>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// The whole JSON document driving one command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Self =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `overrides` (`key.path=value`) before
    /// validation.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataConfig::Blobs {
            blobs,
            train_per_class,
            test_per_class,
            ..
        } = &self.data
        {
            blobs.validate()?;
            if *train_per_class == 0 || *test_per_class == 0 {
                return Err(Error::Config("blobs: per-class counts must be ≥ 1".into()));
            }
        }
        let s = &self.eval.sweep;
        if s.steps.is_empty() || s.epsilons.is_empty() {
            return Err(Error::Config("eval.sweep: steps and epsilons must be non-empty".into()));
        }
        if s.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(Error::Config("eval.sweep: epsilons must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    /// Digest of everything that determines results; the output directory is
    /// left out so that moving a run does not change its identity.
    pub fn digest(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
        }
        digest_of(&value)
    }

    /// The test samples an evaluation command scores: `samples` of them when
    /// given, else the trainer's evaluation subset, drawn the same way the
    /// trainer draws it.
    pub fn evaluation_set<F: Real>(&self, test: &Dataset<F>, samples: Option<usize>) -> Result<Dataset<F>> {
        match samples.or(self.train.eval_subset) {
            Some(n) => test.sample(n, self.train.seed),
            None => Ok(test.clone()),
        }
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.train.seed)
    }

    pub fn eval_attack(&self) -> AttackConfig {
        self.train.eval_attack()
    }
}

/// Sets `key.path=value` inside `doc`. The value is parsed as JSON, falling
/// back to a plain string. A first segment that is not a top-level key is
/// looked up under `train`, so `epochs=1` means `train.epochs=1`.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let mut path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override {assignment:?} has an empty key segment")));
    }
    let top_level = doc.as_object().is_some_and(|m| m.contains_key(path[0]));
    const ROOT_KEYS: [&str; 6] = ["model", "data", "train", "eval", "output_dir", "precision"];
    if !top_level && !ROOT_KEYS.contains(&path[0]) {
        path.insert(0, "train");
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));

    let mut node = doc;
    for (i, seg) in path.iter().enumerate() {
        let map = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just set")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override {assignment:?}: {} is not an object",
                    path[..i].join(".")
                )))
            }
        };
        if i + 1 == path.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}
