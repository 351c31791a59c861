use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::runner::TrainConfig;
use crate::error::{Error, Result};
use crate::network::NetConfig;
use crate::synth::SynthConfig;

pub const OUT_ENV: &str = "ASYMFUSION_OUT";

/// Everything one training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub data: SynthConfig,
    pub train: TrainConfig,
    /// Seeds network initialization, data generation and batch order.
    pub seed: u64,
    pub eval_batch: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            data: SynthConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            eval_batch: 16,
            out_dir: None,
        }
    }
}

/// Short flag names accepted alongside full dotted paths.
pub const ALIASES: &[(&str, &str)] = &[
    ("epochs", "train.epochs"),
    ("batch-size", "train.batch_size"),
    ("lr", "train.optim.lr"),
    ("lambda", "train.loss.lambda"),
    ("distill", "train.loss.distill"),
    ("direction", "net.fusion.direction"),
    ("method", "net.fusion.method"),
    ("shuffle", "net.fusion.shuffle"),
    ("shift", "net.fusion.shift"),
    ("cross-skip-only", "net.fusion.cross_skip_only"),
    ("split-fraction", "net.fusion.split_fraction"),
    ("sharing", "net.sharing"),
    ("modalities", "net.modalities"),
    ("classes", "net.classes"),
    ("train-size", "data.train_size"),
    ("test-size", "data.test_size"),
    ("noise", "data.noise_sigma"),
];

pub fn resolve_alias(key: &str) -> Option<&'static str> {
    ALIASES.iter().find(|(a, _)| *a == key).map(|(_, p)| *p)
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{part}` is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{path}`")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

/// Values are read as JSON when they parse, otherwise as strings.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `(key, value)` overrides; keys are dotted paths or aliases.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut v = serde_json::to_value(self)?;
        for (key, raw) in overrides {
            let path = resolve_alias(key).unwrap_or(key);
            // seeds and out_dir are top-level, the rest nested
            set_path(&mut v, path, parse_value(raw))?;
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.net.seed = seed;
        c.data.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.data.validate()?;
        if self.net.modalities != self.data.modalities {
            return Err(Error::Config(format!(
                "net has {} modalities but data has {}",
                self.net.modalities, self.data.modalities
            )));
        }
        if self.net.classes != self.data.classes {
            return Err(Error::Config(format!(
                "net has {} classes but data has {}",
                self.net.classes, self.data.classes
            )));
        }
        if self.net.in_channels != 1 {
            return Err(Error::Config("synthetic modalities have one channel".into()));
        }
        let f = self.net.downsampling_factor();
        if self.data.height % f != 0 || self.data.width % f != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} not divisible by the encoder downsampling factor {f}",
                self.data.height, self.data.width
            )));
        }
        if self.train.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.train.epochs > 0 && self.train.batch_size > self.data.train_size {
            return Err(Error::Config("batch size exceeds the training set".into()));
        }
        Ok(())
    }

    /// Output directory: the flag, then the config, then `ASYMFUSION_OUT`,
    /// then `./out`.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

/// Canonical JSON: object keys sorted, two-space indentation.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key, so a round trip
    // through Value sorts every object.
    let v = serde_json::to_value(value)?;
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}
