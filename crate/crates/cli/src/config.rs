//! Run configuration.
//!
//! Files are JSON objects whose keys are dotted paths (`"train.lr": 1e-4`);
//! nested objects are accepted and flattened the same way. `--set key=value`
//! overrides are applied last, with `value` read as JSON when it parses and
//! as a plain string otherwise. `ORACLE_ATTN_PRECISION` sits between the file
//! and the overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use oracle_attn::losses::LossWeights;
use oracle_attn::mask::MaskMode;
use oracle_attn::nn::Preset;
use oracle_attn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::fail::{Fail, Outcome};

pub const PRECISION_ENV: &str = "ORACLE_ATTN_PRECISION";
pub const RESOLVED_NAME: &str = "resolved_config.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Fail;

    fn from_str(s: &str) -> Outcome<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Fail::Usage(format!(
                "precision must be f32 or f64, got `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of PNG images.
    pub dir: Option<PathBuf>,
    /// Landmark JSON for the images in `dir`.
    pub landmarks: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSection {
    /// `random_rect`, `center` or `irregular`.
    pub mode: String,
    /// Mask image or directory for `irregular`.
    pub path: Option<PathBuf>,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self {
            mode: "random_rect".into(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    /// Preset default when unset.
    pub batch_size: Option<usize>,
    pub n_critic: usize,
    pub max_steps: u64,
    pub checkpoint_every: u64,
    pub bn_momentum: f64,
    pub lambda_r: f64,
    pub lambda_kl: f64,
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub gamma: f64,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::new(Preset::Res256);
        let w = LossWeights::default();
        Self {
            lr: t.lr,
            batch_size: None,
            n_critic: t.n_critic,
            max_steps: t.max_steps,
            checkpoint_every: t.checkpoint_every,
            bn_momentum: t.bn_momentum,
            lambda_r: w.lambda_r,
            lambda_kl: w.lambda_kl,
            lambda_p: w.lambda_p,
            lambda_g: w.lambda_g,
            gamma: w.gamma,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Checkpoint path, or `mock:identity` / `mock:gray`.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferSection {
    pub checkpoint: Option<String>,
    /// Optional masks named like the input images; others are generated.
    pub mask_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub iterations: usize,
    pub warmup: usize,
    /// Feature side of the benchmarked layer.
    pub side: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            iterations: 100,
            warmup: 10,
            side: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub mask: MaskSection,
    pub train: TrainSection,
    pub infer: InferSection,
    pub eval: ModelSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            seed: 0,
            precision: Precision::F32,
            output_dir: PathBuf::from("out"),
            data: DataSection::default(),
            mask: MaskSection::default(),
            train: TrainSection::default(),
            infer: InferSection::default(),
            eval: ModelSection::default(),
            bench: BenchSection::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Outcome<Value> {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            let entry = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()));
            node = entry
                .as_object_mut()
                .ok_or_else(|| Fail::Usage(format!("key `{key}` conflicts with a scalar `{p}`")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Ok(Value::Object(root))
}

/// Parse one `key=value` override.
pub fn parse_override(s: &str) -> Outcome<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Fail::Usage(format!("override `{s}` is not of the form key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Fail::Usage(format!("override `{s}` has an empty key")));
    }
    let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), v))
}

impl RunConfig {
    /// Resolve from an optional file, the precision variable and overrides.
    pub fn load(
        file: Option<&Path>,
        env_precision: Option<&str>,
        overrides: &[String],
    ) -> Outcome<Self> {
        let mut flat = BTreeMap::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Fail::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| {
                Fail::Usage(format!("config {} is not valid JSON: {e}", path.display()))
            })?;
            if !v.is_object() {
                return Err(Fail::Usage(format!(
                    "config {} must be a JSON object",
                    path.display()
                )));
            }
            flatten("", &v, &mut flat);
        }
        if let Some(p) = env_precision {
            let p: Precision = p.parse()?;
            flat.insert(
                "precision".into(),
                serde_json::to_value(p).expect("enum serializes"),
            );
        }
        for o in overrides {
            let (k, v) = parse_override(o)?;
            flat.insert(k, v);
        }
        let mut cfg: RunConfig = serde_json::from_value(unflatten(&flat)?)
            .map_err(|e| Fail::Usage(format!("bad configuration: {e}")))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fill preset-dependent defaults and check values.
    fn resolve(&mut self) -> Outcome<()> {
        let preset = self.preset()?;
        self.preset = preset.to_string();
        if self.train.batch_size.is_none() {
            self.train.batch_size = Some(TrainConfig::new(preset).batch_size);
        }
        self.mask_mode()?;
        if self.train.checkpoint_every == 0 {
            return Err(Fail::Usage(
                "train.checkpoint_every must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn preset(&self) -> Outcome<Preset> {
        self.preset
            .parse()
            .map_err(|e: oracle_attn::Error| Fail::Usage(e.to_string()))
    }

    pub fn mask_mode(&self) -> Outcome<MaskMode> {
        match self.mask.mode.as_str() {
            "random_rect" => Ok(MaskMode::RandomRect),
            "center" => Ok(MaskMode::Center),
            "irregular" => self
                .mask
                .path
                .clone()
                .map(MaskMode::Irregular)
                .ok_or_else(|| Fail::Usage("mask.mode irregular needs mask.path".into())),
            m => Err(Fail::Usage(format!(
                "unknown mask.mode `{m}` (random_rect, center, irregular)"
            ))),
        }
    }

    pub fn train_config(&self) -> Outcome<TrainConfig> {
        let preset = self.preset()?;
        let t = &self.train;
        let mut c = TrainConfig::new(preset);
        c.lr = t.lr;
        c.batch_size = t.batch_size.unwrap_or(c.batch_size);
        c.n_critic = t.n_critic;
        c.seed = self.seed;
        c.weights = LossWeights {
            lambda_r: t.lambda_r,
            lambda_kl: t.lambda_kl,
            lambda_p: t.lambda_p,
            lambda_g: t.lambda_g,
            gamma: t.gamma,
        };
        c.max_steps = t.max_steps;
        c.checkpoint_every = t.checkpoint_every;
        c.mask_mode = self.mask_mode()?;
        c.bn_momentum = t.bn_momentum;
        c.validate().map_err(|e| Fail::Usage(e.to_string()))?;
        Ok(c)
    }

    /// Flat dotted-key form, as written next to run outputs.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut flat = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut flat,
        );
        flat
    }

    /// Create the output directory and write the resolved configuration.
    pub fn write_resolved(&self) -> Outcome<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)?;
        let path = self.output_dir.join(RESOLVED_NAME);
        let text = serde_json::to_string_pretty(&self.to_flat()).expect("map serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}
