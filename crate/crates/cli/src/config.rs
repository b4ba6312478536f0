//! Run configuration: one JSON document, overridable with `--set key=value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use swiftseg::data::Normalization;
use swiftseg::train::TrainConfig;
use swiftseg::ModelSpec;

/// Input resolution written `WIDTHxHEIGHT`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputSize {
    pub width: usize,
    pub height: usize,
}

impl FromStr for InputSize {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| anyhow!("input size `{s}` is not WIDTHxHEIGHT"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| anyhow!("input size `{s}` is not WIDTHxHEIGHT"));
        let size = InputSize {
            width: parse(w)?,
            height: parse(h)?,
        };
        if size.width == 0 || size.height == 0 {
            bail!("input size `{s}` must be positive");
        }
        Ok(size)
    }
}

impl fmt::Display for InputSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl Serialize for InputSize {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InputSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Dataset directory with `images/` and `labels/`.
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub passes: usize,
    pub warmup: usize,
    /// Fold batch norms before timing.
    pub fuse: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            passes: 1000,
            warmup: 10,
            fuse: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErfSettings {
    /// Random images used when no validation set is configured.
    pub images: usize,
    pub fraction: f64,
}

impl Default for ErfSettings {
    fn default() -> Self {
        ErfSettings {
            images: 4,
            fraction: swiftseg::erf::DEFAULT_FRACTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization and any random inputs.
    pub seed: u64,
    /// Resolution for `build`, `flops`, `bench` and `erf`.
    pub input: InputSize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub normalization: Normalization,
    pub data: DataPaths,
    /// Parameters to load instead of fresh initialization.
    pub checkpoint: Option<PathBuf>,
    /// Image for `infer`.
    pub image: Option<PathBuf>,
    /// Directory of predicted label maps (`<stem>.pgm`) for `eval`.
    pub predictions: Option<PathBuf>,
    pub bench: BenchSettings,
    pub erf: ErfSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            input: InputSize {
                width: 2048,
                height: 1024,
            },
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            normalization: Normalization::default(),
            data: DataPaths::default(),
            checkpoint: None,
            image: None,
            predictions: None,
            bench: BenchSettings::default(),
            erf: ErfSettings::default(),
        }
    }
}

const SECTIONS: [&str; 5] = ["model", "train", "data", "bench", "erf"];

/// Parses an override value: JSON if it parses, a bare string otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Resolves `key` to a path in the document. Dotted keys are taken literally;
/// a bare key names a top-level field if one exists, otherwise it must name
/// a field of exactly one section.
fn resolve(doc: &Value, key: &str) -> anyhow::Result<Vec<String>> {
    if key.contains('.') {
        return Ok(key.split('.').map(str::to_string).collect());
    }
    if doc.get(key).is_some() {
        return Ok(vec![key.to_string()]);
    }
    let mut hits = Vec::new();
    for s in SECTIONS {
        if doc.get(s).and_then(|v| v.get(key)).is_some() {
            hits.push(vec![s.to_string(), key.to_string()]);
        }
    }
    match hits.len() {
        1 => Ok(hits.pop().expect("one hit")),
        0 => bail!("unknown config key `{key}`"),
        _ => bail!(
            "config key `{key}` is ambiguous; use one of {}",
            hits.iter().map(|h| h.join(".")).collect::<Vec<_>>().join(", ")
        ),
    }
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides; validated.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let parsed: RunConfig =
                    serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?;
                serde_json::to_value(parsed)?
            }
            None => serde_json::to_value(RunConfig::default())?,
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| anyhow!("override `{item}` is not key=value"))?;
            let path = resolve(&doc, key.trim())?;
            let mut slot = &mut doc;
            for (i, part) in path.iter().enumerate() {
                let obj = slot
                    .as_object_mut()
                    .ok_or_else(|| anyhow!("config key `{key}`: `{}` is not a section", path[..i].join(".")))?;
                if i + 1 < path.len() && !obj.contains_key(part) {
                    bail!("unknown config key `{key}`");
                }
                slot = obj.entry(part.clone()).or_insert(Value::Null);
            }
            *slot = parse_value(raw.trim());
        }
        let cfg: RunConfig = serde_json::from_value(doc).context("invalid configuration after overrides")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().context("model")?;
        self.train.validate().context("train")?;
        self.normalization.validate().context("normalization")?;
        if self.bench.passes == 0 {
            bail!("bench.passes must be at least 1");
        }
        if self.erf.images == 0 || !(self.erf.fraction > 0.0 && self.erf.fraction <= 1.0) {
            bail!("erf.images must be positive and erf.fraction in (0, 1]");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
