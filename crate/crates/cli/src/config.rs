use std::fs;
use std::path::{Path, PathBuf};

use lealla_core::corpus::{load_tsv, synth_corpus, CorpusSplit};
use lealla_core::encoder::EncoderConfig;
use lealla_core::eval::DEFAULT_K;
use lealla_core::losses::LossWeights;
use lealla_core::train::TrainConfig;
use lealla_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub pairs: usize,
    #[serde(default = "default_synth_vocab")]
    pub vocab: usize,
}

fn default_synth_vocab() -> usize {
    100
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Bitext TSV, relative to the config file.
    pub corpus: Option<PathBuf>,
    pub max_pairs: Option<usize>,
    pub seed: u64,
    /// Generate a pseudo-parallel corpus instead of reading one.
    pub synthetic: Option<SynthSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub bidirectional: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            bidirectional: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Directory relative data paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    /// Parses a config document, expanding an encoder preset name such as
    /// `"#8"` and then applying `key.path=value` overrides.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        expand_preset(&mut doc)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
            expand_preset(&mut doc)?;
        }
        let config: Self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        if let Some(enc) = &config.encoder {
            enc.validate()?;
        }
        config.train.validate()?;
        config.loss.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let Some(path) = path else {
            return Self::from_json("{}", overrides);
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_json(&text, overrides)?;
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn encoder(&self) -> Result<&EncoderConfig> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::Config("config has no encoder section".into()))
    }

    pub fn corpus(&self) -> Result<CorpusSplit> {
        match (&self.data.corpus, &self.data.synthetic) {
            (Some(path), None) => {
                let path = self.base_dir.join(path);
                Ok(load_tsv(path, self.data.max_pairs)?.split)
            }
            (None, Some(spec)) => {
                let mut pairs = synth_corpus(spec.pairs, spec.vocab, 1, self.data.seed)?;
                let mut split = pairs.remove(0).corpus;
                if let Some(max) = self.data.max_pairs {
                    let mut all = split.all_pairs();
                    all.truncate(max);
                    split = CorpusSplit::by_index(all);
                }
                Ok(split)
            }
            (Some(_), Some(_)) => Err(Error::Config("data.corpus and data.synthetic are mutually exclusive".into())),
            (None, None) => Err(Error::Config("config needs data.corpus or data.synthetic".into())),
        }
    }
}

fn expand_preset(doc: &mut Value) -> Result<()> {
    if let Some(Value::String(name)) = doc.get("encoder") {
        let preset = EncoderConfig::preset_named(name)?;
        doc["encoder"] = serde_json::to_value(preset).expect("config serializes");
    }
    Ok(())
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let mut node = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
