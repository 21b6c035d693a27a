//! Flat configuration document: `key=value` text (diff-friendly) or a JSON
//! object with the identical schema. Unknown keys are rejected; flags
//! override file values, file values override defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::datagen::SynthConfig;
use crate::error::{Error, Result};
use crate::trainer::RunConfig;

/// Everything a run needs: training knobs plus the synthetic-data protocol.
#[derive(Debug, Clone)]
pub struct FullConfig {
    pub run: RunConfig,
    pub synth: SynthConfig,
    pub workers: usize,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            run: RunConfig::default(),
            synth: SynthConfig::default(),
            workers: crate::datagen::DEFAULT_WORKERS,
        }
    }
}

impl FullConfig {
    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        self.synth.validate()?;
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn default_config() -> FullConfig {
    FullConfig::default()
}

fn parse_key<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("config key {key}: cannot parse value {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Usage(format!(
            "config key {key}: expected true/false, got {value:?}"
        ))),
    }
}

/// Apply one key/value pair; errors name the offending key.
pub fn apply_pair(config: &mut FullConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "n" => config.run.n = parse_key(key, value)?,
        "batch_size" => config.run.batch_size = parse_key(key, value)?,
        "pool_size" => config.run.pool_size = parse_key(key, value)?,
        "max_epochs" => config.run.max_epochs = parse_key(key, value)?,
        "patience" => config.run.patience = parse_key(key, value)?,
        "learning_rate" => config.run.learning_rate = parse_key(key, value)?,
        "dropout" => config.run.dropout = parse_key(key, value)?,
        "delta" => config.run.delta = parse_key(key, value)?,
        "beta" => config.run.beta = parse_key(key, value)?,
        "hard_fraction" => config.run.hard_fraction = parse_key(key, value)?,
        "c" => config.run.c = parse_key(key, value)?,
        "eta" => config.run.eta = parse_key(key, value)?,
        "embedding_dim" => config.run.embedding_dim = parse_key(key, value)?,
        "hidden_sizes" => {
            // empty value means no hidden layers (linear embedding)
            config.run.hidden_sizes = if value.trim().is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|s| parse_key::<usize>(key, s.trim()))
                    .collect::<Result<_>>()?
            };
        }
        "steps_per_epoch" => config.run.steps_per_epoch = parse_key(key, value)?,
        "init_stddev" => config.run.init_stddev = parse_key(key, value)?,
        "safety_every" => config.run.safety_every = parse_key(key, value)?,
        "normalize_robust_anchor" => {
            config.run.normalize_robust_anchor = parse_bool(key, value)?
        }
        "anchor_in_denominator" => config.run.anchor_in_denominator = parse_bool(key, value)?,
        "use_sa" => config.run.use_sa = parse_bool(key, value)?,
        "use_ra" => config.run.use_ra = parse_bool(key, value)?,
        "use_sn" => config.run.use_sn = parse_bool(key, value)?,
        "seed" => {
            let seed: u64 = parse_key(key, value)?;
            config.run.seed = seed;
            config.synth.seed = seed;
        }
        "n_features" => config.synth.n_features = parse_key(key, value)?,
        "n_informative" => config.synth.n_informative = parse_key(key, value)?,
        "cluster_std" => config.synth.cluster_std = parse_key(key, value)?,
        "cube_side" => config.synth.cube_side = parse_key(key, value)?,
        "train_size" => config.synth.train_size = parse_key(key, value)?,
        "validation_size" => config.synth.validation_size = parse_key(key, value)?,
        "test_size" => config.synth.test_size = parse_key(key, value)?,
        "workers" => config.workers = parse_key(key, value)?,
        _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn pairs_from_json(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let doc: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(bytes)
        .map_err(|e| Error::Parse(format!("bad json config: {e}")))?;
    let mut pairs = BTreeMap::new();
    for (key, value) in doc {
        let rendered = match value {
            serde_json::Value::String(s) => s,
            serde_json::Value::Bool(b) => b.to_string(),
            serde_json::Value::Number(n) => n.to_string(),
            serde_json::Value::Array(items) => items
                .iter()
                .map(|v| match v {
                    serde_json::Value::Number(n) => Ok(n.to_string()),
                    _ => Err(Error::Parse(format!(
                        "config key {key}: arrays may only hold numbers"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?
                .join(","),
            other => {
                return Err(Error::Parse(format!(
                    "config key {key}: unsupported value {other}"
                )))
            }
        };
        pairs.insert(key, rendered);
    }
    Ok(pairs)
}

fn pairs_from_text(bytes: &[u8]) -> Result<BTreeMap<String, String>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Parse("config file is not valid utf-8".into()))?;
    let mut pairs = BTreeMap::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("config line {}: expected key=value", line_no + 1))
        })?;
        pairs.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(pairs)
}

/// Parse a config document from raw bytes, starting from defaults.
pub fn parse_config_bytes(bytes: &[u8]) -> Result<FullConfig> {
    let pairs = if bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'{') {
        pairs_from_json(bytes)?
    } else {
        pairs_from_text(bytes)?
    };
    let mut config = default_config();
    for (key, value) in &pairs {
        apply_pair(&mut config, key, value)?;
    }
    config.validate()?;
    Ok(config)
}

/// Resolved snapshot in key=value form; parsing it back reproduces the
/// configuration exactly.
pub fn snapshot(config: &FullConfig) -> String {
    let mut out = String::new();
    let run = &config.run;
    let synth = &config.synth;
    let hidden = run
        .hidden_sizes
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(",");
    let entries: Vec<(&str, String)> = vec![
        ("n", run.n.to_string()),
        ("batch_size", run.batch_size.to_string()),
        ("pool_size", run.pool_size.to_string()),
        ("max_epochs", run.max_epochs.to_string()),
        ("patience", run.patience.to_string()),
        ("learning_rate", format!("{}", run.learning_rate)),
        ("dropout", format!("{}", run.dropout)),
        ("delta", format!("{}", run.delta)),
        ("beta", format!("{}", run.beta)),
        ("hard_fraction", format!("{}", run.hard_fraction)),
        ("c", format!("{}", run.c)),
        ("eta", format!("{}", run.eta)),
        ("embedding_dim", run.embedding_dim.to_string()),
        ("hidden_sizes", hidden),
        ("steps_per_epoch", run.steps_per_epoch.to_string()),
        ("init_stddev", format!("{}", run.init_stddev)),
        ("safety_every", run.safety_every.to_string()),
        (
            "normalize_robust_anchor",
            run.normalize_robust_anchor.to_string(),
        ),
        (
            "anchor_in_denominator",
            run.anchor_in_denominator.to_string(),
        ),
        ("use_sa", run.use_sa.to_string()),
        ("use_ra", run.use_ra.to_string()),
        ("use_sn", run.use_sn.to_string()),
        ("seed", run.seed.to_string()),
        ("n_features", synth.n_features.to_string()),
        ("n_informative", synth.n_informative.to_string()),
        ("cluster_std", format!("{}", synth.cluster_std)),
        ("cube_side", format!("{}", synth.cube_side)),
        ("train_size", synth.train_size.to_string()),
        ("validation_size", synth.validation_size.to_string()),
        ("test_size", synth.test_size.to_string()),
        ("workers", config.workers.to_string()),
    ];
    for (key, value) in entries {
        writeln!(out, "{key}={value}").unwrap();
    }
    out
}
