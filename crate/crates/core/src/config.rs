//! Flat `key = value` run configuration.
//!
//! [`SCHEMA`] is the single list of accepted keys; parsing, rendering and the
//! CLI help are all driven by it.

use std::path::{Path, PathBuf};

use crate::data::{CorpusFormat, LabelScheme};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::placement::{placement_for_model, PlacementSet, NUM_MODELS};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "DROPNET_SEED";

pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

pub const SCHEMA: &[KeySpec] = &[
    KeySpec {
        name: "preset",
        default: "none",
        help: "none, snli or scitail; applied before every other key",
    },
    KeySpec {
        name: "train_path",
        default: "",
        help: "training corpus (required for train and grid)",
    },
    KeySpec {
        name: "val_path",
        default: "",
        help: "validation corpus (required for train and grid)",
    },
    KeySpec {
        name: "test_path",
        default: "",
        help: "optional test corpus",
    },
    KeySpec {
        name: "format",
        default: "auto",
        help: "auto, jsonl or tsv; auto picks tsv for .tsv/.txt files",
    },
    KeySpec {
        name: "labels",
        default: "snli",
        help: "label scheme: snli (3 classes) or scitail (2 classes)",
    },
    KeySpec {
        name: "embeddings_path",
        default: "",
        help: "optional pretrained vectors, one `token v1 .. vd` per line",
    },
    KeySpec {
        name: "min_count",
        default: "1",
        help: "minimum token frequency for the vocabulary",
    },
    KeySpec {
        name: "output_dir",
        default: "runs/default",
        help: "directory for metrics, summary and checkpoint",
    },
    KeySpec {
        name: "embedding_dim",
        default: "300",
        help: "word vector width",
    },
    KeySpec {
        name: "hidden_units",
        default: "100",
        help: "LSTM units per direction",
    },
    KeySpec {
        name: "model_id",
        default: "2",
        help: "dropout placement by model number, 1..13",
    },
    KeySpec {
        name: "placement",
        default: "",
        help: "explicit site list overriding model_id, e.g. embedding,mlp or none",
    },
    KeySpec {
        name: "drop_rate",
        default: "0.4",
        help: "probability of dropping a unit, in [0, 1)",
    },
    KeySpec {
        name: "inverted_dropout",
        default: "false",
        help: "scale at train time instead of eval time",
    },
    KeySpec {
        name: "trainable_embeddings",
        default: "true",
        help: "update the embedding table",
    },
    KeySpec {
        name: "epochs",
        default: "50",
        help: "maximum number of epochs",
    },
    KeySpec {
        name: "batch_size",
        default: "32",
        help: "examples per batch",
    },
    KeySpec {
        name: "learning_rate",
        default: "0.001",
        help: "Adam step size",
    },
    KeySpec {
        name: "l2_lambda",
        default: "0.00001",
        help: "L2 coefficient on weight matrices",
    },
    KeySpec {
        name: "patience",
        default: "5",
        help: "epochs without validation improvement before stopping",
    },
    KeySpec {
        name: "seed",
        default: "1",
        help: "seed for initialization, shuffling and dropout (env DROPNET_SEED overrides)",
    },
    KeySpec {
        name: "wall_clock",
        default: "false",
        help: "record elapsed seconds in metrics.csv (breaks byte-identical reruns)",
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub train_path: Option<PathBuf>,
    pub val_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub format: Option<CorpusFormat>,
    pub labels: LabelScheme,
    pub embeddings_path: Option<PathBuf>,
    pub min_count: usize,
    pub output_dir: PathBuf,
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub model_id: u8,
    pub placement: Option<PlacementSet>,
    pub drop_rate: f64,
    pub inverted_dropout: bool,
    pub trainable_embeddings: bool,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            preset: String::new(),
            train_path: None,
            val_path: None,
            test_path: None,
            format: None,
            labels: LabelScheme::Snli,
            embeddings_path: None,
            min_count: 0,
            output_dir: PathBuf::new(),
            embedding_dim: 0,
            hidden_units: 0,
            model_id: 1,
            placement: None,
            drop_rate: 0.0,
            inverted_dropout: false,
            trainable_embeddings: false,
            train: TrainConfig::default(),
        };
        for k in SCHEMA {
            c.set(k.name, k.default).expect("schema defaults parse");
        }
        c
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "preset" => self.apply_preset(value)?,
            "train_path" => self.train_path = opt_path(value),
            "val_path" => self.val_path = opt_path(value),
            "test_path" => self.test_path = opt_path(value),
            "format" => {
                self.format = match value {
                    "auto" => None,
                    v => Some(v.parse()?),
                }
            }
            "labels" => self.labels = value.parse()?,
            "embeddings_path" => self.embeddings_path = opt_path(value),
            "min_count" => self.min_count = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "embedding_dim" => self.embedding_dim = parse(key, value)?,
            "hidden_units" => self.hidden_units = parse(key, value)?,
            "model_id" => {
                let id: u8 = parse(key, value)?;
                placement_for_model(id)?;
                self.model_id = id;
            }
            "placement" => {
                self.placement = if value.is_empty() {
                    None
                } else {
                    Some(value.parse()?)
                }
            }
            "drop_rate" => self.drop_rate = parse(key, value)?,
            "inverted_dropout" => self.inverted_dropout = parse_bool(key, value)?,
            "trainable_embeddings" => self.trainable_embeddings = parse_bool(key, value)?,
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "l2_lambda" => self.train.l2_lambda = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "wall_clock" => self.train.wall_clock = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Textual value of one key, in the form accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "preset" => {
                if self.preset.is_empty() {
                    "none".into()
                } else {
                    self.preset.clone()
                }
            }
            "train_path" => show_path(&self.train_path),
            "val_path" => show_path(&self.val_path),
            "test_path" => show_path(&self.test_path),
            "format" => match self.format {
                None => "auto".into(),
                Some(CorpusFormat::Jsonl) => "jsonl".into(),
                Some(CorpusFormat::Tsv) => "tsv".into(),
            },
            "labels" => self.labels.as_str().into(),
            "embeddings_path" => show_path(&self.embeddings_path),
            "min_count" => self.min_count.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "embedding_dim" => self.embedding_dim.to_string(),
            "hidden_units" => self.hidden_units.to_string(),
            "model_id" => self.model_id.to_string(),
            "placement" => self.placement.map(|p| p.to_string()).unwrap_or_default(),
            "drop_rate" => self.drop_rate.to_string(),
            "inverted_dropout" => self.inverted_dropout.to_string(),
            "trainable_embeddings" => self.trainable_embeddings.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "learning_rate" => self.train.learning_rate.to_string(),
            "l2_lambda" => self.train.l2_lambda.to_string(),
            "patience" => self.train.patience.to_string(),
            "seed" => self.train.seed.to_string(),
            "wall_clock" => self.train.wall_clock.to_string(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        })
    }

    /// Every key with its current value, in schema order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        SCHEMA
            .iter()
            .map(|k| (k.name.to_string(), self.get(k.name).expect("schema key")))
            .collect()
    }

    fn apply_preset(&mut self, name: &str) -> Result<()> {
        let values: &[(&str, &str)] = match name {
            "none" | "" => &[],
            "snli" => &[
                ("labels", "snli"),
                ("model_id", "2"),
                ("drop_rate", "0.4"),
                ("hidden_units", "300"),
            ],
            "scitail" => &[
                ("labels", "scitail"),
                ("model_id", "13"),
                ("drop_rate", "0.4"),
                ("hidden_units", "100"),
            ],
            other => {
                return Err(Error::Config(format!(
                    "preset: unknown preset {other:?} (none, snli, scitail)"
                )))
            }
        };
        for (k, v) in values {
            self.set(k, v)?;
        }
        self.preset = if name == "none" {
            String::new()
        } else {
            name.to_string()
        };
        Ok(())
    }

    /// Applies `key = value` pairs: any preset first, then the rest in order.
    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            self.set("preset", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Builds a configuration from optional file text, `key=value` overrides
    /// and an optional seed override, in that order of precedence.
    pub fn resolve(
        file: Option<&str>,
        overrides: &[String],
        env_seed: Option<&str>,
    ) -> Result<Self> {
        let mut pairs = match file {
            Some(text) => parse_pairs(text)?,
            None => Vec::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut c = RunConfig::default();
        c.apply_pairs(&pairs)?;
        if let Some(seed) = env_seed {
            c.train.seed = parse(SEED_ENV, seed.trim())?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = path
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .transpose()?;
        let env = std::env::var(SEED_ENV).ok();
        Self::resolve(text.as_deref(), overrides, env.as_deref())
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()
    }

    pub fn placement_set(&self) -> PlacementSet {
        self.placement
            .unwrap_or_else(|| placement_for_model(self.model_id).expect("validated id"))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            hidden_units: self.hidden_units,
            num_classes: self.labels.num_classes(),
            placement: self.placement_set(),
            drop_rate: self.drop_rate,
            inverted_dropout: self.inverted_dropout,
            trainable_embeddings: self.trainable_embeddings,
            seed: self.train.seed,
        }
    }

    /// The path stored under `key`, or a config error naming the key.
    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        let value = self.get(key)?;
        if value.is_empty() {
            return Err(Error::Config(format!("{key} is required")));
        }
        Ok(PathBuf::from(value))
    }

    pub fn corpus_format(&self, path: &Path) -> CorpusFormat {
        self.format.unwrap_or_else(|| CorpusFormat::from_path(path))
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {raw:?}",
                i + 1
            ))
        })?;
        let k = k.trim();
        if !SCHEMA.iter().any(|s| s.name == k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Help text listing every key with its default.
pub fn schema_help() -> String {
    let width = SCHEMA.iter().map(|k| k.name.len()).max().unwrap_or(0);
    let mut out = String::from(
        "Configuration keys (`key = value` in the config file, or --set key=value):\n",
    );
    for k in SCHEMA {
        let default = if k.default.is_empty() {
            "unset"
        } else {
            k.default
        };
        out.push_str(&format!(
            "  {:width$}  {} [default: {}]\n",
            k.name, k.help, default
        ));
    }
    out.push_str(&format!(
        "Model ids 1..{NUM_MODELS} select dropout placements; {SEED_ENV} overrides seed.\n"
    ));
    out
}
