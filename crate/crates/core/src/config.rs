//! Flat `key = value` run configuration.
//!
//! Keys are namespaced with a dot: `model.window = 8`, `train.lr = 0.001`,
//! `data.source = synth`. A bare `seed` sets every seed at once. Lines
//! starting with `#` and blank lines are ignored; unknown keys are errors.

use std::path::Path;

use crate::data::SplitRatio;
use crate::error::{Error, Result};
use crate::model::{parse, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// Generated blobs; size follows `model.input_size`.
    Synth { count: usize },
    /// Folder with `images/` and `masks/` subdirectories.
    Folder(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitRatio,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth { count: 200 },
            split: SplitRatio::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Small preset: tiny model, 30 epochs, 200 synthetic 64×64 samples.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                epochs: 30,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            data: DataConfig::default(),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        if key == "seed" {
            let seed: u64 = parse(key, value)?;
            self.model.seed = seed;
            self.train.seed = seed;
            self.data.seed = seed;
            return Ok(());
        }
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        match section {
            "model" => self.model.set(field, value),
            "train" => self.set_train(field, value),
            "data" => self.set_data(field, value),
            _ => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    fn set_train(&mut self, field: &str, value: &str) -> Result<()> {
        let key = format!("train.{field}");
        let t = &mut self.train;
        match field {
            "epochs" => t.epochs = parse(&key, value)?,
            "lr" => t.lr = parse(&key, value)?,
            "batch_size" | "batch_size_train" => t.batch_size_train = parse(&key, value)?,
            "batch_size_eval" => t.batch_size_eval = parse(&key, value)?,
            "seed" => t.seed = parse(&key, value)?,
            "loss" => t.loss_kind = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_data(&mut self, field: &str, value: &str) -> Result<()> {
        let key = format!("data.{field}");
        match field {
            "source" => {
                self.data.source = match value {
                    "synth" => DataSource::Synth {
                        count: self.synth_count().unwrap_or(200),
                    },
                    path => DataSource::Folder(path.to_string()),
                }
            }
            "synth_count" => {
                let count = parse(&key, value)?;
                if let DataSource::Synth { count: c } = &mut self.data.source {
                    *c = count;
                } else {
                    return Err(Error::Config("data.synth_count needs data.source = synth".into()));
                }
            }
            "split" => self.data.split = value.parse()?,
            "seed" => self.data.seed = parse(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn synth_count(&self) -> Option<usize> {
        match self.data.source {
            DataSource::Synth { count } => Some(count),
            DataSource::Folder(_) => None,
        }
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let v = v.split_once(" #").map_or(v, |(v, _)| v);
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_prefix(e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Recipe summary echoed at the top of a training log.
    pub fn header(&self) -> String {
        let (h, w) = self.model.input_size;
        let ch: Vec<String> = self.model.channels.iter().map(usize::to_string).collect();
        format!(
            "lr={} optimizer=adam batch={} eval_batch={} epochs={} size={h}x{w} channels=[{}] split={} seed={}",
            self.train.lr,
            self.train.batch_size_train,
            self.train.batch_size_eval,
            self.train.epochs,
            ch.join(","),
            self.data.split,
            self.train.seed,
        )
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
