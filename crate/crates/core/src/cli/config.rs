//! `key = value` run configuration files.
//!
//! Keys are the field names of the model, training and loss
//! configurations. `#` starts a comment. `gamma` takes six numbers and
//! `disable` a list of term names; both accept spaces or commas.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::{LossConfig, Term};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Everything a training run is configured by.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}` expects a number, got `{v}`"))
}

fn boolean(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{v}`")),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty())
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (m, t, l) = (&mut self.model, &mut self.train, &mut self.loss);
        match key {
            "input_size" => m.input_size = num(key, v)?,
            "num_classes" => m.num_classes = num(key, v)?,
            "feature_channels" => m.feature_channels = num(key, v)?,
            "feature_stride" => m.feature_stride = num(key, v)?,
            "backbone_blocks" => m.backbone_blocks = num(key, v)?,
            "seed" => {
                t.seed = num(key, v)?;
                m.seed = t.seed;
            }
            "learning_rate" => t.learning_rate = num(key, v)?,
            "momentum" => t.momentum = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "shuffle" => t.shuffle = boolean(key, v)?,
            "lr_decay_every" => t.lr_decay_every = num(key, v)?,
            "lr_decay" => t.lr_decay = num(key, v)?,
            "threads" => t.threads = num(key, v)?,
            "t1" => l.thresholds.t1 = num(key, v)?,
            "t2" => l.thresholds.t2 = num(key, v)?,
            "t3" => l.thresholds.t3 = num(key, v)?,
            "t4" => l.thresholds.t4 = num(key, v)?,
            "epsilon" => l.epsilon = num(key, v)?,
            "bas_detach_classifier" => l.bas_detach_classifier = boolean(key, v)?,
            "gamma" => {
                let g: Vec<f64> = list(v).map(|x| num(key, x)).collect::<std::result::Result<_, _>>()?;
                l.gamma = g.try_into().map_err(|g: Vec<f64>| format!("`gamma` needs 6 values, got {}", g.len()))?;
            }
            "disable" => {
                for name in list(v) {
                    let term: Term = name.parse().map_err(|e: Error| e.to_string())?;
                    if term == Term::Cls {
                        return Err("`cls` cannot be disabled".into());
                    }
                    l.set_enabled(term, false);
                }
            }
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies a configuration file's text. Errors name the line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Config(format!("config line {}: {msg}", n + 1));
            let (key, value) = line.split_once('=').ok_or_else(|| fail(format!("expected `key = value`, got `{line}`")))?;
            self.set(key.trim(), value.trim()).map_err(fail)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()
    }

    /// The resolved settings in configuration-file syntax.
    pub fn render(&self) -> String {
        let (m, t, l) = (&self.model, &self.train, &self.loss);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("write to String");
        kv("input_size", m.input_size.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("feature_channels", m.feature_channels.to_string());
        kv("feature_stride", m.feature_stride.to_string());
        kv("backbone_blocks", m.backbone_blocks.to_string());
        kv("seed", t.seed.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("momentum", t.momentum.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("shuffle", t.shuffle.to_string());
        kv("lr_decay_every", t.lr_decay_every.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("threads", t.threads.to_string());
        kv("t1", l.thresholds.t1.to_string());
        kv("t2", l.thresholds.t2.to_string());
        kv("t3", l.thresholds.t3.to_string());
        kv("t4", l.thresholds.t4.to_string());
        kv("epsilon", l.epsilon.to_string());
        kv("bas_detach_classifier", l.bas_detach_classifier.to_string());
        kv("gamma", l.gamma.map(|g| g.to_string()).join(" "));
        let off: Vec<&str> = Term::WEIGHTED.iter().filter(|&&t| !l.is_enabled(t)).map(|t| t.name()).collect();
        kv("disable", off.join(" "));
        out
    }
}
