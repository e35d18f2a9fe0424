//! Run configuration as plain `key = value` text.
//!
//! Blank lines and lines starting with `#` are ignored. Keys may appear at
//! most once; unknown keys are rejected. Values are written back with the
//! shortest representation that round-trips.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainSettings;

pub const DEFAULT_OBJ_THRESHOLD: f64 = 0.30;

/// Every recognized key, in the order [`RunConfig::to_text`] writes them.
pub const KEYS: [&str; 23] = [
    "seed",
    "train_data",
    "eval_data",
    "image_size",
    "patch",
    "embed_dim",
    "heads",
    "num_queries",
    "decoder_layers",
    "mlp_ratio",
    "cost_cls",
    "cost_l1",
    "cost_giou",
    "cost_mat",
    "loss_vfl",
    "loss_bbox",
    "loss_giou",
    "loss_maturity",
    "loss_reg",
    "lr",
    "batch_size",
    "steps",
    "obj_threshold",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub obj_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_data: None,
            eval_data: None,
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            obj_threshold: DEFAULT_OBJ_THRESHOLD,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.obj_threshold > 0.0 && self.obj_threshold < 1.0) {
            return Err(Error::Domain(format!("obj_threshold {} outside (0, 1)", self.obj_threshold)));
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "seed" => t.seed = num(key, v)?,
            "train_data" => self.train_data = Some(PathBuf::from(v)),
            "eval_data" => self.eval_data = Some(PathBuf::from(v)),
            "image_size" => m.image_size = num(key, v)?,
            "patch" => m.patch = num(key, v)?,
            "embed_dim" => m.embed_dim = num(key, v)?,
            "heads" => m.heads = num(key, v)?,
            "num_queries" => m.num_queries = num(key, v)?,
            "decoder_layers" => m.decoder_layers = num(key, v)?,
            "mlp_ratio" => m.mlp_ratio = num(key, v)?,
            "cost_cls" => t.cost.lambda_cls = num(key, v)?,
            "cost_l1" => t.cost.lambda_l1 = num(key, v)?,
            "cost_giou" => t.cost.lambda_giou = num(key, v)?,
            "cost_mat" => t.cost.lambda_mat = num(key, v)?,
            "loss_vfl" => t.loss.lambda_vfl = num(key, v)?,
            "loss_bbox" => t.loss.lambda_bbox = num(key, v)?,
            "loss_giou" => t.loss.lambda_giou = num(key, v)?,
            "loss_maturity" => t.loss.lambda_maturity = num(key, v)?,
            "loss_reg" => t.loss.lambda_reg = num(key, v)?,
            "lr" => t.lr = num(key, v)?,
            "batch_size" => t.batch_size = num(key, v)?,
            "steps" => t.steps = num(key, v)?,
            "obj_threshold" => self.obj_threshold = num(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses configuration text on top of the defaults. `file` only labels errors.
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { file: file.to_string(), line: i + 1, msg };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(err)?;
            seen.push(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `(key, value)` for every key that has a value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (m, t) = (&self.model, &self.train);
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let values: [Option<String>; 23] = [
            Some(t.seed.to_string()),
            path(&self.train_data),
            path(&self.eval_data),
            Some(m.image_size.to_string()),
            Some(m.patch.to_string()),
            Some(m.embed_dim.to_string()),
            Some(m.heads.to_string()),
            Some(m.num_queries.to_string()),
            Some(m.decoder_layers.to_string()),
            Some(m.mlp_ratio.to_string()),
            Some(format!("{:?}", t.cost.lambda_cls)),
            Some(format!("{:?}", t.cost.lambda_l1)),
            Some(format!("{:?}", t.cost.lambda_giou)),
            Some(format!("{:?}", t.cost.lambda_mat)),
            Some(format!("{:?}", t.loss.lambda_vfl)),
            Some(format!("{:?}", t.loss.lambda_bbox)),
            Some(format!("{:?}", t.loss.lambda_giou)),
            Some(format!("{:?}", t.loss.lambda_maturity)),
            Some(format!("{:?}", t.loss.lambda_reg)),
            Some(format!("{:?}", t.lr)),
            Some(t.batch_size.to_string()),
            Some(t.steps.to_string()),
            Some(format!("{:?}", self.obj_threshold)),
        ];
        KEYS.iter().zip(values).filter_map(|(k, v)| v.map(|v| (*k, v))).collect()
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
