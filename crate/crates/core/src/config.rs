//! Flat `key = value` run configuration with namespaced keys.
//!
//! ```text
//! # comment
//! run.seed = 3
//! world.users = 2000
//! train.lr = 0.001
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::WorldConfig;
use crate::model::{Ablation, ModelDims, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{key}: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Lambda1,
    Lambda2,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lambda1 => "lambda1",
            SweepParam::Lambda2 => "lambda2",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::Lambda1 => vec![0.0, 0.5, 1.0, 1.5, 2.0],
            SweepParam::Lambda2 => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lambda1" => Ok(SweepParam::Lambda1),
            "lambda2" => Ok(SweepParam::Lambda2),
            _ => Err(format!("expected lambda1 or lambda2, got `{s}`")),
        }
    }
}

/// Settings of the `check-grads` command.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub users: usize,
    pub items: usize,
    pub terms: usize,
    pub dim: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            users: 10,
            items: 8,
            terms: 12,
            dim: 8,
            eps: 1e-6,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Seeds both world synthesis and model training.
    pub seed: u64,
    /// Where `synth` writes and `train` reads the corpus.
    pub data_dir: PathBuf,
    /// Where checkpoints, logs and reports go.
    pub out_dir: PathBuf,
    pub world: WorldConfig,
    pub dims: ModelDims,
    pub train: TrainConfig,
    pub eval_seed: u64,
    pub sweep_param: SweepParam,
    pub sweep_values: Vec<f64>,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            world: WorldConfig::default(),
            dims: ModelDims::default(),
            train: TrainConfig::default(),
            eval_seed: 7,
            sweep_param: SweepParam::Lambda1,
            sweep_values: SweepParam::Lambda1.default_grid(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut sweep_values_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: n + 1,
                    msg: format!("expected key = value, got `{line}`"),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if key == "sweep.values" {
                sweep_values_set = true;
            }
            cfg.set(key, value)?;
        }
        if !sweep_values_set {
            cfg.sweep_values = cfg.sweep_param.default_grid();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("world.") {
            return match self.world.set(k, value) {
                Ok(true) => Ok(()),
                Ok(false) => Err(ConfigError::UnknownKey(key.to_string())),
                Err(msg) => Err(ConfigError::Invalid(msg)),
            };
        }
        let t = &mut self.train;
        let gc = &mut self.grad_check;
        match key {
            "run.seed" => self.seed = parse(key, value)?,
            "run.data_dir" => self.data_dir = PathBuf::from(value),
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "model.dim" => self.dims.dim = parse(key, value)?,
            "model.gen_hidden" => self.dims.gen_hidden = parse_list(key, value)?,
            "model.head_hidden" => self.dims.head_hidden = parse_list(key, value)?,
            "model.depth" => self.dims.depth = parse(key, value)?,
            "train.lr" => t.optimizer.lr = parse(key, value)?,
            "train.weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "train.beta1" => t.optimizer.beta1 = parse(key, value)?,
            "train.beta2" => t.optimizer.beta2 = parse(key, value)?,
            "train.eps" => t.optimizer.eps = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lambda1" => t.lambda1 = parse(key, value)?,
            "train.lambda2" => t.lambda2 = parse(key, value)?,
            "train.max_epochs" => t.max_epochs = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.valid_seed" => t.valid_seed = parse(key, value)?,
            "train.no_dem_int_gen" => t.ablation.no_dem_int_gen = parse(key, value)?,
            "train.no_int_trans" => t.ablation.no_int_trans = parse(key, value)?,
            "train.detach_generated_intent" => t.ablation.detach_generated_intent = parse(key, value)?,
            "eval.seed" => self.eval_seed = parse(key, value)?,
            "sweep.param" => self.sweep_param = value.parse().map_err(ConfigError::Invalid)?,
            "sweep.values" => self.sweep_values = parse_list(key, value)?,
            "gradcheck.users" => gc.users = parse(key, value)?,
            "gradcheck.items" => gc.items = parse(key, value)?,
            "gradcheck.terms" => gc.terms = parse(key, value)?,
            "gradcheck.dim" => gc.dim = parse(key, value)?,
            "gradcheck.eps" => gc.eps = parse(key, value)?,
            "gradcheck.tolerance" => gc.tolerance = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate().map_err(ConfigError::Invalid)?;
        if self.dims.dim == 0 || self.dims.gen_hidden.contains(&0) || self.dims.head_hidden.contains(&0) {
            return Err(ConfigError::Invalid("model widths must be positive".into()));
        }
        if self.sweep_values.is_empty() {
            return Err(ConfigError::Invalid("sweep.values is empty".into()));
        }
        if self.grad_check.users == 0 || self.grad_check.items == 0 || self.grad_check.dim == 0 {
            return Err(ConfigError::Invalid("gradcheck sizes must be positive".into()));
        }
        if !(self.grad_check.eps > 0.0) {
            return Err(ConfigError::Invalid("gradcheck.eps must be positive".into()));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn ablation(&self) -> Ablation {
        self.train.ablation
    }

    /// Every key with its value, one per line, in a fixed order.
    /// Parsing the output yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("run.seed", self.seed.to_string());
        kv("run.data_dir", self.data_dir.display().to_string());
        kv("run.out_dir", self.out_dir.display().to_string());
        for (k, v) in self.world.to_pairs() {
            kv(&format!("world.{k}"), v);
        }
        kv("model.dim", self.dims.dim.to_string());
        kv("model.gen_hidden", join(&self.dims.gen_hidden));
        kv("model.head_hidden", join(&self.dims.head_hidden));
        kv("model.depth", self.dims.depth.to_string());
        let t = &self.train;
        kv("train.lr", t.optimizer.lr.to_string());
        kv("train.weight_decay", t.optimizer.weight_decay.to_string());
        kv("train.beta1", t.optimizer.beta1.to_string());
        kv("train.beta2", t.optimizer.beta2.to_string());
        kv("train.eps", t.optimizer.eps.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.lambda1", t.lambda1.to_string());
        kv("train.lambda2", t.lambda2.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.valid_seed", t.valid_seed.to_string());
        kv("train.no_dem_int_gen", t.ablation.no_dem_int_gen.to_string());
        kv("train.no_int_trans", t.ablation.no_int_trans.to_string());
        kv("train.detach_generated_intent", t.ablation.detach_generated_intent.to_string());
        kv("eval.seed", self.eval_seed.to_string());
        kv("sweep.param", self.sweep_param.key().to_string());
        kv("sweep.values", join(&self.sweep_values));
        let g = &self.grad_check;
        kv("gradcheck.users", g.users.to_string());
        kv("gradcheck.items", g.items.to_string());
        kv("gradcheck.terms", g.terms.to_string());
        kv("gradcheck.dim", g.dim.to_string());
        kv("gradcheck.eps", g.eps.to_string());
        kv("gradcheck.tolerance", g.tolerance.to_string());
        out
    }
}
