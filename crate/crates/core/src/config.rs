//! Flat `key = value` configuration shared by training, evaluation and the CLI.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoder::EncoderConfig;
use crate::error::{DstError, Result};
use crate::selector::{GateOverride, PerspectiveMask, SelectOptions};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub context_max_len: usize,
    pub dropout: f64,
    pub word_dropout: f64,
    pub k: usize,
    pub hops: usize,
    pub update_threshold: f64,
    /// Re-encode the selected turns jointly before generation.
    pub refine: bool,
    /// Factor on the generator-loss gradient reaching selection scores.
    pub selection_grad_scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_update: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub max_grad_norm: f64,
    /// Schema file; empty selects the built-in schema.
    pub schema: String,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 13,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 128,
            max_len: 128,
            context_max_len: 256,
            dropout: 0.1,
            word_dropout: 0.1,
            k: 2,
            hops: 3,
            update_threshold: 0.5,
            refine: true,
            selection_grad_scale: 1e-4,
            epochs: 30,
            batch_size: 1,
            lr: 3e-4,
            lr_update: 3e-4,
            weight_decay: 0.01,
            warmup_proportion: 0.01,
            max_grad_norm: 5.0,
            schema: String::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| DstError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl Config {
    pub const KEYS: [&'static str; 22] = [
        "seed",
        "d_model",
        "n_layers",
        "n_heads",
        "ffn_dim",
        "max_len",
        "context_max_len",
        "dropout",
        "word_dropout",
        "k",
        "hops",
        "update_threshold",
        "refine",
        "selection_grad_scale",
        "epochs",
        "batch_size",
        "lr",
        "lr_update",
        "weight_decay",
        "warmup_proportion",
        "max_grad_norm",
        "schema",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "ffn_dim" => self.ffn_dim = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "context_max_len" => self.context_max_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "word_dropout" => self.word_dropout = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "hops" => self.hops = parse(key, v)?,
            "update_threshold" => self.update_threshold = parse(key, v)?,
            "refine" => self.refine = parse(key, v)?,
            "selection_grad_scale" => self.selection_grad_scale = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_update" => self.lr_update = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_proportion" => self.warmup_proportion = parse(key, v)?,
            "max_grad_norm" => self.max_grad_norm = parse(key, v)?,
            "schema" => self.schema = v.to_string(),
            other => return Err(DstError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "d_model" => self.d_model.to_string(),
            "n_layers" => self.n_layers.to_string(),
            "n_heads" => self.n_heads.to_string(),
            "ffn_dim" => self.ffn_dim.to_string(),
            "max_len" => self.max_len.to_string(),
            "context_max_len" => self.context_max_len.to_string(),
            "dropout" => self.dropout.to_string(),
            "word_dropout" => self.word_dropout.to_string(),
            "k" => self.k.to_string(),
            "hops" => self.hops.to_string(),
            "update_threshold" => self.update_threshold.to_string(),
            "refine" => self.refine.to_string(),
            "selection_grad_scale" => self.selection_grad_scale.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "lr_update" => self.lr_update.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "warmup_proportion" => self.warmup_proportion.to_string(),
            "max_grad_norm" => self.max_grad_norm.to_string(),
            "schema" => self.schema.clone(),
            _ => return None,
        })
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| DstError::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    /// Blank lines and `#` comments are ignored; unset keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| DstError::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("listed key"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| DstError::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        crate::update::check_threshold(self.update_threshold)?;
        if self.context_max_len < 4 || self.batch_size == 0 {
            return Err(DstError::Config("context_max_len must be at least 4 and batch_size positive".into()));
        }
        for (k, v) in [("lr", self.lr), ("lr_update", self.lr_update)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DstError::Config(format!("{k} must be positive, got {v}")));
            }
        }
        for (k, v) in [
            ("weight_decay", self.weight_decay),
            ("warmup_proportion", self.warmup_proportion),
            ("max_grad_norm", self.max_grad_norm),
            ("selection_grad_scale", self.selection_grad_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DstError::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        if self.warmup_proportion > 1.0 {
            return Err(DstError::Config("warmup_proportion must not exceed 1".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            max_len: self.max_len,
            dropout: self.dropout,
            word_dropout: self.word_dropout,
        }
    }

    pub fn select_options(&self, mask: PerspectiveMask) -> SelectOptions {
        SelectOptions { k: self.k, hops: self.hops, mask, gate: GateOverride::Learned }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = Config::default();
        c.apply_overrides(&["k=3", "lr = 0.0005", "refine=false", "schema=x.json"]).unwrap();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert!(c.apply_overrides(&["nope=1"]).is_err());
        assert!(c.apply_overrides(&["update_threshold=1.5"]).is_err());
        assert!(Config::parse("d_model = 30\nn_heads = 4").is_err());
        assert_eq!(Config::parse("# comment\n\nepochs=2").unwrap().epochs, 2);
    }
}
