//! Flat `key = value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::fusion::Branches;
use crate::recommender::{ModelConfig, TrainConfig};

pub const SEED_ENV: &str = "BLOSSOM_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub seed: u64,
    pub comp_block: usize,
    pub stride: usize,
    pub sel_block: usize,
    pub top_k: usize,
    pub window: usize,
    pub mask_block: usize,
    pub heads: usize,
    pub kv_groups: usize,
    pub d_model: usize,
    /// Derived as `d_model / heads` when unset.
    pub d_head: Option<usize>,
    pub layers: usize,
    pub max_len: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub negatives: usize,
    pub min_len: usize,
    pub clip_norm: f64,
    pub branches: Branches,
}

impl Default for RunConfig {
    fn default() -> Self {
        let a = AttentionConfig::default();
        Self {
            data: None,
            seed: 42,
            comp_block: a.comp_block,
            stride: a.stride,
            sel_block: a.sel_block,
            top_k: a.top_k,
            window: a.window,
            mask_block: a.mask_block,
            heads: a.heads,
            kv_groups: a.kv_groups,
            d_model: a.d_model,
            d_head: None,
            layers: 2,
            max_len: 200,
            lr: 1e-3,
            batch_size: 2048,
            dropout: 0.2,
            epochs: 200,
            patience: 15,
            eval_k: 10,
            negatives: 100,
            min_len: 3,
            clip_norm: 5.0,
            branches: Branches::Fused,
        }
    }
}

pub const KEYS: &[&str] = &[
    "data",
    "seed",
    "comp_block",
    "stride",
    "sel_block",
    "top_k",
    "window",
    "mask_block",
    "heads",
    "kv_groups",
    "d_model",
    "d_head",
    "layers",
    "max_len",
    "lr",
    "batch_size",
    "dropout",
    "epochs",
    "patience",
    "eval_k",
    "negatives",
    "min_len",
    "clip_norm",
    "branches",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "data" => self.data = Some(PathBuf::from(v)),
            "seed" => self.seed = parse("seed", v)?,
            "comp_block" => self.comp_block = parse(key, v)?,
            "stride" => self.stride = parse(key, v)?,
            "sel_block" => self.sel_block = parse(key, v)?,
            "top_k" => self.top_k = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "mask_block" => self.mask_block = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "kv_groups" => self.kv_groups = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "d_head" => self.d_head = Some(parse(key, v)?),
            "layers" => self.layers = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "eval_k" => self.eval_k = parse(key, v)?,
            "negatives" => self.negatives = parse(key, v)?,
            "min_len" => self.min_len = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "branches" => self.branches = v.parse()?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, found `{line}`")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `env_seed`, then the file, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(s) = env_seed {
            cfg.set("seed", s)?;
        }
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Keys assigned by `text` and `overrides`, in order of appearance.
    pub fn explicit_keys(text: Option<&str>, overrides: &[(String, String)]) -> Vec<String> {
        let from_text = text.into_iter().flat_map(|t| {
            t.lines().filter_map(|l| {
                let l = l.split('#').next().unwrap_or("");
                l.split_once('=').map(|(k, _)| k.trim().to_string())
            })
        });
        from_text.chain(overrides.iter().map(|(k, _)| k.clone())).collect()
    }

    /// Architecture keys among `keys` whose value here differs from `model`.
    pub fn architecture_conflicts(&self, keys: &[String], model: &ModelConfig) -> Vec<String> {
        let mine = self.model_config(model.num_items);
        let (a, b) = (&mine.attention, &model.attention);
        keys.iter()
            .filter(|k| match k.as_str() {
                "comp_block" => a.comp_block != b.comp_block,
                "stride" => a.stride != b.stride,
                "sel_block" => a.sel_block != b.sel_block,
                "top_k" => a.top_k != b.top_k,
                "window" => a.window != b.window,
                "mask_block" => a.mask_block != b.mask_block,
                "heads" => a.heads != b.heads,
                "kv_groups" => a.kv_groups != b.kv_groups,
                "d_model" => a.d_model != b.d_model,
                "d_head" => a.d_head != b.d_head,
                "layers" => mine.layers != model.layers,
                "max_len" => mine.max_len != model.max_len,
                "branches" => mine.branches != model.branches,
                _ => false,
            })
            .cloned()
            .collect()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            comp_block: self.comp_block,
            stride: self.stride,
            sel_block: self.sel_block,
            top_k: self.top_k,
            window: self.window,
            mask_block: self.mask_block,
            heads: self.heads,
            kv_groups: self.kv_groups,
            d_model: self.d_model,
            d_head: self.d_head.unwrap_or(self.d_model / self.heads.max(1)),
        }
    }

    pub fn model_config(&self, num_items: usize) -> ModelConfig {
        ModelConfig {
            attention: self.attention(),
            layers: self.layers,
            max_len: self.max_len,
            dropout: self.dropout,
            branches: self.branches,
            num_items,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            eval_k: self.eval_k,
            negatives: self.negatives,
            clip_norm: self.clip_norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.d_model, c.layers, c.heads, c.max_len), (128, 2, 8, 200));
        assert_eq!(
            (c.comp_block, c.stride, c.sel_block, c.window, c.mask_block),
            (32, 16, 16, 8, 1)
        );
        assert_eq!(
            (c.lr, c.batch_size, c.patience, c.eval_k, c.negatives),
            (1e-3, 2048, 15, 10, 100)
        );
        assert_eq!(c.attention().d_head, 16);
    }

    #[test]
    fn unknown_key_is_named() {
        let mut c = RunConfig::default();
        match c.apply_text("lr = 0.1\nlearning_rate = 3\n") {
            Err(Error::UnknownKey(k)) => assert_eq!(k, "learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.set("epochs", "many"), Err(Error::Config(_))));
    }

    #[test]
    fn three_way_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "# run\nseed = 5\nlr = 0.01\nepochs = 3\n").unwrap();
        let flags = vec![("seed".to_string(), "9".to_string())];
        let c = RunConfig::resolve(Some(&p), &flags, Some("7")).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.epochs, 3);
        assert_eq!(c.patience, 15);
        let c = RunConfig::resolve(Some(&p), &[], Some("7")).unwrap();
        assert_eq!(c.seed, 5);
        let c = RunConfig::resolve(None, &[], Some("7")).unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn conflicts_only_for_explicit_architecture_keys() {
        let base = RunConfig::default();
        let model = base.model_config(10);
        let mut c = RunConfig::default();
        c.set("d_model", "64").unwrap();
        c.set("lr", "0.5").unwrap();
        let keys = RunConfig::explicit_keys(Some("d_model = 64 # wider\n"), &[("lr".into(), "0.5".into())]);
        assert_eq!(keys, vec!["d_model", "lr"]);
        assert_eq!(c.architecture_conflicts(&keys, &model), vec!["d_model"]);
        assert!(c.architecture_conflicts(&keys[1..], &model).is_empty());
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let mut c = RunConfig::default();
        for k in KEYS {
            let v = match *k {
                "data" => "x.tsv",
                "branches" => "stis-only",
                "lr" | "dropout" | "clip_norm" => "0.1",
                _ => "4",
            };
            c.set(k, v).unwrap();
        }
        assert_eq!(c.branches, Branches::StisOnly);
    }
}
