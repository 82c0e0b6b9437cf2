//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ppo::{PpoConfig, RewardNorm};
use crate::pretrain::PretrainConfig;
use crate::synthdata::CorpusConfig;

/// Architecture knobs; vocabulary and view shape come from the data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSettings {
    pub d_model: usize,
    pub heads: usize,
    pub policy_layers: usize,
    pub value_layers: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(0, 0, 0);
        Self {
            d_model: d.d_model,
            heads: d.heads,
            policy_layers: d.policy_layers,
            value_layers: d.value_layers,
            max_len: d.max_len,
            ffn_mult: d.ffn_mult,
            seed: 1,
        }
    }
}

impl ModelSettings {
    pub fn model_config(
        &self,
        vocab_size: usize,
        tokens_per_view: usize,
        feature_dim: usize,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            heads: self.heads,
            policy_layers: self.policy_layers,
            value_layers: self.value_layers,
            max_len: self.max_len,
            ffn_mult: self.ffn_mult,
            tokens_per_view,
            feature_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSettings,
    pub pretrain: PretrainConfig,
    pub ppo: PpoConfig,
    pub decode: DecodeConfig,
    /// Directory holding the JSONL splits and vocabulary.
    pub data: Option<PathBuf>,
    /// Record elapsed seconds in training logs (breaks byte-stable reruns).
    pub wall_clock: bool,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {v:?} for {key} (true|false)"
        ))),
    }
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        let m = &self.model;
        let p = &self.pretrain;
        let r = &self.ppo;
        let d = &self.decode;
        vec![
            ("corpus.seed", c.seed.to_string()),
            ("corpus.n_train", c.n_train.to_string()),
            ("corpus.n_val", c.n_val.to_string()),
            ("corpus.n_test", c.n_test.to_string()),
            ("corpus.tokens_per_view", c.tokens_per_view.to_string()),
            ("corpus.feature_dim", c.feature_dim.to_string()),
            ("corpus.sigma_view", c.sigma_view.to_string()),
            ("model.d_model", m.d_model.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.policy_layers", m.policy_layers.to_string()),
            ("model.value_layers", m.value_layers.to_string()),
            ("model.max_len", m.max_len.to_string()),
            ("model.ffn_mult", m.ffn_mult.to_string()),
            ("model.seed", m.seed.to_string()),
            ("pretrain.lr", p.lr.to_string()),
            ("pretrain.epochs", p.epochs.to_string()),
            ("pretrain.batch_size", p.batch_size.to_string()),
            (
                "pretrain.shuffle_sentences",
                p.shuffle_sentences.to_string(),
            ),
            ("pretrain.feature_noise", p.feature_noise.to_string()),
            ("pretrain.seed", p.seed.to_string()),
            ("ppo.clip", r.clip.to_string()),
            ("ppo.kl_coef", r.kl_coef.to_string()),
            ("ppo.group", r.group.to_string()),
            ("ppo.temperature", r.temperature.to_string()),
            ("ppo.lr_start", r.lr_start.to_string()),
            ("ppo.lr_end", r.lr_end.to_string()),
            ("ppo.warmup_iters", r.warmup_iters.to_string()),
            ("ppo.iterations", r.iterations.to_string()),
            ("ppo.batch_studies", r.batch_studies.to_string()),
            ("ppo.grad_accum", r.grad_accum.to_string()),
            ("ppo.gamma", r.gamma.to_string()),
            ("ppo.lambda", r.lambda.to_string()),
            ("ppo.value_weight", r.value_weight.to_string()),
            (
                "ppo.norm",
                match r.norm {
                    RewardNorm::Group => "group",
                    RewardNorm::Batch => "batch",
                }
                .to_string(),
            ),
            (
                "ppo.rollout_k",
                r.rollout_k
                    .map_or_else(|| "none".to_string(), |k| k.to_string()),
            ),
            ("ppo.val_studies", r.val_studies.to_string()),
            ("ppo.divergence_limit", r.divergence_limit.to_string()),
            ("ppo.seed", r.seed.to_string()),
            ("decode.k", d.k.to_string()),
            ("decode.n", d.n.to_string()),
            ("decode.t_find", d.t_find.to_string()),
            ("decode.t_imp", d.t_imp.to_string()),
            ("decode.top_p", d.top_p.to_string()),
            ("decode.max_len", d.max_len.to_string()),
            ("decode.force", d.force.to_string()),
            ("decode.seed", d.seed.to_string()),
            (
                "data",
                self.data
                    .as_ref()
                    .map_or_else(String::new, |p| p.display().to_string()),
            ),
            ("wall_clock", self.wall_clock.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let c = &mut self.corpus;
        let m = &mut self.model;
        let p = &mut self.pretrain;
        let r = &mut self.ppo;
        let d = &mut self.decode;
        match key {
            "corpus.seed" => c.seed = parse(key, v)?,
            "corpus.n_train" => c.n_train = parse(key, v)?,
            "corpus.n_val" => c.n_val = parse(key, v)?,
            "corpus.n_test" => c.n_test = parse(key, v)?,
            "corpus.tokens_per_view" => c.tokens_per_view = parse(key, v)?,
            "corpus.feature_dim" => c.feature_dim = parse(key, v)?,
            "corpus.sigma_view" => c.sigma_view = parse(key, v)?,
            "model.d_model" => m.d_model = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.policy_layers" => m.policy_layers = parse(key, v)?,
            "model.value_layers" => m.value_layers = parse(key, v)?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.seed" => m.seed = parse(key, v)?,
            "pretrain.lr" => p.lr = parse(key, v)?,
            "pretrain.epochs" => p.epochs = parse(key, v)?,
            "pretrain.batch_size" => p.batch_size = parse(key, v)?,
            "pretrain.shuffle_sentences" => p.shuffle_sentences = parse_bool(key, v)?,
            "pretrain.feature_noise" => p.feature_noise = parse(key, v)?,
            "pretrain.seed" => p.seed = parse(key, v)?,
            "ppo.clip" => r.clip = parse(key, v)?,
            "ppo.kl_coef" => r.kl_coef = parse(key, v)?,
            "ppo.group" => r.group = parse(key, v)?,
            "ppo.temperature" => r.temperature = parse(key, v)?,
            "ppo.lr_start" => r.lr_start = parse(key, v)?,
            "ppo.lr_end" => r.lr_end = parse(key, v)?,
            "ppo.warmup_iters" => r.warmup_iters = parse(key, v)?,
            "ppo.iterations" => r.iterations = parse(key, v)?,
            "ppo.batch_studies" => r.batch_studies = parse(key, v)?,
            "ppo.grad_accum" => r.grad_accum = parse(key, v)?,
            "ppo.gamma" => r.gamma = parse(key, v)?,
            "ppo.lambda" => r.lambda = parse(key, v)?,
            "ppo.value_weight" => r.value_weight = parse(key, v)?,
            "ppo.norm" => {
                r.norm = match v {
                    "group" => RewardNorm::Group,
                    "batch" => RewardNorm::Batch,
                    _ => {
                        return Err(Error::Config(format!(
                            "invalid value {v:?} for ppo.norm (group|batch)"
                        )))
                    }
                }
            }
            "ppo.rollout_k" => {
                r.rollout_k = if v == "none" {
                    None
                } else {
                    Some(parse(key, v)?)
                }
            }
            "ppo.val_studies" => r.val_studies = parse(key, v)?,
            "ppo.divergence_limit" => r.divergence_limit = parse(key, v)?,
            "ppo.seed" => r.seed = parse(key, v)?,
            "decode.k" => d.k = parse(key, v)?,
            "decode.n" => d.n = parse(key, v)?,
            "decode.t_find" => d.t_find = parse(key, v)?,
            "decode.t_imp" => d.t_imp = parse(key, v)?,
            "decode.top_p" => d.top_p = parse(key, v)?,
            "decode.max_len" => d.max_len = parse(key, v)?,
            "decode.force" => d.force = parse_bool(key, v)?,
            "decode.seed" => d.seed = parse(key, v)?,
            "data" => {
                self.data = if v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                }
            }
            "wall_clock" => self.wall_clock = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the lines of `text`; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {k:?}",
                    n + 1
                )));
            }
            cfg.set(k, v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// The fully resolved configuration, one `key = value` per line.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.ppo.validate()?;
        self.decode.validate()?;
        self.model
            .model_config(
                crate::tokenizer::UNK + 1,
                self.corpus.tokens_per_view,
                self.corpus.feature_dim,
            )
            .validate()
    }
}
