//! `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::CorpusLimits;
use crate::decoding::BeamConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LmTrainConfig};
use crate::metrics::RewardWeights;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;

/// Environment variable that overrides `seed` after parsing.
pub const SEED_ENV: &str = "ABSLAB_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    /// Model family for Pareto plots; defaults to the label.
    pub family: Option<String>,
    pub train_corpus: Option<PathBuf>,
    pub valid_corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub entities: Option<PathBuf>,
    pub output_dir: PathBuf,

    pub input_vocab_cap: usize,
    pub output_vocab_cap: usize,
    pub max_source: usize,
    pub max_summary: usize,

    pub d_emb: usize,
    pub d_hid: usize,
    pub encoder_size: usize,
    pub d_fuse: usize,
    pub init_scale: f64,

    pub use_lm: bool,
    /// Pretrained `lm.bin`; its `lm.json` and `vocab.json` are read from the same directory.
    pub lm_checkpoint: Option<PathBuf>,
    pub lm_d_emb: usize,
    pub lm_hidden: [usize; 3],
    pub lm_weight_drop: f64,
    pub lm_epochs: usize,
    pub lm_lr: f64,

    pub gamma: f64,
    pub lambda_rouge: f64,
    pub lambda_novel: f64,
    pub novelty_n: usize,
    pub ss_prob: f64,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    pub epochs: usize,
    pub warm_start_epochs: usize,
    pub batch_size: usize,
    pub rollout_max_len: usize,

    pub beam_width: usize,
    pub decode_max_len: usize,
    pub block_trigrams: bool,
    pub baseline_rate: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let limits = CorpusLimits::default();
        let train = TrainingConfig::default();
        let beam = BeamConfig::default();
        Self {
            label: "run".into(),
            family: None,
            train_corpus: None,
            valid_corpus: None,
            test_corpus: None,
            entities: None,
            output_dir: PathBuf::from("out"),
            input_vocab_cap: limits.input_cap,
            output_vocab_cap: limits.output_cap,
            max_source: limits.max_source,
            max_summary: limits.max_summary,
            d_emb: 32,
            d_hid: 64,
            encoder_size: 32,
            d_fuse: 32,
            init_scale: 0.1,
            use_lm: false,
            lm_checkpoint: None,
            lm_d_emb: 32,
            lm_hidden: [64, 64, 32],
            lm_weight_drop: 0.5,
            lm_epochs: 5,
            lm_lr: 0.5,
            gamma: train.gamma,
            lambda_rouge: train.reward.lambda_rouge,
            lambda_novel: train.reward.lambda_novel,
            novelty_n: train.reward.novelty_n,
            ss_prob: train.ss_prob,
            lr: train.lr,
            clip: train.clip,
            seed: train.seed,
            epochs: train.epochs,
            warm_start_epochs: train.warm_start_epochs,
            batch_size: train.batch_size,
            rollout_max_len: train.max_len,
            beam_width: beam.width,
            decode_max_len: beam.max_len,
            block_trigrams: beam.block_trigrams,
            baseline_rate: 0.0005,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for key {key}")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_hidden(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts = value
        .split(',')
        .map(|p| parse_value(key, p.trim()))
        .collect::<Result<Vec<usize>>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs three comma-separated sizes, got {value:?}")))
}

impl RunConfig {
    /// Parses config text on top of the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", lineno + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, e.config_message())))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(self)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "label" => self.label = v.to_string(),
            "family" => self.family = (!v.is_empty()).then(|| v.to_string()),
            "train_corpus" => self.train_corpus = parse_path(v),
            "valid_corpus" => self.valid_corpus = parse_path(v),
            "test_corpus" => self.test_corpus = parse_path(v),
            "entities" => self.entities = parse_path(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "input_vocab_cap" => self.input_vocab_cap = parse_value(key, v)?,
            "output_vocab_cap" => self.output_vocab_cap = parse_value(key, v)?,
            "max_source" => self.max_source = parse_value(key, v)?,
            "max_summary" => self.max_summary = parse_value(key, v)?,
            "d_emb" => self.d_emb = parse_value(key, v)?,
            "d_hid" => self.d_hid = parse_value(key, v)?,
            "encoder_size" => self.encoder_size = parse_value(key, v)?,
            "d_fuse" => self.d_fuse = parse_value(key, v)?,
            "init_scale" => self.init_scale = parse_value(key, v)?,
            "use_lm" => self.use_lm = parse_value(key, v)?,
            "lm_checkpoint" => self.lm_checkpoint = parse_path(v),
            "lm_d_emb" => self.lm_d_emb = parse_value(key, v)?,
            "lm_hidden" => self.lm_hidden = parse_hidden(key, v)?,
            "lm_weight_drop" => self.lm_weight_drop = parse_value(key, v)?,
            "lm_epochs" => self.lm_epochs = parse_value(key, v)?,
            "lm_lr" => self.lm_lr = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "lambda_rouge" => self.lambda_rouge = parse_value(key, v)?,
            "lambda_novel" => self.lambda_novel = parse_value(key, v)?,
            "novelty_n" => self.novelty_n = parse_value(key, v)?,
            "ss_prob" => self.ss_prob = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "clip" => self.clip = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "warm_start_epochs" => self.warm_start_epochs = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "rollout_max_len" => self.rollout_max_len = parse_value(key, v)?,
            "beam_width" => self.beam_width = parse_value(key, v)?,
            "decode_max_len" => self.decode_max_len = parse_value(key, v)?,
            "block_trigrams" => self.block_trigrams = parse_value(key, v)?,
            "baseline_rate" => self.baseline_rate = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`RunConfig::parse`] reads back
    /// identically. Unset paths are omitted.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("label", self.label.clone());
        if let Some(f) = &self.family {
            put("family", f.clone());
        }
        for (k, p) in [
            ("train_corpus", &self.train_corpus),
            ("valid_corpus", &self.valid_corpus),
            ("test_corpus", &self.test_corpus),
            ("entities", &self.entities),
        ] {
            if let Some(p) = p {
                put(k, p.display().to_string());
            }
        }
        put("output_dir", self.output_dir.display().to_string());
        put("input_vocab_cap", self.input_vocab_cap.to_string());
        put("output_vocab_cap", self.output_vocab_cap.to_string());
        put("max_source", self.max_source.to_string());
        put("max_summary", self.max_summary.to_string());
        put("d_emb", self.d_emb.to_string());
        put("d_hid", self.d_hid.to_string());
        put("encoder_size", self.encoder_size.to_string());
        put("d_fuse", self.d_fuse.to_string());
        put("init_scale", self.init_scale.to_string());
        put("use_lm", self.use_lm.to_string());
        if let Some(p) = &self.lm_checkpoint {
            put("lm_checkpoint", p.display().to_string());
        }
        put("lm_d_emb", self.lm_d_emb.to_string());
        let [a, b, c] = self.lm_hidden;
        put("lm_hidden", format!("{a},{b},{c}"));
        put("lm_weight_drop", self.lm_weight_drop.to_string());
        put("lm_epochs", self.lm_epochs.to_string());
        put("lm_lr", self.lm_lr.to_string());
        put("gamma", self.gamma.to_string());
        put("lambda_rouge", self.lambda_rouge.to_string());
        put("lambda_novel", self.lambda_novel.to_string());
        put("novelty_n", self.novelty_n.to_string());
        put("ss_prob", self.ss_prob.to_string());
        put("lr", self.lr.to_string());
        put("clip", self.clip.to_string());
        put("seed", self.seed.to_string());
        put("epochs", self.epochs.to_string());
        put("warm_start_epochs", self.warm_start_epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("rollout_max_len", self.rollout_max_len.to_string());
        put("beam_width", self.beam_width.to_string());
        put("decode_max_len", self.decode_max_len.to_string());
        put("block_trigrams", self.block_trigrams.to_string());
        put("baseline_rate", self.baseline_rate.to_string());
        out
    }

    pub fn family(&self) -> &str {
        self.family.as_deref().unwrap_or(&self.label)
    }

    pub fn limits(&self) -> CorpusLimits {
        CorpusLimits {
            input_cap: self.input_vocab_cap,
            output_cap: self.output_vocab_cap,
            max_source: self.max_source,
            max_summary: self.max_summary,
        }
    }

    pub fn model_config(&self, input_vocab: usize, output_vocab: usize) -> ModelConfig {
        ModelConfig {
            input_vocab,
            output_vocab,
            d_emb: self.d_emb,
            d_hid: self.d_hid,
            encoder_size: self.encoder_size,
            d_fuse: self.d_fuse,
            init_scale: self.init_scale,
        }
    }

    pub fn lm_config(&self, vocab: usize) -> LmConfig {
        LmConfig {
            vocab,
            d_emb: self.lm_d_emb,
            hidden: self.lm_hidden,
            weight_drop: self.lm_weight_drop,
            init_scale: self.init_scale,
        }
    }

    pub fn lm_train_config(&self) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.lm_epochs,
            lr: self.lm_lr,
            clip: self.clip,
            seed: self.seed,
        }
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            gamma: self.gamma,
            reward: RewardWeights {
                lambda_rouge: self.lambda_rouge,
                lambda_novel: self.lambda_novel,
                novelty_n: self.novelty_n,
            },
            ss_prob: self.ss_prob,
            lr: self.lr,
            clip: self.clip,
            seed: self.seed,
            epochs: self.epochs,
            warm_start_epochs: self.warm_start_epochs,
            batch_size: self.batch_size,
            max_len: self.rollout_max_len,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            width: self.beam_width,
            max_len: self.decode_max_len,
            block_trigrams: self.block_trigrams,
        }
    }
}

impl Error {
    fn config_message(self) -> String {
        match self {
            Error::Config(m) => m,
            other => other.to_string(),
        }
    }
}
