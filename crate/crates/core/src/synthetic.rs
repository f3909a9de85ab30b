//! Small generated corpora with known structure, for training sanity
//! checks and trend experiments.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::RawPair;

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub raw: Vec<RawPair>,
    pub entities: HashSet<String>,
}

/// Sources of random words with a few entity mentions; each summary is the
/// source's first `prefix_len` tokens followed by the entities mentioned
/// after that prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopyCorpusConfig {
    pub pairs: usize,
    pub source_len: usize,
    pub prefix_len: usize,
    pub words: usize,
    pub entities: usize,
    pub entities_per_source: usize,
    pub seed: u64,
}

impl Default for CopyCorpusConfig {
    fn default() -> Self {
        Self {
            pairs: 50,
            source_len: 20,
            prefix_len: 8,
            words: 40,
            entities: 20,
            entities_per_source: 2,
            seed: 1,
        }
    }
}

pub fn copy_corpus(cfg: &CopyCorpusConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let entity_names: Vec<String> = (0..cfg.entities).map(|i| format!("ent{i}")).collect();
    let raw = (0..cfg.pairs)
        .map(|_| {
            let mut source: Vec<String> = (0..cfg.source_len)
                .map(|_| format!("w{}", rng.gen_range(0..cfg.words)))
                .collect();
            let positions: Vec<usize> =
                rand::seq::index::sample(&mut rng, cfg.source_len, cfg.entities_per_source.min(cfg.source_len))
                    .into_vec();
            for p in positions {
                source[p] = entity_names.choose(&mut rng).expect("entity list").clone();
            }
            let prefix = cfg.prefix_len.min(source.len());
            let mut summary = source[..prefix].to_vec();
            summary.extend(source[prefix..].iter().filter(|t| t.starts_with("ent")).cloned());
            RawPair {
                source: source.join(" "),
                summary: summary.join(" "),
                entities: None,
            }
        })
        .collect();
    SyntheticCorpus {
        raw,
        entities: entity_names.into_iter().collect(),
    }
}

/// Sources over `w*` words; each summary restates a leading window of the
/// source with every word independently swapped, at `synonym_rate`, for a
/// `s*` synonym that never occurs in any source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParaphraseCorpusConfig {
    pub pairs: usize,
    pub source_len: usize,
    pub summary_len: usize,
    pub words: usize,
    pub synonym_rate: f64,
    pub seed: u64,
}

impl Default for ParaphraseCorpusConfig {
    fn default() -> Self {
        Self {
            pairs: 40,
            source_len: 10,
            summary_len: 5,
            words: 12,
            synonym_rate: 0.5,
            seed: 1,
        }
    }
}

pub fn synonym(word: &str) -> Option<String> {
    word.strip_prefix('w').map(|i| format!("s{i}"))
}

pub fn paraphrase_corpus(cfg: &ParaphraseCorpusConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let raw = (0..cfg.pairs)
        .map(|_| {
            let source: Vec<String> = (0..cfg.source_len)
                .map(|_| format!("w{}", rng.gen_range(0..cfg.words)))
                .collect();
            let summary: Vec<String> = source[..cfg.summary_len.min(source.len())]
                .iter()
                .map(|w| {
                    if rng.gen_bool(cfg.synonym_rate) {
                        synonym(w).expect("source words start with w")
                    } else {
                        w.clone()
                    }
                })
                .collect();
            RawPair {
                source: source.join(" "),
                summary: summary.join(" "),
                entities: None,
            }
        })
        .collect();
    SyntheticCorpus {
        raw,
        entities: HashSet::new(),
    }
}
