//! Corpus ingestion: tokenization, vocabulary, pointer-supervision labels,
//! truncation and the random-insertion novelty baseline.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const START: u32 = 2;
pub const END: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

const TERMINAL_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercases, splits on whitespace and detaches trailing punctuation into
/// separate tokens (`"london."` becomes `["london", "."]`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let core = lower.trim_end_matches(TERMINAL_PUNCT);
        if !core.is_empty() {
            out.push(core.to_string());
        }
        for ch in lower[core.len()..].chars() {
            out.push(ch.to_string());
        }
    }
    out
}

/// Integer or decimal literal, optionally signed, with `,` or `.` group separators.
pub fn is_numeric(token: &str) -> bool {
    let body = token.strip_prefix(['+', '-']).unwrap_or(token);
    !body.is_empty()
        && body.split(['.', ',']).all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_digit()))
}

/// Dense token ids. Specials take ids 0..4, then tokens by descending
/// frequency with lexicographic tie-break. The output (generation)
/// vocabulary is the first `output_size` ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    output_size: usize,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>, output_size: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            output_size,
            index,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(&fs::read_to_string(path)?)?;
        if v.output_size > v.tokens.len() || v.tokens.get(..4) != Some(&SPECIALS.map(String::from)[..]) {
            return Err(Error::Data(format!("malformed vocabulary file {}", path.display())));
        }
        Ok(Self::from_tokens(v.tokens, v.output_size))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Input vocabulary size, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= SPECIALS.len()
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn in_output(&self, token: &str) -> bool {
        self.get(token).is_some_and(|id| (id as usize) < self.output_size)
    }

    /// Encodes a source document. Tokens outside the input vocabulary get
    /// per-document ids starting at `len()`, listed in the returned table.
    pub fn encode_source(&self, tokens: &[String]) -> (Vec<u32>, Vec<String>) {
        let mut oovs: Vec<String> = Vec::new();
        let ids = tokens
            .iter()
            .map(|t| match self.get(t) {
                Some(id) => id,
                None => {
                    let k = oovs.iter().position(|o| o == t).unwrap_or_else(|| {
                        oovs.push(t.clone());
                        oovs.len() - 1
                    });
                    (self.len() + k) as u32
                }
            })
            .collect();
        (ids, oovs)
    }

    /// Encodes a summary against its source's OOV table; OOV words that
    /// the source lacks become `UNK`.
    pub fn encode_summary(&self, tokens: &[String], oovs: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| match self.get(t) {
                Some(id) => id,
                None => oovs
                    .iter()
                    .position(|o| o == t)
                    .map_or(UNK, |k| (self.len() + k) as u32),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32], oovs: &[String]) -> Vec<String> {
        ids.iter()
            .map(|&id| {
                let i = id as usize;
                match self.tokens.get(i) {
                    Some(t) => t.clone(),
                    None => oovs
                        .get(i - self.len())
                        .cloned()
                        .unwrap_or_else(|| SPECIALS[UNK as usize].to_string()),
                }
            })
            .collect()
    }

    /// Maps per-document OOV ids to `UNK` for embedding lookups.
    pub fn embedding_id(&self, id: u32) -> u32 {
        if (id as usize) < self.len() {
            id
        } else {
            UNK
        }
    }
}

/// Builds a vocabulary from tokenized documents. Caps count regular tokens;
/// the four specials are always present on top.
pub fn build_vocab<I, S>(corpus: I, input_cap: usize, output_cap: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    if output_cap > input_cap {
        return Err(Error::Config(format!(
            "output vocabulary cap {output_cap} exceeds input cap {input_cap}"
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for t in doc.as_ref() {
            if !SPECIALS.contains(&t.as_str()) {
                *counts.entry(t.clone()).or_insert(0) += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyInput("vocabulary corpus"));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(input_cap);
    let output_size = SPECIALS.len() + output_cap.min(ranked.len());
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocabulary::from_tokens(tokens, output_size))
}

/// `true` = generate from the vocabulary, `false` = point into the source.
/// A summary token is pointed at iff it is an entity, outside the output
/// vocabulary, or numeric, and it occurs in the source.
pub fn label_pointer_supervision(
    source: &[String],
    summary: &[String],
    vocab: &Vocabulary,
    entities: &HashSet<String>,
) -> Vec<bool> {
    let in_source: HashSet<&str> = source.iter().map(String::as_str).collect();
    summary
        .iter()
        .map(|t| {
            let special = entities.contains(t) || !vocab.in_output(t) || is_numeric(t);
            !(special && in_source.contains(t.as_str()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentPair {
    pub id: usize,
    pub source: Vec<u32>,
    pub summary: Vec<u32>,
    pub z_labels: Vec<bool>,
    /// Per-document OOV table backing ids `>= vocab.len()`.
    pub oovs: Vec<String>,
    pub entities: BTreeSet<String>,
}

impl DocumentPair {
    /// Encodes, truncates and labels one tokenized pair.
    pub fn build(
        id: usize,
        source: &[String],
        summary: &[String],
        entities: &HashSet<String>,
        vocab: &Vocabulary,
        max_source: usize,
        max_summary: usize,
    ) -> Result<Self> {
        check_maxima(max_source, max_summary)?;
        let source = &source[..source.len().min(max_source)];
        let summary = &summary[..summary.len().min(max_summary)];
        let (src_ids, oovs) = vocab.encode_source(source);
        let sum_ids = vocab.encode_summary(summary, &oovs);
        let z_labels = label_pointer_supervision(source, summary, vocab, entities);
        let doc_entities = entities
            .iter()
            .filter(|e| source.contains(e) || summary.contains(e))
            .cloned()
            .collect();
        Ok(Self {
            id,
            source: src_ids,
            summary: sum_ids,
            z_labels,
            oovs,
            entities: doc_entities,
        })
    }

    /// Every pointer label refers to a token present in the source.
    pub fn labels_consistent(&self) -> bool {
        self.z_labels.len() == self.summary.len()
            && self
                .summary
                .iter()
                .zip(&self.z_labels)
                .all(|(y, &z)| z || self.source.contains(y))
    }
}

fn check_maxima(max_source: usize, max_summary: usize) -> Result<()> {
    if max_source == 0 || max_summary == 0 {
        return Err(Error::Config("truncation maxima must be at least 1".into()));
    }
    Ok(())
}

/// Keeps the first `max_source` / `max_summary` tokens. Pointer labels are
/// cut in lockstep, and any label whose target fell off the source is
/// switched to generation.
pub fn truncate(pair: &DocumentPair, max_source: usize, max_summary: usize) -> Result<DocumentPair> {
    check_maxima(max_source, max_summary)?;
    let mut out = pair.clone();
    out.source.truncate(max_source);
    out.summary.truncate(max_summary);
    out.z_labels.truncate(max_summary);
    let kept: HashSet<u32> = out.source.iter().copied().collect();
    for (y, z) in out.summary.iter().zip(out.z_labels.iter_mut()) {
        if !*z && !kept.contains(y) {
            *z = true;
        }
    }
    Ok(out)
}

/// One line of a JSONL corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPair {
    pub source: String,
    pub summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<Vec<String>>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Entity sidecar: one entity token per line; blank lines ignored.
pub fn read_entities(path: &Path) -> Result<HashSet<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.trim().to_lowercase())
        .filter(|l| !l.is_empty())
        .collect())
}

/// A tokenized corpus with its vocabulary and the entity list used for labeling.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub pairs: Vec<DocumentPair>,
    pub sources: Vec<Vec<String>>,
    pub summaries: Vec<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusLimits {
    pub input_cap: usize,
    pub output_cap: usize,
    pub max_source: usize,
    pub max_summary: usize,
}

impl Default for CorpusLimits {
    fn default() -> Self {
        Self {
            input_cap: 150_000,
            output_cap: 50_000,
            max_source: 400,
            max_summary: 100,
        }
    }
}

impl Corpus {
    /// Tokenizes raw pairs, builds a vocabulary over sources and summaries
    /// (unless one is supplied) and labels every pair.
    pub fn from_raw(
        raw: &[RawPair],
        sidecar: &HashSet<String>,
        limits: CorpusLimits,
        vocab: Option<Vocabulary>,
    ) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyInput("corpus"));
        }
        let sources: Vec<Vec<String>> = raw
            .iter()
            .map(|r| truncated(tokenize(&r.source), limits.max_source))
            .collect();
        let summaries: Vec<Vec<String>> = raw
            .iter()
            .map(|r| truncated(tokenize(&r.summary), limits.max_summary))
            .collect();
        let vocab = match vocab {
            Some(v) => v,
            None => build_vocab(
                sources.iter().chain(&summaries),
                limits.input_cap,
                limits.output_cap,
            )?,
        };
        let pairs = raw
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut entities = sidecar.clone();
                if let Some(extra) = &r.entities {
                    entities.extend(extra.iter().map(|e| e.to_lowercase()));
                }
                DocumentPair::build(
                    i,
                    &sources[i],
                    &summaries[i],
                    &entities,
                    &vocab,
                    limits.max_source,
                    limits.max_summary,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vocab,
            pairs,
            sources,
            summaries,
        })
    }
}

fn truncated(mut v: Vec<String>, max: usize) -> Vec<String> {
    v.truncate(max);
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyBaselineConfig {
    pub rate: f64,
    pub distractor_pool: Vec<String>,
}

/// After every token, with probability `rate`, inserts one distractor drawn
/// uniformly from the pool entries absent from that document's source.
pub fn novelty_baseline(
    outputs: &[Vec<String>],
    sources: &[Vec<String>],
    cfg: &NoveltyBaselineConfig,
    seed: u64,
) -> Result<Vec<Vec<String>>> {
    if !(0.0..=1.0).contains(&cfg.rate) {
        return Err(Error::Config(format!("insertion rate {} outside [0, 1]", cfg.rate)));
    }
    if outputs.len() != sources.len() {
        return Err(Error::Alignment {
            left: outputs.len(),
            right: sources.len(),
        });
    }
    if cfg.rate > 0.0 && cfg.distractor_pool.is_empty() {
        return Err(Error::Config("novelty baseline needs a non-empty distractor pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    outputs
        .iter()
        .zip(sources)
        .enumerate()
        .map(|(doc, (out, src))| {
            if cfg.rate == 0.0 {
                return Ok(out.clone());
            }
            let src: HashSet<&String> = src.iter().collect();
            let pool: Vec<&String> = cfg.distractor_pool.iter().filter(|d| !src.contains(d)).collect();
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "every distractor occurs in source document {doc}"
                )));
            }
            let mut perturbed = Vec::with_capacity(out.len());
            for tok in out {
                perturbed.push(tok.clone());
                if rng.gen_bool(cfg.rate) {
                    perturbed.push((*pool.choose(&mut rng).expect("non-empty pool")).clone());
                }
            }
            Ok(perturbed)
        })
        .collect()
}
