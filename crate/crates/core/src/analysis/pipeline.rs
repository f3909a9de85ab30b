//! File-level orchestration behind the command-line subcommands.

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pareto::{csv_err, ParetoPoint};
use crate::corpus::{
    novelty_baseline, read_entities, read_jsonl, tokenize, Corpus, CorpusLimits, NoveltyBaselineConfig, RawPair,
    Vocabulary, UNK,
};
use crate::decoding::{beam_search, BeamConfig, ModelPolicy};
use crate::error::{Error, Result};
use crate::lm::{pretrain_lm, LanguageModel, LmConfig, LmReport};
use crate::metrics::{nn_report, score_document, MetricsReport};
use crate::model::{ModelConfig, Summarizer};
use crate::tensor::Tape;
use crate::training::{train, EpochMetrics};

pub const VOCAB_FILE: &str = "vocab.json";
pub const MODEL_META_FILE: &str = "model.json";
pub const MODEL_FILE: &str = "model.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "resolved.conf";
pub const LM_META_FILE: &str = "lm.json";
pub const LM_FILE: &str = "lm.bin";

/// Everything besides the weights needed to rebuild a trained summarizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub label: String,
    pub model: ModelConfig,
    pub lm: Option<LmConfig>,
    pub max_source: usize,
    pub max_summary: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmMeta {
    pub config: LmConfig,
    pub report: LmReport,
}

/// One line of a system-output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryLine {
    pub summary: String,
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("{key} is not set")))
}

fn load_entities(cfg: &RunConfig) -> Result<HashSet<String>> {
    cfg.entities.as_deref().map(read_entities).transpose().map(Option::unwrap_or_default)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn save_checkpoint(path: &Path, save: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save(&mut w)?;
    w.flush()?;
    Ok(())
}

/// Gold summaries as LM training sequences over the output vocabulary.
pub fn lm_sequences(corpus: &Corpus) -> Vec<Vec<u32>> {
    let out = corpus.vocab.output_size() as u32;
    corpus
        .pairs
        .iter()
        .map(|p| p.summary.iter().map(|&y| if y < out { y } else { UNK }).collect())
        .collect()
}

fn lm_eval_sequences(path: &Path, entities: &HashSet<String>, vocab: &Vocabulary, limits: CorpusLimits) -> Result<Vec<Vec<u32>>> {
    let raw: Vec<RawPair> = read_jsonl(path)?;
    Ok(lm_sequences(&Corpus::from_raw(&raw, entities, limits, Some(vocab.clone()))?))
}

/// Pretrains the language model on the training summaries and writes
/// `vocab.json`, `lm.json` and `lm.bin` to the output directory.
pub fn run_lm_train(cfg: &RunConfig) -> Result<LmMeta> {
    let raw: Vec<RawPair> = read_jsonl(required(&cfg.train_corpus, "train_corpus")?)?;
    let entities = load_entities(cfg)?;
    let corpus = Corpus::from_raw(&raw, &entities, cfg.limits(), None)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (lm, meta) = pretrain_from(cfg, &corpus, &entities)?;
    corpus.vocab.save(&cfg.output_dir.join(VOCAB_FILE))?;
    write_json(&cfg.output_dir.join(LM_META_FILE), &meta)?;
    save_checkpoint(&cfg.output_dir.join(LM_FILE), |w| lm.save(w))?;
    Ok(meta)
}

fn pretrain_from(cfg: &RunConfig, corpus: &Corpus, entities: &HashSet<String>) -> Result<(LanguageModel, LmMeta)> {
    let lm_cfg = cfg.lm_config(corpus.vocab.output_size());
    let mut lm = LanguageModel::new(lm_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let eval = |p: &Option<PathBuf>| {
        p.as_deref()
            .map(|p| lm_eval_sequences(p, entities, &corpus.vocab, cfg.limits()))
            .transpose()
    };
    let valid = eval(&cfg.valid_corpus)?;
    let test = eval(&cfg.test_corpus)?;
    let report = pretrain_lm(
        &mut lm,
        &lm_sequences(corpus),
        valid.as_deref(),
        test.as_deref(),
        &cfg.lm_train_config(),
    )?;
    Ok((lm, LmMeta { config: lm_cfg, report }))
}

/// Loads `lm.bin` with its sibling `lm.json` and `vocab.json`.
pub fn load_lm(checkpoint: &Path) -> Result<(LanguageModel, Vocabulary)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let meta: LmMeta = serde_json::from_str(&fs::read_to_string(dir.join(LM_META_FILE))?)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let mut lm = LanguageModel::new(meta.config, &mut ChaCha8Rng::seed_from_u64(0))?;
    lm.load(File::open(checkpoint)?)?;
    Ok((lm, vocab))
}

/// Perplexity of a saved LM on the summaries of a corpus file.
pub fn run_lm_eval(checkpoint: &Path, corpus: &Path, entities: Option<&Path>) -> Result<f64> {
    let (lm, vocab) = load_lm(checkpoint)?;
    let entities = entities.map(read_entities).transpose()?.unwrap_or_default();
    let seqs = lm_eval_sequences(corpus, &entities, &vocab, CorpusLimits::default())?;
    lm.perplexity(&seqs)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Summarizer,
    pub vocab: Vocabulary,
    pub history: Vec<EpochMetrics>,
    pub checkpoint: PathBuf,
}

/// Trains a summarizer from a run config. Writes the vocabulary, model
/// metadata, resolved config, per-epoch metrics and checkpoints, and the
/// final `model.bin` into `output_dir`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let raw: Vec<RawPair> = read_jsonl(required(&cfg.train_corpus, "train_corpus")?)?;
    let entities = load_entities(cfg)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;

    let (corpus, lm) = match (cfg.use_lm, &cfg.lm_checkpoint) {
        (false, _) => (Corpus::from_raw(&raw, &entities, cfg.limits(), None)?, None),
        (true, Some(path)) => {
            let (lm, vocab) = load_lm(path)?;
            (Corpus::from_raw(&raw, &entities, cfg.limits(), Some(vocab))?, Some(lm))
        }
        (true, None) => {
            let corpus = Corpus::from_raw(&raw, &entities, cfg.limits(), None)?;
            let (lm, meta) = pretrain_from(cfg, &corpus, &entities)?;
            write_json(&out.join(LM_META_FILE), &meta)?;
            save_checkpoint(&out.join(LM_FILE), |w| lm.save(w))?;
            (corpus, Some(lm))
        }
    };

    let model_cfg = cfg.model_config(corpus.vocab.len(), corpus.vocab.output_size());
    let meta = ModelMeta {
        label: cfg.label.clone(),
        model: model_cfg.clone(),
        lm: lm.as_ref().map(|l| l.config.clone()),
        max_source: cfg.max_source,
        max_summary: cfg.max_summary,
    };
    let mut model = Summarizer::new(model_cfg, lm, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    corpus.vocab.save(&out.join(VOCAB_FILE))?;
    write_json(&out.join(MODEL_META_FILE), &meta)?;
    fs::write(out.join(RESOLVED_CONFIG_FILE), cfg.render())?;

    let mut log = BufWriter::new(File::create(out.join(METRICS_FILE))?);
    let history = train(&mut model, &corpus.pairs, &cfg.training_config(), |m, model| {
        writeln!(log, "{}", serde_json::to_string(m)?)?;
        log.flush()?;
        save_checkpoint(&out.join(format!("checkpoint-epoch-{}.bin", m.epoch)), |w| model.save(w))
    })?;
    let checkpoint = out.join(MODEL_FILE);
    save_checkpoint(&checkpoint, |w| model.save(w))?;
    Ok(TrainOutcome {
        model,
        vocab: corpus.vocab,
        history,
        checkpoint,
    })
}

/// Rebuilds a trained summarizer from its output directory. `checkpoint`
/// overrides the default `model.bin` (for example an epoch checkpoint).
pub fn load_model(dir: &Path, checkpoint: Option<&Path>) -> Result<(Summarizer, Vocabulary, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(dir.join(MODEL_META_FILE))?)?;
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lm = meta.lm.clone().map(|c| LanguageModel::new(c, &mut rng)).transpose()?;
    let mut model = Summarizer::new(meta.model.clone(), lm, &mut rng)?;
    let path = checkpoint.map_or_else(|| dir.join(MODEL_FILE), Path::to_path_buf);
    model.load(File::open(path)?)?;
    Ok((model, vocab, meta))
}

/// Beam-decodes every source of `corpus` and returns one summary string per document.
pub fn summarize_corpus(model: &Summarizer, vocab: &Vocabulary, corpus: &Corpus, beam: BeamConfig) -> Result<Vec<String>> {
    corpus
        .pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tape = Tape::new();
            let f = model.forward(&tape)?;
            let out = beam_search(&ModelPolicy::new(&f, &p.source)?, beam).map_err(|e| e.with_doc(i))?;
            let best = out.hypotheses.first().ok_or(Error::EmptyInput("beam output"))?;
            Ok(vocab.decode(&best.tokens, &p.oovs).join(" "))
        })
        .collect()
}

pub fn write_summaries(path: &Path, summaries: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in summaries {
        let line = SummaryLine { summary: s.clone() };
        writeln!(w, "{}", serde_json::to_string(&line)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summaries(path: &Path) -> Result<Vec<String>> {
    Ok(read_jsonl::<SummaryLine>(path)?.into_iter().map(|l| l.summary).collect())
}

/// Decodes a corpus file with a trained model and writes JSONL summaries.
pub fn run_summarize(
    model_dir: &Path,
    checkpoint: Option<&Path>,
    corpus: &Path,
    entities: Option<&Path>,
    beam: BeamConfig,
    out: &Path,
) -> Result<Vec<String>> {
    let (model, vocab, meta) = load_model(model_dir, checkpoint)?;
    let entities = entities.map(read_entities).transpose()?.unwrap_or_default();
    let raw: Vec<RawPair> = read_jsonl(corpus)?;
    let limits = CorpusLimits {
        max_source: meta.max_source,
        max_summary: meta.max_summary,
        ..CorpusLimits::default()
    };
    let corpus = Corpus::from_raw(&raw, &entities, limits, Some(vocab.clone()))?;
    let summaries = summarize_corpus(&model, &vocab, &corpus, beam)?;
    write_summaries(out, &summaries)?;
    Ok(summaries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DocumentRow {
    document: usize,
    rouge_1: f64,
    rouge_2: f64,
    rouge_l: f64,
    nn_1: f64,
    nn_2: f64,
    nn_3: f64,
    nn_4: f64,
}

/// Scores summaries against the references and sources of `raw`, optionally
/// writing the report as JSON and one CSV row per document.
pub fn score_summaries(
    summaries: &[String],
    raw: &[RawPair],
    report_path: Option<&Path>,
    csv_path: Option<&Path>,
) -> Result<MetricsReport> {
    if summaries.len() != raw.len() {
        return Err(Error::Alignment {
            left: summaries.len(),
            right: raw.len(),
        });
    }
    let outputs: Vec<Vec<String>> = summaries.iter().map(|s| tokenize(s)).collect();
    let sources: Vec<Vec<String>> = raw.iter().map(|r| tokenize(&r.source)).collect();
    let refs: Vec<Vec<String>> = raw.iter().map(|r| tokenize(&r.summary)).collect();
    let report = nn_report(&outputs, &sources, &refs)?;
    if let Some(path) = csv_path {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for (i, ((o, s), r)) in outputs.iter().zip(&sources).zip(&refs).enumerate() {
            let d = score_document(o, s, r);
            w.serialize(DocumentRow {
                document: i,
                rouge_1: d.rouge_1,
                rouge_2: d.rouge_2,
                rouge_l: d.rouge_l,
                nn_1: d.novel_ngrams[0],
                nn_2: d.novel_ngrams[1],
                nn_3: d.novel_ngrams[2],
                nn_4: d.novel_ngrams[3],
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
    }
    if let Some(path) = report_path {
        write_json(path, &report)?;
    }
    Ok(report)
}

pub fn run_score(outputs: &Path, corpus: &Path, report: Option<&Path>, csv: Option<&Path>) -> Result<MetricsReport> {
    let raw: Vec<RawPair> = read_jsonl(corpus)?;
    score_summaries(&read_summaries(outputs)?, &raw, report, csv)
}

/// Distinct reference-summary tokens, sorted.
pub fn distractor_pool(raw: &[RawPair]) -> Vec<String> {
    raw.iter()
        .flat_map(|r| tokenize(&r.summary))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Applies the random-insertion novelty baseline to system outputs, drawing
/// distractors from the corpus's reference-summary vocabulary.
pub fn run_baseline(outputs: &Path, corpus: &Path, rate: f64, seed: u64, out: &Path) -> Result<Vec<String>> {
    let raw: Vec<RawPair> = read_jsonl(corpus)?;
    let summaries = read_summaries(outputs)?;
    let toks: Vec<Vec<String>> = summaries.iter().map(|s| tokenize(s)).collect();
    let sources: Vec<Vec<String>> = raw.iter().map(|r| tokenize(&r.source)).collect();
    let cfg = NoveltyBaselineConfig {
        rate,
        distractor_pool: distractor_pool(&raw),
    };
    let perturbed: Vec<String> = novelty_baseline(&toks, &sources, &cfg, seed)?
        .into_iter()
        .map(|t| t.join(" "))
        .collect();
    write_summaries(out, &perturbed)?;
    Ok(perturbed)
}

/// Keys a grid of ablation configs may differ in.
pub const ABLATION_AXES: [&str; 11] = [
    "label",
    "family",
    "output_dir",
    "use_lm",
    "lm_checkpoint",
    "gamma",
    "lambda_rouge",
    "lambda_novel",
    "novelty_n",
    "warm_start_epochs",
    "seed",
];

fn shared_part(cfg: &RunConfig) -> Vec<String> {
    cfg.render()
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !ABLATION_AXES.contains(&key)
        })
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub family: String,
    /// `ok`, or `FAILED: <reason>`.
    pub status: String,
    pub rouge_1: Option<f64>,
    pub rouge_2: Option<f64>,
    pub rouge_l: Option<f64>,
    pub nn_1: Option<f64>,
    pub nn_2: Option<f64>,
    pub nn_3: Option<f64>,
    pub nn_4: Option<f64>,
}

impl AblationRow {
    fn ok(cfg: &RunConfig, r: &MetricsReport) -> Self {
        Self {
            label: cfg.label.clone(),
            family: cfg.family().to_string(),
            status: "ok".into(),
            rouge_1: Some(r.rouge_1),
            rouge_2: Some(r.rouge_2),
            rouge_l: Some(r.rouge_l),
            nn_1: Some(r.novel_ngrams[0]),
            nn_2: Some(r.novel_ngrams[1]),
            nn_3: Some(r.novel_ngrams[2]),
            nn_4: Some(r.novel_ngrams[3]),
        }
    }

    fn failed(cfg: &RunConfig, e: &Error) -> Self {
        Self {
            label: cfg.label.clone(),
            family: cfg.family().to_string(),
            status: format!("FAILED: {e}"),
            rouge_1: None,
            rouge_2: None,
            rouge_l: None,
            nn_1: None,
            nn_2: None,
            nn_3: None,
            nn_4: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    /// ROUGE-`order` against NN-`order`, for order 1 or 2.
    pub fn pareto_point(&self, order: usize) -> Result<ParetoPoint> {
        let (x, y) = match order {
            1 => (self.rouge_1, self.nn_1),
            2 => (self.rouge_2, self.nn_2),
            _ => return Err(Error::Config(format!("pareto order must be 1 or 2, got {order}"))),
        };
        match (x, y) {
            (Some(x), Some(y)) => ParetoPoint::new(self.label.clone(), self.family.clone(), x, y),
            _ => Err(Error::Data(format!("run {} has no scores", self.label))),
        }
    }
}

/// Corpus a trained run is evaluated on: test, else validation, else training.
pub fn evaluation_corpus(cfg: &RunConfig) -> Result<&Path> {
    cfg.test_corpus
        .as_deref()
        .or(cfg.valid_corpus.as_deref())
        .or(cfg.train_corpus.as_deref())
        .ok_or_else(|| Error::Config("no corpus to evaluate on".into()))
}

/// Train, decode and score one config, writing `summaries.jsonl`,
/// `report.json` and `documents.csv` next to the model.
pub fn train_and_score(cfg: &RunConfig) -> Result<MetricsReport> {
    let outcome = run_train(cfg)?;
    let eval = evaluation_corpus(cfg)?;
    let raw: Vec<RawPair> = read_jsonl(eval)?;
    let corpus = Corpus::from_raw(&raw, &load_entities(cfg)?, cfg.limits(), Some(outcome.vocab.clone()))?;
    let summaries = summarize_corpus(&outcome.model, &outcome.vocab, &corpus, cfg.beam_config())?;
    let dir = &cfg.output_dir;
    write_summaries(&dir.join("summaries.jsonl"), &summaries)?;
    score_summaries(&summaries, &raw, Some(&dir.join("report.json")), Some(&dir.join("documents.csv")))
}

/// Runs every config of the grid in order. A failing run yields a row with
/// a failure marker and no scores; the remaining runs still execute.
pub fn ablation_run(grid: &[RunConfig]) -> Result<Vec<AblationRow>> {
    let first = grid.first().ok_or(Error::EmptyInput("ablation grid"))?;
    let shared = shared_part(first);
    for cfg in &grid[1..] {
        if shared_part(cfg) != shared {
            return Err(Error::Config(format!(
                "run {} differs from {} outside the ablation axes",
                cfg.label, first.label
            )));
        }
    }
    let mut dirs = HashSet::new();
    for cfg in grid {
        if !dirs.insert(&cfg.output_dir) {
            return Err(Error::Config(format!("output_dir {} used twice", cfg.output_dir.display())));
        }
    }
    Ok(grid
        .iter()
        .map(|cfg| match train_and_score(cfg) {
            Ok(r) => AblationRow::ok(cfg, &r),
            Err(e) => AblationRow::failed(cfg, &e),
        })
        .collect())
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ablation_csv(path: &Path) -> Result<Vec<AblationRow>> {
    csv::Reader::from_path(path)
        .map_err(csv_err)?
        .deserialize()
        .collect::<std::result::Result<Vec<AblationRow>, _>>()
        .map_err(csv_err)
}
