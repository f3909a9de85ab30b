//! WebAssembly bindings for the browser demo in `www/`.

use std::collections::HashMap;

use abslab_core::analysis::pareto::{parse_points_csv, render_svg};
use abslab_core::analysis::{frontiers_by_family, pareto_frontier};
use abslab_core::corpus::{tokenize, END, START};
use abslab_core::decoding::{beam_search, BeamConfig, Policy};
use abslab_core::metrics::{ngrams, novelty_reward, score_document};
use abslab_core::model::StepProbs;
use abslab_core::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

const FIRST_WORD: u32 = 4;
const END_PROB: f64 = 0.001;
/// Total probability spread evenly over all words.
const SMOOTHING: f64 = 0.05;

#[derive(Serialize)]
struct SummaryScores {
    rouge_1: f64,
    rouge_2: f64,
    rouge_l: f64,
    novel_ngrams: [f64; 4],
    novelty_reward_3: f64,
}

/// ROUGE and novelty scores of `summary` as a JSON object.
pub fn score_summary_json(source: &str, reference: &str, summary: &str) -> Result<String> {
    let (src, refr, out) = (tokenize(source), tokenize(reference), tokenize(summary));
    let d = score_document(&out, &src, &refr);
    let reward = if refr.is_empty() { 0.0 } else { novelty_reward(&out, &src, &refr, 3)? };
    Ok(serde_json::to_string(&SummaryScores {
        rouge_1: d.rouge_1,
        rouge_2: d.rouge_2,
        rouge_l: d.rouge_l,
        novel_ngrams: d.novel_ngrams,
        novelty_reward_3: reward,
    })?)
}

/// SVG scatter with per-family frontiers for `label,family,x,y` CSV text.
pub fn pareto_svg_string(csv: &str) -> Result<String> {
    let points = parse_points_csv(csv)?;
    let fronts = if points.is_empty() {
        Default::default()
    } else {
        frontiers_by_family(&points)?
    };
    Ok(render_svg(&points, &fronts, "ROUGE", "novel n-grams (%)"))
}

/// Labels of the points on the overall (all-family) frontier, by increasing x.
pub fn frontier_labels(csv: &str) -> Result<Vec<String>> {
    Ok(pareto_frontier(&parse_points_csv(csv)?)?
        .into_iter()
        .map(|p| p.label)
        .collect())
}

/// Bigram model of a phrase read cyclically, so that its most likely
/// continuation repeats the phrase forever.
pub struct CyclicPhrase {
    words: Vec<String>,
    successors: HashMap<u32, Vec<u32>>,
    first: u32,
}

impl CyclicPhrase {
    pub fn new(phrase: &str) -> Result<Self> {
        let toks = tokenize(phrase);
        if toks.is_empty() {
            return Err(Error::EmptyInput("phrase"));
        }
        let mut words: Vec<String> = Vec::new();
        let ids: Vec<u32> = toks
            .iter()
            .map(|t| {
                let pos = words.iter().position(|w| w == t).unwrap_or_else(|| {
                    words.push(t.clone());
                    words.len() - 1
                });
                FIRST_WORD + pos as u32
            })
            .collect();
        let mut successors: HashMap<u32, Vec<u32>> = HashMap::new();
        for (i, &id) in ids.iter().enumerate() {
            successors.entry(id).or_default().push(ids[(i + 1) % ids.len()]);
        }
        Ok(Self {
            words,
            successors,
            first: ids[0],
        })
    }

    pub fn word(&self, id: u32) -> &str {
        id.checked_sub(FIRST_WORD)
            .and_then(|i| self.words.get(i as usize))
            .map_or("?", String::as_str)
    }
}

impl Policy for CyclicPhrase {
    type State = ();

    fn start(&self) -> Result<()> {
        Ok(())
    }

    fn step(&self, _: &(), prev: u32) -> Result<(StepProbs, ())> {
        let vocab = FIRST_WORD as usize + self.words.len();
        let mut p = vec![0.0; vocab];
        let rest = 1.0 - END_PROB - SMOOTHING;
        let eps = SMOOTHING / self.words.len() as f64;
        let next: Vec<u32> = if prev == START {
            vec![self.first]
        } else {
            self.successors.get(&prev).cloned().unwrap_or_default()
        };
        p[FIRST_WORD as usize..].fill(eps);
        for &n in &next {
            p[n as usize] += rest / next.len() as f64;
        }
        p[END as usize] = END_PROB;
        if next.is_empty() {
            p[END as usize] += rest;
        }
        Ok((
            StepProbs {
                p_z: 1.0,
                p_gen: p,
                p_copy: Vec::new(),
            },
            (),
        ))
    }
}

#[derive(Serialize)]
struct BeamHypothesis {
    text: String,
    score: f64,
    finished: bool,
    trigrams: usize,
    unique_trigrams: usize,
}

#[derive(Serialize)]
struct BeamReport {
    hypotheses: Vec<BeamHypothesis>,
    diagnostics: Vec<String>,
}

/// Beam search over [`CyclicPhrase`], as JSON.
pub fn beam_demo_json(phrase: &str, width: usize, max_len: usize, block_trigrams: bool) -> Result<String> {
    let policy = CyclicPhrase::new(phrase)?;
    let out = beam_search(
        &policy,
        BeamConfig {
            width,
            max_len,
            block_trigrams,
        },
    )?;
    let hypotheses = out
        .hypotheses
        .iter()
        .map(|h| BeamHypothesis {
            text: h.tokens.iter().map(|&t| policy.word(t)).collect::<Vec<_>>().join(" "),
            score: h.score(),
            finished: h.finished,
            trigrams: h.tokens.len().saturating_sub(2),
            unique_trigrams: ngrams(&h.tokens, 3).len(),
        })
        .collect();
    Ok(serde_json::to_string(&BeamReport {
        hypotheses,
        diagnostics: out.diagnostics,
    })?)
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn score_summary(source: &str, reference: &str, summary: &str) -> Result<String, JsError> {
    score_summary_json(source, reference, summary).map_err(js)
}

#[wasm_bindgen]
pub fn pareto_svg(csv: &str) -> Result<String, JsError> {
    pareto_svg_string(csv).map_err(js)
}

#[wasm_bindgen]
pub fn beam_demo(phrase: &str, width: usize, max_len: usize, block_trigrams: bool) -> Result<String, JsError> {
    beam_demo_json(phrase, width, max_len, block_trigrams).map_err(js)
}
