//! Greedy decoding, ancestral sampling and beam search over joint
//! `(z, y)` choices, with optional trigram blocking in the beam.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{END, START};
use crate::error::{Error, Result};
use crate::model::{EncoderOutput, Forward, StepProbs, PROB_FLOOR};

/// Anything that yields per-step switch/generator/pointer probabilities.
pub trait Policy {
    type State: Clone;
    fn start(&self) -> Result<Self::State>;
    fn step(&self, state: &Self::State, prev: u32) -> Result<(StepProbs, Self::State)>;
}

/// A summarizer bound to one encoded source document.
pub struct ModelPolicy<'f, 'm, 't> {
    forward: &'f Forward<'m, 't>,
    enc: EncoderOutput,
}

impl<'f, 'm, 't> ModelPolicy<'f, 'm, 't> {
    pub fn new(forward: &'f Forward<'m, 't>, source: &[u32]) -> Result<Self> {
        Ok(Self {
            enc: forward.encode_source(source)?,
            forward,
        })
    }

    /// Reuses an encoding already on the forward's tape.
    pub fn from_encoding(forward: &'f Forward<'m, 't>, enc: EncoderOutput) -> Self {
        Self { forward, enc }
    }
}

impl Policy for ModelPolicy<'_, '_, '_> {
    type State = crate::model::DecoderStepState;

    fn start(&self) -> Result<Self::State> {
        Ok(self.forward.initial_state(&self.enc))
    }

    fn step(&self, state: &Self::State, prev: u32) -> Result<(StepProbs, Self::State)> {
        let (dist, next) = self.forward.decode_step(&self.enc, state, prev)?;
        Ok((dist.probs(self.forward.tape), next))
    }
}

/// One joint choice with its probability `p(z, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Choice {
    pub z: bool,
    pub token: u32,
    pub prob: f64,
}

impl Choice {
    pub fn log_prob(&self) -> f64 {
        self.prob.max(PROB_FLOOR).ln()
    }
}

/// All joint choices: generator tokens in id order, then copy targets in
/// first-occurrence order.
pub fn choices(p: &StepProbs) -> Vec<Choice> {
    let gen = p.p_gen.iter().enumerate().map(|(y, &g)| Choice {
        z: true,
        token: y as u32,
        prob: p.p_z * g,
    });
    let copy = p.p_copy.iter().map(|&(y, c)| Choice {
        z: false,
        token: y,
        prob: (1.0 - p.p_z) * c,
    });
    gen.chain(copy).collect()
}

/// Joint argmax; the first maximal choice wins ties.
pub fn greedy_choice(p: &StepProbs) -> Result<Choice> {
    choices(p)
        .into_iter()
        .reduce(|best, c| if c.prob > best.prob { c } else { best })
        .ok_or(Error::EmptyInput("step distribution"))
}

/// `z ~ Bernoulli(p_z)`, then `y` from the chosen distribution.
pub fn sample_choice(p: &StepProbs, rng: &mut impl Rng) -> Result<Choice> {
    let z = rng.gen::<f64>() < p.p_z;
    let token = if z {
        let idx = WeightedIndex::new(&p.p_gen)
            .map_err(|e| Error::NumericDomain(format!("generator distribution: {e}")))?;
        idx.sample(rng) as u32
    } else {
        let idx = WeightedIndex::new(p.p_copy.iter().map(|(_, c)| *c))
            .map_err(|e| Error::NumericDomain(format!("copy distribution: {e}")))?;
        p.p_copy[idx.sample(rng)].0
    };
    Ok(joint_choice(p, z, token))
}

/// The choice `(z, token)` with its joint probability.
pub fn joint_choice(p: &StepProbs, z: bool, token: u32) -> Choice {
    let prob = if z {
        p.p_z * p.p_gen.get(token as usize).copied().unwrap_or(0.0)
    } else {
        let c = p.p_copy.iter().find(|(t, _)| *t == token).map_or(0.0, |(_, c)| *c);
        (1.0 - p.p_z) * c
    };
    Choice { z, token, prob }
}

/// A decoded summary. `tokens` excludes the end token; `step_log_probs`
/// includes the step that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<u32>,
    pub switches: Vec<bool>,
    pub step_log_probs: Vec<f64>,
    pub finished: bool,
}

impl Decoded {
    pub fn log_prob(&self) -> f64 {
        self.step_log_probs.iter().sum()
    }
}

fn run<P: Policy>(
    policy: &P,
    max_len: usize,
    mut pick: impl FnMut(&StepProbs) -> Result<Choice>,
) -> Result<Decoded> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut state = policy.start()?;
    let mut prev = START;
    let mut out = Decoded {
        tokens: Vec::new(),
        switches: Vec::new(),
        step_log_probs: Vec::new(),
        finished: false,
    };
    for _ in 0..max_len {
        let (probs, next) = policy.step(&state, prev)?;
        let c = pick(&probs)?;
        out.step_log_probs.push(c.log_prob());
        if c.token == END {
            out.finished = true;
            break;
        }
        out.tokens.push(c.token);
        out.switches.push(c.z);
        state = next;
        prev = c.token;
    }
    Ok(out)
}

pub fn greedy_decode<P: Policy>(policy: &P, max_len: usize) -> Result<Decoded> {
    run(policy, max_len, greedy_choice)
}

pub fn sample_decode<P: Policy>(policy: &P, max_len: usize, seed: u64) -> Result<Decoded> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run(policy, max_len, |p| sample_choice(p, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
    pub max_len: usize,
    pub block_trigrams: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            width: 4,
            max_len: 100,
            block_trigrams: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis<S> {
    pub tokens: Vec<u32>,
    pub switches: Vec<bool>,
    pub log_prob: f64,
    /// Steps taken, counting the end token.
    pub steps: usize,
    pub trigrams: HashSet<[u32; 3]>,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Length-normalized score used to rank finished hypotheses.
    pub fn score(&self) -> f64 {
        self.log_prob / self.steps.max(1) as f64
    }

    fn last(&self) -> u32 {
        self.tokens.last().copied().unwrap_or(START)
    }

    fn trigram_with(&self, token: u32) -> Option<[u32; 3]> {
        match self.tokens.as_slice() {
            [.., a, b] => Some([*a, *b, token]),
            _ => None,
        }
    }

    fn repeats_trigram(&self, token: u32) -> bool {
        token != END && self.trigram_with(token).is_some_and(|t| self.trigrams.contains(&t))
    }

    fn repeats_bigram(&self, token: u32) -> bool {
        let Some(&b) = self.tokens.last() else { return false };
        token != END && self.tokens.windows(2).any(|w| w == [b, token])
    }
}

#[derive(Debug, Clone)]
pub struct BeamOutput<S> {
    /// Best first by [`Hypothesis::score`]; at most `width` entries.
    pub hypotheses: Vec<Hypothesis<S>>,
    /// Steps where every expansion was blocked and the fallback applied.
    pub diagnostics: Vec<String>,
}

#[derive(Clone, Copy)]
struct Expansion {
    parent: usize,
    choice: Choice,
    log_prob: f64,
}

pub fn beam_search<P: Policy>(policy: &P, cfg: BeamConfig) -> Result<BeamOutput<P::State>> {
    if cfg.width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if cfg.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        switches: Vec::new(),
        log_prob: 0.0,
        steps: 0,
        trigrams: HashSet::new(),
        state: policy.start()?,
        finished: false,
    }];
    let mut done: Vec<Hypothesis<P::State>> = Vec::new();
    let mut diagnostics = Vec::new();

    for step in 0..cfg.max_len {
        let mut next_states = Vec::with_capacity(live.len());
        let mut expansions = Vec::new();
        let mut blocked = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let (probs, next) = policy.step(&h.state, h.last())?;
            next_states.push(next);
            for c in choices(&probs) {
                let e = Expansion {
                    parent: i,
                    choice: c,
                    log_prob: h.log_prob + c.log_prob(),
                };
                if cfg.block_trigrams && h.repeats_trigram(c.token) {
                    blocked.push(e);
                } else {
                    expansions.push(e);
                }
            }
        }
        if expansions.is_empty() {
            let fresh: Vec<Expansion> = blocked
                .iter()
                .filter(|e| !live[e.parent].repeats_bigram(e.choice.token))
                .copied()
                .collect();
            let pool = if fresh.is_empty() { blocked } else { fresh };
            let best = pool
                .into_iter()
                .reduce(|a, b| if b.log_prob > a.log_prob { b } else { a })
                .ok_or(Error::EmptyInput("step distribution"))?;
            diagnostics.push(format!(
                "step {}: all expansions repeat a trigram; kept token {}",
                step + 1,
                best.choice.token
            ));
            expansions.push(best);
        }
        // stable: earlier expansions win ties
        expansions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        expansions.truncate(cfg.width);

        let mut new_live = Vec::with_capacity(cfg.width);
        for e in expansions {
            let parent = &live[e.parent];
            let mut h = Hypothesis {
                tokens: parent.tokens.clone(),
                switches: parent.switches.clone(),
                log_prob: e.log_prob,
                steps: parent.steps + 1,
                trigrams: parent.trigrams.clone(),
                state: next_states[e.parent].clone(),
                finished: e.choice.token == END,
            };
            if h.finished {
                done.push(h);
                continue;
            }
            if let Some(t) = h.trigram_with(e.choice.token) {
                h.trigrams.insert(t);
            }
            h.tokens.push(e.choice.token);
            h.switches.push(e.choice.z);
            new_live.push(h);
        }
        live = new_live;
        if live.is_empty() || done.len() >= cfg.width {
            break;
        }
    }
    done.extend(live);
    done.sort_by(|a, b| b.score().total_cmp(&a.score()));
    done.truncate(cfg.width);
    Ok(BeamOutput {
        hypotheses: done,
        diagnostics,
    })
}
