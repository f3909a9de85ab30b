//! Maximum-likelihood training with scheduled sampling, self-critical
//! policy gradient with the combined reward, and their mixture.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentPair, END, START};
use crate::decoding::{greedy_choice, greedy_decode, sample_choice, Decoded, ModelPolicy};
use crate::error::{Error, Result};
use crate::metrics::{combined_reward, RewardWeights};
use crate::model::{Forward, Summarizer};
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    /// Weight of the policy-gradient term.
    pub gamma: f64,
    pub reward: RewardWeights,
    /// Per-step probability of feeding back the model's own greedy token.
    pub ss_prob: f64,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Leading epochs trained with the ML objective only.
    pub warm_start_epochs: usize,
    pub batch_size: usize,
    /// Rollout length cap.
    pub max_len: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            gamma: 0.9984,
            reward: RewardWeights::default(),
            ss_prob: 0.25,
            lr: 0.15,
            clip: 2.0,
            seed: 1,
            epochs: 10,
            warm_start_epochs: 5,
            batch_size: 1,
            max_len: 100,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.ss_prob) {
            return Err(Error::Config(format!("ss_prob {} outside [0, 1]", self.ss_prob)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config(format!("clip norm {} must be positive", self.clip)));
        }
        if self.batch_size == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size and max_len must be at least 1".into()));
        }
        self.reward.validate()
    }
}

/// Independent random streams, so that switching one objective term off
/// leaves the draws of the other untouched.
#[derive(Debug, Clone)]
pub struct RngStreams {
    pub shuffle: ChaCha8Rng,
    pub scheduled: ChaCha8Rng,
    pub rollout: ChaCha8Rng,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        let stream = |k| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        Self {
            shuffle: stream(0),
            scheduled: stream(1),
            rollout: stream(2),
        }
    }
}

/// `-Σ_t log p(z_t, y_t)` over the gold summary and its end token. With
/// probability `ss_prob` per step the next input is the model's own greedy
/// token instead of the gold one.
pub fn ml_loss(f: &Forward, pair: &DocumentPair, ss_prob: f64, rng: &mut impl Rng) -> Result<Var> {
    if pair.z_labels.len() != pair.summary.len() {
        return Err(Error::Data(format!(
            "document {}: {} labels for {} summary tokens",
            pair.id,
            pair.z_labels.len(),
            pair.summary.len()
        )));
    }
    let tape = f.tape;
    let enc = f.encode_source(&pair.source)?;
    let mut state = f.initial_state(&enc);
    let mut prev = START;
    let targets = pair.summary.iter().copied().zip(pair.z_labels.iter().copied());
    let mut terms = Vec::with_capacity(pair.summary.len() + 1);
    for (y, z) in targets.chain(std::iter::once((END, true))) {
        let (dist, next) = f.decode_step(&enc, &state, prev)?;
        terms.push(f.joint_log_prob(&dist, z, y).map_err(|e| e.with_doc(pair.id))?);
        prev = if ss_prob > 0.0 && rng.gen_bool(ss_prob) {
            greedy_choice(&dist.probs(tape))?.token
        } else {
            y
        };
        state = next;
    }
    Ok(tape.scale(tape.sum(tape.concat(&terms)?), -1.0))
}

/// A sampled trajectory (its log-probability kept on the tape) and the
/// greedy trajectory from the same initial state, with their rewards.
#[derive(Debug, Clone)]
pub struct RolloutPair {
    pub sample: Decoded,
    /// `Σ_t log p(z_t, y_t)` of the sample, differentiable.
    pub sample_log_prob: Var,
    pub greedy: Decoded,
    pub reward_sample: f64,
    pub reward_greedy: f64,
}

impl RolloutPair {
    /// `R(y_sample) - R(y_greedy)`.
    pub fn advantage(&self) -> f64 {
        self.reward_sample - self.reward_greedy
    }
}

pub fn self_critical_rollout(
    f: &Forward,
    pair: &DocumentPair,
    max_len: usize,
    weights: &RewardWeights,
    rng: &mut impl Rng,
) -> Result<RolloutPair> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let tape = f.tape;
    let enc = f.encode_source(&pair.source)?;
    let mut state = f.initial_state(&enc);
    let mut prev = START;
    let mut sample = Decoded {
        tokens: Vec::new(),
        switches: Vec::new(),
        step_log_probs: Vec::new(),
        finished: false,
    };
    let mut terms = Vec::new();
    for _ in 0..max_len {
        let (dist, next) = f.decode_step(&enc, &state, prev)?;
        let c = sample_choice(&dist.probs(tape), rng)?;
        let lp = f.joint_log_prob(&dist, c.z, c.token).map_err(|e| e.with_doc(pair.id))?;
        sample.step_log_probs.push(tape.scalar(lp));
        terms.push(lp);
        if c.token == END {
            sample.finished = true;
            break;
        }
        sample.tokens.push(c.token);
        sample.switches.push(c.z);
        state = next;
        prev = c.token;
    }
    let greedy = greedy_decode(&ModelPolicy::from_encoding(f, enc), max_len)?;
    let reward = |tokens: &[u32]| {
        combined_reward(tokens, &pair.source, &pair.summary, weights).map_err(|e| e.with_doc(pair.id))
    };
    Ok(RolloutPair {
        reward_sample: reward(&sample.tokens)?,
        reward_greedy: reward(&greedy.tokens)?,
        sample_log_prob: tape.sum(tape.concat(&terms)?),
        sample,
        greedy,
    })
}

/// `-R̂ · Σ_t log p(z_t, y_t)`; the advantage enters as a constant.
pub fn pg_loss(tape: &Tape, rollout: &RolloutPair) -> Var {
    tape.scale(rollout.sample_log_prob, -rollout.advantage())
}

/// Which loss an update minimizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Ml,
    Pg,
    /// `(1 - γ) L_ml + γ L_pg`, both terms always evaluated.
    Mixed(f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub documents: Vec<usize>,
    pub ml_loss: Option<f64>,
    pub pg_loss: Option<f64>,
    pub advantage: Option<f64>,
    pub reward_sample: Option<f64>,
    pub reward_greedy: Option<f64>,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

fn add_opt(acc: &mut Option<f64>, x: f64) {
    *acc = Some(acc.unwrap_or(0.0) + x);
}

/// One SGD update on a batch: per-document losses scaled by `1 / |batch|`,
/// global-norm clipping, then the step.
pub fn update(
    model: &mut Summarizer,
    batch: &[&DocumentPair],
    objective: Objective,
    cfg: &TrainingConfig,
    rngs: &mut RngStreams,
) -> Result<StepDiagnostics> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("training batch"));
    }
    if let Objective::Mixed(g) = objective {
        if !(0.0..=1.0).contains(&g) {
            return Err(Error::Config(format!("gamma {g} outside [0, 1]")));
        }
    }
    let (use_ml, use_pg) = match objective {
        Objective::Ml => (true, false),
        Objective::Pg => (false, true),
        Objective::Mixed(_) => (true, true),
    };
    let share = 1.0 / batch.len() as f64;
    let mut diag = StepDiagnostics::default();
    model.params.zero_grad();
    for pair in batch {
        let tape = Tape::new();
        let f = model.forward(&tape)?;
        let ml = if use_ml {
            Some(ml_loss(&f, pair, cfg.ss_prob, &mut rngs.scheduled)?)
        } else {
            None
        };
        let rollout = if use_pg {
            Some(self_critical_rollout(&f, pair, cfg.max_len, &cfg.reward, &mut rngs.rollout)?)
        } else {
            None
        };
        let pg = rollout.as_ref().map(|r| pg_loss(&tape, r));
        let loss = match (objective, ml, pg) {
            (Objective::Ml, Some(ml), _) => ml,
            (Objective::Pg, _, Some(pg)) => pg,
            (Objective::Mixed(g), Some(ml), Some(pg)) => {
                tape.add(tape.scale(ml, 1.0 - g), tape.scale(pg, g))?
            }
            _ => unreachable!("objective terms computed above"),
        };
        let value = tape.scalar(loss);
        let ml_value = ml.map(|v| tape.scalar(v));
        let pg_value = pg.map(|v| tape.scalar(v));
        if !value.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite loss on document {}: ml {:?}, pg {:?}, source {:?}, summary {:?}",
                pair.id, ml_value, pg_value, pair.source, pair.summary
            )));
        }
        let loss = if batch.len() == 1 { loss } else { tape.scale(loss, share) };
        let grads = tape.backward(loss)?;
        model.params.accumulate_grads(&f.bound, &grads);

        diag.documents.push(pair.id);
        diag.loss += value * share;
        if let Some(v) = ml_value {
            add_opt(&mut diag.ml_loss, v * share);
        }
        if let Some(v) = pg_value {
            add_opt(&mut diag.pg_loss, v * share);
        }
        if let Some(r) = &rollout {
            add_opt(&mut diag.advantage, r.advantage() * share);
            add_opt(&mut diag.reward_sample, r.reward_sample * share);
            add_opt(&mut diag.reward_greedy, r.reward_greedy * share);
        }
    }
    diag.grad_norm = model.params.clip_grad_norm(cfg.clip);
    model.params.sgd_step(cfg.lr);
    if !model.params.all_finite() {
        return Err(Error::NumericDomain(format!(
            "parameters became non-finite after documents {:?}",
            diag.documents
        )));
    }
    Ok(diag)
}

pub fn ml_step(model: &mut Summarizer, pair: &DocumentPair, cfg: &TrainingConfig, rngs: &mut RngStreams) -> Result<StepDiagnostics> {
    update(model, &[pair], Objective::Ml, cfg, rngs)
}

pub fn pg_step(model: &mut Summarizer, pair: &DocumentPair, cfg: &TrainingConfig, rngs: &mut RngStreams) -> Result<StepDiagnostics> {
    update(model, &[pair], Objective::Pg, cfg, rngs)
}

pub fn mixed_step(
    model: &mut Summarizer,
    pair: &DocumentPair,
    cfg: &TrainingConfig,
    rngs: &mut RngStreams,
) -> Result<StepDiagnostics> {
    update(model, &[pair], Objective::Mixed(cfg.gamma), cfg, rngs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub objective: String,
    pub updates: usize,
    pub mean_loss: f64,
    pub mean_ml_loss: Option<f64>,
    pub mean_pg_loss: Option<f64>,
    pub mean_reward_sample: Option<f64>,
    pub mean_reward_greedy: Option<f64>,
}

fn mean(xs: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Full curriculum: `warm_start_epochs` of ML, then the mixed objective.
/// `on_epoch` runs after every epoch (logging, checkpoints).
pub fn train(
    model: &mut Summarizer,
    pairs: &[DocumentPair],
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochMetrics, &Summarizer) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("training corpus"));
    }
    let mut rngs = RngStreams::new(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let objective = if epoch <= cfg.warm_start_epochs {
            Objective::Ml
        } else {
            Objective::Mixed(cfg.gamma)
        };
        order.shuffle(&mut rngs.shuffle);
        let mut steps = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&DocumentPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            steps.push(update(model, &batch, objective, cfg, &mut rngs)?);
        }
        let m = EpochMetrics {
            epoch,
            objective: match objective {
                Objective::Ml => "ml".into(),
                Objective::Pg => "pg".into(),
                Objective::Mixed(g) => format!("mixed({g})"),
            },
            updates: steps.len(),
            mean_loss: steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64,
            mean_ml_loss: mean(&steps.iter().map(|s| s.ml_loss).collect::<Vec<_>>()),
            mean_pg_loss: mean(&steps.iter().map(|s| s.pg_loss).collect::<Vec<_>>()),
            mean_reward_sample: mean(&steps.iter().map(|s| s.reward_sample).collect::<Vec<_>>()),
            mean_reward_greedy: mean(&steps.iter().map(|s| s.reward_greedy).collect::<Vec<_>>()),
        };
        on_epoch(&m, model)?;
        history.push(m);
    }
    Ok(history)
}

/// Greedy summaries for every pair, as ids.
pub fn greedy_summaries(model: &Summarizer, pairs: &[DocumentPair], max_len: usize) -> Result<Vec<Vec<u32>>> {
    pairs
        .iter()
        .map(|p| {
            let tape = Tape::new();
            let f = model.forward(&tape)?;
            Ok(greedy_decode(&ModelPolicy::new(&f, &p.source)?, max_len)?.tokens)
        })
        .collect()
}

#[cfg(test)]
mod tests;

/// Mean teacher-forced loss over `pairs`, without scheduled sampling.
pub fn corpus_ml_loss(model: &Summarizer, pairs: &[DocumentPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("evaluation corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for p in pairs {
        let tape = Tape::new();
        let f = model.forward(&tape)?;
        total += tape.scalar(ml_loss(&f, p, 0.0, &mut rng)?);
    }
    Ok(total / pairs.len() as f64)
}

/// Fraction of gold summary positions reproduced exactly.
pub fn token_accuracy(outputs: &[Vec<u32>], pairs: &[DocumentPair]) -> Result<f64> {
    if outputs.len() != pairs.len() {
        return Err(Error::Alignment {
            left: outputs.len(),
            right: pairs.len(),
        });
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (out, p) in outputs.iter().zip(pairs) {
        total += p.summary.len();
        hit += p.summary.iter().zip(out).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::EmptyInput("gold summaries"));
    }
    Ok(hit as f64 / total as f64)
}
