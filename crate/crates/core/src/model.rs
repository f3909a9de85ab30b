//! Pointer-generator encoder-decoder: BiLSTM encoder, temporal attention
//! that penalizes previously attended source positions, decoder
//! intra-attention, the generate/point switch and the joint likelihood of
//! `(z, y)` per step. The generator head is either a plain softmax over the
//! reference vector or the LM-fused head from [`crate::lm`].

use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::UNK;
use crate::error::{Error, Result};
use crate::lm::{fuse, LM_PREFIX, generator_distribution, DropMode, FusionGate, LanguageModel, LmPass, LmState};
use crate::tensor::{
    lstm_cell, read_checkpoint, write_checkpoint, Bound, LstmParams, ParamId, ParamStore, Tape, Tensor, Var,
};

/// Probability floor applied before every log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_vocab: usize,
    pub output_vocab: usize,
    pub d_emb: usize,
    /// Decoder hidden size; equals twice the encoder direction size.
    pub d_hid: usize,
    pub encoder_size: usize,
    /// Size of the fused hidden state when an LM is attached.
    pub d_fuse: usize,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_vocab == 0 || self.output_vocab == 0 || self.d_emb == 0 || self.d_hid == 0 {
            return Err(Error::Config("model sizes must be positive".into()));
        }
        if self.output_vocab > self.input_vocab {
            return Err(Error::Config("output vocabulary larger than input vocabulary".into()));
        }
        if 2 * self.encoder_size != self.d_hid {
            return Err(Error::Config(format!(
                "d_hid {} must be twice encoder_size {}",
                self.d_hid, self.encoder_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ids {
    embedding: ParamId,
    enc_fwd: LstmParams,
    enc_bwd: LstmParams,
    dec: LstmParams,
    w_tmp: ParamId,
    w_intra: ParamId,
    w_z: ParamId,
    b_z: ParamId,
    w_gen: ParamId,
    b_gen: ParamId,
    fusion: Option<FusionGate>,
}

/// Trainable summarizer parameters plus an optional frozen language model.
#[derive(Debug, Clone)]
pub struct Summarizer {
    pub config: ModelConfig,
    pub params: ParamStore,
    ids: Ids,
    lm: Option<LanguageModel>,
}

impl Summarizer {
    pub fn new(config: ModelConfig, lm: Option<LanguageModel>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        if let Some(lm) = &lm {
            if lm.config.vocab != config.output_vocab {
                return Err(Error::Config(format!(
                    "LM vocabulary {} differs from output vocabulary {}",
                    lm.config.vocab, config.output_vocab
                )));
            }
        }
        let s = config.init_scale;
        let (d, e) = (config.d_hid, config.encoder_size);
        let mut p = ParamStore::new();
        let embedding = p.add("embedding", Tensor::uniform(&[config.input_vocab, config.d_emb], s, rng))?;
        let enc_fwd = LstmParams::register(&mut p, "encoder.fwd", config.d_emb, e, s, rng)?;
        let enc_bwd = LstmParams::register(&mut p, "encoder.bwd", config.d_emb, e, s, rng)?;
        let dec = LstmParams::register(&mut p, "decoder", config.d_emb, d, s, rng)?;
        let w_tmp = p.add("attn.w_tmp", Tensor::uniform(&[d, d], s, rng))?;
        let w_intra = p.add("attn.w_intra", Tensor::uniform(&[d, d], s, rng))?;
        let w_z = p.add("switch.w", Tensor::uniform(&[3 * d], s, rng))?;
        let b_z = p.add("switch.b", Tensor::zeros(&[]))?;
        let (fusion, gen_in) = match &lm {
            Some(lm) => (
                Some(FusionGate::register(&mut p, 3 * d, lm.config.d_emb, config.d_fuse, s, rng)?),
                config.d_fuse,
            ),
            None => (None, 3 * d),
        };
        let w_gen = p.add("gen.w", Tensor::uniform(&[config.output_vocab, gen_in], s, rng))?;
        let b_gen = p.add("gen.b", Tensor::zeros(&[config.output_vocab]))?;
        Ok(Self {
            config,
            params: p,
            ids: Ids {
                embedding,
                enc_fwd,
                enc_bwd,
                dec,
                w_tmp,
                w_intra,
                w_z,
                b_z,
                w_gen,
                b_gen,
                fusion,
            },
            lm,
        })
    }

    pub fn lm(&self) -> Option<&LanguageModel> {
        self.lm.as_ref()
    }

    pub fn is_fused(&self) -> bool {
        self.lm.is_some()
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Summarizer tensors unprefixed, LM tensors under `lm.`.
    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut stores = vec![("", &self.params)];
        if let Some(lm) = &self.lm {
            stores.push((LM_PREFIX, &lm.params));
        }
        write_checkpoint(w, &stores)
    }

    pub fn load<R: Read>(&mut self, r: R) -> Result<()> {
        let entries = read_checkpoint(r)?;
        self.params.load_prefixed(&entries, "")?;
        if let Some(lm) = &mut self.lm {
            lm.params.load_prefixed(&entries, LM_PREFIX)?;
        }
        Ok(())
    }

    /// Binds the trainable parameters (and the frozen LM) on `tape`.
    pub fn forward<'t>(&self, tape: &'t Tape) -> Result<Forward<'_, 't>> {
        let bound = self.params.bind(tape)?;
        self.forward_with(tape, bound)
    }

    /// Uses an existing binding, e.g. one created by a gradient checker.
    pub fn forward_with<'t>(&self, tape: &'t Tape, bound: Bound) -> Result<Forward<'_, 't>> {
        let lm = match &self.lm {
            Some(lm) => Some(lm.pass(tape, false, DropMode::Eval)?),
            None => None,
        };
        Ok(Forward {
            model: self,
            tape,
            bound,
            lm,
        })
    }
}

/// Encoder states, one row per source position.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `n × d_hid` matrix; row `i` is `[forward_i; backward_i]`.
    pub h_enc: Var,
    pub len: usize,
    /// Source token ids (extended ids allowed), used by the pointer.
    pub source: Rc<[u32]>,
    init_h: Var,
    init_c: Var,
}

/// Decoder recurrence carried between steps. Before step `t` (1-based) it
/// holds the state after step `t - 1`.
#[derive(Debug, Clone)]
pub struct DecoderStepState {
    pub h_dec: Var,
    pub c_dec: Var,
    /// `h_dec_1 .. h_dec_{t-1}`.
    pub past: Vec<Var>,
    /// Per-position running sums of `exp(s_tmp)` over past steps.
    pub acc_exp_scores: Option<Var>,
    /// Index of the step about to run.
    pub t: usize,
    pub lm: Option<LmState>,
}

/// Output of one temporal-attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct TemporalAttention {
    pub scores: Var,
    /// Penalized unnormalized weights `q`.
    pub q: Var,
    pub alpha: Var,
    pub context: Var,
    pub acc_exp_scores: Var,
}

/// Everything the decoder produces at one step.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    /// Probability of generating from the vocabulary (`z = 1`).
    pub p_z: Var,
    pub p_gen: Var,
    pub alpha: Var,
    pub c_tmp: Var,
    pub c_int: Var,
    pub reference: Var,
    /// LM fusion gate, when fused.
    pub gate: Option<Var>,
    pub source: Rc<[u32]>,
}

/// Plain values of one step's distributions, for decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct StepProbs {
    pub p_z: f64,
    pub p_gen: Vec<f64>,
    /// Copy probability per distinct source token, in first-occurrence order.
    pub p_copy: Vec<(u32, f64)>,
}

/// `p_cop(token)`: attention mass summed over every position holding the token.
pub fn copy_distribution(source: &[u32], alpha: &[f64]) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> = Vec::new();
    for (&tok, &a) in source.iter().zip(alpha) {
        match out.iter_mut().find(|(t, _)| *t == tok) {
            Some((_, p)) => *p += a,
            None => out.push((tok, a)),
        }
    }
    out
}

impl StepDistribution {
    pub fn probs(&self, tape: &Tape) -> StepProbs {
        StepProbs {
            p_z: tape.scalar(self.p_z),
            p_gen: tape.value(self.p_gen),
            p_copy: copy_distribution(&self.source, &tape.value(self.alpha)),
        }
    }
}

/// Generator index of a target token; tokens outside the output vocabulary
/// are generated as `UNK`.
pub fn generator_index(y: u32, output_vocab: usize) -> usize {
    if (y as usize) < output_vocab {
        y as usize
    } else {
        UNK as usize
    }
}

/// A model bound to a tape.
pub struct Forward<'m, 't> {
    pub model: &'m Summarizer,
    pub tape: &'t Tape,
    pub bound: Bound,
    lm: Option<LmPass>,
}

impl Forward<'_, '_> {
    fn id_of(&self, token: u32) -> usize {
        if (token as usize) < self.model.config.input_vocab {
            token as usize
        } else {
            UNK as usize
        }
    }

    pub fn embed(&self, token: u32) -> Result<Var> {
        self.tape.row(self.bound[self.model.ids.embedding], self.id_of(token))
    }

    /// BiLSTM over embedding rows. Row `i` of the output concatenates the
    /// forward state after token `i` and the backward state after token `i`.
    pub fn encode(&self, embeddings: &[Var], source: &[u32]) -> Result<EncoderOutput> {
        let n = embeddings.len();
        if n == 0 {
            return Err(Error::EmptyInput("source document"));
        }
        let t = self.tape;
        let e = self.model.config.encoder_size;
        let fw = self.model.ids.enc_fwd.weights(&self.bound);
        let bw = self.model.ids.enc_bwd.weights(&self.bound);

        let mut fwd = Vec::with_capacity(n);
        let (mut h, mut c) = (t.zeros(e), t.zeros(e));
        for &x in embeddings {
            (h, c) = lstm_cell(t, x, h, c, &fw)?;
            fwd.push(h);
        }
        let (fh, fc) = (h, c);

        let mut bwd = vec![h; n];
        let (mut h, mut c) = (t.zeros(e), t.zeros(e));
        for i in (0..n).rev() {
            (h, c) = lstm_cell(t, embeddings[i], h, c, &bw)?;
            bwd[i] = h;
        }
        let (bh, bc) = (h, c);

        let rows = fwd
            .iter()
            .zip(&bwd)
            .map(|(f, b)| t.concat(&[*f, *b]))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutput {
            h_enc: t.stack(&rows)?,
            len: n,
            source: source.into(),
            init_h: t.concat(&[fh, bh])?,
            init_c: t.concat(&[fc, bc])?,
        })
    }

    pub fn encode_source(&self, source: &[u32]) -> Result<EncoderOutput> {
        let emb = source
            .iter()
            .map(|&tok| self.embed(tok))
            .collect::<Result<Vec<_>>>()?;
        self.encode(&emb, source)
    }

    /// Decoder state before step 1, seeded from the final encoder states.
    pub fn initial_state(&self, enc: &EncoderOutput) -> DecoderStepState {
        DecoderStepState {
            h_dec: enc.init_h,
            c_dec: enc.init_c,
            past: Vec::new(),
            acc_exp_scores: None,
            t: 1,
            lm: self.lm.as_ref().map(|lm| lm.initial_state(self.tape)),
        }
    }

    /// `s_i = h_decᵀ W_tmp h_enc_i`; `q_i = exp(s_i) / acc_i` (plain `exp(s_i)`
    /// at the first step); `alpha = q / Σ q`; context `Σ alpha_i h_enc_i`.
    pub fn temporal_attention(
        &self,
        h_dec: Var,
        enc: &EncoderOutput,
        acc: Option<Var>,
        t: usize,
    ) -> Result<TemporalAttention> {
        let tape = self.tape;
        match (acc, t) {
            (None, 1) => {}
            (Some(a), t) if t > 1 => {
                let len = tape.value(a).len();
                if len != enc.len {
                    return Err(Error::StateCorruption(format!(
                        "{len} accumulated scores for {} source positions",
                        enc.len
                    )));
                }
            }
            (acc, t) => {
                return Err(Error::StateCorruption(format!(
                    "step {t} with accumulator present = {}",
                    acc.is_some()
                )))
            }
        }
        let proj = tape.vecmat(h_dec, self.bound[self.model.ids.w_tmp])?;
        let scores = tape.matvec(enc.h_enc, proj)?;
        let exp_scores = tape.exp(scores);
        // log q keeps the normalization in softmax form
        let log_q = match acc {
            Some(a) => tape.sub(scores, tape.ln_floor(a, f64::MIN_POSITIVE))?,
            None => scores,
        };
        let q = tape.exp(log_q);
        let alpha = tape.softmax(log_q)?;
        let context = tape.vecmat(alpha, enc.h_enc)?;
        let acc_exp_scores = match acc {
            Some(a) => tape.add(a, exp_scores)?,
            None => exp_scores,
        };
        Ok(TemporalAttention {
            scores,
            q,
            alpha,
            context,
            acc_exp_scores,
        })
    }

    /// Softmax-normalized attention over past decoder states; the zero
    /// vector when there is no history.
    pub fn intra_attention(&self, h_dec: Var, past: &[Var]) -> Result<Var> {
        let tape = self.tape;
        if past.is_empty() {
            return Ok(tape.zeros(self.model.config.d_hid));
        }
        let history = tape.stack(past)?;
        let proj = tape.vecmat(h_dec, self.bound[self.model.ids.w_intra])?;
        let weights = tape.softmax(tape.matvec(history, proj)?)?;
        tape.vecmat(weights, history)
    }

    /// Switch, generator and pointer distributions from the reference vector
    /// `r = [h_dec; c_tmp; c_int]`. `h_lm` selects the fused generator head.
    pub fn step_distribution(
        &self,
        h_dec: Var,
        attn: &TemporalAttention,
        c_int: Var,
        h_lm: Option<Var>,
        source: Rc<[u32]>,
    ) -> Result<StepDistribution> {
        let tape = self.tape;
        let ids = &self.model.ids;
        let r = tape.concat(&[h_dec, attn.context, c_int])?;
        let d = self.model.config.d_hid;
        if tape.shape(r) != [3 * d] {
            return Err(Error::dim("step_distribution", &tape.shape(r), &[3 * d]));
        }
        let p_z = tape.sigmoid(tape.add(tape.dot(self.bound[ids.w_z], r)?, self.bound[ids.b_z])?);
        let (gen_in, gate) = match (ids.fusion, h_lm) {
            (Some(g), Some(h_lm)) => {
                let fused = fuse(tape, &self.bound, &g, r, h_lm)?;
                (fused.h_fuse, Some(fused.gate))
            }
            (None, None) => (r, None),
            _ => return Err(Error::Config("fusion head and LM state must come together".into())),
        };
        let p_gen = generator_distribution(tape, self.bound[ids.w_gen], self.bound[ids.b_gen], gen_in)?;
        Ok(StepDistribution {
            p_z,
            p_gen,
            alpha: attn.alpha,
            c_tmp: attn.context,
            c_int,
            reference: r,
            gate,
            source,
        })
    }

    /// Runs decoder step `state.t` fed with the previous output token.
    pub fn decode_step(
        &self,
        enc: &EncoderOutput,
        state: &DecoderStepState,
        prev_token: u32,
    ) -> Result<(StepDistribution, DecoderStepState)> {
        if state.past.len() + 1 != state.t {
            return Err(Error::StateCorruption(format!(
                "step {} with {} past decoder states",
                state.t,
                state.past.len()
            )));
        }
        let tape = self.tape;
        let x = self.embed(prev_token)?;
        let dec = self.model.ids.dec.weights(&self.bound);
        let (h, c) = lstm_cell(tape, x, state.h_dec, state.c_dec, &dec)?;
        let attn = self.temporal_attention(h, enc, state.acc_exp_scores, state.t)?;
        let c_int = self.intra_attention(h, &state.past)?;

        let (h_lm, lm_state) = match (&self.lm, &state.lm) {
            (Some(lm), Some(ls)) => {
                let e = lm.embed(tape, prev_token)?;
                let (h_lm, next) = lm.step(tape, e, ls)?;
                (Some(h_lm), Some(next))
            }
            (None, None) => (None, None),
            _ => return Err(Error::StateCorruption("LM state does not match the model".into())),
        };

        let dist = self.step_distribution(h, &attn, c_int, h_lm, enc.source.clone())?;
        let mut past = state.past.clone();
        past.push(h);
        Ok((
            dist,
            DecoderStepState {
                h_dec: h,
                c_dec: c,
                past,
                acc_exp_scores: Some(attn.acc_exp_scores),
                t: state.t + 1,
                lm: lm_state,
            },
        ))
    }

    /// `z (log p_gen(y) + log p_z) + (1 - z)(log p_cop(y) + log(1 - p_z))`.
    pub fn joint_log_prob(&self, dist: &StepDistribution, z: bool, y: u32) -> Result<Var> {
        let tape = self.tape;
        if z {
            let idx = generator_index(y, self.model.config.output_vocab);
            let p = tape.index(dist.p_gen, idx)?;
            Ok(tape.add(tape.ln_floor(p, PROB_FLOOR), tape.ln_floor(dist.p_z, PROB_FLOOR))?)
        } else {
            let positions: Vec<usize> = dist
                .source
                .iter()
                .enumerate()
                .filter(|(_, &s)| s == y)
                .map(|(i, _)| i)
                .collect();
            if positions.is_empty() {
                return Err(Error::SupervisionInconsistency { token: y, doc: None });
            }
            let p = tape.index_sum(dist.alpha, &positions)?;
            let not_z = tape.affine(dist.p_z, -1.0, 1.0);
            Ok(tape.add(tape.ln_floor(p, PROB_FLOOR), tape.ln_floor(not_z, PROB_FLOOR))?)
        }
    }
}

#[cfg(test)]
mod tests;
