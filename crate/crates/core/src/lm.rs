//! Three-layer LSTM language model with tied input/output embeddings and
//! weight-dropped recurrent matrices, and the gate that fuses its hidden
//! state into the summarizer's generator head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{END, START, UNK};
use crate::error::{Error, Result};
use crate::tensor::{lstm_cell, Bound, LstmParams, LstmWeights, ParamId, ParamStore, Tape, Tensor, Var};

/// Name prefix of LM tensors inside checkpoints.
pub const LM_PREFIX: &str = "lm.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    /// Size of the (output) vocabulary the LM reads and predicts.
    pub vocab: usize,
    pub d_emb: usize,
    /// Hidden sizes of the three layers; the last must equal `d_emb` for tying.
    pub hidden: [usize; 3],
    /// DropConnect probability on hidden-to-hidden weights in training mode.
    pub weight_drop: f64,
    pub init_scale: f64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_emb == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("language model sizes must be positive".into()));
        }
        if self.hidden[2] != self.d_emb {
            return Err(Error::Config(format!(
                "tied decoding needs last LM layer size {} == embedding size {}",
                self.hidden[2], self.d_emb
            )));
        }
        if !(0.0..1.0).contains(&self.weight_drop) {
            return Err(Error::Config(format!("weight drop {} outside [0, 1)", self.weight_drop)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamStore,
    /// Shared by the input lookup and the decoding layer.
    pub embedding: ParamId,
    pub layers: [LstmParams; 3],
    pub out_bias: ParamId,
}

/// Per-layer `(h, c)` of the stacked LSTM.
#[derive(Debug, Clone)]
pub struct LmState {
    pub h: [Var; 3],
    pub c: [Var; 3],
}

/// How recurrent weights are treated on one forward pass.
#[derive(Debug, Clone)]
pub enum DropMode {
    Eval,
    /// Fresh Bernoulli masks drawn for this pass.
    Train(u64),
    /// Explicit masks, one per layer, same shape as that layer's `w_hh`.
    Fixed(Vec<Vec<f64>>),
}

/// Tape handles for one LM forward pass.
#[derive(Debug, Clone)]
pub struct LmPass {
    embedding: Var,
    out_bias: Var,
    cells: [LstmWeights; 3],
    hidden: [usize; 3],
    vocab: usize,
}

impl LanguageModel {
    pub fn new(config: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let s = config.init_scale;
        let embedding = params.add("embedding", Tensor::uniform(&[config.vocab, config.d_emb], s, rng))?;
        let mut input = config.d_emb;
        let mut layers = Vec::with_capacity(3);
        for (l, &h) in config.hidden.iter().enumerate() {
            layers.push(LstmParams::register(&mut params, &format!("layer{l}"), input, h, s, rng)?);
            input = h;
        }
        let out_bias = params.add("out_bias", Tensor::zeros(&[config.vocab]))?;
        Ok(Self {
            layers: layers.try_into().expect("three layers"),
            config,
            params,
            embedding,
            out_bias,
        })
    }

    /// Puts the LM on a tape. `trainable = false` binds every tensor as a
    /// constant so no gradient can reach the LM.
    pub fn pass(&self, tape: &Tape, trainable: bool, mode: DropMode) -> Result<LmPass> {
        let bound = if trainable {
            self.params.bind(tape)?
        } else {
            self.params.bind_frozen(tape)?
        };
        self.pass_with(tape, &bound, mode)
    }

    pub fn pass_with(&self, tape: &Tape, bound: &Bound, mode: DropMode) -> Result<LmPass> {
        let p = self.config.weight_drop;
        let mut rng = match &mode {
            DropMode::Train(seed) => Some(ChaCha8Rng::seed_from_u64(*seed)),
            _ => None,
        };
        let mut cells = Vec::with_capacity(3);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut w = layer.weights(bound);
            let n = self.params.get(layer.w_hh).len();
            let mask = match &mode {
                DropMode::Eval => None,
                DropMode::Train(_) if p == 0.0 => None,
                DropMode::Train(_) => {
                    let rng = rng.as_mut().expect("train rng");
                    let keep = 1.0 / (1.0 - p);
                    Some((0..n).map(|_| if rng.gen_bool(p) { 0.0 } else { keep }).collect())
                }
                DropMode::Fixed(masks) => Some(
                    masks
                        .get(l)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("missing weight-drop mask for layer {l}")))?,
                ),
            };
            if let Some(mask) = mask {
                w.w_hh = tape.mul_const(w.w_hh, mask)?;
            }
            cells.push(w);
        }
        Ok(LmPass {
            embedding: bound[self.embedding],
            out_bias: bound[self.out_bias],
            cells: cells.try_into().expect("three layers"),
            hidden: self.config.hidden,
            vocab: self.config.vocab,
        })
    }

    /// Mean next-token negative log-likelihood of `sequences` (each scored
    /// from `<s>` through `</s>`), evaluation mode.
    pub fn mean_nll(&self, sequences: &[Vec<u32>]) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in sequences {
            let tape = Tape::new();
            let pass = self.pass(&tape, false, DropMode::Eval)?;
            let loss = pass.sequence_nll(&tape, seq)?;
            total += tape.scalar(loss);
            count += seq.len() + 1;
        }
        if count == 0 {
            return Err(Error::EmptyInput("language model evaluation set"));
        }
        Ok(total / count as f64)
    }

    pub fn perplexity(&self, sequences: &[Vec<u32>]) -> Result<f64> {
        Ok(self.mean_nll(sequences)?.exp())
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        crate::tensor::write_checkpoint(w, &[(LM_PREFIX, &self.params)])
    }

    pub fn load<R: std::io::Read>(&mut self, r: R) -> Result<()> {
        self.params.load_prefixed(&crate::tensor::read_checkpoint(r)?, LM_PREFIX)
    }
}

impl LmPass {
    pub fn initial_state(&self, tape: &Tape) -> LmState {
        let z = |d: usize| tape.zeros(d);
        LmState {
            h: self.hidden.map(z),
            c: self.hidden.map(z),
        }
    }

    pub fn lm_token(&self, id: u32) -> u32 {
        if (id as usize) < self.vocab {
            id
        } else {
            UNK
        }
    }

    pub fn embed(&self, tape: &Tape, id: u32) -> Result<Var> {
        tape.row(self.embedding, self.lm_token(id) as usize)
    }

    /// Advances the stack by one token embedding; returns the top-layer
    /// hidden vector and the new state.
    pub fn step(&self, tape: &Tape, e_prev: Var, state: &LmState) -> Result<(Var, LmState)> {
        let mut x = e_prev;
        let mut h = state.h;
        let mut c = state.c;
        for l in 0..3 {
            let (hl, cl) = lstm_cell(tape, x, state.h[l], state.c[l], &self.cells[l])?;
            h[l] = hl;
            c[l] = cl;
            x = hl;
        }
        Ok((x, LmState { h, c }))
    }

    /// Tied decoding layer: `E · h + b`, then softmax.
    pub fn next_token_distribution(&self, tape: &Tape, h_top: Var) -> Result<Var> {
        tape.softmax(tape.add(tape.matvec(self.embedding, h_top)?, self.out_bias)?)
    }

    /// Summed negative log-likelihood of `seq` followed by `</s>`, fed from `<s>`.
    pub fn sequence_nll(&self, tape: &Tape, seq: &[u32]) -> Result<Var> {
        let mut state = self.initial_state(tape);
        let mut prev = START;
        let mut terms = Vec::with_capacity(seq.len() + 1);
        for &y in seq.iter().chain(std::iter::once(&END)) {
            let e = self.embed(tape, prev)?;
            let (h, next) = self.step(tape, e, &state)?;
            let p = self.next_token_distribution(tape, h)?;
            terms.push(tape.ln_floor(tape.index(p, self.lm_token(y) as usize)?, 1e-12));
            state = next;
            prev = y;
        }
        Ok(tape.scale(tape.sum(tape.concat(&terms)?), -1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.5,
            clip: 2.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub epochs: usize,
    pub train_perplexity: f64,
    pub valid_perplexity: Option<f64>,
    pub test_perplexity: Option<f64>,
}

/// SGD with per-sequence updates and global-norm clipping, weight drop active.
pub fn pretrain_lm(
    lm: &mut LanguageModel,
    train: &[Vec<u32>],
    valid: Option<&[Vec<u32>]>,
    test: Option<&[Vec<u32>]>,
    cfg: &LmTrainConfig,
) -> Result<LmReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("language model training corpus"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for &i in &order {
            let tape = Tape::new();
            let bound = lm.params.bind(&tape)?;
            let pass = lm.pass_with(&tape, &bound, DropMode::Train(rng.gen()))?;
            let loss = pass.sequence_nll(&tape, &train[i])?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NumericDomain(format!("LM loss {value} on sequence {i}")));
            }
            let grads = tape.backward(loss)?;
            lm.params.zero_grad();
            lm.params.accumulate_grads(&bound, &grads);
            lm.params.clip_grad_norm(cfg.clip);
            lm.params.sgd_step(cfg.lr / (train[i].len() + 1) as f64);
        }
    }
    Ok(LmReport {
        epochs: cfg.epochs,
        train_perplexity: lm.perplexity(train)?,
        valid_perplexity: valid.map(|v| lm.perplexity(v)).transpose()?,
        test_perplexity: test.map(|v| lm.perplexity(v)).transpose()?,
    })
}

/// Affine maps of the fusion gate.
#[derive(Debug, Clone, Copy)]
pub struct FusionGate {
    pub w_lm: ParamId,
    pub b_lm: ParamId,
    pub w_fuse: ParamId,
    pub b_fuse: ParamId,
}

impl FusionGate {
    pub fn register(
        store: &mut ParamStore,
        reference_dim: usize,
        lm_dim: usize,
        fuse_dim: usize,
        init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_lm: store.add("fusion.w_lm", Tensor::uniform(&[lm_dim, reference_dim + lm_dim], init, rng))?,
            b_lm: store.add("fusion.b_lm", Tensor::zeros(&[lm_dim]))?,
            w_fuse: store.add(
                "fusion.w_fuse",
                Tensor::uniform(&[fuse_dim, reference_dim + lm_dim], init, rng),
            )?,
            b_fuse: store.add("fusion.b_fuse", Tensor::zeros(&[fuse_dim]))?,
        })
    }
}

/// Gate output and fused hidden state for one step.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub gate: Var,
    pub h_fuse: Var,
}

/// `f = σ(W_lm [r; h_lm] + b_lm)`, `g = W_fuse [r; f ⊙ h_lm] + b_fuse`,
/// `h_fuse = ReLU(g)`.
pub fn fuse(tape: &Tape, bound: &Bound, gate: &FusionGate, r: Var, h_lm: Var) -> Result<Fused> {
    let f = tape.sigmoid(tape.add(
        tape.matvec(bound[gate.w_lm], tape.concat(&[r, h_lm])?)?,
        bound[gate.b_lm],
    )?);
    let filtered = tape.mul(f, h_lm)?;
    let g = tape.add(
        tape.matvec(bound[gate.w_fuse], tape.concat(&[r, filtered])?)?,
        bound[gate.b_fuse],
    )?;
    Ok(Fused {
        gate: f,
        h_fuse: tape.relu(g),
    })
}

/// `softmax(W_gen h + b_gen)` over the output vocabulary.
pub fn generator_distribution(tape: &Tape, w_gen: Var, b_gen: Var, h: Var) -> Result<Var> {
    tape.softmax(tape.add(tape.matvec(w_gen, h)?, b_gen)?)
}
