use std::collections::BTreeSet;

use super::*;
use crate::model::ModelConfig;
use crate::tensor::{grad_check, write_checkpoint, ParamStore};

fn config() -> ModelConfig {
    ModelConfig {
        input_vocab: 14,
        output_vocab: 10,
        d_emb: 5,
        d_hid: 6,
        encoder_size: 3,
        d_fuse: 4,
        init_scale: 0.3,
    }
}

fn model(seed: u64) -> Summarizer {
    Summarizer::new(config(), None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn pair(id: usize, source: &[u32], summary: &[u32], z: &[bool]) -> DocumentPair {
    DocumentPair {
        id,
        source: source.to_vec(),
        summary: summary.to_vec(),
        z_labels: z.to_vec(),
        oovs: Vec::new(),
        entities: BTreeSet::new(),
    }
}

fn toy() -> DocumentPair {
    // 11 and 12 fall outside the output vocabulary and must be pointed at
    pair(7, &[4, 11, 5, 12, 6], &[11, 5, 12], &[false, true, false])
}

fn cfg() -> TrainingConfig {
    TrainingConfig {
        gamma: 0.5,
        ss_prob: 0.25,
        lr: 0.1,
        max_len: 8,
        ..TrainingConfig::default()
    }
}

fn set(m: &mut Summarizer, name: &str, f: impl Fn(usize) -> f64) {
    let id = m.param_id(name).unwrap();
    for (i, v) in m.params.get_mut(id).values_mut().iter_mut().enumerate() {
        *v = f(i);
    }
}

/// Emits token 4 after `<s>` and the end token after 4, with probability 1
/// in floating point.
fn perfect_model() -> Summarizer {
    let cfg = ModelConfig {
        input_vocab: 8,
        output_vocab: 6,
        d_emb: 2,
        d_hid: 2,
        encoder_size: 1,
        d_fuse: 2,
        init_scale: 0.3,
    };
    let mut m = Summarizer::new(cfg, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let names: Vec<String> = m.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for n in &names {
        set(&mut m, n, |_| 0.0);
    }
    // rows of [input; forget; candidate; output] gates, two units each
    set(&mut m, "decoder.w_ih", |i| if i == 8 || i == 11 { 1.0 } else { 0.0 });
    set(&mut m, "decoder.bias", |i| match i / 2 {
        0 | 3 => 50.0,
        1 => -50.0,
        _ => 0.0,
    });
    set(&mut m, "embedding", |i| match i {
        4 => 3.0, // START, unit 0
        9 => 3.0, // token 4, unit 1
        _ => 0.0,
    });
    set(&mut m, "switch.b", |_| 100.0);
    set(&mut m, "gen.w", |i| match (i / 6, i % 6) {
        (4, 0) | (3, 1) => 100.0,
        _ => 0.0,
    });
    m
}

#[test]
fn perfect_model_has_zero_loss() {
    let m = perfect_model();
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let p = pair(0, &[5, 6], &[4], &[true]);
    let loss = ml_loss(&f, &p, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(tape.scalar(loss), 0.0);
}

#[test]
fn teacher_forced_loss_matches_stepwise_recomputation() {
    let m = model(1);
    let p = toy();
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let loss = tape.scalar(ml_loss(&f, &p, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap());

    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&p.source).unwrap();
    let mut st = f.initial_state(&enc);
    let mut prev = START;
    let mut want = 0.0;
    let gold = [(11, false), (5, true), (12, false), (END, true)];
    for (y, z) in gold {
        let (d, next) = f.decode_step(&enc, &st, prev).unwrap();
        let probs = d.probs(&tape);
        let pz = if z { probs.p_z } else { 1.0 - probs.p_z };
        let py = if z {
            probs.p_gen[y as usize]
        } else {
            probs.p_copy.iter().find(|(t, _)| *t == y).unwrap().1
        };
        want -= pz.ln() + py.ln();
        st = next;
        prev = y;
    }
    assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
}

#[test]
fn scheduled_sampling_changes_inputs_only_when_enabled() {
    let m = model(2);
    let p = toy();
    let run = |ss: f64, seed: u64| {
        let tape = Tape::new();
        let f = m.forward(&tape).unwrap();
        tape.scalar(ml_loss(&f, &p, ss, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap())
    };
    assert_eq!(run(0.0, 1), run(0.0, 2));
    assert_eq!(run(1.0, 1), run(1.0, 2));
    assert_ne!(run(0.0, 1), run(1.0, 1));
}

#[test]
fn inconsistent_supervision_names_the_document() {
    let m = model(3);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let bad = pair(42, &[4, 5], &[9], &[false]);
    let err = ml_loss(&f, &bad, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::SupervisionInconsistency { token: 9, doc: Some(42) }), "{err:?}");
}

#[test]
fn deterministic_policy_has_zero_advantage_and_gradient() {
    let mut m = perfect_model();
    let p = pair(0, &[5, 6], &[4], &[true]);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let r = self_critical_rollout(&f, &p, 5, &RewardWeights::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(r.sample.tokens, vec![4]);
    assert_eq!(r.sample.tokens, r.greedy.tokens);
    assert_eq!(r.advantage(), 0.0);
    let grads = tape.backward(pg_loss(&tape, &r)).unwrap();
    let bound = f.bound.clone();
    drop(f);
    m.params.zero_grad();
    m.params.accumulate_grads(&bound, &grads);
    assert_eq!(m.params.grad_norm(), 0.0);
}

#[test]
fn rollouts_are_reproducible() {
    let m = model(4);
    let p = toy();
    let roll = |seed| {
        let tape = Tape::new();
        let f = m.forward(&tape).unwrap();
        let r = self_critical_rollout(&f, &p, 8, &RewardWeights::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (r.sample, r.greedy, r.reward_sample, r.reward_greedy)
    };
    assert_eq!(roll(5), roll(5));
    let r = roll(5).0;
    assert!(r.step_log_probs.iter().all(|lp| lp.is_finite() && *lp <= 0.0));
}

/// Per-coordinate gradient variance of `weight(rollout) * ∇ Σ log p`.
fn gradient_variance(m: &Summarizer, p: &DocumentPair, baseline: bool) -> f64 {
    let n = 300;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let tape = Tape::new();
        let f = m.forward(&tape).unwrap();
        let r = self_critical_rollout(&f, p, 6, &RewardWeights::default(), &mut rng).unwrap();
        let grads = tape.backward(r.sample_log_prob).unwrap();
        let w = if baseline { r.advantage() } else { r.reward_sample };
        let mut flat = Vec::new();
        for (id, _, t) in m.params.iter() {
            match grads.get(f.bound[id]) {
                Some(g) => flat.extend(g.iter().map(|x| w * x)),
                None => flat.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        samples.push(flat);
    }
    let dim = samples[0].len();
    (0..dim)
        .map(|k| {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / n as f64;
            samples.iter().map(|s| (s[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .sum()
}

#[test]
fn greedy_baseline_reduces_gradient_variance() {
    let m = model(6);
    let p = pair(0, &[4, 5, 6, 7, 8], &[4, 5, 6], &[true, true, true]);
    let with = gradient_variance(&m, &p, true);
    let without = gradient_variance(&m, &p, false);
    assert!(with < without, "{with} vs {without}");
}

#[test]
fn positive_advantage_raises_sample_likelihood() {
    let mut m = model(8);
    let p = pair(0, &[4, 5, 6], &[4, 5, 6], &[true, true, true]);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (r, before, tape_len) = loop {
        let tape = Tape::new();
        let f = m.forward(&tape).unwrap();
        let r = self_critical_rollout(&f, &p, 3, &RewardWeights::default(), &mut rng).unwrap();
        if r.advantage() > 0.0 {
            let v = tape.scalar(r.sample_log_prob);
            let grads = tape.backward(pg_loss(&tape, &r)).unwrap();
            let bound = f.bound.clone();
            drop(f);
            m.params.zero_grad();
            m.params.accumulate_grads(&bound, &grads);
            break (r, v, tape.len());
        }
    };
    assert!(tape_len > 0);
    m.params.sgd_step(0.05);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&p.source).unwrap();
    let mut st = f.initial_state(&enc);
    let mut prev = START;
    let mut after = 0.0;
    let steps = r.sample.tokens.iter().zip(&r.sample.switches).map(|(&y, &z)| (z, y));
    for (z, y) in steps.chain(r.sample.finished.then_some((true, END))) {
        let (d, next) = f.decode_step(&enc, &st, prev).unwrap();
        after += tape.scalar(f.joint_log_prob(&d, z, y).unwrap());
        st = next;
        prev = y;
    }
    assert!(after > before, "{after} <= {before}");
}

#[test]
fn policy_gradient_matches_finite_differences_with_fixed_reward() {
    let big = ModelConfig { init_scale: 0.8, ..config() };
    let mut m = Summarizer::new(big, None, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let p = toy();
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let r = self_critical_rollout(&f, &p, 6, &RewardWeights::default(), &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let advantage = 0.37;
    let traj: Vec<(bool, u32)> = r
        .sample
        .tokens
        .iter()
        .zip(&r.sample.switches)
        .map(|(&y, &z)| (z, y))
        .chain(r.sample.finished.then_some((true, END)))
        .collect();
    let shell = m.clone();
    let err = grad_check(&mut m.params, 1e-4, |tape, bound| {
        let f = shell.forward_with(tape, bound.clone())?;
        let enc = f.encode_source(&p.source)?;
        let mut st = f.initial_state(&enc);
        let mut prev = START;
        let mut terms = Vec::new();
        for &(z, y) in &traj {
            let (d, next) = f.decode_step(&enc, &st, prev)?;
            terms.push(f.joint_log_prob(&d, z, y)?);
            st = next;
            prev = y;
        }
        Ok(tape.scale(tape.sum(tape.concat(&terms)?), -advantage))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

fn checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &[("", store)]).unwrap();
    buf
}

#[test]
fn degenerate_mixtures_equal_pure_steps() {
    let p = toy();
    for (gamma, pure) in [(0.0, Objective::Ml), (1.0, Objective::Pg)] {
        let c = TrainingConfig { gamma, ..cfg() };
        let mut a = model(13);
        let mut b = model(13);
        let da = update(&mut a, &[&p], Objective::Mixed(gamma), &c, &mut RngStreams::new(5)).unwrap();
        let db = update(&mut b, &[&p], pure, &c, &mut RngStreams::new(5)).unwrap();
        assert_eq!(checkpoint(&a.params), checkpoint(&b.params), "gamma {gamma}");
        assert_eq!(da.grad_norm, db.grad_norm);
    }
}

#[test]
fn mixed_loss_is_linear_in_gamma() {
    let p = toy();
    let m = model(14);
    let loss = |gamma: f64| {
        let mut m = m.clone();
        let c = TrainingConfig { gamma, ..cfg() };
        mixed_step(&mut m, &p, &c, &mut RngStreams::new(21)).unwrap().loss
    };
    let (l0, l1) = (loss(0.0), loss(1.0));
    for g in [0.25, 0.5, 0.9984] {
        assert!((loss(g) - ((1.0 - g) * l0 + g * l1)).abs() < 1e-10);
    }
}

#[test]
fn frozen_reward_never_reaches_the_tape() {
    let m = model(15);
    let p = toy();
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let before = tape.len();
    let r = self_critical_rollout(&f, &p, 6, &RewardWeights::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mid = tape.len();
    let loss = pg_loss(&tape, &r);
    // exactly one node: the constant scaling of the log-probability sum
    assert_eq!(tape.len(), mid + 1);
    assert!(mid > before);
    assert!(tape.requires_grad(loss));
}

fn tiny_corpus() -> Vec<DocumentPair> {
    (0..6)
        .map(|i| {
            let a = 4 + (i % 5) as u32;
            let b = 10 + (i % 3) as u32;
            pair(i, &[a, b, 5, 6], &[a, b], &[true, false])
        })
        .collect()
}

#[test]
fn training_is_bit_reproducible_and_reduces_loss() {
    let pairs = tiny_corpus();
    let c = TrainingConfig {
        epochs: 6,
        warm_start_epochs: 4,
        batch_size: 2,
        lr: 0.5,
        ..cfg()
    };
    let run = || {
        let mut m = model(16);
        let mut epochs_seen = 0;
        let hist = train(&mut m, &pairs, &c, |_, _| {
            epochs_seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(epochs_seen, 6);
        (checkpoint(&m.params), hist)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert!(ha[3].mean_ml_loss.unwrap() < ha[0].mean_ml_loss.unwrap());
    assert_eq!(ha[4].objective, "mixed(0.5)");
    assert!(ha[4].mean_pg_loss.is_some() && ha[0].mean_pg_loss.is_none());
}

#[test]
fn invalid_configs_and_numeric_failures() {
    for bad in [
        TrainingConfig { gamma: 1.5, ..cfg() },
        TrainingConfig { ss_prob: -0.1, ..cfg() },
        TrainingConfig { lr: 0.0, ..cfg() },
        TrainingConfig { batch_size: 0, ..cfg() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
    let mut m = model(17);
    set(&mut m, "gen.b", |_| f64::NAN);
    let err = ml_step(&mut m, &toy(), &cfg(), &mut RngStreams::new(1)).unwrap_err();
    assert!(matches!(err, Error::NumericDomain(_)), "{err:?}");
    assert!(train(&mut model(1), &[], &cfg(), |_, _| Ok(())).is_err());
}
