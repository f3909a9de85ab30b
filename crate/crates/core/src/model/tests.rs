use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::START;
use crate::lm::LmConfig;
use crate::tensor::{grad_check, softmax_values};

fn config(scale: f64) -> ModelConfig {
    ModelConfig {
        input_vocab: 12,
        output_vocab: 9,
        d_emb: 6,
        d_hid: 8,
        encoder_size: 4,
        d_fuse: 5,
        init_scale: scale,
    }
}

fn plain(scale: f64, seed: u64) -> Summarizer {
    Summarizer::new(config(scale), None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn fused(scale: f64, seed: u64) -> Summarizer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = LanguageModel::new(
        LmConfig {
            vocab: 9,
            d_emb: 3,
            hidden: [4, 4, 3],
            weight_drop: 0.0,
            init_scale: 0.5,
        },
        &mut rng,
    )
    .unwrap();
    Summarizer::new(config(scale), Some(lm), &mut rng).unwrap()
}

fn set(model: &mut Summarizer, name: &str, values: &[f64]) {
    let id = model.param_id(name).unwrap();
    let t = model.params.get_mut(id).values_mut();
    if values.len() == 1 {
        t.fill(values[0]);
    } else {
        t.copy_from_slice(values);
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn config_checks() {
    let mut c = config(0.1);
    c.encoder_size = 3;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = config(0.1);
    c.output_vocab = 20;
    assert!(c.validate().is_err());
}

#[test]
fn single_token_source() {
    let m = plain(0.4, 1);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[5]).unwrap();
    assert_eq!(tape.shape(enc.h_enc), vec![1, 8]);
    let row = tape.value(tape.row(enc.h_enc, 0).unwrap());
    close(&row, &tape.value(f.initial_state(&enc).h_dec), 0.0);
    assert!(matches!(f.encode_source(&[]), Err(Error::EmptyInput(_))));
}

#[test]
fn palindrome_is_mirror_symmetric_with_shared_directions() {
    let mut m = plain(0.5, 2);
    for part in ["w_ih", "w_hh", "bias"] {
        let v = m.params.get(m.param_id(&format!("encoder.fwd.{part}")).unwrap()).values().to_vec();
        set(&mut m, &format!("encoder.bwd.{part}"), &v);
    }
    set(&mut m, "encoder.fwd.bias", &[0.1]);
    set(&mut m, "encoder.bwd.bias", &[0.1]);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let src = [4, 7, 9, 7, 4];
    let enc = f.encode_source(&src).unwrap();
    let h = tape.value(enc.h_enc);
    for i in 0..5 {
        let j = 4 - i;
        close(&h[i * 8..i * 8 + 4], &h[j * 8 + 4..j * 8 + 8], 1e-15);
    }
}

#[test]
fn encoder_gradient_matches_finite_differences() {
    let mut m = plain(0.6, 3);
    let shell = m.clone();
    let err = grad_check(&mut m.params, 1e-5, |tape, bound| {
        let f = shell.forward_with(tape, bound.clone())?;
        let enc = f.encode_source(&[4, 11, 6])?;
        let w = tape.constant(&[24], (0..24).map(|i| (i as f64 * 0.37).sin()).collect())?;
        let flat = (0..3).map(|i| tape.row(enc.h_enc, i)).collect::<Result<Vec<_>>>()?;
        tape.dot(tape.concat(&flat)?, w)
    })
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn equal_scores_give_uniform_first_step_attention() {
    let mut m = plain(0.3, 4);
    set(&mut m, "attn.w_tmp", &[0.0]);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5, 6, 7]).unwrap();
    let st = f.initial_state(&enc);
    let att = f.temporal_attention(st.h_dec, &enc, None, 1).unwrap();
    close(&tape.value(att.alpha), &[0.25; 4], 1e-15);
    close(&tape.value(att.acc_exp_scores), &[1.0; 4], 0.0);
}

#[test]
fn temporal_attention_matches_closed_form() {
    let m = plain(0.5, 5);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5, 6]).unwrap();
    let h = tape.vector(vec![0.3, -0.1, 0.5, 0.2, -0.4, 0.1, 0.0, 0.7]);
    let acc = tape.vector(vec![2.0, 0.5, 1.0]);
    let att = f.temporal_attention(h, &enc, Some(acc), 2).unwrap();
    let s = tape.value(att.scores);
    let q: Vec<f64> = s.iter().zip([2.0, 0.5, 1.0]).map(|(s, a)| s.exp() / a).collect();
    let total: f64 = q.iter().sum();
    close(&tape.value(att.q), &q, 1e-14);
    close(&tape.value(att.alpha), &q.iter().map(|x| x / total).collect::<Vec<_>>(), 1e-14);
    let acc_next: Vec<f64> = s.iter().zip([2.0, 0.5, 1.0]).map(|(s, a)| a + s.exp()).collect();
    close(&tape.value(att.acc_exp_scores), &acc_next, 1e-14);
}

#[test]
fn heavily_attended_positions_are_penalized() {
    let mut m = plain(0.3, 6);
    set(&mut m, "attn.w_tmp", &[0.0]);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5, 6]).unwrap();
    let h = tape.zeros(8);
    let acc = tape.vector(vec![3.0, 1.0, 2.0]);
    let alpha = tape.value(f.temporal_attention(h, &enc, Some(acc), 2).unwrap().alpha);
    assert!(alpha[1] > alpha[2] && alpha[2] > alpha[0]);
}

#[test]
fn accumulator_must_match_the_source() {
    let m = plain(0.3, 7);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5, 6]).unwrap();
    let h = tape.zeros(8);
    let acc = tape.vector(vec![1.0, 1.0]);
    assert!(matches!(
        f.temporal_attention(h, &enc, Some(acc), 2),
        Err(Error::StateCorruption(_))
    ));
    assert!(matches!(f.temporal_attention(h, &enc, None, 3), Err(Error::StateCorruption(_))));
}

#[test]
fn intra_attention_over_history() {
    let mut m = plain(0.3, 8);
    let eye: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
    set(&mut m, "attn.w_intra", &eye);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let h = tape.vector(vec![1.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(tape.value(f.intra_attention(h, &[]).unwrap()), vec![0.0; 8]);

    let h1 = vec![0.2, 0.1, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0];
    let p1 = tape.vector(h1.clone());
    close(&tape.value(f.intra_attention(h, &[p1]).unwrap()), &h1, 1e-15);

    let h2 = vec![0.6, 0.0, 0.4, 0.0, 0.0, 0.0, 0.1, 0.0];
    let p2 = tape.vector(h2.clone());
    // scores 0.2 and 0.8
    let w = softmax_values(&[0.2, 0.8]).unwrap();
    let want: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| w[0] * a + w[1] * b).collect();
    close(&tape.value(f.intra_attention(h, &[p1, p2]).unwrap()), &want, 1e-15);
}

#[test]
fn zero_switch_weights_give_even_odds() {
    let mut m = plain(0.3, 9);
    set(&mut m, "switch.w", &[0.0]);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5]).unwrap();
    let (dist, _) = f.decode_step(&enc, &f.initial_state(&enc), START).unwrap();
    assert_eq!(tape.scalar(dist.p_z), 0.5);
}

#[test]
fn copy_mass_sums_over_repeated_positions() {
    let p = copy_distribution(&[4, 5, 4], &[0.5, 0.2, 0.3]);
    assert_eq!(p.len(), 2);
    assert_eq!(p[0].0, 4);
    assert!((p[0].1 - 0.8).abs() < 1e-15);
    assert_eq!(p[1], (5, 0.2));
}

fn synthetic_step(tape: &Tape, source: &[u32]) -> StepDistribution {
    let mut p_gen = vec![0.5 / 8.0; 9];
    p_gen[6] = 0.5;
    StepDistribution {
        p_z: tape.scalar_const(0.5),
        p_gen: tape.vector(p_gen),
        alpha: tape.vector(vec![0.5, 0.2, 0.3]),
        c_tmp: tape.zeros(1),
        c_int: tape.zeros(1),
        reference: tape.zeros(1),
        gate: None,
        source: source.into(),
    }
}

#[test]
fn joint_log_probability_of_each_branch() {
    let m = plain(0.3, 10);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let d = synthetic_step(&tape, &[4, 5, 4]);
    let gen = tape.scalar(f.joint_log_prob(&d, true, 6).unwrap());
    assert!((gen - 0.25f64.ln()).abs() < 1e-15);
    let copy = tape.scalar(f.joint_log_prob(&d, false, 4).unwrap());
    assert!((copy - 0.4f64.ln()).abs() < 1e-15);
    // extended ids are generated as UNK
    let unk = tape.scalar(f.joint_log_prob(&d, true, 15).unwrap());
    assert!((unk - (0.5f64 / 8.0 * 0.5).ln()).abs() < 1e-15);
    assert!(matches!(
        f.joint_log_prob(&d, false, 7),
        Err(Error::SupervisionInconsistency { token: 7, .. })
    ));
}

#[test]
fn joint_distribution_is_normalized() {
    for model in [plain(0.5, 11), fused(0.5, 11)] {
        let tape = Tape::new();
        let f = model.forward(&tape).unwrap();
        let src = [4, 13, 6, 4, 8];
        let enc = f.encode_source(&src).unwrap();
        let mut st = f.initial_state(&enc);
        let mut prev = START;
        for _ in 0..3 {
            let (d, next) = f.decode_step(&enc, &st, prev).unwrap();
            let mut total = 0.0;
            for y in 0..9 {
                total += tape.scalar(f.joint_log_prob(&d, true, y).unwrap()).exp();
            }
            for (y, _) in copy_distribution(&src, &tape.value(d.alpha)) {
                total += tape.scalar(f.joint_log_prob(&d, false, y).unwrap()).exp();
            }
            assert!((total - 1.0).abs() < 1e-12, "{total}");
            st = next;
            prev = 13;
        }
    }
}

#[test]
fn decode_step_advances_the_state() {
    let m = fused(0.3, 12);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let enc = f.encode_source(&[4, 5, 6]).unwrap();
    let s1 = f.initial_state(&enc);
    let (d1, s2) = f.decode_step(&enc, &s1, START).unwrap();
    assert_eq!((s2.t, s2.past.len()), (2, 1));
    assert!(d1.gate.is_some());
    let (_, s3) = f.decode_step(&enc, &s2, 5).unwrap();
    assert_eq!(s3.t, 3);
    assert!(matches!(f.decode_step(&enc, &s1.clone_with_t(3), 5), Err(Error::StateCorruption(_))));
}

impl DecoderStepState {
    fn clone_with_t(&self, t: usize) -> Self {
        let mut s = self.clone();
        s.t = t;
        s
    }
}

#[test]
fn fused_two_step_likelihood_gradient_matches_finite_differences() {
    let mut m = fused(0.5, 13);
    let shell = m.clone();
    let err = grad_check(&mut m.params, 1e-3, |tape, bound| {
        let f = shell.forward_with(tape, bound.clone())?;
        let enc = f.encode_source(&[4, 5, 13, 7, 5])?;
        let s1 = f.initial_state(&enc);
        let (d1, s2) = f.decode_step(&enc, &s1, START)?;
        let l1 = f.joint_log_prob(&d1, true, 6)?;
        let (d2, _) = f.decode_step(&enc, &s2, 6)?;
        let l2 = f.joint_log_prob(&d2, false, 5)?;
        Ok(tape.scale(tape.add(l1, l2)?, -1.0))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn frozen_language_model_gets_no_gradient() {
    let m = fused(0.3, 14);
    let tape = Tape::new();
    let f = m.forward(&tape).unwrap();
    let lm = f.lm.as_ref().unwrap();
    let s = lm.initial_state(&tape);
    let (h, _) = lm.step(&tape, lm.embed(&tape, 4).unwrap(), &s).unwrap();
    assert!(!tape.requires_grad(h));
}

proptest! {
    #[test]
    fn attention_is_a_distribution(
        scores in prop::collection::vec(-20.0f64..20.0, 1..8),
        acc_scale in prop::collection::vec(0.01f64..50.0, 8),
    ) {
        let m = plain(0.3, 15);
        let tape = Tape::new();
        let f = m.forward(&tape).unwrap();
        let src: Vec<u32> = (0..scores.len() as u32).map(|i| 4 + i % 3).collect();
        let enc = f.encode_source(&src).unwrap();
        let h = tape.vector(scores.iter().take(8).copied().chain(std::iter::repeat(0.0)).take(8).collect());
        let acc = tape.vector(acc_scale[..src.len()].to_vec());
        let alpha = tape.value(f.temporal_attention(h, &enc, Some(acc), 2).unwrap().alpha);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let copy: f64 = copy_distribution(&src, &alpha).iter().map(|(_, p)| p).sum();
        prop_assert!((copy - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_includes_the_language_model() {
    let a = fused(0.4, 16);
    let mut buf = Vec::new();
    a.save(&mut buf).unwrap();
    let mut b = fused(0.1, 99);
    b.load(buf.as_slice()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.lm().unwrap().params, b.lm().unwrap().params);
    let mut c = plain(0.1, 1);
    // the plain generator head has a different input size
    assert!(c.load(buf.as_slice()).is_err());
    assert!(b.load(&buf[..buf.len() - 8]).is_err());
}
