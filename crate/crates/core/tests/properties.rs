use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xling::eval::{compute_lac, perplexity};
use xling::gradcheck::tiny_model;
use xling::model::{forward, sentence_embedding};
use xling::objectives::{
    build_ntp_example, cl_loss, joint_loss, masked_nll, ntp_loss, LabelledBatch, Task, TrainingExample,
};
use xling::tokenizer::{Segment, TokenSequence, BOS, EOS, PAD, SEP};
use xling::{Lang, ModelParams, Vocab};

/// LAC written as the layer average of `cos_i / std`, independent of the library's mean/std form.
fn lac_sum_form(c: &[f64]) -> f64 {
    let n = c.len() as f64;
    let mu = c.iter().sum::<f64>() / n;
    let sd = (c.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
    c.iter().map(|x| x / sd).sum::<f64>() / n
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lac_sum_form_matches_mean_over_std(c in prop::collection::vec(-1.0f64..1.0, 2..9)) {
        let r = compute_lac(&c).unwrap();
        prop_assume!(!r.degenerate);
        let oracle = lac_sum_form(&c);
        prop_assert!((r.lac - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{} vs {}", r.lac, oracle);
    }

    #[test]
    fn constant_cosines_are_degenerate(v in -1.0f64..1.0, n in 2usize..9) {
        let r = compute_lac(&vec![v; n]).unwrap();
        prop_assert!(r.degenerate);
        prop_assert!(r.lac.is_infinite());
    }

    #[test]
    fn lac_is_scale_free(c in prop::collection::vec(0.05f64..1.0, 3..7), k in 0.1f64..10.0) {
        let a = compute_lac(&c).unwrap();
        let scaled: Vec<f64> = c.iter().map(|x| x * k).collect();
        let b = compute_lac(&scaled).unwrap();
        prop_assume!(!a.degenerate);
        prop_assert!((a.lac - b.lac).abs() <= 1e-9 * a.lac.abs().max(1.0));
    }
}

#[test]
fn lac_worked_case() {
    let r = compute_lac(&[0.9, 0.8, 0.7, 0.8, 0.8]).unwrap();
    assert!((r.lac - 12.6491).abs() < 1e-3, "{}", r.lac);
}

fn random_seq(rng: &mut ChaCha8Rng, vocab: usize, cross: bool) -> TokenSequence {
    let mut seq = TokenSequence::default();
    seq.push(BOS, 0, Segment::Special);
    if cross {
        for _ in 0..rng.random_range(1..4) {
            let w = rng.random_range(4..vocab as u32);
            seq.push(w, 0, Segment::Src);
        }
        seq.push(SEP, 0, Segment::Special);
        for _ in 0..rng.random_range(1..4) {
            let w = rng.random_range(4..vocab as u32);
            seq.push(w, 1, Segment::Tgt);
        }
    } else {
        for _ in 0..rng.random_range(1..6) {
            let w = rng.random_range(4..vocab as u32);
            seq.push(w, 1, Segment::Mono);
        }
    }
    seq.push(EOS, 1, Segment::Special);
    seq
}

fn example(seq: TokenSequence, cross: bool) -> TrainingExample {
    TrainingExample {
        seq,
        task: if cross { Task::Cl } else { Task::Ntp },
        pair_id: None,
    }
}

#[test]
fn uniform_logits_give_ln_v() {
    let mut p = tiny_model(0).unwrap();
    for t in p.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = p.config.vocab_size;
    let ex: Vec<TrainingExample> = (0..5).map(|_| example(random_seq(&mut rng, v, false), false)).collect();
    let refs: Vec<&TrainingExample> = ex.iter().collect();
    let loss = ntp_loss(&p, &refs).unwrap();
    assert!((loss - (v as f64).ln()).abs() < 1e-9, "{loss}");
}

#[test]
fn perplexity_is_exp_of_ntp_loss() {
    let p = tiny_model(3).unwrap();
    let words: Vec<String> = (0..7).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(&words);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // more sentences than one evaluation chunk
    let sentences: Vec<xling::corpus::MonoSentence> = (0..150)
        .map(|_| xling::corpus::MonoSentence {
            lang: Lang::Alpha,
            words: (0..rng.random_range(1..6)).map(|_| words[rng.random_range(0..7)].clone()).collect(),
        })
        .collect();
    let report = perplexity(&p, &sentences, &vocab).unwrap();
    let ex: Vec<TrainingExample> = sentences.iter().map(|s| build_ntp_example(&s.words, &vocab).unwrap()).collect();
    let refs: Vec<&TrainingExample> = ex.iter().collect();
    let loss = ntp_loss(&p, &refs).unwrap();
    assert!((report.ppl - loss.exp()).abs() < 1e-9, "{} vs {}", report.ppl, loss.exp());
}

#[test]
fn joint_loss_is_exactly_additive() {
    let p = tiny_model(5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = p.config.vocab_size;
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let ex: Vec<TrainingExample> = (0..n)
            .map(|_| {
                let cross = rng.random_bool(0.5);
                example(random_seq(&mut rng, v, cross), cross)
            })
            .collect();
        let refs: Vec<&TrainingExample> = ex.iter().collect();
        let j = joint_loss(&p, &refs).unwrap();
        assert_eq!(j.total, j.ntp + j.cl);
        let ntp: Vec<&TrainingExample> = ex.iter().filter(|e| e.task == Task::Ntp).collect();
        let cl: Vec<&TrainingExample> = ex.iter().filter(|e| e.task == Task::Cl).collect();
        let expect_ntp = if ntp.is_empty() { 0.0 } else { ntp_loss(&p, &ntp).unwrap() };
        let expect_cl = if cl.is_empty() { 0.0 } else { cl_loss(&p, &cl).unwrap() };
        assert!((j.ntp - expect_ntp).abs() < 1e-12);
        assert!((j.cl - expect_cl).abs() < 1e-12);
    }
}

#[test]
fn cl_loss_ignores_labels_at_masked_positions() {
    let p = tiny_model(7).unwrap();
    let v = p.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..1000 {
        let seqs: Vec<TokenSequence> = (0..rng.random_range(1..4)).map(|_| random_seq(&mut rng, v, true)).collect();
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        let lb = LabelledBatch::from_sequences(&refs).unwrap();
        let base = masked_nll(&p, &lb).unwrap();
        let mut edited = lb.clone();
        for (t, m) in edited.targets.iter_mut().zip(&lb.mask) {
            if *m == 0 {
                *t = rng.random_range(0..v);
            }
        }
        if masked_nll(&p, &edited).unwrap() != base {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn logits_never_see_future_tokens() {
    let p: ModelParams<f64> = tiny_model(9).unwrap();
    let v = p.config.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let len = rng.random_range(2..=p.config.max_seq_len);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..v)).collect();
        let t = rng.random_range(0..len - 1);
        let mut changed = ids.clone();
        for id in &mut changed[t + 1..] {
            *id = rng.random_range(0..v);
        }
        let a = forward(&p, &ids).unwrap();
        let b = forward(&p, &changed).unwrap();
        let w = p.config.vocab_size;
        for (x, y) in a.logits.data()[..(t + 1) * w].iter().zip(&b.logits.data()[..(t + 1) * w]) {
            assert!((x - y).abs() < 1e-12, "position <= {t} moved: {x} vs {y}");
        }
    }
}

#[test]
fn sentence_embedding_ignores_trailing_pad() {
    let p: ModelParams<f64> = tiny_model(11).unwrap();
    let v = p.config.vocab_size as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let len = rng.random_range(1..6);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(4..v)).collect();
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat_n(PAD, rng.random_range(1..5)));
        let a = forward(&p, &ids).unwrap();
        let b = forward(&p, &padded).unwrap();
        for layer in 0..=p.config.n_layers {
            let ea = sentence_embedding(&a, layer).unwrap();
            let eb = sentence_embedding(&b, layer).unwrap();
            for (x, y) in ea.iter().zip(&eb) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
