use std::fs;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use xling::corpus::{read_corpus, read_mono, write_corpus, write_mono};
use xling::eval::{perplexity, translate_and_score};
use xling::experiment::build_vocab;
use xling::model::forward;
use xling::objectives::{build_cl_example, build_ntp_example};
use xling::trainer::{run_phases, train, write_metrics_csv, Phase, TrainData};
use xling::{Checkpoint, CorpusConfig, Dataset, Lang, ModelConfig, ModelParams, TrainConfig, Variant, Vocab};

fn dataset() -> (Dataset, Vocab) {
    let ds = Dataset::generate(&CorpusConfig::default()).unwrap();
    let vocab = build_vocab(&ds);
    (ds, vocab)
}

#[test]
fn overfits_a_single_sequence() {
    let (ds, vocab) = dataset();
    let sentence = ds.mono_eval_for(Lang::Alpha)[0].clone();
    let ex = build_ntp_example(&sentence.words, &vocab).unwrap();
    let phase = Phase { name: "one".into(), steps: 300, ntp: vec![ex], cross: vec![], ratio_ntp: 1.0 };
    let cfg = TrainConfig { lr: 3e-3, batch_size: 4, steps: 300, ..TrainConfig::default() };
    let init = ModelParams::init(ModelConfig::desk(vocab.len()), 1).unwrap();
    let out = run_phases(init, &cfg, &[phase], None).unwrap();
    let last = out.metrics.last().unwrap().loss_total;
    assert!(last < 0.01, "final loss {last}");
    let ppl = perplexity(&out.checkpoint.params, &[sentence], &vocab).unwrap().ppl;
    assert!(ppl < 1.05, "ppl {ppl}");
}

#[test]
fn memorizes_fifty_translation_pairs() {
    let (ds, vocab) = dataset();
    let pairs: Vec<_> = ds.train_pairs(Lang::Alpha, Lang::Beta).into_iter().take(50).collect();
    let cross = pairs.iter().map(|p| build_cl_example(p, &vocab).unwrap()).collect();
    let phase = Phase { name: "pairs".into(), steps: 600, ntp: vec![], cross, ratio_ntp: 0.0 };
    let cfg = TrainConfig { lr: 2e-3, batch_size: 16, steps: 600, ..TrainConfig::default() };
    let init = ModelParams::init(ModelConfig::desk(vocab.len()), 1).unwrap();
    let out = run_phases(init, &cfg, &[phase], None).unwrap();
    let mt = translate_and_score(&out.checkpoint.params, &vocab, &pairs, None).unwrap();
    let exact = (mt.exact_match * mt.n as f64).round() as usize;
    assert!(exact >= 48, "{exact}/50 exact");
}

#[test]
fn ntp_perplexity_falls_at_every_eval_point() {
    let (ds, vocab) = dataset();
    let held_out: Vec<_> = ds.mono_eval_for(Lang::Alpha).into_iter().take(100).collect();
    let cfg = TrainConfig {
        variant: Variant::NtpOnly,
        lr: 1e-3,
        steps: 400,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let data = TrainData { vocab: &vocab, mono: &ds.mono_train, pairs: &ds.pairs_train };
    let mut ppl = Vec::new();
    let mut hook = |_step: usize, p: &ModelParams<f32>| -> xling::Result<()> {
        ppl.push(perplexity(p, &held_out, &vocab)?.ppl);
        Ok(())
    };
    train(&cfg, ModelConfig::desk(vocab.len()), &data, Some(&mut hook)).unwrap();
    assert_eq!(ppl.len(), 5);
    for w in ppl.windows(2) {
        assert!(w[1] < w[0], "{ppl:?}");
    }
}

#[test]
fn checkpoint_round_trip_gives_bitwise_logits() {
    let tmp = TempDir::new().unwrap();
    let mut params = ModelParams::<f32>::init(ModelConfig::desk(97), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in params.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.1f32..0.1);
        }
    }
    let path = tmp.path().join("model.bin");
    Checkpoint::new(params.clone()).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.params, params);
    for _ in 0..10 {
        let ids: Vec<u32> = (0..rng.random_range(1..20)).map(|_| rng.random_range(0..97)).collect();
        let a = forward(&params, &ids).unwrap();
        let b = forward(&loaded.params, &ids).unwrap();
        let bits = |t: &xling::Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.logits), bits(&b.logits));
    }
}

#[test]
fn corpus_and_vocab_files_round_trip() {
    let tmp = TempDir::new().unwrap();
    let (ds, vocab) = dataset();
    write_corpus(tmp.path().join("pairs.jsonl"), &ds.pairs_train).unwrap();
    assert_eq!(read_corpus(tmp.path().join("pairs.jsonl")).unwrap(), ds.pairs_train);
    write_mono(tmp.path().join("mono.jsonl"), &ds.mono_train).unwrap();
    assert_eq!(read_mono(tmp.path().join("mono.jsonl")).unwrap(), ds.mono_train);
    vocab.save(tmp.path().join("vocab.tsv")).unwrap();
    assert_eq!(Vocab::load(tmp.path().join("vocab.tsv")).unwrap(), vocab);
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let tmp = TempDir::new().unwrap();
    let (ds, vocab) = dataset();
    let data = TrainData { vocab: &vocab, mono: &ds.mono_train, pairs: &ds.pairs_train };
    let cfg = TrainConfig { steps: 20, batch_size: 8, lr: 1e-3, ..TrainConfig::default() };
    let mut texts = Vec::new();
    for i in 0..2 {
        let out = train(&cfg, ModelConfig::desk(vocab.len()), &data, None).unwrap();
        let path = tmp.path().join(format!("metrics{i}.csv"));
        write_metrics_csv(&path, &out.metrics).unwrap();
        texts.push(fs::read(&path).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}
