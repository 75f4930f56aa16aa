//! Trains the cross-lingual mapping task alone on Alpha->Beta pairs and
//! translates held-out sentences greedily.
//!
//! cargo run --release --example toy_translation -- [STEPS]

use xling::eval::translate_and_score;
use xling::experiment::build_vocab;
use xling::model::greedy_decode;
use xling::objectives::build_cl_example;
use xling::tokenizer::EOS;
use xling::trainer::{run_phases, Phase};
use xling::{CorpusConfig, Dataset, Lang, ModelConfig, ModelParams, TrainConfig};

fn main() -> xling::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let ds = Dataset::generate(&CorpusConfig::default())?;
    let vocab = build_vocab(&ds);
    let pairs = ds.train_pairs(Lang::Alpha, Lang::Beta);
    let cross = pairs.iter().map(|p| build_cl_example(p, &vocab)).collect::<xling::Result<Vec<_>>>()?;
    let phase = Phase { name: "cl".into(), steps, ntp: Vec::new(), cross, ratio_ntp: 0.0 };
    let cfg = TrainConfig { lr: 2e-3, batch_size: 16, steps, ..TrainConfig::default() };

    let init = ModelParams::init(ModelConfig::desk(vocab.len()), 1)?;
    let out = run_phases(init, &cfg, &[phase], None)?;
    for row in out.metrics.iter().step_by((steps / 8).max(1)) {
        println!("step {:5}  cl loss {:.3}", row.step, row.loss_cl);
    }

    let params = &out.checkpoint.params;
    let mt = translate_and_score(params, &vocab, &ds.pairs_eval, None)?;
    println!("held-out BLEU {:.3}, exact match {:.3} over {}", mt.bleu, mt.exact_match, mt.n);
    for p in ds.pairs_eval.iter().take(3) {
        let prefix = xling::eval::translation_prefix(p, &vocab, None)?;
        let ids = greedy_decode(params, &prefix, 16)?;
        let gen: Vec<u32> = ids[prefix.len()..].iter().copied().take_while(|&t| t != EOS).collect();
        let out = vocab.decode(&gen)?;
        println!("\n  src: {}\n  ref: {}\n  hyp: {out}", p.src.join(" "), p.tgt.join(" "));
    }
    Ok(())
}
