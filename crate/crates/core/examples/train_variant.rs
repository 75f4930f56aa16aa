//! Pre-trains one variant on the default toy dataset and reports losses and LAC.
//!
//! cargo run --release --example train_variant -- cl 3000

use std::time::Instant;

use xling::eval::{evaluate_lac, perplexity, EmbedLayout, LacConfig};
use xling::experiment::{build_vocab, DESK_BATCH, DESK_LR};
use xling::trainer::{train, TrainData};
use xling::{CorpusConfig, Dataset, Lang, ModelConfig, TrainConfig, Variant};

fn main() -> xling::Result<()> {
    let mut args = std::env::args().skip(1);
    let variant: Variant = args.next().as_deref().unwrap_or("cl").parse()?;
    let steps: usize = args.next().map_or(3000, |s| s.parse().expect("steps"));
    let lr: f64 = args.next().map_or(DESK_LR, |s| s.parse().expect("lr"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let batch_size: usize = args.next().map_or(DESK_BATCH, |s| s.parse().expect("batch size"));

    let ds = Dataset::generate(&CorpusConfig::default())?;
    let vocab = build_vocab(&ds);
    let data = TrainData {
        vocab: &vocab,
        mono: &ds.mono_train,
        pairs: &ds.pairs_train,
    };
    let cfg = TrainConfig {
        variant,
        steps,
        lr,
        seed,
        batch_size,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(&cfg, ModelConfig::desk(vocab.len()), &data, None)?;
    let secs = t0.elapsed().as_secs_f64();
    for row in out.metrics.iter().step_by((steps / 10).max(1)) {
        println!("step {:5} lr {:.2e} total {:.3} ntp {:.3} cl {:.3}", row.step, row.lr, row.loss_total, row.loss_ntp, row.loss_cl);
    }
    println!("{steps} steps in {secs:.1}s ({:.1} ms/step), vocab {}", secs * 1e3 / steps as f64, vocab.len());
    let params = &out.checkpoint.params;
    for layout in [EmbedLayout::Eos, EmbedLayout::LastWord] {
        let cfg = LacConfig { layout, ..LacConfig::default() };
        let lac = evaluate_lac(params, &vocab, &ds.pairs_eval, &cfg)?;
        println!("LAC[{layout}] {:.3} per-layer {:?}", lac.lac, lac.per_layer_cos);
    }
    if let Ok(path) = std::env::var("XLING_SAVE") {
        out.checkpoint.save(path)?;
    }
    let ppl = perplexity(params, &ds.mono_eval_for(Lang::Alpha), &vocab)?;
    println!("Alpha ppl {:.3}", ppl.ppl);
    Ok(())
}
