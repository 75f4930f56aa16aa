//! Generates the toy languages and prints a few aligned sentences.
//!
//! cargo run --release --example gen_corpus -- [OUT_DIR]

use std::path::PathBuf;

use xling::experiment::{build_vocab, write_dataset};
use xling::{CorpusConfig, Dataset, Lang};

fn main() -> xling::Result<()> {
    let cfg = CorpusConfig::default();
    let ds = Dataset::generate(&cfg)?;
    let w = &ds.world;
    println!(
        "lexicon {} words; word order alpha {:?}, beta {:?}, gamma {:?}",
        w.lexicon.len(),
        w.alpha.word_order,
        w.beta.word_order,
        w.gamma.word_order
    );
    println!(
        "{} mono train, {} mono eval, {} train pairs (both directions), {} eval pairs, vocab {}",
        ds.mono_train.len(),
        ds.mono_eval.len(),
        ds.pairs_train.len(),
        ds.pairs_eval.len(),
        build_vocab(&ds).len()
    );

    for p in ds.pairs_eval.iter().take(4) {
        let gamma = w.alpha.translate(&p.src, &w.gamma)?;
        println!();
        println!("  alpha: {}", p.src.join(" "));
        println!("  beta:  {}", p.tgt.join(" "));
        println!("  gamma: {}", gamma.join(" "));
    }

    let beta_mono = ds.mono_train.iter().filter(|s| s.lang == Lang::Beta).count();
    println!("\nbeta monolingual sentences: {beta_mono}");

    if let Some(dir) = std::env::args().nth(1).map(PathBuf::from) {
        let manifest = write_dataset(&dir, &ds, &cfg)?;
        for f in &manifest.files {
            println!("{:<18} {:>9} bytes  {}", f.name, f.bytes, &f.sha256[..16]);
        }
    }
    Ok(())
}
