//! The alignment coefficient on hand-made cosines, then on a fresh model.

use xling::eval::{aggregate_lac, compute_lac, evaluate_lac, Aggregation, EmbedLayout, LacConfig};
use xling::experiment::build_vocab;
use xling::{CorpusConfig, Dataset, ModelConfig, ModelParams};

fn main() -> xling::Result<()> {
    let worked = [0.9, 0.8, 0.7, 0.8, 0.8];
    let r = compute_lac(&worked)?;
    println!("cosines {worked:?}: mean {:.3} std {:.4} lac {:.4}", r.mean_cos, r.std_cos, r.lac);

    // high but uneven similarity can rank below lower, steadier similarity
    for c in [[0.95, 0.6, 0.9, 0.7, 0.95], [0.5, 0.52, 0.49, 0.51, 0.5]] {
        println!("cosines {c:?}: lac {:.2}", compute_lac(&c)?.lac);
    }
    let flat = compute_lac(&[0.8; 5])?;
    println!("flat cosines: degenerate {} lac {}", flat.degenerate, flat.lac);

    let per_pair = vec![vec![0.9, 0.8, 0.85], vec![0.2, 0.6, 0.4]];
    for agg in [Aggregation::MeanThenLac, Aggregation::PerPairThenMean] {
        println!("two pairs, {agg}: lac {:.3}", aggregate_lac(&per_pair, agg)?.lac);
    }

    let ds = Dataset::generate(&CorpusConfig::default())?;
    let vocab = build_vocab(&ds);
    let params = ModelParams::<f32>::init(ModelConfig::desk(vocab.len()), 1)?;
    for layout in [EmbedLayout::LastWord, EmbedLayout::Eos] {
        let cfg = LacConfig { layout, ..LacConfig::default() };
        let r = evaluate_lac(&params, &vocab, &ds.pairs_eval, &cfg)?;
        let cos: Vec<String> = r.per_layer_cos.iter().map(|c| format!("{c:.3}")).collect();
        println!("untrained model, {}: cos [{}] lac {:.2}", cfg.policy(), cos.join(", "), r.lac);
    }
    Ok(())
}
