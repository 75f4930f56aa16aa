//! Perplexity, layer alignment (LAC), toy-MT BLEU / exact match and
//! lexicon induction, plus their CSV reports.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::corpus::{LanguageSpec, MonoSentence, SentencePair};
use crate::error::{Error, Result};
use crate::model::{forward_batch, greedy_decode_batch, sentence_embedding, ModelParams};
use crate::objectives::{build_ntp_example, masked_nll, LabelledBatch, PromptTemplate};
use crate::tensor::Scalar;
use crate::tokenizer::{TokenSequence, Vocab, BOS, EOS, SEP};

/// Sequences per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub ppl: f64,
    pub mean_nll: f64,
    pub n_tokens: usize,
}

/// `exp` of the mean next-token NLL over NTP-layout examples of `sentences`.
pub fn perplexity<T: Scalar>(
    params: &ModelParams<T>,
    sentences: &[MonoSentence],
    vocab: &Vocab,
) -> Result<PplReport> {
    if sentences.is_empty() {
        return Err(Error::EmptyInput("perplexity on empty corpus".into()));
    }
    let examples = sentences
        .iter()
        .map(|s| build_ntp_example(&s.words, vocab))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let seqs: Vec<&TokenSequence> = chunk.iter().map(|e| &e.seq).collect();
        let lb = LabelledBatch::from_sequences(&seqs)?;
        let n: usize = lb.mask.iter().map(|&m| m as usize).sum();
        total += masked_nll(params, &lb)?.as_f64() * n as f64;
        count += n;
    }
    let mean_nll = total / count as f64;
    Ok(PplReport {
        ppl: mean_nll.exp(),
        mean_nll,
        n_tokens: count,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Average each layer's cosine over pairs, then one LAC over layers.
    #[default]
    MeanThenLac,
    /// One LAC per pair, then average.
    PerPairThenMean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::MeanThenLac => "mean_then_lac",
            Aggregation::PerPairThenMean => "per_pair_then_mean",
        })
    }
}

/// Token layout of a sentence fed to the model for embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedLayout {
    /// BOS and words only: the final position is the last word.
    #[default]
    LastWord,
    /// BOS, words, EOS: the final position is the shared end marker.
    Eos,
}

impl fmt::Display for EmbedLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedLayout::Eos => "eos",
            EmbedLayout::LastWord => "last_word",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LacConfig {
    pub layers: Vec<usize>,
    pub aggregation: Aggregation,
    pub layout: EmbedLayout,
}

impl Default for LacConfig {
    fn default() -> Self {
        LacConfig {
            layers: vec![1, 2, 3, 4, 5],
            aggregation: Aggregation::MeanThenLac,
            layout: EmbedLayout::LastWord,
        }
    }
}

impl LacConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Config(format!(
                "LAC needs at least 2 layers, got {:?}",
                self.layers
            )));
        }
        if let Some(&l) = self.layers.iter().find(|&&l| l > n_layers) {
            return Err(Error::Config(format!(
                "layer {l} outside 0..={n_layers}"
            )));
        }
        Ok(())
    }

    /// e.g. `mean_then_lac/last_word[1;2;3;4;5]`
    pub fn policy(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        format!("{}/{}[{}]", self.aggregation, self.layout, layers.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacReport {
    pub per_layer_cos: Vec<f64>,
    pub mean_cos: f64,
    pub std_cos: f64,
    /// `+inf` when `degenerate`.
    pub lac: f64,
    pub degenerate: bool,
    pub pair_count: usize,
    pub aggregation: Aggregation,
}

/// Mean over population standard deviation of per-layer cosines.
pub fn compute_lac(per_layer_cos: &[f64]) -> Result<LacReport> {
    let n = per_layer_cos.len();
    if n < 2 {
        return Err(Error::Config(format!("LAC needs at least 2 layers, got {n}")));
    }
    let mean = per_layer_cos.iter().sum::<f64>() / n as f64;
    let (lo, hi) = per_layer_cos
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &c| (lo.min(c), hi.max(c)));
    // the rounded mean of equal values can sit off them by an ulp
    let std = if lo == hi {
        0.0
    } else {
        (per_layer_cos.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let degenerate = std == 0.0;
    Ok(LacReport {
        per_layer_cos: per_layer_cos.to_vec(),
        mean_cos: mean,
        std_cos: std,
        lac: if degenerate { f64::INFINITY } else { mean / std },
        degenerate,
        pair_count: 0,
        aggregation: Aggregation::MeanThenLac,
    })
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // one sqrt of the product keeps cos(a, a) at exactly 1
    Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Per-pair, per-layer cosines from precomputed embeddings
/// (`src[pair][layer]`, `tgt[pair][layer]`).
pub fn cosines_from_embeddings(
    src: &[Vec<Vec<f64>>],
    tgt: &[Vec<Vec<f64>>],
) -> Result<Vec<Vec<f64>>> {
    if src.len() != tgt.len() {
        return Err(Error::Contract(format!(
            "{} source vs {} target embeddings",
            src.len(),
            tgt.len()
        )));
    }
    src.iter()
        .zip(tgt)
        .enumerate()
        .map(|(pair, (s, t))| {
            s.iter()
                .zip(t)
                .enumerate()
                .map(|(layer, (a, b))| {
                    cosine(a, b).ok_or(Error::DegenerateEmbedding { pair, layer })
                })
                .collect()
        })
        .collect()
}

pub fn embedding_ids<S: AsRef<str>>(
    words: &[S],
    vocab: &Vocab,
    layout: EmbedLayout,
) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode_words(words)?);
    if layout == EmbedLayout::Eos {
        ids.push(EOS);
    }
    Ok(ids)
}

/// Embeddings `[sentence][layer]` of many sentences at the given layers.
pub fn embed_sentences<T: Scalar>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    layers: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(EVAL_CHUNK) {
        for trace in forward_batch(params, chunk)? {
            out.push(
                layers
                    .iter()
                    .map(|&l| {
                        sentence_embedding(&trace, l)
                            .map(|v| v.iter().map(|x| x.as_f64()).collect())
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
    }
    Ok(out)
}

/// `[pair][layer]` cosine between source and target sentence embeddings.
pub fn pair_layer_cosines<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    pairs: &[SentencePair],
    layers: &[usize],
    layout: EmbedLayout,
) -> Result<Vec<Vec<f64>>> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("layer cosines need at least one pair".into()));
    }
    let n_layers = params.config.n_layers;
    if let Some(&l) = layers.iter().find(|&&l| l > n_layers) {
        return Err(Error::Index(format!("layer {l} outside 0..={n_layers}")));
    }
    let src = pairs
        .iter()
        .map(|p| embedding_ids(&p.src, vocab, layout))
        .collect::<Result<Vec<_>>>()?;
    let tgt = pairs
        .iter()
        .map(|p| embedding_ids(&p.tgt, vocab, layout))
        .collect::<Result<Vec<_>>>()?;
    cosines_from_embeddings(
        &embed_sentences(params, &src, layers)?,
        &embed_sentences(params, &tgt, layers)?,
    )
}

/// Mean cosine per layer over all pairs.
pub fn layer_cosines<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    pairs: &[SentencePair],
    layers: &[usize],
    layout: EmbedLayout,
) -> Result<Vec<f64>> {
    let per_pair = pair_layer_cosines(params, vocab, pairs, layers, layout)?;
    Ok(mean_over_pairs(&per_pair))
}

fn mean_over_pairs(per_pair: &[Vec<f64>]) -> Vec<f64> {
    let n = per_pair.len() as f64;
    (0..per_pair[0].len())
        .map(|l| per_pair.iter().map(|row| row[l]).sum::<f64>() / n)
        .collect()
}

/// LAC from a `[pair][layer]` cosine table under either aggregation.
pub fn aggregate_lac(per_pair: &[Vec<f64>], aggregation: Aggregation) -> Result<LacReport> {
    if per_pair.is_empty() {
        return Err(Error::EmptyInput("LAC over zero pairs".into()));
    }
    let mut report = match aggregation {
        Aggregation::MeanThenLac => compute_lac(&mean_over_pairs(per_pair))?,
        Aggregation::PerPairThenMean => {
            let reports = per_pair
                .iter()
                .map(|row| compute_lac(row))
                .collect::<Result<Vec<_>>>()?;
            let n = reports.len() as f64;
            let degenerate = reports.iter().any(|r| r.degenerate);
            LacReport {
                per_layer_cos: mean_over_pairs(per_pair),
                mean_cos: reports.iter().map(|r| r.mean_cos).sum::<f64>() / n,
                std_cos: reports.iter().map(|r| r.std_cos).sum::<f64>() / n,
                lac: if degenerate {
                    f64::INFINITY
                } else {
                    reports.iter().map(|r| r.lac).sum::<f64>() / n
                },
                degenerate,
                pair_count: 0,
                aggregation,
            }
        }
    };
    report.pair_count = per_pair.len();
    report.aggregation = aggregation;
    Ok(report)
}

pub fn evaluate_lac<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    pairs: &[SentencePair],
    cfg: &LacConfig,
) -> Result<LacReport> {
    cfg.validate(params.config.n_layers)?;
    aggregate_lac(
        &pair_layer_cosines(params, vocab, pairs, &cfg.layers, cfg.layout)?,
        cfg.aggregation,
    )
}

fn ngram_counts<S: AsRef<str>>(words: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 in `[0, 1]`: clipped n-gram precisions pooled over the corpus,
/// zero precisions floored at 1e-9, times the brevity penalty.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::EmptyInput("BLEU over zero sentences".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let p = if matches[i] == 0 {
                1e-9
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub n: usize,
    /// Decodes that never produced EOS; these count as wrong.
    pub missing_eos: usize,
    pub hypotheses: Vec<Vec<String>>,
}

/// Decoder input: BOS, optional prompt, source words, SEP.
pub fn translation_prefix(
    pair: &SentencePair,
    vocab: &Vocab,
    prompt: Option<&PromptTemplate>,
) -> Result<Vec<u32>> {
    let mut ids = vec![BOS];
    if let Some(t) = prompt {
        ids.extend(vocab.encode_words(&t.render(pair.src_lang, pair.tgt_lang))?);
    }
    ids.extend(vocab.encode_words(&pair.src)?);
    ids.push(SEP);
    Ok(ids)
}

/// Greedy-decodes every source and scores against the references.
pub fn translate_and_score<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    pairs: &[SentencePair],
    prompt: Option<&PromptTemplate>,
) -> Result<MtReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("translation over zero pairs".into()));
    }
    let prefixes = pairs
        .iter()
        .map(|p| translation_prefix(p, vocab, prompt))
        .collect::<Result<Vec<_>>>()?;
    let max_len = params.config.max_seq_len;
    let longest_ref = pairs.iter().map(|p| p.tgt.len()).max().unwrap_or(0);
    let mut hypotheses = Vec::with_capacity(pairs.len());
    let (mut exact, mut missing_eos) = (0usize, 0usize);
    for (chunk, refs) in prefixes.chunks(EVAL_CHUNK).zip(pairs.chunks(EVAL_CHUNK)) {
        let longest = chunk.iter().map(Vec::len).max().unwrap();
        if longest >= max_len {
            return Err(Error::Length {
                len: longest + 1,
                max: max_len,
            });
        }
        let budget = (longest_ref * 2 + 2).min(max_len - longest);
        let outs = greedy_decode_batch(params, chunk, budget)?;
        for ((out, prefix), pair) in outs.iter().zip(chunk).zip(refs) {
            let gen = &out[prefix.len()..];
            let (body, closed) = match gen.iter().position(|&t| t == EOS) {
                Some(i) => (&gen[..i], true),
                None => (gen, false),
            };
            let words = body
                .iter()
                .map(|&id| vocab.surface(id).map(str::to_owned))
                .collect::<Result<Vec<_>>>()?;
            if !closed {
                missing_eos += 1;
            } else if words == pair.tgt {
                exact += 1;
            }
            hypotheses.push(words);
        }
    }
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    Ok(MtReport {
        bleu: bleu(&hypotheses, &refs)?,
        exact_match: exact as f64 / pairs.len() as f64,
        n: pairs.len(),
        missing_eos,
        hypotheses,
    })
}

/// Share of queries whose nearest key by cosine is their gold key.
/// Ties keep the lowest key index.
pub fn nearest_neighbor_accuracy(queries: &[Vec<f64>], keys: &[Vec<f64>], gold: &[usize]) -> f64 {
    if queries.is_empty() {
        return 0.0;
    }
    let hits = queries
        .iter()
        .zip(gold)
        .filter(|(q, &g)| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (k, key) in keys.iter().enumerate() {
                let c = cosine(q, key).unwrap_or(f64::NEG_INFINITY);
                if c > best.0 {
                    best = (c, k);
                }
            }
            best.1 == g
        })
        .count();
    hits as f64 / queries.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconReport {
    pub accuracy: f64,
    pub n: usize,
    pub layer: usize,
}

/// Embeds every word of `a` and `b` as a one-word sentence and checks that each
/// `a` word's nearest `b` word is its true translation.
pub fn lexicon_induction<T: Scalar>(
    params: &ModelParams<T>,
    vocab: &Vocab,
    a: &LanguageSpec,
    b: &LanguageSpec,
    layer: usize,
    layout: EmbedLayout,
) -> Result<LexiconReport> {
    let pivots: Vec<usize> = (0..a.lexicon_map.len().min(b.lexicon_map.len()))
        .filter(|&i| vocab.id(a.surface(i)).is_ok() && vocab.id(b.surface(i)).is_ok())
        .collect();
    if pivots.is_empty() {
        return Err(Error::EmptyInput("no lexicon words in vocabulary".into()));
    }
    let ids = |spec: &LanguageSpec| -> Result<Vec<Vec<u32>>> {
        pivots
            .iter()
            .map(|&i| embedding_ids(&[spec.surface(i)], vocab, layout))
            .collect()
    };
    let flat = |e: Vec<Vec<Vec<f64>>>| -> Vec<Vec<f64>> {
        e.into_iter().map(|mut v| v.pop().unwrap()).collect()
    };
    let qa = flat(embed_sentences(params, &ids(a)?, &[layer])?);
    let kb = flat(embed_sentences(params, &ids(b)?, &[layer])?);
    let gold: Vec<usize> = (0..pivots.len()).collect();
    Ok(LexiconReport {
        accuracy: nearest_neighbor_accuracy(&qa, &kb, &gold),
        n: pivots.len(),
        layer,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LacRow {
    pub model: String,
    pub pair: String,
    pub layer_policy: String,
    pub mean_cos: f64,
    pub std_cos: f64,
    pub lac: f64,
    pub degenerate: bool,
    pub pair_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtRow {
    pub model: String,
    pub pair: String,
    /// Scaled ×100.
    pub bleu: f64,
    pub exact_match: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub model: String,
    pub lang: String,
    pub ppl: f64,
    pub n_tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LexiconRow {
    pub model: String,
    pub pair: String,
    pub layer: usize,
    pub accuracy: f64,
    pub n: usize,
}

pub const LAC_HEADER: &str = "model,pair,layer_policy,mean_cos,std_cos,lac,degenerate,pair_count";
pub const MT_HEADER: &str = "model,pair,bleu,exact_match,n";
pub const PPL_HEADER: &str = "model,lang,ppl,n_tokens";

impl LacRow {
    pub fn new(model: &str, pair: &str, cfg: &LacConfig, r: &LacReport) -> Self {
        LacRow {
            model: model.into(),
            pair: pair.into(),
            layer_policy: cfg.policy(),
            mean_cos: r.mean_cos,
            std_cos: r.std_cos,
            lac: r.lac,
            degenerate: r.degenerate,
            pair_count: r.pair_count,
        }
    }
}

impl MtRow {
    pub fn new(model: &str, pair: &str, r: &MtReport) -> Self {
        MtRow {
            model: model.into(),
            pair: pair.into(),
            bleu: r.bleu * 100.0,
            exact_match: r.exact_match,
            n: r.n,
        }
    }
}

/// Serializes rows with a header line taken from the field names.
pub fn to_csv<R: Serialize>(rows: &[R], header: &str) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let body = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    let mut s = String::with_capacity(header.len() + 1 + body.len());
    s.push_str(header);
    s.push('\n');
    s.push_str(std::str::from_utf8(&body).expect("csv output is utf-8"));
    Ok(s)
}

pub fn write_csv<R: Serialize>(path: impl AsRef<Path>, rows: &[R], header: &str) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_csv(rows, header)?).map_err(|e| Error::io(path, e))
}

pub fn read_csv<R: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<R>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(words: &str) -> Vec<String> {
        words.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn lac_worked_case() {
        let r = compute_lac(&[0.9, 0.8, 0.7, 0.8, 0.8]).unwrap();
        assert!((r.mean_cos - 0.8).abs() < 1e-12);
        assert!((r.std_cos - 0.0632456).abs() < 1e-6);
        assert!((r.lac - 12.6491).abs() < 1e-3);
        assert!(!r.degenerate);
    }

    #[test]
    fn lac_degenerate_and_short() {
        let r = compute_lac(&[0.4; 5]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.lac, f64::INFINITY);
        assert!(matches!(compute_lac(&[0.5]), Err(Error::Config(_))));
    }

    #[test]
    fn bleu_hand_cases() {
        let h = vec![s("a b c d")];
        assert_eq!(bleu(&h, &h).unwrap(), 1.0);
        let r = vec![s("a b c e")];
        let want = ((0.75f64.ln() + (2.0f64 / 3.0).ln() + 0.5f64.ln() + 1e-9f64.ln()) / 4.0).exp();
        assert!((bleu(&h, &r).unwrap() - want).abs() < 1e-15);
        assert!(bleu(&[s("x y z w")], &[s("a b c d")]).unwrap() <= 1e-6);
        assert!(matches!(bleu(&h, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn bleu_brevity_penalty() {
        let got = bleu(&[s("a b c d")], &[s("a b c d e f")]).unwrap();
        assert!((got - (1.0f64 - 6.0 / 4.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn cosine_table_errors_on_zero_vector() {
        let src = vec![vec![vec![1.0, 0.0]], vec![vec![0.0, 0.0]]];
        let tgt = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 1.0]]];
        match cosines_from_embeddings(&src, &tgt) {
            Err(Error::DegenerateEmbedding { pair: 1, layer: 0 }) => {}
            other => panic!("{other:?}"),
        }
        let ok = cosines_from_embeddings(&src[..1], &tgt[..1]).unwrap();
        assert_eq!(ok, vec![vec![0.0]]);
    }

    #[test]
    fn per_pair_aggregation_flags_degenerate() {
        let table = vec![vec![0.5, 0.6, 0.7], vec![0.3, 0.3, 0.3]];
        let r = aggregate_lac(&table, Aggregation::PerPairThenMean).unwrap();
        assert!(r.degenerate);
        let m = aggregate_lac(&table, Aggregation::MeanThenLac).unwrap();
        assert!(!m.degenerate);
        assert_eq!(m.pair_count, 2);
    }

    #[test]
    fn nearest_neighbor_on_identity() {
        let keys = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(nearest_neighbor_accuracy(&keys, &keys, &[0, 1, 2]), 1.0);
        assert_eq!(nearest_neighbor_accuracy(&keys, &keys, &[1, 0, 2]), 1.0 / 3.0);
    }

    #[test]
    fn csv_headers_match_field_names() {
        let lac = LacRow {
            model: "cl".into(),
            pair: "Alpha-Beta".into(),
            layer_policy: LacConfig::default().policy(),
            mean_cos: 0.5,
            std_cos: 0.0,
            lac: f64::INFINITY,
            degenerate: true,
            pair_count: 3,
        };
        let text = to_csv(&[lac.clone()], LAC_HEADER).unwrap();
        assert_eq!(
            text,
            "model,pair,layer_policy,mean_cos,std_cos,lac,degenerate,pair_count\n\
             cl,Alpha-Beta,mean_then_lac/last_word[1;2;3;4;5],0.5,0.0,inf,true,3\n"
        );
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lac.csv");
        write_csv(&p, &[lac.clone()], LAC_HEADER).unwrap();
        let back: Vec<LacRow> = read_csv(&p).unwrap();
        assert_eq!(back, vec![lac]);
    }
}
