//! End-to-end experiment plumbing shared by the binary, the examples and the tests:
//! the serializable experiment configuration, on-disk layouts of datasets and
//! runs, and the pretrain → evaluate pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::corpus::{
    read_corpus, read_mono, write_corpus, write_mono, CorpusConfig, Dataset, Lang, World,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_lac, lexicon_induction, perplexity, translate_and_score, LacConfig, LacReport,
    LacRow, LexiconReport, LexiconRow, MtReport, MtRow, PplRow,
};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::PromptTemplate;
use crate::tokenizer::Vocab;
use crate::trainer::{
    finetune, train, write_metrics_csv, EvalHook, FinetuneConfig, PhaseReport, TrainConfig,
    TrainData, TrainOutput, Variant,
};

/// Vocabulary over every word of the three languages plus the prompt words.
pub fn build_vocab(ds: &Dataset) -> Vocab {
    let w = &ds.world;
    let prompts = [PromptTemplate::translate(), PromptTemplate::translate_sentence()];
    Vocab::build(
        w.alpha
            .lexicon_map
            .iter()
            .chain(&w.beta.lexicon_map)
            .chain(&w.gamma.lexicon_map)
            .cloned()
            .chain(prompts.iter().flat_map(|p| p.words())),
    )
}

/// Model shape without the vocabulary size, which comes from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        ModelShape {
            d_model: d.d_model,
            n_heads: d.n_heads,
            n_layers: d.n_layers,
            d_ff: d.d_ff,
            max_seq_len: d.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            dropout_rate: 0.0,
        }
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub lac: LacConfig,
    pub seeds: Vec<u64>,
}

/// Pre-training learning rate for from-scratch desk runs.
pub const DESK_LR: f64 = 3e-3;
pub const DESK_BATCH: usize = 32;
/// Fine-tuning learning rate for from-scratch desk runs.
pub const DESK_FT_LR: f64 = 1e-3;

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusConfig::default(),
            model: ModelShape::default(),
            train: TrainConfig {
                lr: DESK_LR,
                batch_size: DESK_BATCH,
                ..TrainConfig::default()
            },
            finetune: FinetuneConfig {
                lr: DESK_FT_LR,
                ..FinetuneConfig::default()
            },
            lac: LacConfig::default(),
            seeds: vec![1],
        }
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parses a possibly partial config, filling gaps at any depth from [`Default`].
    pub fn from_json(text: &str) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, serde_json::from_str(text)?);
        Ok(serde_json::from_value(base)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    /// Training configuration of one (variant, seed) run.
    pub fn run_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            variant,
            seed,
            ..self.train.clone()
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Name, size and hash of one emitted file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileRecord {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            bytes: data.len() as u64,
            sha256: sha256_hex(&data),
        })
    }
}

pub const MONO_TRAIN: &str = "mono_train.jsonl";
pub const MONO_EVAL: &str = "mono_eval.jsonl";
pub const PAIRS_TRAIN: &str = "pairs_train.jsonl";
pub const PAIRS_EVAL: &str = "pairs_eval.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub corpus: CorpusConfig,
    pub vocab_size: usize,
    pub files: Vec<FileRecord>,
}

/// Writes the corpus files, vocabulary and a manifest into `dir`.
pub fn write_dataset(dir: &Path, ds: &Dataset, cfg: &CorpusConfig) -> Result<DataManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab = build_vocab(ds);
    write_mono(dir.join(MONO_TRAIN), &ds.mono_train)?;
    write_mono(dir.join(MONO_EVAL), &ds.mono_eval)?;
    write_corpus(dir.join(PAIRS_TRAIN), &ds.pairs_train)?;
    write_corpus(dir.join(PAIRS_EVAL), &ds.pairs_eval)?;
    vocab.save(dir.join(VOCAB_FILE))?;
    let files = [MONO_TRAIN, MONO_EVAL, PAIRS_TRAIN, PAIRS_EVAL, VOCAB_FILE]
        .iter()
        .map(|n| FileRecord::of(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DataManifest {
        corpus: cfg.clone(),
        vocab_size: vocab.len(),
        files,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset written by [`write_dataset`]. The language specs are
/// regenerated from the recorded corpus seed.
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Vocab, DataManifest)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DataManifest = serde_json::from_str(&text)?;
    let world = World::generate(manifest.corpus.seed, manifest.corpus.lexicon_size)?;
    let ds = Dataset {
        world,
        mono_train: read_mono(dir.join(MONO_TRAIN))?,
        mono_eval: read_mono(dir.join(MONO_EVAL))?,
        pairs_train: read_corpus(dir.join(PAIRS_TRAIN))?,
        pairs_eval: read_corpus(dir.join(PAIRS_EVAL))?,
    };
    let vocab = Vocab::load(dir.join(VOCAB_FILE))?;
    Ok((ds, vocab, manifest))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAC_FILE: &str = "lac.csv";
pub const MT_FILE: &str = "mt.csv";
pub const PPL_FILE: &str = "ppl.csv";
pub const LEXICON_FILE: &str = "lexicon.csv";

/// `<root>/<variant>/seed<k>`
pub fn run_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(variant.name()).join(format!("seed{seed}"))
}

/// Run name used in report rows, e.g. `cl/seed1`.
pub fn run_name(variant: Variant, seed: u64) -> String {
    format!("{}/seed{seed}", variant.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub lr_schedule: String,
    pub phases: Vec<PhaseReport>,
    pub data_files: Vec<FileRecord>,
    pub files: Vec<FileRecord>,
}

/// Pre-trains one (variant, seed) run in memory.
pub fn pretrain(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    vocab: &Vocab,
    variant: Variant,
    seed: u64,
    hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutput> {
    let data = TrainData {
        vocab,
        mono: &ds.mono_train,
        pairs: &ds.pairs_train,
    };
    train(&cfg.run_config(variant, seed), cfg.model.config(vocab.len()), &data, hook)
}

/// Writes checkpoint, metrics and manifest of a finished run into `dir`.
pub fn save_run(
    dir: &Path,
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    out: &TrainOutput,
    data_files: &[FileRecord],
) -> Result<RunManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
    write_metrics_csv(dir.join(METRICS_FILE), &out.metrics)?;
    let files = [CHECKPOINT_FILE, METRICS_FILE]
        .iter()
        .map(|n| FileRecord::of(&dir.join(n)))
        .collect::<Result<Vec<_>>>()?;
    let run_cfg = cfg.run_config(variant, seed);
    let manifest = RunManifest {
        variant,
        seed,
        config: ExperimentConfig {
            seeds: vec![seed],
            train: run_cfg.clone(),
            ..cfg.clone()
        },
        model: out.checkpoint.params.config,
        lr_schedule: format!(
            "linear warmup over {} steps, cosine decay to 0.1 x lr",
            run_cfg.schedule()?.warmup_steps
        ),
        phases: out.phases.clone(),
        data_files: data_files.to_vec(),
        files,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Loads a checkpoint and checks it against the vocabulary it will be used with.
pub fn load_checked(path: &Path, vocab: &Vocab) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.params.config.vocab_size != vocab.len() {
        return Err(Error::Format {
            offset: 8,
            msg: format!(
                "checkpoint vocab_size {} does not match vocabulary of {} entries",
                ck.params.config.vocab_size,
                vocab.len()
            ),
        });
    }
    Ok(ck)
}

/// All measurements of one pre-trained model.
#[derive(Clone, Debug)]
pub struct EvalBundle {
    pub ppl: Vec<PplRow>,
    pub lac: LacReport,
    pub lac_row: LacRow,
    pub lexicon: LexiconReport,
    pub lexicon_row: LexiconRow,
    pub mt: MtReport,
    pub mt_row: MtRow,
}

/// Options for [`evaluate_model`].
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Replaces the held-out pairs used for LAC.
    pub lac_pairs: Option<Vec<crate::corpus::SentencePair>>,
}

/// Perplexity per language, Alpha–Beta LAC and lexicon induction on the
/// pre-trained weights, then instruction fine-tuning and Alpha→Beta toy MT.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    vocab: &Vocab,
    params: &ModelParams<f32>,
    name: &str,
    opts: &EvalOptions,
) -> Result<EvalBundle> {
    let mut ppl = Vec::new();
    for lang in Lang::ALL {
        let sents = ds.mono_eval_for(lang);
        if sents.is_empty() {
            continue;
        }
        let r = perplexity(params, &sents, vocab)?;
        ppl.push(PplRow {
            model: name.into(),
            lang: lang.to_string(),
            ppl: r.ppl,
            n_tokens: r.n_tokens,
        });
    }
    let pair_name = format!("{}-{}", Lang::Alpha, Lang::Beta);
    let lac_pairs = opts.lac_pairs.as_deref().unwrap_or(&ds.pairs_eval);
    let lac = evaluate_lac(params, vocab, lac_pairs, &cfg.lac)?;
    let lac_row = LacRow::new(name, &pair_name, &cfg.lac, &lac);
    let probe_layer = cfg.lac.layers[cfg.lac.layers.len() / 2];
    let lexicon = lexicon_induction(
        params,
        vocab,
        &ds.world.alpha,
        &ds.world.beta,
        probe_layer,
        cfg.lac.layout,
    )?;
    let lexicon_row = LexiconRow {
        model: name.into(),
        pair: pair_name.clone(),
        layer: lexicon.layer,
        accuracy: lexicon.accuracy,
        n: lexicon.n,
    };
    let ft = &cfg.finetune;
    let tuned = if ft.steps == 0 {
        params.clone()
    } else {
        finetune(params.clone(), ft, &cfg.train, vocab, &ds.pairs_train)?
            .checkpoint
            .params
    };
    let eval_pairs: Vec<_> = ds
        .pairs_eval
        .iter()
        .filter(|p| p.src_lang == ft.src && p.tgt_lang == ft.tgt)
        .cloned()
        .collect();
    let mt = translate_and_score(&tuned, vocab, &eval_pairs, Some(&ft.template))?;
    let mt_row = MtRow::new(name, &format!("{}-{}", ft.src, ft.tgt), &mt);
    Ok(EvalBundle {
        ppl,
        lac,
        lac_row,
        lexicon,
        lexicon_row,
        mt,
        mt_row,
    })
}

/// Writes the four report CSVs of one model into `dir`.
pub fn save_eval(dir: &Path, b: &EvalBundle) -> Result<()> {
    use crate::eval::{write_csv, LAC_HEADER, MT_HEADER, PPL_HEADER};
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(dir.join(PPL_FILE), &b.ppl, PPL_HEADER)?;
    write_csv(dir.join(LAC_FILE), std::slice::from_ref(&b.lac_row), LAC_HEADER)?;
    write_csv(dir.join(MT_FILE), std::slice::from_ref(&b.mt_row), MT_HEADER)?;
    write_csv(
        dir.join(LEXICON_FILE),
        std::slice::from_ref(&b.lexicon_row),
        "model,pair,layer,accuracy,n",
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial = ExperimentConfig::from_json(r#"{"train": {"steps": 5}}"#).unwrap();
        assert_eq!(partial.train.steps, 5);
        assert_eq!(partial.train.lr, DESK_LR);
        assert_eq!(partial.finetune.lr, DESK_FT_LR);
        assert!(ExperimentConfig::from_json(r#"{"train": {"steps": "many"}}"#).is_err());
        assert_eq!(partial.model, ModelShape::default());
    }

    #[test]
    fn vocab_covers_corpus_and_prompts() {
        let ds = Dataset::generate(&CorpusConfig {
            lexicon_size: 40,
            mono_alpha: 20,
            mono_beta: 5,
            mono_gamma: 5,
            pairs_alpha_beta: 10,
            pairs_alpha_gamma: 5,
            eval_pairs: 5,
            eval_mono: 5,
            ..CorpusConfig::default()
        })
        .unwrap();
        let v = build_vocab(&ds);
        assert_eq!(v.len(), 4 + 3 * 40 + PromptTemplate::translate_sentence().words().len() + 2);
        for s in &ds.mono_train {
            v.encode_words(&s.words).unwrap();
        }
    }
}
