//! Training-example layouts for every pre-training variant, the masked
//! next-token and cross-lingual losses, and the task mixture schedule.
//!
//! Layouts (`m` is the loss mask on each position):
//!
//! ```text
//! NTP     BOS x… EOS                 m = 0 1… 1
//! CL      BOS src… SEP tgt… EOS      m = 0 0… 0 1… 1
//! BI_NTP  BOS src… SEP tgt… EOS      m = 0 1… 1 1… 1
//! CLI     BOS prompt… src… SEP tgt… EOS   m = 0 0… 0… 0 1… 1
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Lang, SentencePair};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{build_forward, Batch, ModelParams, ParamVars};
use crate::tensor::Scalar;
use crate::tokenizer::{Segment, TokenSequence, Vocab, BOS, EOS, SEP};

/// Share of NTP examples in the default mixture.
pub const DEFAULT_NTP_RATIO: f64 = 0.527;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    Ntp,
    Cl,
    BiNtp,
    Cli,
}

impl Task {
    /// Which term of the joint loss the task feeds.
    pub fn is_cross_lingual(self) -> bool {
        matches!(self, Task::Cl | Task::Cli)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub seq: TokenSequence,
    pub task: Task,
    pub pair_id: Option<usize>,
}

/// Instruction prompt wrapped around translation examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    /// Whitespace-separated words; `{src}` and `{tgt}` are replaced by language names.
    pub pattern: String,
}

impl PromptTemplate {
    /// Machine-translation prompt used by the CLI variant.
    pub fn translate() -> Self {
        PromptTemplate {
            pattern: "Translate the following {src} to {tgt} :".into(),
        }
    }

    /// Prompt of the instruction-format ablations.
    pub fn translate_sentence() -> Self {
        PromptTemplate {
            pattern: "Translate the following {src} sentence into {tgt} .".into(),
        }
    }

    pub fn render(&self, src: Lang, tgt: Lang) -> Vec<String> {
        self.pattern
            .split_whitespace()
            .map(|w| match w {
                "{src}" => src.name().to_owned(),
                "{tgt}" => tgt.name().to_owned(),
                other => other.to_owned(),
            })
            .collect()
    }

    /// Every word the template can emit, for vocabulary building.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .pattern
            .split_whitespace()
            .filter(|w| !w.starts_with('{'))
            .map(str::to_owned)
            .collect();
        out.extend(Lang::ALL.iter().map(|l| l.name().to_owned()));
        out
    }
}

fn encode<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<Vec<u32>> {
    vocab.encode_words(words)
}

pub fn build_ntp_example<S: AsRef<str>>(words: &[S], vocab: &Vocab) -> Result<TrainingExample> {
    if words.is_empty() {
        return Err(Error::EmptyInput("NTP example from empty text".into()));
    }
    let ids = encode(words, vocab)?;
    let mut seq = TokenSequence::default();
    seq.push(BOS, 0, Segment::Special);
    seq.extend(&ids, 1, Segment::Mono);
    seq.push(EOS, 1, Segment::Special);
    Ok(TrainingExample {
        seq,
        task: Task::Ntp,
        pair_id: None,
    })
}

fn paired(
    pair: &SentencePair,
    vocab: &Vocab,
    prompt: Option<&[String]>,
    src_mask: u8,
) -> Result<TokenSequence> {
    if pair.tgt.is_empty() {
        return Err(Error::EmptyTarget);
    }
    if pair.src.is_empty() {
        return Err(Error::EmptyInput("pair with empty source".into()));
    }
    let src = encode(&pair.src, vocab)?;
    let tgt = encode(&pair.tgt, vocab)?;
    let mut seq = TokenSequence::default();
    seq.push(BOS, 0, Segment::Special);
    if let Some(words) = prompt {
        seq.extend(&encode(words, vocab)?, 0, Segment::Prompt);
    }
    seq.extend(&src, src_mask, Segment::Src);
    seq.push(SEP, src_mask, Segment::Special);
    seq.extend(&tgt, 1, Segment::Tgt);
    seq.push(EOS, 1, Segment::Special);
    Ok(seq)
}

/// Cross-lingual mapping: supervise only the target span and its EOS; no prompt.
pub fn build_cl_example(pair: &SentencePair, vocab: &Vocab) -> Result<TrainingExample> {
    Ok(TrainingExample {
        seq: paired(pair, vocab, None, 0)?,
        task: Task::Cl,
        pair_id: None,
    })
}

/// Plain next-token prediction over the concatenated pair.
pub fn build_bi_ntp_example(pair: &SentencePair, vocab: &Vocab) -> Result<TrainingExample> {
    Ok(TrainingExample {
        seq: paired(pair, vocab, None, 1)?,
        task: Task::BiNtp,
        pair_id: None,
    })
}

/// Instruction-formatted translation; prompt and source are unsupervised.
pub fn build_cli_example(
    pair: &SentencePair,
    vocab: &Vocab,
    template: &PromptTemplate,
) -> Result<TrainingExample> {
    let prompt = template.render(pair.src_lang, pair.tgt_lang);
    Ok(TrainingExample {
        seq: paired(pair, vocab, Some(&prompt), 0)?,
        task: Task::Cli,
        pair_id: None,
    })
}

/// Inputs, shifted targets and masks for a batch: position `t` predicts token `t+1`.
#[derive(Clone, Debug)]
pub struct LabelledBatch {
    pub batch: Batch,
    pub targets: Vec<usize>,
    pub mask: Vec<u8>,
}

impl LabelledBatch {
    pub fn from_sequences(seqs: &[&TokenSequence]) -> Result<Self> {
        let ids: Vec<&[u32]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
        let batch = Batch::pad(&ids)?;
        let n = batch.batch * batch.seq;
        let mut targets = vec![0usize; n];
        let mut mask = vec![0u8; n];
        for (b, s) in seqs.iter().enumerate() {
            for t in 0..s.len().saturating_sub(1) {
                targets[b * batch.seq + t] = s.ids[t + 1] as usize;
                mask[b * batch.seq + t] = s.loss_mask[t + 1];
            }
        }
        Ok(LabelledBatch {
            batch,
            targets,
            mask,
        })
    }

    /// Same batch with supervision limited to rows whose example satisfies `keep`.
    fn restricted(&self, keep: &[bool]) -> Vec<u8> {
        let mut m = self.mask.clone();
        for (b, &k) in keep.iter().enumerate() {
            if !k {
                m[b * self.batch.seq..(b + 1) * self.batch.seq].fill(0);
            }
        }
        m
    }
}

/// Mean masked NLL of a labelled batch (no gradients).
pub fn masked_nll<T: Scalar>(params: &ModelParams<T>, lb: &LabelledBatch) -> Result<T> {
    let mut g = Graph::inference();
    let vars = ParamVars::register(&mut g, params, false);
    let act = build_forward(&mut g, &vars, &params.config, &lb.batch)?;
    let loss = g.softmax_cross_entropy(act.logits, &lb.targets, &lb.mask)?;
    g.value(loss).item()
}

fn check_tasks(examples: &[&TrainingExample], cross: bool, what: &str) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::EmptyInput(format!("{what} on empty batch")));
    }
    if let Some(e) = examples.iter().find(|e| e.task.is_cross_lingual() != cross) {
        return Err(Error::Contract(format!("{what} given a {:?} example", e.task)));
    }
    Ok(())
}

/// Next-token loss over NTP / BI_NTP examples: mean over supervised positions.
pub fn ntp_loss<T: Scalar>(params: &ModelParams<T>, examples: &[&TrainingExample]) -> Result<T> {
    check_tasks(examples, false, "ntp_loss")?;
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    masked_nll(params, &LabelledBatch::from_sequences(&seqs)?)
}

/// Cross-lingual loss over CL / CLI examples: mean over target positions.
pub fn cl_loss<T: Scalar>(params: &ModelParams<T>, examples: &[&TrainingExample]) -> Result<T> {
    check_tasks(examples, true, "cl_loss")?;
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    masked_nll(params, &LabelledBatch::from_sequences(&seqs)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss<T> {
    pub total: T,
    pub ntp: T,
    pub cl: T,
}

struct JointGraph {
    total: Var,
    ntp: Option<Var>,
    cl: Option<Var>,
}

fn build_joint<T: Scalar>(
    g: &mut Graph<T>,
    vars: &ParamVars,
    params: &ModelParams<T>,
    examples: &[&TrainingExample],
) -> Result<JointGraph> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("joint_loss on empty batch".into()));
    }
    let seqs: Vec<&TokenSequence> = examples.iter().map(|e| &e.seq).collect();
    let lb = LabelledBatch::from_sequences(&seqs)?;
    let act = build_forward(g, vars, &params.config, &lb.batch)?;
    let cross: Vec<bool> = examples.iter().map(|e| e.task.is_cross_lingual()).collect();
    let mut term = |keep: Vec<bool>| -> Result<Option<Var>> {
        if !keep.iter().any(|&k| k) {
            return Ok(None);
        }
        let mask = lb.restricted(&keep);
        g.softmax_cross_entropy(act.logits, &lb.targets, &mask).map(Some)
    };
    let ntp = term(cross.iter().map(|&c| !c).collect())?;
    let cl = term(cross)?;
    let total = match (ntp, cl) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => unreachable!("nonempty batch has a task"),
    };
    Ok(JointGraph { total, ntp, cl })
}

fn read_joint<T: Scalar>(g: &Graph<T>, j: &JointGraph) -> Result<JointLoss<T>> {
    let part = |v: Option<Var>| v.map_or(Ok(T::zero()), |v| g.value(v).item());
    Ok(JointLoss {
        total: g.value(j.total).item()?,
        ntp: part(j.ntp)?,
        cl: part(j.cl)?,
    })
}

/// `total = ntp + cl`, each the mean over its own examples' supervised
/// positions; an absent task contributes zero.
pub fn joint_loss<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[&TrainingExample],
) -> Result<JointLoss<T>> {
    let mut g = Graph::inference();
    let vars = ParamVars::register(&mut g, params, false);
    let j = build_joint(&mut g, &vars, params, examples)?;
    read_joint(&g, &j)
}

/// Joint loss plus the gradient of `total` for every parameter tensor, in
/// [`ModelParams::named`] order.
pub fn joint_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[&TrainingExample],
) -> Result<(JointLoss<T>, Vec<Vec<T>>)> {
    let mut g = Graph::new();
    let vars = ParamVars::register(&mut g, params, true);
    let j = build_joint(&mut g, &vars, params, examples)?;
    let loss = read_joint(&g, &j)?;
    g.backward(j.total)?;
    let grads = vars
        .all
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
        })
        .collect();
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Ntp,
    Cl,
}

/// Epoch-long interleave of NTP and cross-lingual slots with an exact ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSchedule {
    pub ratio_ntp: f64,
    pub epoch_size: usize,
    pub ntp_slots: usize,
    pub seed: u64,
}

impl MixSchedule {
    pub fn cl_slots(&self) -> usize {
        self.epoch_size - self.ntp_slots
    }

    /// Slot order of one epoch; reshuffled per epoch, counts fixed.
    pub fn epoch_order(&self, epoch: u64) -> Vec<Slot> {
        let mut order: Vec<Slot> = std::iter::repeat_n(Slot::Ntp, self.ntp_slots)
            .chain(std::iter::repeat_n(Slot::Cl, self.cl_slots()))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch));
        order.shuffle(&mut rng);
        order
    }
}

/// One epoch spans both pools; `round(ratio · epoch)` of its slots are NTP.
pub fn make_mix_schedule(n_ntp_pool: usize, n_cl_pool: usize, ratio: f64, seed: u64) -> Result<MixSchedule> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mixture ratio {ratio} outside (0, 1)")));
    }
    if n_ntp_pool == 0 || n_cl_pool == 0 {
        return Err(Error::Config("mixture pools must be nonempty".into()));
    }
    let epoch_size = n_ntp_pool + n_cl_pool;
    let ntp_slots = (ratio * epoch_size as f64).round() as usize;
    Ok(MixSchedule {
        ratio_ntp: ratio,
        epoch_size,
        ntp_slots,
        seed,
    })
}
