//! Pre-training variants, the optimization loop, instruction fine-tuning and
//! the per-step metrics log.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::corpus::{Lang, MonoSentence, SentencePair};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::objectives::{
    build_bi_ntp_example, build_cl_example, build_cli_example, build_ntp_example,
    joint_loss_and_grads, make_mix_schedule, MixSchedule, PromptTemplate, Slot, Task,
    TrainingExample, DEFAULT_NTP_RATIO,
};
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::tokenizer::Vocab;

/// Loss above which a step counts towards divergence.
pub const DIVERGENCE_LOSS: f64 = 20.0;
/// Consecutive high-loss steps that abort a run.
pub const DIVERGENCE_WINDOW: usize = 100;

/// Pre-training recipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Monolingual next-token prediction only.
    NtpOnly,
    /// NTP plus concatenated bilingual pairs, all positions supervised.
    BiNtp,
    /// NTP plus instruction-prompted translation.
    Cli,
    /// NTP plus cross-lingual mapping (target-only supervision, no prompt).
    Cl,
    /// Parallel data split into monolingual sentences.
    ESep,
    /// NTP pre-training, then instruction-formatted pairs for the last phase.
    EPostMt,
    /// Instruction-formatted pairs mixed into pre-training.
    EPreMt,
    /// Same recipe as `Cl`, under the ablation name.
    ECross,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::NtpOnly,
        Variant::BiNtp,
        Variant::Cli,
        Variant::Cl,
        Variant::ESep,
        Variant::EPostMt,
        Variant::EPreMt,
        Variant::ECross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::NtpOnly => "ntp",
            Variant::BiNtp => "bi_ntp",
            Variant::Cli => "cli",
            Variant::Cl => "cl",
            Variant::ESep => "e_sep",
            Variant::EPostMt => "e_post_mt",
            Variant::EPreMt => "e_pre_mt",
            Variant::ECross => "e_cross",
        }
    }

    pub fn valid_names() -> String {
        Variant::ALL.map(Variant::name).join(", ")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "ntp_only" => "ntp",
            other => other,
        };
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == alias)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown variant {s:?}; valid: {}",
                    Variant::valid_names()
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub ratio_ntp: f64,
    /// Share of steps given to the instruction phase of `EPostMt`.
    pub post_mt_fraction: f64,
    /// Evaluation hook period in steps (0 disables it).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Cl,
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            warmup_ratio: 0.01,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 1,
            ratio_ntp: DEFAULT_NTP_RATIO,
            post_mt_fraction: 0.1,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<LrSchedule> {
        LrSchedule::new(self.lr, self.steps, self.warmup_ratio)
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.schedule().map(|_| ())
    }
}

/// Raw training material: monolingual sentences plus parallel pairs.
#[derive(Clone, Debug)]
pub struct TrainData<'a> {
    pub vocab: &'a Vocab,
    pub mono: &'a [MonoSentence],
    pub pairs: &'a [SentencePair],
}

/// A stretch of training drawing from an NTP pool and (optionally) a second pool
/// at a fixed mixture ratio.
#[derive(Clone, Debug)]
pub struct Phase {
    pub name: String,
    pub steps: usize,
    pub ntp: Vec<TrainingExample>,
    pub cross: Vec<TrainingExample>,
    pub ratio_ntp: f64,
}

fn ntp_pool(mono: &[MonoSentence], vocab: &Vocab) -> Result<Vec<TrainingExample>> {
    mono.iter().map(|s| build_ntp_example(&s.words, vocab)).collect()
}

fn pair_pool(
    pairs: &[SentencePair],
    f: impl Fn(&SentencePair) -> Result<TrainingExample>,
) -> Result<Vec<TrainingExample>> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            f(p).map(|mut e| {
                e.pair_id = Some(i);
                e
            })
        })
        .collect()
}

/// Splits a run into phases according to its variant.
pub fn variant_phases(cfg: &TrainConfig, data: &TrainData<'_>) -> Result<Vec<Phase>> {
    let v = data.vocab;
    let ntp = ntp_pool(data.mono, v)?;
    if ntp.is_empty() {
        return Err(Error::EmptyInput("no monolingual training data".into()));
    }
    let needs_pairs = cfg.variant != Variant::NtpOnly;
    if needs_pairs && data.pairs.is_empty() {
        return Err(Error::EmptyInput(format!("variant {} needs parallel data", cfg.variant)));
    }
    let mixed = |cross: Vec<TrainingExample>| Phase {
        name: cfg.variant.name().into(),
        steps: cfg.steps,
        ntp: ntp.clone(),
        cross,
        ratio_ntp: cfg.ratio_ntp,
    };
    let sentence_prompt = PromptTemplate::translate_sentence();
    Ok(match cfg.variant {
        Variant::NtpOnly => vec![Phase {
            name: "ntp".into(),
            steps: cfg.steps,
            ntp: ntp.clone(),
            cross: Vec::new(),
            ratio_ntp: 1.0,
        }],
        Variant::BiNtp => vec![mixed(pair_pool(data.pairs, |p| build_bi_ntp_example(p, v))?)],
        Variant::Cli => vec![mixed(pair_pool(data.pairs, |p| {
            build_cli_example(p, v, &PromptTemplate::translate())
        })?)],
        Variant::Cl | Variant::ECross => vec![mixed(pair_pool(data.pairs, |p| build_cl_example(p, v))?)],
        Variant::ESep => {
            // both directions are present, so every sentence appears once as a source
            vec![mixed(pair_pool(data.pairs, |p| build_ntp_example(&p.src, v))?)]
        }
        Variant::EPreMt => vec![mixed(pair_pool(data.pairs, |p| {
            build_cli_example(p, v, &sentence_prompt)
        })?)],
        Variant::EPostMt => {
            let post = ((cfg.post_mt_fraction * cfg.steps as f64).round() as usize).min(cfg.steps);
            let instr = pair_pool(data.pairs, |p| build_cli_example(p, v, &sentence_prompt))?;
            vec![
                Phase {
                    name: "e_post_mt/pretrain".into(),
                    steps: cfg.steps - post,
                    ntp: ntp.clone(),
                    cross: Vec::new(),
                    ratio_ntp: 1.0,
                },
                Phase {
                    name: "e_post_mt/instruct".into(),
                    steps: post,
                    ntp: Vec::new(),
                    cross: instr,
                    ratio_ntp: 0.0,
                },
            ]
        }
    })
}

/// Cycles through a pool, reshuffling on every pass.
struct PoolCursor {
    order: Vec<usize>,
    pos: usize,
    pass: u64,
    seed: u64,
}

impl PoolCursor {
    fn new(len: usize, seed: u64) -> Self {
        let mut c = PoolCursor {
            order: (0..len).collect(),
            pos: 0,
            pass: 0,
            seed,
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.pass.wrapping_mul(0x9e37_79b9));
        self.order.shuffle(&mut rng);
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.pass += 1;
            self.pos = 0;
            self.shuffle();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Slot counts of one mixture epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub ntp: usize,
    pub cross: usize,
}

/// Draws batches for one phase, following its mixture schedule.
struct Sampler {
    schedule: Option<MixSchedule>,
    fixed: Option<Slot>,
    epoch: u64,
    order: Vec<Slot>,
    pos: usize,
    ntp: Option<PoolCursor>,
    cross: Option<PoolCursor>,
    consumed: u64,
    current: TaskCounts,
    completed_epochs: Vec<TaskCounts>,
}

impl Sampler {
    fn new(phase: &Phase, seed: u64) -> Result<Self> {
        let has_ntp = !phase.ntp.is_empty() && phase.ratio_ntp > 0.0;
        let has_cross = !phase.cross.is_empty() && phase.ratio_ntp < 1.0;
        let (schedule, fixed) = match (has_ntp, has_cross) {
            (true, true) => (
                Some(make_mix_schedule(phase.ntp.len(), phase.cross.len(), phase.ratio_ntp, seed)?),
                None,
            ),
            (true, false) => (None, Some(Slot::Ntp)),
            (false, true) => (None, Some(Slot::Cl)),
            (false, false) => {
                return Err(Error::EmptyInput(format!("phase {} has no examples", phase.name)))
            }
        };
        let epoch_size = schedule
            .as_ref()
            .map_or(phase.ntp.len().max(phase.cross.len()), |s| s.epoch_size);
        let order = match (&schedule, fixed) {
            (Some(s), _) => s.epoch_order(0),
            (None, Some(slot)) => vec![slot; epoch_size],
            _ => unreachable!(),
        };
        Ok(Sampler {
            schedule,
            fixed,
            epoch: 0,
            order,
            pos: 0,
            ntp: has_ntp.then(|| PoolCursor::new(phase.ntp.len(), seed.wrapping_add(101))),
            cross: has_cross.then(|| PoolCursor::new(phase.cross.len(), seed.wrapping_add(202))),
            consumed: 0,
            current: TaskCounts::default(),
            completed_epochs: Vec::new(),
        })
    }

    fn next<'p>(&mut self, phase: &'p Phase) -> &'p TrainingExample {
        if self.pos == self.order.len() {
            self.completed_epochs.push(self.current);
            self.current = TaskCounts::default();
            self.epoch += 1;
            self.pos = 0;
            if let Some(s) = &self.schedule {
                self.order = s.epoch_order(self.epoch);
            } else if let Some(slot) = self.fixed {
                self.order.fill(slot);
            }
        }
        let slot = self.order[self.pos];
        self.pos += 1;
        self.consumed += 1;
        match slot {
            Slot::Ntp => {
                self.current.ntp += 1;
                &phase.ntp[self.ntp.as_mut().unwrap().next()]
            }
            Slot::Cl => {
                self.current.cross += 1;
                &phase.cross[self.cross.as_mut().unwrap().next()]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f32,
    pub loss_ntp: f32,
    pub loss_cl: f32,
}

pub const METRICS_HEADER: &str = "step,lr,loss_total,loss_ntp,loss_cl";

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(rows.len() * 48);
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{},{}\n",
            r.step, r.lr, r.loss_total, r.loss_ntp, r.loss_cl
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Task accounting of one phase, for the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: String,
    pub steps: usize,
    pub schedule: Option<MixSchedule>,
    pub consumed: TaskCounts,
    pub completed_epochs: Vec<TaskCounts>,
    /// Examples by task kind.
    pub tasks: Vec<(Task, usize)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub phases: Vec<PhaseReport>,
}

/// Called every `eval_every` steps (and at step 0) with the current weights.
pub type EvalHook<'h> = dyn FnMut(usize, &ModelParams<f32>) -> Result<()> + 'h;

/// Runs phases back to back under one learning-rate schedule spanning all steps.
pub fn run_phases(
    init: ModelParams<f32>,
    cfg: &TrainConfig,
    phases: &[Phase],
    mut hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutput> {
    let total: usize = phases.iter().map(|p| p.steps).sum();
    let cfg = TrainConfig {
        steps: total,
        ..cfg.clone()
    };
    cfg.validate()?;
    let schedule = cfg.schedule()?;
    let mut params = init;
    let mut opt = AdamW::new(cfg.adamw(), &params);
    let mut metrics = Vec::with_capacity(total);
    let mut reports = Vec::new();
    let mut step = 0usize;
    let mut high_streak = 0usize;
    let mut consumed_total = 0u64;
    if let (Some(h), true) = (hook.as_mut(), cfg.eval_every > 0) {
        h(0, &params)?;
    }
    for (pi, phase) in phases.iter().enumerate() {
        let mut sampler = Sampler::new(phase, cfg.seed.wrapping_add(pi as u64 * 7919))?;
        let mut tasks: Vec<(Task, usize)> = Vec::new();
        for _ in 0..phase.steps {
            let batch: Vec<&TrainingExample> =
                (0..cfg.batch_size).map(|_| sampler.next(phase)).collect();
            for e in &batch {
                match tasks.iter_mut().find(|(t, _)| *t == e.task) {
                    Some((_, n)) => *n += 1,
                    None => tasks.push((e.task, 1)),
                }
            }
            let (loss, grads) = joint_loss_and_grads(&params, &batch).map_err(|e| match e {
                Error::NonFinite(msg) => Error::Divergence {
                    step: step + 1,
                    msg,
                },
                other => other,
            })?;
            let lr = schedule.lr_at(step + 1);
            opt.step(&mut params, &grads, lr).map_err(|e| match e {
                Error::NonFinite(msg) => Error::Divergence {
                    step: step + 1,
                    msg,
                },
                other => other,
            })?;
            step += 1;
            metrics.push(MetricsRow {
                step,
                lr,
                loss_total: loss.total,
                loss_ntp: loss.ntp,
                loss_cl: loss.cl,
            });
            high_streak = if f64::from(loss.total) > DIVERGENCE_LOSS {
                high_streak + 1
            } else {
                0
            };
            if high_streak >= DIVERGENCE_WINDOW {
                return Err(Error::Divergence {
                    step,
                    msg: format!("loss above {DIVERGENCE_LOSS} for {DIVERGENCE_WINDOW} steps"),
                });
            }
            if let (Some(h), true) = (hook.as_mut(), cfg.eval_every > 0 && step % cfg.eval_every == 0) {
                h(step, &params)?;
            }
        }
        consumed_total += sampler.consumed;
        tasks.sort_by_key(|(t, _)| format!("{t:?}"));
        reports.push(PhaseReport {
            name: phase.name.clone(),
            steps: phase.steps,
            schedule: sampler.schedule.clone(),
            consumed: sampler
                .completed_epochs
                .iter()
                .fold(sampler.current, |a, b| TaskCounts {
                    ntp: a.ntp + b.ntp,
                    cross: a.cross + b.cross,
                }),
            completed_epochs: sampler.completed_epochs.clone(),
            tasks,
        });
    }
    let checkpoint = Checkpoint {
        optimizer: Some(OptimizerState::from_adamw(&opt)),
        step: step as u64,
        sampler: [cfg.seed, consumed_total],
        params,
    };
    Ok(TrainOutput {
        checkpoint,
        metrics,
        phases: reports,
    })
}

/// Pre-trains a freshly initialised model with the configured variant.
pub fn train(
    cfg: &TrainConfig,
    model: ModelConfig,
    data: &TrainData<'_>,
    hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainOutput> {
    let init = ModelParams::init(model, cfg.seed)?;
    let phases = variant_phases(cfg, data)?;
    run_phases(init, cfg, &phases, hook)
}

/// Instruction fine-tuning on translation pairs, shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub examples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_ratio: f64,
    pub src: Lang,
    pub tgt: Lang,
    pub template: PromptTemplate,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            examples: 1000,
            batch_size: 16,
            lr: 1e-4,
            warmup_ratio: 0.01,
            src: Lang::Alpha,
            tgt: Lang::Beta,
            template: PromptTemplate::translate(),
        }
    }
}

/// Fine-tunes `params` on the first `examples` pairs of the configured direction.
pub fn finetune(
    params: ModelParams<f32>,
    ft: &FinetuneConfig,
    base: &TrainConfig,
    vocab: &Vocab,
    pairs: &[SentencePair],
) -> Result<TrainOutput> {
    let chosen: Vec<&SentencePair> = pairs
        .iter()
        .filter(|p| p.src_lang == ft.src && p.tgt_lang == ft.tgt)
        .take(ft.examples)
        .collect();
    if chosen.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no {}→{} pairs for fine-tuning",
            ft.src, ft.tgt
        )));
    }
    let cross = chosen
        .iter()
        .map(|p| build_cli_example(p, vocab, &ft.template))
        .collect::<Result<Vec<_>>>()?;
    let cfg = TrainConfig {
        steps: ft.steps,
        batch_size: ft.batch_size,
        lr: ft.lr,
        warmup_ratio: ft.warmup_ratio,
        eval_every: 0,
        ..base.clone()
    };
    let phase = Phase {
        name: "finetune".into(),
        steps: ft.steps,
        ntp: Vec::new(),
        cross,
        ratio_ntp: 0.0,
    };
    run_phases(params, &cfg, &[phase], None)
}
