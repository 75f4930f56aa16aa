//! The `xling` command line: `gen`, `train`, `eval` and `compare`.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{read_corpus, Dataset, Lang};
use crate::error::{Error, Result};
use crate::eval::{read_csv, write_csv, LacRow, MtRow, PplRow};
use crate::experiment::{
    evaluate_model, load_checked, pretrain, read_dataset, run_dir, run_name, save_eval, save_run,
    write_dataset, EvalOptions, ExperimentConfig, CHECKPOINT_FILE, LAC_FILE, MANIFEST, MT_FILE,
    PPL_FILE,
};
use crate::trainer::Variant;

#[derive(Debug, Parser)]
#[command(name = "xling", version, about = "Toy cross-lingual pre-training experiments")]
pub struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (dataset for `gen`, run root otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Single seed (corpus seed for `gen`, run seed otherwise).
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated run seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy corpora, vocabulary and manifest.
    Gen(GenArgs),
    /// Pre-train one or more variants.
    Train(TrainArgs),
    /// Evaluate trained runs and write ppl/lac/mt CSVs.
    Eval(EvalArgs),
    /// Join per-run CSVs into detail and summary tables.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Alpha-Beta training pairs.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub lexicon_size: Option<usize>,
    #[arg(long)]
    pub eval_pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', required = true)]
    pub variant: Vec<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup_ratio: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Runs to evaluate under `--out`.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<String>,
    /// Evaluate one checkpoint file instead; reports go straight into `--out`.
    #[arg(long, conflicts_with = "variant")]
    pub checkpoint: Option<PathBuf>,
    /// Parallel file replacing the held-out pairs used for LAC.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Instruction fine-tuning steps before translation (0 skips fine-tuning).
    #[arg(long)]
    pub finetune_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Variants to include; defaults to every variant directory under `--out`.
    #[arg(long, value_delimiter = ',')]
    pub variant: Vec<String>,
}

impl Error {
    /// Process exit code: 2 usage, 3 data or format, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 2,
            Error::Divergence { .. } => 4,
            _ => 3,
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match &cli.command {
        Command::Gen(a) => {
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
            }
            if let Some(n) = a.pairs {
                cfg.corpus.pairs_alpha_beta = n;
            }
            if let Some(n) = a.lexicon_size {
                cfg.corpus.lexicon_size = n;
            }
            if let Some(n) = a.eval_pairs {
                cfg.corpus.eval_pairs = n;
            }
            cmd_gen(&cfg, out_dir(cli)?, cli.force)
        }
        Command::Train(a) => {
            apply_seeds(cli, &mut cfg);
            if let Some(v) = a.steps {
                cfg.train.steps = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.warmup_ratio {
                cfg.train.warmup_ratio = v;
            }
            cmd_train(&cfg, &a.data, out_dir(cli)?, &parse_variants(&a.variant)?, cli.force)
        }
        Command::Eval(a) => {
            apply_seeds(cli, &mut cfg);
            if let Some(v) = a.finetune_steps {
                cfg.finetune.steps = v;
            }
            let lac_pairs = a.pairs.as_ref().map(read_corpus).transpose()?;
            let target = match &a.checkpoint {
                Some(c) => EvalTarget::Checkpoint(c),
                None => EvalTarget::Runs(parse_variants(&a.variant)?),
            };
            cmd_eval(&cfg, &a.data, out_dir(cli)?, target, lac_pairs)
        }
        Command::Compare(a) => {
            let variants = if a.variant.is_empty() {
                None
            } else {
                Some(parse_variants(&a.variant)?)
            };
            let seeds = cli.seeds.clone().or_else(|| cli.seed.map(|s| vec![s]));
            let table = cmd_compare(out_dir(cli)?, variants.as_deref(), seeds.as_deref())?;
            print!("{}", table.render());
            Ok(())
        }
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out DIR is required".into()))
}

fn apply_seeds(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    } else if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Err(Error::Usage(format!(
            "no variant given; valid: {}",
            Variant::valid_names()
        )));
    }
    names.iter().map(|n| n.parse()).collect()
}

fn is_nonempty_dir(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(out) && !force {
        return Err(Error::Usage(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let ds = Dataset::generate(&cfg.corpus)?;
    let manifest = write_dataset(out, &ds, &cfg.corpus)?;
    for f in &manifest.files {
        eprintln!("wrote {} ({} bytes)", f.name, f.bytes);
    }
    Ok(())
}

pub fn cmd_train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    variants: &[Variant],
    force: bool,
) -> Result<()> {
    let (ds, vocab, data_manifest) = read_dataset(data)?;
    for &variant in variants {
        for &seed in &cfg.seeds {
            let dir = run_dir(out, variant, seed);
            if is_nonempty_dir(&dir) && !force {
                return Err(Error::Usage(format!(
                    "{} is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
            eprintln!("training {} for {} steps", run_name(variant, seed), cfg.train.steps);
            let result = pretrain(cfg, &ds, &vocab, variant, seed, None)?;
            save_run(&dir, cfg, variant, seed, &result, &data_manifest.files)?;
            if let Some(last) = result.metrics.last() {
                eprintln!(
                    "  final loss {:.4} (ntp {:.4}, cl {:.4})",
                    last.loss_total, last.loss_ntp, last.loss_cl
                );
            }
        }
    }
    Ok(())
}

pub enum EvalTarget<'a> {
    Runs(Vec<Variant>),
    Checkpoint(&'a Path),
}

pub fn cmd_eval(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    target: EvalTarget<'_>,
    lac_pairs: Option<Vec<crate::corpus::SentencePair>>,
) -> Result<()> {
    let (ds, vocab, _) = read_dataset(data)?;
    let opts = EvalOptions { lac_pairs };
    let jobs: Vec<(String, PathBuf, PathBuf)> = match target {
        EvalTarget::Checkpoint(path) => {
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into());
            vec![(name, path.to_path_buf(), out.to_path_buf())]
        }
        EvalTarget::Runs(variants) => variants
            .iter()
            .flat_map(|&v| {
                cfg.seeds.iter().map(move |&s| {
                    let dir = run_dir(out, v, s);
                    (run_name(v, s), dir.join(CHECKPOINT_FILE), dir)
                })
            })
            .collect(),
    };
    for (name, ckpt, dir) in jobs {
        eprintln!("evaluating {name}");
        let ck = load_checked(&ckpt, &vocab)?;
        let b = evaluate_model(cfg, &ds, &vocab, &ck.params, &name, &opts)?;
        save_eval(&dir, &b)?;
        eprintln!(
            "  lac {:.4}{} bleu {:.2} exact {:.3}",
            b.lac.lac,
            if b.lac.degenerate { " (degenerate)" } else { "" },
            b.mt_row.bleu,
            b.mt.exact_match
        );
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetailRow {
    pub variant: String,
    pub seed: u64,
    pub lac: f64,
    pub degenerate: bool,
    pub bleu: f64,
    pub exact_match: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub seeds: usize,
    pub lac: f64,
    pub bleu: f64,
    pub exact_match: f64,
    pub ppl: f64,
    /// Metrics on which this variant is best, `;`-separated.
    pub best: String,
}

pub const DETAIL_HEADER: &str = "variant,seed,lac,degenerate,bleu,exact_match,ppl";
pub const SUMMARY_HEADER: &str = "variant,seeds,lac,bleu,exact_match,ppl,best";
pub const DETAIL_FILE: &str = "compare_detail.csv";
pub const SUMMARY_FILE: &str = "compare_summary.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub detail: Vec<DetailRow>,
    pub summary: Vec<SummaryRow>,
    pub warnings: Vec<String>,
}

impl CompareTable {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>10} {:>8} {:>8} {:>9}  best\n",
            "variant", "seeds", "lac", "bleu", "exact", "ppl"
        );
        for r in &self.summary {
            s.push_str(&format!(
                "{:<12} {:>5} {:>10.4} {:>8.2} {:>8.3} {:>9.3}  {}\n",
                r.variant, r.seeds, r.lac, r.bleu, r.exact_match, r.ppl, r.best
            ));
        }
        s
    }
}

fn has_reports(dir: &Path) -> bool {
    [LAC_FILE, MT_FILE, PPL_FILE].iter().all(|f| dir.join(f).is_file())
}

fn discover_variants(root: &Path) -> Result<Vec<Variant>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut out = BTreeSet::new();
    for e in entries.flatten() {
        if let Some(v) = e.file_name().to_str().and_then(|n| n.parse::<Variant>().ok()) {
            if e.path().join(MANIFEST).exists() || e.path().is_dir() {
                out.insert(v);
            }
        }
    }
    Ok(out.into_iter().collect())
}

fn discover_seeds(root: &Path, v: Variant) -> BTreeSet<u64> {
    let dir = root.join(v.name());
    fs::read_dir(&dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let seed = e.file_name().to_str()?.strip_prefix("seed")?.parse().ok()?;
            has_reports(&e.path()).then_some(seed)
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Joins evaluated runs under `root` into per-seed and per-variant tables and
/// writes both CSVs into `root`.
pub fn cmd_compare(
    root: &Path,
    variants: Option<&[Variant]>,
    seeds: Option<&[u64]>,
) -> Result<CompareTable> {
    let mut variants = match variants {
        Some(v) => v.to_vec(),
        None => discover_variants(root)?,
    };
    variants.sort_by_key(|v| v.name());
    variants.dedup();
    let mut per_variant: BTreeMap<&str, BTreeSet<u64>> = BTreeMap::new();
    for &v in &variants {
        let mut found = discover_seeds(root, v);
        if let Some(want) = seeds {
            found.retain(|s| want.contains(s));
        }
        if !found.is_empty() {
            per_variant.insert(v.name(), found);
        }
    }
    if per_variant.len() < 2 {
        return Err(Error::EmptyInput(format!(
            "compare needs at least 2 evaluated variants under {}, found {}",
            root.display(),
            per_variant.len()
        )));
    }
    let mut warnings = Vec::new();
    let common: BTreeSet<u64> = per_variant
        .values()
        .skip(1)
        .fold(per_variant.values().next().unwrap().clone(), |acc, s| {
            acc.intersection(s).copied().collect()
        });
    if per_variant.values().any(|s| *s != common) {
        let w = format!("seed sets differ across variants; comparing the intersection {common:?}");
        eprintln!("warning: {w}");
        warnings.push(w);
    }
    if common.is_empty() {
        return Err(Error::EmptyInput("no seed is shared by all variants".into()));
    }
    let mut detail = Vec::new();
    for name in per_variant.keys() {
        let v: Variant = name.parse()?;
        for &seed in &common {
            let dir = run_dir(root, v, seed);
            let lac: Vec<LacRow> = read_csv(dir.join(LAC_FILE))?;
            let mt: Vec<MtRow> = read_csv(dir.join(MT_FILE))?;
            let ppl: Vec<PplRow> = read_csv(dir.join(PPL_FILE))?;
            let (Some(lac), Some(mt)) = (lac.first(), mt.first()) else {
                return Err(Error::EmptyInput(format!("empty reports in {}", dir.display())));
            };
            let alpha = ppl
                .iter()
                .find(|r| r.lang == Lang::Alpha.name())
                .ok_or_else(|| Error::EmptyInput(format!("no Alpha perplexity in {}", dir.display())))?;
            detail.push(DetailRow {
                variant: name.to_string(),
                seed,
                lac: lac.lac,
                degenerate: lac.degenerate,
                bleu: mt.bleu,
                exact_match: mt.exact_match,
                ppl: alpha.ppl,
            });
        }
    }
    let mut summary: Vec<SummaryRow> = per_variant
        .keys()
        .map(|name| {
            let rows: Vec<&DetailRow> = detail.iter().filter(|r| r.variant == *name).collect();
            SummaryRow {
                variant: name.to_string(),
                seeds: rows.len(),
                lac: mean(rows.iter().map(|r| r.lac)),
                bleu: mean(rows.iter().map(|r| r.bleu)),
                exact_match: mean(rows.iter().map(|r| r.exact_match)),
                ppl: mean(rows.iter().map(|r| r.ppl)),
                best: String::new(),
            }
        })
        .collect();
    mark_best(&mut summary);
    write_csv(root.join(DETAIL_FILE), &detail, DETAIL_HEADER)?;
    write_csv(root.join(SUMMARY_FILE), &summary, SUMMARY_HEADER)?;
    Ok(CompareTable {
        detail,
        summary,
        warnings,
    })
}

/// Highest finite lac, highest bleu, lowest ppl. Ties mark every holder.
fn mark_best(rows: &mut [SummaryRow]) {
    let pick = |rows: &[SummaryRow], f: &dyn Fn(&SummaryRow) -> Option<f64>, high: bool| {
        let vals: Vec<Option<f64>> = rows.iter().map(f).collect();
        let best = vals.iter().flatten().copied().fold(None, |b: Option<f64>, x| match b {
            None => Some(x),
            Some(b) if (high && x > b) || (!high && x < b) => Some(x),
            keep => keep,
        });
        vals.into_iter().map(|v| v.is_some() && v == best).collect::<Vec<bool>>()
    };
    let lac = pick(rows, &|r| r.lac.is_finite().then_some(r.lac), true);
    let bleu = pick(rows, &|r| Some(r.bleu), true);
    let ppl = pick(rows, &|r| Some(r.ppl), false);
    for (i, r) in rows.iter_mut().enumerate() {
        let tags: Vec<&str> = [(lac[i], "lac"), (bleu[i], "bleu"), (ppl[i], "ppl")]
            .into_iter()
            .filter_map(|(b, t)| b.then_some(t))
            .collect();
        r.best = tags.join(";");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &str, lac: f64, bleu: f64, ppl: f64) -> SummaryRow {
        SummaryRow {
            variant: v.into(),
            seeds: 1,
            lac,
            bleu,
            exact_match: 0.0,
            ppl,
            best: String::new(),
        }
    }

    #[test]
    fn best_markers() {
        let mut rows = vec![
            row("a", 3.0, 10.0, 5.0),
            row("b", f64::INFINITY, 20.0, 4.0),
            row("c", 4.0, 20.0, 6.0),
        ];
        mark_best(&mut rows);
        assert_eq!(rows[0].best, "");
        assert_eq!(rows[1].best, "bleu;ppl");
        assert_eq!(rows[2].best, "lac;bleu");
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Usage("x".into()).exit_code(), 2);
        assert_eq!(
            Error::Divergence {
                step: 1,
                msg: String::new()
            }
            .exit_code(),
            4
        );
        assert_eq!(Error::EmptyTarget.exit_code(), 3);
    }
}
