use std::fs;
use std::path::{Path, PathBuf};

use tempfile::TempDir;
use xling::cli::{run_with_args, DETAIL_FILE, SUMMARY_FILE};
use xling::corpus::{read_corpus, write_corpus};
use xling::experiment::{
    DataManifest, ExperimentConfig, RunManifest, LAC_FILE, MANIFEST, METRICS_FILE, MT_FILE, PPL_FILE,
};
use xling::eval::{LacRow, LAC_HEADER, MT_HEADER, PPL_HEADER};
use xling::objectives::Task;

fn small_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.mono_alpha = 120;
    cfg.corpus.mono_beta = 40;
    cfg.corpus.mono_gamma = 20;
    cfg.corpus.pairs_alpha_beta = 60;
    cfg.corpus.pairs_alpha_gamma = 20;
    cfg.corpus.eval_pairs = 12;
    cfg.corpus.eval_mono = 16;
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_layers = 6;
    cfg.model.d_ff = 32;
    cfg.train.steps = 40;
    cfg.train.batch_size = 8;
    cfg.train.lr = 1e-3;
    cfg.finetune.steps = 4;
    cfg.finetune.examples = 16;
    cfg.finetune.batch_size = 4;
    let path = dir.join("config.json");
    cfg.save(&path).unwrap();
    path
}

fn xling(args: &[&str]) -> i32 {
    let mut full = vec!["xling"];
    full.extend_from_slice(args);
    run_with_args(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(tmp: &TempDir, name: &str) -> (PathBuf, PathBuf) {
    let cfg = small_config(tmp.path());
    let data = tmp.path().join(name);
    assert_eq!(xling(&["gen", "--config", s(&cfg), "--seed", "7", "--out", s(&data)]), 0);
    (cfg, data)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_reproducible_and_lists_every_file() {
    let tmp = TempDir::new().unwrap();
    let (_, a) = gen(&tmp, "a");
    let (_, b) = gen(&tmp, "b");
    let ma: DataManifest = read_json(&a.join(MANIFEST));
    let mb: DataManifest = read_json(&b.join(MANIFEST));
    assert_eq!(ma.files, mb.files);
    let mut on_disk: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = ma.files.iter().map(|f| f.name.clone()).collect();
    listed.sort();
    assert_eq!(listed, on_disk);
    for f in &ma.files {
        assert_eq!(f.bytes, fs::metadata(a.join(&f.name)).unwrap().len());
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(xling(&["gen"]), 2);
    assert_eq!(xling(&["frobnicate"]), 2);
    let (cfg, data) = gen(&tmp, "data");
    // refuses to overwrite without --force
    assert_eq!(xling(&["gen", "--config", s(&cfg), "--out", s(&data)]), 2);
    assert_eq!(xling(&["gen", "--config", s(&cfg), "--out", s(&data), "--force"]), 0);
    let runs = tmp.path().join("runs");
    assert_eq!(
        xling(&["train", "--config", s(&cfg), "--data", s(&data), "--variant", "gpt", "--out", s(&runs)]),
        2
    );
    assert_eq!(
        xling(&["train", "--config", s(&cfg), "--data", s(&tmp.path().join("nope")), "--variant", "ntp", "--out", s(&runs)]),
        3
    );
}

#[test]
fn train_eval_compare_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = gen(&tmp, "data");
    let runs = tmp.path().join("runs");
    let train = |variant: &str| {
        xling(&[
            "train", "--config", s(&cfg), "--data", s(&data), "--variant", variant, "--seeds", "1,2",
            "--steps", "50", "--out", s(&runs),
        ])
    };
    assert_eq!(train("ntp,cl"), 0);
    // a finished run is not silently overwritten
    assert_eq!(train("ntp"), 2);

    let metrics = fs::read_to_string(runs.join("cl/seed1").join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 51);
    assert_eq!(metrics.lines().next().unwrap(), "step,lr,loss_total,loss_ntp,loss_cl");

    let ntp: RunManifest = read_json(&runs.join("ntp/seed1").join(MANIFEST));
    let phase = &ntp.phases[0];
    assert_eq!(phase.consumed.cross, 0);
    assert!(phase.tasks.iter().all(|(t, _)| *t == Task::Ntp));

    let cl: RunManifest = read_json(&runs.join("cl/seed1").join(MANIFEST));
    let sched = cl.phases[0].schedule.clone().unwrap();
    let share = sched.ntp_slots as f64 / sched.epoch_size as f64;
    assert!((share - 0.527).abs() < 0.5 / sched.epoch_size as f64, "{share}");
    assert!(!cl.phases[0].completed_epochs.is_empty());
    for e in &cl.phases[0].completed_epochs {
        assert_eq!((e.ntp, e.cross), (sched.ntp_slots, sched.cl_slots()));
    }

    let eval = |out: &Path| {
        xling(&[
            "eval", "--config", s(&cfg), "--data", s(&data), "--variant", "ntp,cl", "--seeds", "1,2",
            "--out", s(out),
        ])
    };
    assert_eq!(eval(&runs), 0);
    let first: Vec<String> = [LAC_FILE, MT_FILE, PPL_FILE]
        .iter()
        .map(|f| fs::read_to_string(runs.join("cl/seed2").join(f)).unwrap())
        .collect();
    assert_eq!(first[0].lines().next().unwrap(), LAC_HEADER);
    assert_eq!(first[1].lines().next().unwrap(), MT_HEADER);
    assert_eq!(first[2].lines().next().unwrap(), PPL_HEADER);
    assert_eq!(eval(&runs), 0);
    for (f, before) in [LAC_FILE, MT_FILE, PPL_FILE].iter().zip(&first) {
        assert_eq!(&fs::read_to_string(runs.join("cl/seed2").join(f)).unwrap(), before);
    }

    assert_eq!(xling(&["compare", "--out", s(&runs)]), 0);
    let detail = fs::read_to_string(runs.join(DETAIL_FILE)).unwrap();
    let summary = fs::read_to_string(runs.join(SUMMARY_FILE)).unwrap();
    assert_eq!(detail.lines().count(), 1 + 4);
    assert_eq!(summary.lines().count(), 1 + 2);
    let order: Vec<&str> = detail.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(order, ["cl", "cl", "ntp", "ntp"]);
}

#[test]
fn identical_pair_file_is_flagged_degenerate() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = gen(&tmp, "data");
    let runs = tmp.path().join("runs");
    assert_eq!(
        xling(&["train", "--config", s(&cfg), "--data", s(&data), "--variant", "ntp", "--steps", "5", "--out", s(&runs)]),
        0
    );
    let eval_pairs = read_corpus(data.join(xling::experiment::PAIRS_EVAL)).unwrap();
    let same: Vec<_> = eval_pairs
        .into_iter()
        .map(|mut p| {
            p.tgt = p.src.clone();
            p.tgt_lang = p.src_lang;
            p
        })
        .collect();
    let pairs = tmp.path().join("same.jsonl");
    write_corpus(&pairs, &same).unwrap();
    let out = tmp.path().join("report");
    let ckpt = runs.join("ntp/seed1/checkpoint.bin");
    assert_eq!(
        xling(&[
            "eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--pairs", s(&pairs),
            "--finetune-steps", "0", "--out", s(&out),
        ]),
        0
    );
    let rows: Vec<LacRow> = xling::eval::read_csv(out.join(LAC_FILE)).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].degenerate);
    assert!(rows[0].lac.is_infinite());
}

#[test]
fn checkpoint_for_another_vocabulary_is_a_format_error() {
    let tmp = TempDir::new().unwrap();
    let (cfg, data) = gen(&tmp, "data");
    let runs = tmp.path().join("runs");
    assert_eq!(
        xling(&["train", "--config", s(&cfg), "--data", s(&data), "--variant", "ntp", "--steps", "2", "--out", s(&runs)]),
        0
    );
    let other = tmp.path().join("other");
    assert_eq!(
        xling(&["gen", "--config", s(&cfg), "--lexicon-size", "60", "--out", s(&other)]),
        0
    );
    let ckpt = runs.join("ntp/seed1/checkpoint.bin");
    assert_eq!(
        xling(&["eval", "--config", s(&cfg), "--data", s(&other), "--checkpoint", s(&ckpt), "--out", s(&tmp.path().join("r"))]),
        3
    );
}
