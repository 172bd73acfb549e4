use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use crsfuse::checkpoint::Checkpoint;
use crsfuse::dataset::{read_conversations, Dataset, CONVERSATIONS_FILE};
use crsfuse::finetune::{ndcg_at_10, reciprocal_rank};

const SMALL: [&str; 12] = [
    "--seed",
    "3",
    "--dim",
    "16",
    "--layers",
    "1",
    "--batch-size",
    "16",
    "--set",
    "max_items=10",
    "--set",
    "generator_epochs=2",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crsfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    [args, &SMALL[..]].concat()
}

fn synthetic(dir: &Path) -> String {
    let data = dir.join("data").display().to_string();
    ok(&[
        "gen-synthetic",
        "--out-dir",
        &data,
        "--seed",
        "3",
        "--set",
        "users=50",
        "--set",
        "items=120",
        "--set",
        "attributes=12",
        "--set",
        "history_len=8",
    ]);
    data
}

fn one_line_error(out: &Output) -> String {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr).trim_end().to_string();
    assert_eq!(err.lines().count(), 1, "{err}");
    err
}

#[test]
fn simulate_writes_one_record_per_interaction_and_a_true_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let out = dir.path().join("sim");
    ok(&[
        "simulate",
        "--data-dir",
        &data,
        "--out-dir",
        &out.display().to_string(),
        "--seed",
        "1",
    ]);
    let d = Dataset::load_dir(Path::new(&data)).unwrap();
    let records = read_conversations(&out.join(CONVERSATIONS_FILE), &d.vocab).unwrap();
    assert_eq!(records.len(), d.log.interaction_count());
    let summary = fs::read_to_string(out.join("simulate_summary.tsv")).unwrap();
    let mean =
        records.iter().map(|r| r.attributes.len()).sum::<usize>() as f64 / records.len() as f64;
    assert_eq!(
        summary,
        format!("records\t{}\nmean_attributes\t{mean:.6}\n", records.len())
    );
}

#[test]
fn report_matches_rank_dump_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    ok(&with_small(&[
        "finetune",
        "--data-dir",
        &data,
        "--out-dir",
        &p("ft"),
        "--epochs",
        "2",
    ]));
    for ev in ["ev1", "ev2"] {
        ok(&with_small(&[
            "evaluate",
            "--data-dir",
            &data,
            "--out-dir",
            &p(ev),
            "--checkpoint",
            &p("ft/finetune.ckpt"),
            "--model-name",
            "scratch",
        ]));
    }
    let report = fs::read_to_string(dir.path().join("ev1/report.tsv")).unwrap();
    assert_eq!(
        report,
        fs::read_to_string(dir.path().join("ev2/report.tsv")).unwrap()
    );
    let ranks: Vec<usize> = fs::read_to_string(dir.path().join("ev1/ranks.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|&r| reciprocal_rank(r)).sum::<f64>() / n;
    let ndcg = ranks.iter().map(|&r| ndcg_at_10(r)).sum::<f64>() / n;
    let row = report.lines().nth(1).unwrap();
    assert_eq!(
        row,
        format!("scratch\t{mrr:.6}\t{ndcg:.6}\t{}", ranks.len())
    );
    assert_eq!(
        report.lines().next().unwrap(),
        "model_name\tMRR\tNDCG@10\tnum_records"
    );
}

#[test]
fn ablation_flags_select_the_objectives() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    ok(&with_small(&[
        "pretrain",
        "--data-dir",
        &data,
        "--out-dir",
        &p("nosad"),
        "--epochs",
        "1",
        "--no-sad",
    ]));
    ok(&with_small(&[
        "pretrain",
        "--data-dir",
        &data,
        "--out-dir",
        &p("uni"),
        "--epochs",
        "1",
        "--neg-policy",
        "uniform",
    ]));
    let log = fs::read_to_string(dir.path().join("nosad/pretrain_log.tsv")).unwrap();
    let sad: f64 = log
        .lines()
        .nth(1)
        .unwrap()
        .split('\t')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(sad, 0.0);
    assert!(dir.path().join("nosad/generator.ckpt").exists());
    assert!(!dir.path().join("uni/generator.ckpt").exists());
    let c = Checkpoint::load(&dir.path().join("uni/pretrain.ckpt")).unwrap();
    assert_eq!(c.metadata["config.neg_policy"], "uniform");

    let both = run(&with_small(&[
        "pretrain",
        "--data-dir",
        &data,
        "--out-dir",
        &p("none"),
        "--no-sad",
        "--no-mip",
    ]));
    assert!(one_line_error(&both).contains("nothing to pre-train"));
    let no_gen = run(&with_small(&[
        "pretrain",
        "--data-dir",
        &data,
        "--out-dir",
        &p("nogen"),
        "--set",
        "train_generator=false",
    ]));
    assert!(one_line_error(&no_gen).contains("--generator"));
}

#[test]
fn config_file_sits_between_flags_and_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let conf = dir.path().join("run.conf");
    fs::write(
        &conf,
        "dim = 32\nlayers = 1\nmax_items = 10\nbatch_size = 16\n",
    )
    .unwrap();
    let out = dir.path().join("ft").display().to_string();
    ok(&[
        "finetune",
        "--data-dir",
        &data,
        "--out-dir",
        &out,
        "--config",
        &conf.display().to_string(),
        "--dim",
        "8",
        "--epochs",
        "1",
    ]);
    let c = Checkpoint::load(&dir.path().join("ft/finetune.ckpt")).unwrap();
    assert_eq!(c.metadata["config.dim"], "8");
    assert_eq!(c.metadata["config.layers"], "1");
    assert_eq!(c.metadata["config.heads"], "2");
    assert_eq!(c.model_config().unwrap().dim, 8);
}

#[test]
fn checkpoint_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    ok(&with_small(&[
        "pretrain",
        "--data-dir",
        &data,
        "--out-dir",
        &p("pre"),
        "--epochs",
        "1",
    ]));

    let wider = run(&[
        "finetune",
        "--data-dir",
        &data,
        "--out-dir",
        &p("x"),
        "--checkpoint",
        &p("pre/pretrain.ckpt"),
        "--dim",
        "32",
        "--layers",
        "1",
        "--set",
        "max_items=10",
    ]);
    assert!(one_line_error(&wider).contains("shape"));

    let gen = run(&with_small(&[
        "evaluate",
        "--data-dir",
        &data,
        "--out-dir",
        &p("y"),
        "--checkpoint",
        &p("pre/generator.ckpt"),
    ]));
    assert!(one_line_error(&gen).contains("component"));

    let missing = run(&with_small(&[
        "evaluate",
        "--data-dir",
        &data,
        "--out-dir",
        &p("z"),
    ]));
    assert!(one_line_error(&missing).contains("--checkpoint"));

    let mut bytes = fs::read(dir.path().join("pre/pretrain.ckpt")).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0xff;
    fs::write(dir.path().join("bad.ckpt"), bytes).unwrap();
    let bad = run(&with_small(&[
        "evaluate",
        "--data-dir",
        &data,
        "--out-dir",
        &p("w"),
        "--checkpoint",
        &p("bad.ckpt"),
    ]));
    assert!(one_line_error(&bad).contains("checksum"));
}

#[test]
fn resumed_fine_tuning_continues_the_loss_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let p = |s: &str| dir.path().join(s).display().to_string();
    let common = ["--set", "patience=100", "--set", "dropout=0"];
    ok(&[
        &with_small(&[
            "finetune",
            "--data-dir",
            &data,
            "--out-dir",
            &p("a"),
            "--epochs",
            "4",
        ])[..],
        &common,
    ]
    .concat());
    ok(&[
        &with_small(&[
            "finetune",
            "--data-dir",
            &data,
            "--out-dir",
            &p("b"),
            "--epochs",
            "1",
            "--checkpoint",
            &p("a/finetune.ckpt"),
        ])[..],
        &common,
    ]
    .concat());
    let losses = |d: &str| -> Vec<f64> {
        fs::read_to_string(dir.path().join(d).join("finetune_log.tsv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    // the saved parameters are those of the best validation epoch
    let ckpt = Checkpoint::load(&dir.path().join("a/finetune.ckpt")).unwrap();
    assert_eq!(ckpt.metadata["stage"], "finetune");
    let a = losses("a");
    let valid: Vec<f64> = fs::read_to_string(dir.path().join("a/finetune_log.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let best = (0..valid.len()).fold(0, |b, i| if valid[i] > valid[b] { i } else { b });
    let resumed = losses("b")[0];
    assert!(
        (resumed - a[best]).abs() <= 0.1 * a[best],
        "resumed {resumed} vs saved {}",
        a[best]
    );
}

#[test]
fn busy_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic(dir.path());
    let out = dir.path().join("sim");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".crsfuse.lock"), "1").unwrap();
    let r = run(&[
        "simulate",
        "--data-dir",
        &data,
        "--out-dir",
        &out.display().to_string(),
    ]);
    assert!(one_line_error(&r).contains("in use"));
}

#[test]
fn bad_arguments_exit_nonzero_with_one_line() {
    let r = run(&["pretrain", "--neg-policy", "adversarial"]);
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(
        String::from_utf8_lossy(&r.stderr)
            .trim_end()
            .lines()
            .count(),
        1
    );
    let r = run(&["simulate", "--data-dir", "/nonexistent/crsfuse"]);
    one_line_error(&r);
}
