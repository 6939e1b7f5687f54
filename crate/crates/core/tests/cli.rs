//! Command-layer behavior on small synthetic runs.

use std::fs;
use std::path::Path;

use unirec::cli::{
    bench, eval, prepare, sweep, train, EvalOptions, RecallChoice, Run, RunConfig, Stage, SweepParam, Task,
    REPORTS_DIR, STAGE1_FILE, STAGE2_FILE,
};
use unirec::evaluation::BenchConfig;
use unirec::Error;

fn small() -> RunConfig {
    let mut cfg = RunConfig::default();
    for pair in [
        "synth_users=60",
        "synth_news=200",
        "synth_impressions_per_user=6",
        "dim=8",
        "heads=2",
        "pool_dim=8",
        "max_epochs=1",
        "max_samples=100",
        "recall_max_samples=100",
        "t=20",
        "m=4",
        "p=2",
    ] {
        cfg.set_pair(pair).unwrap();
    }
    cfg
}

fn prepared(dir: &Path) -> Run {
    prepare(&small(), dir, false).unwrap();
    Run::open(dir, &[]).unwrap()
}

fn opts(recall: RecallChoice) -> EvalOptions {
    EvalOptions {
        checkpoint: None,
        task: Task::Both,
        recall,
        ks: vec![5, 20],
        force: false,
    }
}

#[test]
fn unknown_config_key_is_rejected() {
    let err = RunConfig::from_text("dim = 8\nnot_a_key = 3\n").unwrap_err();
    assert!(matches!(err, Error::Config(ref m) if m.contains("not_a_key")), "{err}");
    assert!(matches!(small().set_pair("dim"), Err(Error::Usage(_))));
    assert!(matches!(small().set("dim", "eight"), Err(Error::Config(_))));
}

#[test]
fn config_text_round_trips() {
    let cfg = small();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back.to_text(), cfg.to_text());
    assert_eq!(back.hash(), cfg.hash());
}

#[test]
fn stage_two_without_stage_one_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path());
    let err = train(&run, Stage::Two, false).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn open_requires_prepare() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(matches!(Run::open(tmp.path(), &[]), Err(Error::Usage(_))));
}

#[test]
fn missing_data_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.data_dir = tmp.path().join("empty").display().to_string();
    fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let err = prepare(&cfg, &tmp.path().join("run"), false).unwrap_err();
    match err {
        Error::Io { ref path, .. } => assert!(path.ends_with("behaviors.tsv") || path.ends_with("news.tsv"), "{err}"),
        other => panic!("expected an I/O error, got {other}"),
    }
}

#[test]
fn synthetic_prepare_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let a = prepare(&small(), &tmp.path().join("a"), false).unwrap();
    let b = prepare(&small(), &tmp.path().join("b"), false).unwrap();
    assert_eq!(a, b);
    assert!(a.impressions > 0 && a.news > 0);
}

#[test]
fn existing_outputs_need_force() {
    let tmp = tempfile::tempdir().unwrap();
    prepared(tmp.path());
    assert!(matches!(prepare(&small(), tmp.path(), false), Err(Error::Usage(_))));
    prepare(&small(), tmp.path(), true).unwrap();
}

#[test]
fn changing_data_keys_after_prepare_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    prepared(tmp.path());
    let err = Run::open(tmp.path(), &["synth_seed=99".into()]).err().expect("refused");
    assert!(matches!(err, Error::Usage(_)), "{err}");
    Run::open(tmp.path(), &["learning_rate=0.01".into()]).unwrap();
}

#[test]
fn full_pipeline_reports_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path());
    let written = train(&run, Stage::Both, false).unwrap();
    assert_eq!(written.len(), 2);
    assert!(run.path(STAGE1_FILE).exists() && run.path(STAGE2_FILE).exists());

    let reports = eval(&run, &opts(RecallChoice::All)).unwrap();
    assert_eq!(reports[0].label, "UniRec");
    assert_eq!(reports[0].task, "rank");
    assert_eq!(reports[1].label, "UniRec(all)");
    assert_eq!(reports[1].task, "recall");
    assert!(tmp.path().join(REPORTS_DIR).join("rank.json").exists());
    assert!(tmp.path().join(REPORTS_DIR).join("recall_all.csv").exists());

    let top = eval(&run, &EvalOptions { task: Task::Recall, ..opts(RecallChoice::Top(2)) }).unwrap();
    assert_eq!(top[0].label, "UniRec(top)");
    let avg = eval(&run, &EvalOptions { task: Task::Recall, ..opts(RecallChoice::Average) }).unwrap();
    assert_eq!(avg[0].label, "YoutubeNet");
    let bad = eval(&run, &EvalOptions { task: Task::Recall, force: true, ..opts(RecallChoice::Top(9)) });
    assert!(matches!(bad, Err(Error::Usage(_)) | Err(Error::Config(_))));

    let rows = sweep(&run, SweepParam::P, &[1, 2, 4, 9], &[10], false).unwrap();
    let ps: Vec<usize> = rows.iter().map(|r| r.value).collect();
    assert_eq!(ps, vec![1, 2, 4]);
    let csv = fs::read_to_string(tmp.path().join("sweep_P.csv")).unwrap();
    assert!(csv.starts_with("parameter,value,metric,recall\n"));
    assert_eq!(csv.lines().count(), 4);

    let cfg = BenchConfig {
        ns: vec![10, 50],
        ms: vec![5, 20],
        reps: 1,
        warmup: 0,
        inner: 1,
        seed: 0,
    };
    let out = bench(&run, None, &cfg, false).unwrap();
    assert!(out.csv.exists());
    assert!(!out.medians.is_empty());
}

#[test]
fn corrupt_checkpoint_is_a_compatibility_error() {
    let tmp = tempfile::tempdir().unwrap();
    let run = prepared(tmp.path());
    train(&run, Stage::One, false).unwrap();
    let path = run.path(STAGE1_FILE);
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes.truncate(mid);
    fs::write(&path, &bytes).unwrap();
    let err = run.checkpoint(None).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)), "{err}");
}
