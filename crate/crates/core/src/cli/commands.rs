use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::corpus::{generate_synthetic, Dataset, DatasetSummary};
use crate::encoders::ComposeMode;
use crate::error::{Error, Result};
use crate::evaluation::{
    bench_recall_embedding, complexity_check, csv_field, encode_all_news, evaluate_ranking,
    evaluate_recall, medians, recall_users, timing_csv, BenchConfig, ComplexityCheck,
    MetricsReport, RecallMethod, RecallUser,
};
use crate::training::{load_checkpoint, train_stage1_named, train_stage2, Checkpoint};

use super::config::{RunConfig, DATA_ROOT_ENV};

pub const CONFIG_FILE: &str = "config.txt";
pub const DATASET_FILE: &str = "dataset.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
pub const LOG_FILE: &str = "train.log";
pub const REPORTS_DIR: &str = "reports";
pub const BENCH_FILE: &str = "bench.csv";

/// Recall cut-offs reported by default.
pub const DEFAULT_RECALL_KS: &[usize] = &[100, 200, 500, 1000];

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)
}

/// Loads or generates the dataset described by `cfg`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let opts = cfg.data_options()?;
    if cfg.is_synthetic() {
        generate_synthetic(&cfg.synthetic_config())?.into_dataset(&opts)
    } else {
        let (train, test) = cfg.data_dirs(data_root().as_deref());
        Dataset::load_mind(&train, &test, &opts)
    }
}

/// A prepared run directory: its configuration and cached dataset.
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub data: Dataset,
}

impl Run {
    /// Opens a prepared run, applying in-memory overrides. Keys that shape
    /// the dataset cannot be overridden after preparation.
    pub fn open(dir: &Path, overrides: &[String]) -> Result<Run> {
        let cfg_path = dir.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::Usage(format!(
                "{} is not a prepared run directory (run `prepare` first)",
                dir.display()
            )));
        }
        let stored = RunConfig::load(&cfg_path)?;
        let mut config = stored.clone();
        for o in overrides {
            config.set_pair(o)?;
        }
        if config.data_part() != stored.data_part() {
            return Err(Error::Usage(
                "data keys can only be set at `prepare` time".into(),
            ));
        }
        config.validate()?;
        let path = dir.join(DATASET_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut data: Dataset = serde_json::from_str(&text)
            .map_err(|e| Error::Compatibility(format!("{}: {e}", path.display())))?;
        data.reindex();
        Ok(Run {
            dir: dir.to_path_buf(),
            config,
            data,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// The given checkpoint, else stage 2 if present, else stage 1.
    pub fn checkpoint(&self, explicit: Option<&Path>) -> Result<Checkpoint> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None if self.path(STAGE2_FILE).exists() => self.path(STAGE2_FILE),
            None => self.path(STAGE1_FILE),
        };
        if !path.exists() {
            return Err(Error::Usage(format!(
                "no checkpoint at {} (run `train` first)",
                path.display()
            )));
        }
        load_checkpoint(&path)
    }

    fn stamp(&self, report: &mut MetricsReport, ckpt: &Checkpoint) {
        report.dataset = self.config.dataset_name();
        report.config_hash = ckpt.config_hash();
        report.seed = self.config.seed;
    }

    /// Recall queries on the test period, with training and validation
    /// clicks excluded from the pool.
    pub fn recall_users(&self) -> Vec<RecallUser> {
        let mut period = self.data.train.clone();
        period.extend(self.data.valid.iter().cloned());
        recall_users(&period, &self.data.test)
    }
}

/// Builds the run directory: config copy, vocabulary, dataset cache and the
/// dataset summary.
pub fn prepare(cfg: &RunConfig, dir: &Path, force: bool) -> Result<DatasetSummary> {
    cfg.validate()?;
    guard(&dir.join(CONFIG_FILE), force)?;
    let data = load_dataset(cfg)?;
    let summary = data.summary();
    write(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    let vocab: String = data.vocab.words().iter().map(|w| format!("{w}\n")).collect();
    write(&dir.join(VOCAB_FILE), &vocab)?;
    let cache = serde_json::to_string(&data).expect("dataset serializes");
    write(&dir.join(DATASET_FILE), &cache)?;
    write(&dir.join(SUMMARY_FILE), &format!("{summary}\n"))?;
    Ok(summary)
}

/// Which training stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
    Both,
}

fn write_log(run: &Run, ckpt: &Checkpoint) -> Result<()> {
    let text: String = ckpt.history.iter().map(|r| format!("{r}\n")).collect();
    write(&run.path(LOG_FILE), &text)
}

/// Runs the requested stages and returns the checkpoint paths written.
pub fn train(run: &Run, stage: Stage, force: bool) -> Result<Vec<PathBuf>> {
    let cfg = run.config.train_config()?;
    let mut written = Vec::new();
    let s1_path = run.path(STAGE1_FILE);
    let s2_path = run.path(STAGE2_FILE);
    let stage1 = if stage == Stage::Two {
        if !s1_path.exists() {
            return Err(Error::Usage(format!(
                "stage 2 needs a stage-1 checkpoint at {}",
                s1_path.display()
            )));
        }
        let ckpt = load_checkpoint(&s1_path)?;
        let mut expected = run.config.model_config();
        expected.vocab_size = ckpt.config.model.vocab_size;
        expected.title_len = ckpt.config.model.title_len;
        ckpt.ensure_model(&expected)?;
        ckpt
    } else {
        guard(&s1_path, force)?;
        if stage == Stage::Both {
            guard(&s2_path, force)?;
        }
        let ckpt = train_stage1_named(
            &run.data,
            &run.config.model_config(),
            &cfg,
            &run.config.dataset_name(),
        )?;
        ckpt.save(&s1_path)?;
        write_log(run, &ckpt)?;
        info!("wrote {}", s1_path.display());
        written.push(s1_path);
        ckpt
    };
    if stage != Stage::One {
        guard(&s2_path, force)?;
        let ckpt = train_stage2(&stage1, &run.data, &cfg)?;
        ckpt.save(&s2_path)?;
        write_log(run, &ckpt)?;
        info!("wrote {}", s2_path.display());
        written.push(s2_path);
    }
    Ok(written)
}

/// Which evaluation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Rank,
    Recall,
    Both,
}

/// Recall query construction requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecallChoice {
    All,
    Top(usize),
    Average,
    Random,
}

impl RecallChoice {
    fn method(self, run: &Run) -> Result<RecallMethod> {
        Ok(match self {
            RecallChoice::All => RecallMethod::UniRec(ComposeMode::All),
            RecallChoice::Top(p) => RecallMethod::UniRec(ComposeMode::Top {
                p,
                weighting: run.config.train_config()?.top_weighting,
            }),
            RecallChoice::Average => RecallMethod::AveragePool,
            RecallChoice::Random => RecallMethod::Random {
                seed: run.config.seed,
            },
        })
    }

    fn stem(self) -> &'static str {
        match self {
            RecallChoice::All => "recall_all",
            RecallChoice::Top(_) => "recall_top",
            RecallChoice::Average => "recall_average",
            RecallChoice::Random => "recall_random",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub task: Task,
    pub recall: RecallChoice,
    pub ks: Vec<usize>,
    pub force: bool,
}

/// Evaluates on the test impressions and writes JSON and CSV reports.
pub fn eval(run: &Run, opts: &EvalOptions) -> Result<Vec<MetricsReport>> {
    let ckpt = run.checkpoint(opts.checkpoint.as_deref())?;
    let dir = run.path(REPORTS_DIR);
    let mut reports = Vec::new();
    if opts.task != Task::Recall {
        guard(&dir.join("rank.json"), opts.force)?;
    }
    if opts.task != Task::Rank {
        guard(&dir.join(format!("{}.json", opts.recall.stem())), opts.force)?;
    }
    if opts.task != Task::Recall {
        let mut r = evaluate_ranking(&ckpt.ranking, &run.data.corpus, &run.data.test)?;
        run.stamp(&mut r, &ckpt);
        r.write(&dir, "rank")?;
        reports.push(r);
    }
    if opts.task != Task::Rank {
        let method = opts.recall.method(run)?;
        if let RecallMethod::UniRec(ComposeMode::Top { p, .. }) = method {
            let m = ckpt.basis.as_ref().map_or(0, |b| b.size());
            if p == 0 || p > m {
                return Err(Error::Config(format!("P = {p} must lie in 1..=M ({m})")));
            }
        }
        let news = encode_all_news(&ckpt.ranking, &run.data.corpus)?;
        let users = run.recall_users();
        let mut r = evaluate_recall(&ckpt.recall_model(), &news, &users, &opts.ks, method)?;
        run.stamp(&mut r, &ckpt);
        r.write(&dir, opts.recall.stem())?;
        reports.push(r);
    }
    Ok(reports)
}

/// Swept quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Basis count, retraining stage 2 per value with `P = M`.
    M,
    /// Test-time kept bases on one stage-2 checkpoint.
    P,
}

/// One point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub k: usize,
    pub recall: f64,
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let name = match param {
        SweepParam::M => "M",
        SweepParam::P => "P",
    };
    let mut out = String::from("parameter,value,metric,recall\n");
    for r in rows {
        out.push_str(&format!(
            "{name},{},{},{}\n",
            r.value,
            csv_field(&format!("Recall@{}", r.k)),
            r.recall
        ));
    }
    out
}

/// Recall as a function of `M` or `P`; writes `sweep_<param>.csv`.
pub fn sweep(
    run: &Run,
    param: SweepParam,
    values: &[usize],
    ks: &[usize],
    force: bool,
) -> Result<Vec<SweepRow>> {
    let csv_path = run.path(match param {
        SweepParam::M => "sweep_M.csv",
        SweepParam::P => "sweep_P.csv",
    });
    guard(&csv_path, force)?;
    let users = run.recall_users();
    let mut rows = Vec::new();
    let mut push = |value: usize, ckpt: &Checkpoint, mode: ComposeMode| -> Result<()> {
        let news = encode_all_news(&ckpt.ranking, &run.data.corpus)?;
        let r = evaluate_recall(&ckpt.recall_model(), &news, &users, ks, RecallMethod::UniRec(mode))?;
        for (&k, m) in ks.iter().zip(&r.metrics) {
            rows.push(SweepRow {
                value,
                k,
                recall: m.mean,
            });
        }
        Ok(())
    };
    match param {
        SweepParam::P => {
            let path = run.path(STAGE2_FILE);
            if !path.exists() {
                return Err(Error::Usage("a P sweep needs a stage-2 checkpoint".into()));
            }
            let ckpt = load_checkpoint(&path)?;
            let m = ckpt.basis.as_ref().map_or(0, |b| b.size());
            let weighting = run.config.train_config()?.top_weighting;
            for &p in values {
                if p == 0 || p > m {
                    warn!("skipping P = {p}: outside 1..={m}");
                    continue;
                }
                push(p, &ckpt, ComposeMode::Top { p, weighting })?;
            }
        }
        SweepParam::M => {
            let path = run.path(STAGE1_FILE);
            if !path.exists() {
                return Err(Error::Usage("an M sweep needs a stage-1 checkpoint".into()));
            }
            let stage1 = load_checkpoint(&path)?;
            let base = run.config.train_config()?;
            for &m in values {
                if m == 0 {
                    warn!("skipping M = 0");
                    continue;
                }
                let cfg = crate::training::TrainConfig { m, p: m, ..base.clone() };
                let ckpt = train_stage2(&stage1, &run.data, &cfg)?;
                push(m, &ckpt, ComposeMode::All)?;
            }
        }
    }
    write(&csv_path, &sweep_csv(param, &rows))?;
    Ok(rows)
}

/// Timing rows, their complexity verdict, and the CSV path.
pub struct BenchOutcome {
    pub csv: PathBuf,
    pub check: Option<ComplexityCheck>,
    pub medians: Vec<String>,
}

pub fn bench(run: &Run, checkpoint: Option<&Path>, cfg: &BenchConfig, force: bool) -> Result<BenchOutcome> {
    let path = run.path(BENCH_FILE);
    guard(&path, force)?;
    if cfg.reps < 2 {
        warn!("reps = {}: medians of so few repetitions are unstable", cfg.reps);
    }
    let ckpt = run.checkpoint(checkpoint)?;
    let rows = bench_recall_embedding(&ckpt.ranking, cfg)?;
    write(&path, &timing_csv(&rows))?;
    let medians = medians(&rows)
        .into_iter()
        .map(|((phase, n, m), t)| format!("{phase} N={n} M={m} median={t:.3}us"))
        .collect();
    Ok(BenchOutcome {
        csv: path,
        check: complexity_check(&rows, cfg),
        medians,
    })
}

/// Writes synthetic data in MIND layout under `out`.
pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<DatasetSummary> {
    guard(&out.join("train").join("behaviors.tsv"), force)?;
    let data = generate_synthetic(&cfg.synthetic_config())?;
    data.write_mind(out)?;
    data.into_dataset(&cfg.data_options()?).map(|d| d.summary())
}
