//! Command-line front end: a `key = value` run configuration and the
//! prepare, train, eval, sweep, bench and synth subcommands, each working in
//! one run directory.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::evaluation::BenchConfig;

pub use commands::{
    bench, eval, load_dataset, prepare, sweep, sweep_csv, synth, train, BenchOutcome,
    EvalOptions, RecallChoice, Run, Stage, SweepParam, SweepRow, Task, BENCH_FILE, CONFIG_FILE,
    DATASET_FILE, DEFAULT_RECALL_KS, LOG_FILE, REPORTS_DIR, STAGE1_FILE, STAGE2_FILE,
    SUMMARY_FILE, VOCAB_FILE,
};
pub use config::{RunConfig, DATA_KEYS, DATA_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "unirec", version, about = "Unified news recall and ranking")]
pub struct Cli {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run directory; defaults to the `run_dir` key.
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Rank,
    Recall,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    All,
    Top,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    /// Mean of clicked-news embeddings.
    Average,
    /// Uniform random queries, for the chance level.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ParamArg {
    #[value(name = "M")]
    M,
    #[value(name = "P")]
    P,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse or generate the dataset and cache it in the run directory.
    Prepare,
    /// Train stage 1, stage 2, or both in sequence.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: StageArg,
    },
    /// Write ranking and/or recall reports for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "both")]
        task: TaskArg,
        #[arg(long, value_enum, default_value = "all")]
        mode: ModeArg,
        /// Kept bases for `--mode top`; defaults to the `p` key.
        #[arg(long)]
        p: Option<usize>,
        /// Evaluate a comparator instead of the basis memory.
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Recall cut-offs.
        #[arg(long = "k", value_delimiter = ',', default_values_t = DEFAULT_RECALL_KS.to_vec())]
        ks: Vec<usize>,
    },
    /// Recall as a function of M (retrains stage 2) or P (test time only).
    Sweep {
        #[arg(long, value_enum)]
        param: ParamArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Recall cut-offs; defaults to 1% of the corpus.
        #[arg(long = "k", value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Time the ranking user encoder and the basis step.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = BenchConfig::default().ns)]
        ns: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = BenchConfig::default().ms)]
        ms: Vec<usize>,
        #[arg(long, default_value_t = BenchConfig::default().reps)]
        reps: usize,
        #[arg(long, default_value_t = BenchConfig::default().warmup)]
        warmup: usize,
        #[arg(long, default_value_t = BenchConfig::default().inner)]
        inner: usize,
    },
    /// Write synthetic data in MIND layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
}

impl Cli {
    /// Configuration from the file and overrides, on top of the defaults.
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &self.set {
            cfg.set_pair(s)?;
        }
        Ok(cfg)
    }

    /// Overrides for an already prepared run: config file lines, then `--set`.
    fn overrides(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            out.extend(
                text.lines()
                    .map(|l| l.split('#').next().unwrap_or("").trim())
                    .filter(|l| !l.is_empty())
                    .map(str::to_string),
            );
        }
        out.extend(self.set.iter().cloned());
        Ok(out)
    }

    fn run_dir(&self, cfg: &RunConfig) -> PathBuf {
        self.run.clone().unwrap_or_else(|| PathBuf::from(&cfg.run_dir))
    }

    fn open(&self) -> Result<Run> {
        let cfg = self.run_config()?;
        Run::open(&self.run_dir(&cfg), &self.overrides()?)
    }
}

/// Runs a parsed command line and returns the process exit status.
pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Prepare => {
            let mut cfg = cli.run_config()?;
            let dir = cli.run_dir(&cfg);
            cfg.run_dir = dir.display().to_string();
            let summary = prepare(&cfg, &dir, cli.force)?;
            println!("{summary}");
        }
        Command::Train { stage } => {
            let run = cli.open()?;
            let stage = match stage {
                StageArg::One => Stage::One,
                StageArg::Two => Stage::Two,
                StageArg::Both => Stage::Both,
            };
            for p in train(&run, stage, cli.force)? {
                println!("{}", p.display());
            }
        }
        Command::Eval {
            checkpoint,
            task,
            mode,
            p,
            baseline,
            ks,
        } => {
            let run = cli.open()?;
            let recall = match (baseline, mode) {
                (Some(BaselineArg::Average), _) => RecallChoice::Average,
                (Some(BaselineArg::Random), _) => RecallChoice::Random,
                (None, ModeArg::All) => RecallChoice::All,
                (None, ModeArg::Top) => RecallChoice::Top(p.unwrap_or(run.config.p)),
            };
            let opts = EvalOptions {
                checkpoint: checkpoint.clone(),
                task: match task {
                    TaskArg::Rank => Task::Rank,
                    TaskArg::Recall => Task::Recall,
                    TaskArg::Both => Task::Both,
                },
                recall,
                ks: ks.clone(),
                force: cli.force,
            };
            for r in eval(&run, &opts)? {
                println!("{r}");
            }
        }
        Command::Sweep { param, values, ks } => {
            let run = cli.open()?;
            let ks = if ks.is_empty() {
                vec![run.config.train_config()?.recall_k(run.data.corpus.len())]
            } else {
                ks.clone()
            };
            let param = match param {
                ParamArg::M => SweepParam::M,
                ParamArg::P => SweepParam::P,
            };
            print!("{}", sweep_csv(param, &sweep(&run, param, values, &ks, cli.force)?));
        }
        Command::Bench {
            checkpoint,
            ns,
            ms,
            reps,
            warmup,
            inner,
        } => {
            let run = cli.open()?;
            let cfg = BenchConfig {
                ns: ns.clone(),
                ms: ms.clone(),
                reps: *reps,
                warmup: *warmup,
                inner: *inner,
                seed: run.config.seed,
            };
            let out = bench(&run, checkpoint.as_deref(), &cfg, cli.force)?;
            for line in &out.medians {
                println!("{line}");
            }
            println!("wrote {}", out.csv.display());
            if let Some(c) = out.check {
                println!(
                    "basis step N ratio {:.3} (N-independent: {}); user encoder increasing in N: {}; M={} slower than M={}: {}",
                    c.n_ratio,
                    c.n_independent,
                    c.user_increasing,
                    cfg.ms.iter().max().copied().unwrap_or(0),
                    cfg.ms.iter().min().copied().unwrap_or(0),
                    c.m_increasing
                );
                if !c.n_independent {
                    return Ok(1);
                }
            }
        }
        Command::Synth { out } => {
            let cfg = cli.run_config()?;
            let summary = synth(&cfg, out, cli.force)?;
            println!("{summary}");
        }
    }
    Ok(0)
}
