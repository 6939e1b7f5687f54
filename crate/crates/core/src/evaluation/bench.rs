use std::collections::BTreeMap;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{basis_attention, compose_recall_all, BasisMemory, ModelConfig, RankingModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const PHASE_USER: &str = "encode_user_rank";
pub const PHASE_BASIS: &str = "basis_compose";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
    /// Calls per timed repetition; the recorded time is per call.
    pub inner: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ns: vec![10, 50, 200],
            ms: vec![5, 20, 100],
            reps: 30,
            warmup: 5,
            inner: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingRow {
    pub phase: &'static str,
    pub n: usize,
    pub m: usize,
    pub rep: usize,
    pub micros: f64,
}

fn time_per_call(inner: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..inner {
        f()?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e6 / inner as f64)
}

/// Times (a) the ranking user encoder over histories of each length in
/// `ns`, and (b) basis attention plus composition for every `(N, M)` pair,
/// starting from an already computed `u_ra`. When some `N` exceeds the
/// model's history window, the user encoder is timed on a freshly
/// initialized copy whose window fits the longest history; cost depends on
/// shapes only.
pub fn bench_recall_embedding(model: &RankingModel, cfg: &BenchConfig) -> Result<Vec<TimingRow>> {
    if cfg.reps == 0 || cfg.inner == 0 || cfg.ns.is_empty() || cfg.ms.is_empty() {
        return Err(Error::Config("benchmark needs reps, inner, N and M values".into()));
    }
    let max_n = cfg.ns.iter().copied().max().unwrap_or(0);
    let wide;
    let model = if max_n > model.config().history_len {
        wide = RankingModel::new(ModelConfig {
            history_len: max_n,
            ..model.config().clone()
        })?;
        &wide
    } else {
        model
    };
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let memories: Vec<BasisMemory> = cfg
        .ms
        .iter()
        .map(|&m| BasisMemory::new(m, d, cfg.seed.wrapping_add(m as u64)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for &n in &cfg.ns {
        let history: Vec<Vec<f64>> = (0..n)
            .map(|_| Tensor::uniform(&[d], 0.5, &mut rng).into_data())
            .collect();
        let mut u_ra = Vec::new();
        let mut encode = || -> Result<()> {
            u_ra = black_box(model.encode_user_rank(black_box(&history))?);
            Ok(())
        };
        for _ in 0..cfg.warmup {
            time_per_call(cfg.inner, &mut encode)?;
        }
        for rep in 0..cfg.reps {
            rows.push(TimingRow {
                phase: PHASE_USER,
                n,
                m: 0,
                rep,
                micros: time_per_call(cfg.inner, &mut encode)?,
            });
        }
        for (mem, &m) in memories.iter().zip(&cfg.ms) {
            let mut compose = || -> Result<()> {
                let w = basis_attention(black_box(&u_ra), mem)?;
                black_box(compose_recall_all(&w, mem)?);
                Ok(())
            };
            for _ in 0..cfg.warmup {
                time_per_call(cfg.inner, &mut compose)?;
            }
            for rep in 0..cfg.reps {
                rows.push(TimingRow {
                    phase: PHASE_BASIS,
                    n,
                    m,
                    rep,
                    micros: time_per_call(cfg.inner, &mut compose)?,
                });
            }
        }
    }
    Ok(rows)
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from("phase,N,M,rep,micros\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.phase, r.n, r.m, r.rep, r.micros));
    }
    out
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median per `(phase, N, M)`.
pub fn medians(rows: &[TimingRow]) -> BTreeMap<(&'static str, usize, usize), f64> {
    let mut groups: BTreeMap<(&'static str, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.phase, r.n, r.m)).or_default().push(r.micros);
    }
    groups.into_iter().map(|(k, v)| (k, median(&v))).collect()
}

/// The complexity claims checked against measured medians.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityCheck {
    /// Basis step median at the largest N over the smallest, at the middle M.
    pub n_ratio: f64,
    pub n_independent: bool,
    pub user_increasing: bool,
    pub m_increasing: bool,
}

pub fn complexity_check(rows: &[TimingRow], cfg: &BenchConfig) -> Option<ComplexityCheck> {
    let med = medians(rows);
    let (&n_lo, &n_hi) = (cfg.ns.iter().min()?, cfg.ns.iter().max()?);
    let (&m_lo, &m_hi) = (cfg.ms.iter().min()?, cfg.ms.iter().max()?);
    let m_mid = cfg.ms[cfg.ms.len() / 2];
    let n_ratio = med.get(&(PHASE_BASIS, n_hi, m_mid))? / med.get(&(PHASE_BASIS, n_lo, m_mid))?;
    let mut ns = cfg.ns.clone();
    ns.sort_unstable();
    let user: Vec<f64> = ns
        .iter()
        .map(|&n| med.get(&(PHASE_USER, n, 0)).copied())
        .collect::<Option<_>>()?;
    Some(ComplexityCheck {
        n_ratio,
        n_independent: (0.5..=2.0).contains(&n_ratio),
        user_increasing: user.windows(2).all(|w| w[1] > w[0]),
        m_increasing: med.get(&(PHASE_BASIS, n_lo, m_hi))? > med.get(&(PHASE_BASIS, n_lo, m_lo))?,
    })
}
