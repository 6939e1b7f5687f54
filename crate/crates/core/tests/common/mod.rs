//! Shared oracles and check suites for the integration tests.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unirec::encoders::{
    basis_attention_graph, compose_recall_all_graph, compose_recall_top_graph, encode_user_graph,
    BasisMemory, ModelConfig, RankingModel, TopWeighting, BASIS_KEYS, BASIS_VALUES,
};
use unirec::evaluation::{auc, brute_force_topk, mrr, ndcg_at_k};
use unirec::numerics::{
    attention_pool, finite_difference_check, kernels, multi_head_self_attention, AttentionParams, Graph,
    ParamStore, PoolingParams, Tensor, Var,
};
use unirec::training::contrastive_loss_graph;
use unirec::Result;

pub const GRAD_EPS: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_POINTS: u64 = 10;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng).with_grad(true)
}

/// Scalar `Σ w ⊙ x` with a fixed random `w`, so no output entry is ignored.
pub fn project(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::uniform(&shape, 1.0, &mut rng(seed ^ 0xABCD)));
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

/// Everything a checked expression may differentiate through.
#[derive(Clone)]
pub struct Owner {
    pub model: RankingModel,
    pub basis: BasisMemory,
    /// Free inputs and stand-alone parameters.
    pub extra: ParamStore,
}

impl Owner {
    pub fn new(seed: u64, residual: bool, layer_norm: bool) -> Owner {
        let model = RankingModel::new(ModelConfig {
            vocab_size: 12,
            dim: 4,
            heads: 2,
            pool_dim: 3,
            title_len: 5,
            history_len: 4,
            user_residual: residual,
            layer_norm,
            seed,
            ..ModelConfig::default()
        })
        .expect("valid model");
        Owner {
            model,
            basis: BasisMemory::new(5, 4, seed + 100).expect("valid basis"),
            extra: ParamStore::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor) {
        self.extra.insert(name, t.with_grad(true)).expect("fresh name");
    }

    pub fn get(&self, name: &str) -> Tensor {
        [self.model.params(), self.basis.params(), &self.extra]
            .into_iter()
            .find_map(|s| s.get(name).ok())
            .expect("known parameter")
            .clone()
    }

    pub fn with(&self, name: &str, t: &Tensor) -> Owner {
        let t = t.clone().with_grad(true);
        let mut out = self.clone();
        if self.model.params().contains(name) {
            let mut p = self.model.params().clone();
            *p.get_mut(name).expect("present") = t;
            out.model = RankingModel::from_params(self.model.config().clone(), p).expect("same shapes");
        } else if self.basis.params().contains(name) {
            let mut keys = self.basis.keys().clone().with_grad(true);
            let mut values = self.basis.values().clone().with_grad(true);
            if name == BASIS_KEYS {
                keys = t;
            } else {
                values = t;
            }
            out.basis = BasisMemory::from_tensors(keys, values).expect("same shapes");
        } else {
            *out.extra.get_mut(name).expect("present") = t;
        }
        out
    }
}

/// Worst relative central-difference error over the named entries.
pub fn check<B>(owner: &Owner, names: &[&str], build: &B) -> f64
where
    B: for<'g> Fn(&mut Graph<'g>, &'g Owner) -> Result<Var>,
{
    names
        .iter()
        .map(|&name| {
            let f = |p: &Tensor| -> Result<(f64, Vec<f64>)> {
                let o = owner.with(name, p);
                let mut g = Graph::new();
                let out = build(&mut g, &o)?;
                let value = g.value(out).data()[0];
                let grads = g.backward(out)?;
                Ok((value, grads.param_dense(name, p.numel())))
            };
            finite_difference_check(f, &owner.get(name), GRAD_EPS).expect("check runs")
        })
        .fold(0.0, f64::max)
}

fn rows(g: &mut Graph<'_>, x: Var, d: usize) -> Result<Vec<Var>> {
    let n = g.value(x).numel() / d;
    (0..n)
        .map(|i| g.take(x, &(i * d..(i + 1) * d).collect::<Vec<_>>()))
        .collect()
}

/// Worst relative finite-difference error per differentiable operation,
/// over `points` seeded random points each.
pub fn gradient_suite(points: u64) -> Vec<(&'static str, f64)> {
    let mut out: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, err: f64| {
        match out.iter_mut().find(|(n, _)| *n == name) {
            Some((_, e)) => *e = e.max(err),
            None => out.push((name, err)),
        }
    };
    for seed in 0..points {
        let mut r = rng(seed);
        let mut o = Owner::new(seed, seed % 2 == 1, seed % 3 == 2);
        o.add("seq", uniform(&[3, 4], &mut r));
        o.add("hist", uniform(&[1, 12], &mut r));
        o.add("u", uniform(&[1, 4], &mut r));
        o.add("cands", uniform(&[5, 4], &mut r));
        o.add("scores", uniform(&[1, 6], &mut r));
        let attn = AttentionParams::named("t.attn");
        let pool = PoolingParams::named("t.pool");
        let mut extra = ParamStore::new();
        attn.init(&mut extra, 4, 0.8, &mut r).unwrap();
        pool.init(&mut extra, 4, 3, 0.8, &mut r).unwrap();
        for (n, t) in extra.iter() {
            o.add(n, t.clone());
        }
        let tokens: Vec<u32> = (0..5).map(|_| r.gen_range(2..12)).collect();

        let attn_names = ["seq", "t.attn.wq", "t.attn.wk", "t.attn.wv", "t.attn.wo"];
        record(
            "multi-head self-attention",
            check(&o, &attn_names, &|g, o| {
                let x = g.param(&o.extra, "seq")?;
                let h = multi_head_self_attention(g, &o.extra, x, &AttentionParams::named("t.attn"), 2)?;
                project(g, h, seed)
            }),
        );

        let pool_names: Vec<String> = ["seq".to_string()]
            .into_iter()
            .chain(extra.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with("t.pool")))
            .collect();
        let pool_names: Vec<&str> = pool_names.iter().map(String::as_str).collect();
        record(
            "attention pooling",
            check(&o, &pool_names, &|g, o| {
                let x = g.param(&o.extra, "seq")?;
                let h = attention_pool(g, &o.extra, x, &PoolingParams::named("t.pool"))?;
                project(g, h, seed)
            }),
        );

        let news_names: Vec<String> = o
            .model
            .params()
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| n.starts_with("news."))
            .collect();
        let news_names: Vec<&str> = news_names.iter().map(String::as_str).collect();
        let toks = tokens.clone();
        record(
            "news encoder",
            check(&o, &news_names, &|g, o| {
                let h = o.model.encode_news_graph(g, &toks, None)?;
                project(g, h, seed)
            }),
        );

        let user_names: Vec<String> = std::iter::once("hist".to_string())
            .chain(
                o.model
                    .params()
                    .iter()
                    .map(|(n, _)| n.to_string())
                    .filter(|n| n.starts_with("user.") && !n.ends_with("cold_start")),
            )
            .collect();
        let user_names: Vec<&str> = user_names.iter().map(String::as_str).collect();
        record(
            "user encoder",
            check(&o, &user_names, &|g, o| {
                let x = g.param(&o.extra, "hist")?;
                let hist = rows(g, x, 4)?;
                let h = encode_user_graph(g, o.model.params(), o.model.config(), &hist, None)?;
                project(g, h, seed)
            }),
        );

        record(
            "basis attention",
            check(&o, &["u", BASIS_KEYS], &|g, o| {
                let u = g.param(&o.extra, "u")?;
                let (_, alpha) = basis_attention_graph(g, &o.basis, u)?;
                project(g, alpha, seed)
            }),
        );

        record(
            "ranking loss",
            check(&o, &["scores"], &|g, o| {
                let s = g.param(&o.extra, "scores")?;
                g.contrastive_nll(s)
            }),
        );

        record(
            "recall loss",
            check(&o, &["u", "cands", BASIS_KEYS, BASIS_VALUES], &|g, o| {
                let u = g.param(&o.extra, "u")?;
                let (_, alpha) = basis_attention_graph(g, &o.basis, u)?;
                let u_re = compose_recall_all_graph(g, &o.basis, alpha)?;
                let c = g.param(&o.extra, "cands")?;
                contrastive_loss_graph(g, u_re, c)
            }),
        );

        record(
            "composition, all bases",
            check(&o, &["u", BASIS_KEYS, BASIS_VALUES], &|g, o| {
                let u = g.param(&o.extra, "u")?;
                let (_, alpha) = basis_attention_graph(g, &o.basis, u)?;
                let u_re = compose_recall_all_graph(g, &o.basis, alpha)?;
                project(g, u_re, seed)
            }),
        );

        for (label, weighting) in [
            ("composition, top-P", TopWeighting::Probabilities),
            ("composition, top-P on logits", TopWeighting::Logits),
        ] {
            record(
                label,
                check(&o, &["u", BASIS_KEYS, BASIS_VALUES], &|g, o| {
                    let u = g.param(&o.extra, "u")?;
                    let (logits, alpha) = basis_attention_graph(g, &o.basis, u)?;
                    let u_re = compose_recall_top_graph(g, &o.basis, logits, alpha, 3, weighting)?;
                    project(g, u_re, seed)
                }),
            );
        }
    }
    out
}

/// Exhaustive pairwise AUC, ties counting one half.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0usize;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li > 0 && lj == 0 {
                pairs += 1;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// 1-based rank of item `i`: items scoring higher, or equal with a lower
/// index, come first.
fn rank_of(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

pub fn mrr_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] > 0).collect();
    (!pos.is_empty()).then(|| {
        pos.iter().map(|&i| 1.0 / rank_of(scores, i) as f64).sum::<f64>() / pos.len() as f64
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for slot in 0..=p.len() {
            let mut q = p.clone();
            q.insert(slot, n - 1);
            out.push(q);
        }
    }
    out
}

/// DCG at the model ranks over the best DCG of any permutation.
pub fn ndcg_oracle(scores: &[f64], labels: &[u8], k: usize) -> Option<f64> {
    if labels.iter().all(|&l| l == 0) {
        return None;
    }
    let gain = |rank: usize, l: u8| {
        if rank <= k {
            l as f64 / ((rank + 1) as f64).log2()
        } else {
            0.0
        }
    };
    let mut ranks: Vec<(usize, usize)> = (0..labels.len()).map(|i| (rank_of(scores, i), i)).collect();
    ranks.sort_unstable();
    let dcg: f64 = ranks.iter().map(|&(r, i)| gain(r, labels[i])).sum();
    let ideal = permutations(labels.len())
        .into_iter()
        .map(|perm| {
            perm.iter()
                .enumerate()
                .map(|(pos, &i)| gain(pos + 1, labels[i]))
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    Some(dcg / ideal)
}

/// Random impression of size 1..=8; scores on a coarse grid so ties occur.
pub fn random_impression(r: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = r.gen_range(1..=8);
    let coarse = r.gen_bool(0.5);
    let scores = (0..n)
        .map(|_| {
            if coarse {
                r.gen_range(0..4) as f64 * 0.5
            } else {
                r.gen_range(-3.0..3.0)
            }
        })
        .collect();
    let labels = (0..n).map(|_| r.gen_bool(0.3) as u8).collect();
    (scores, labels)
}

/// Largest metric disagreement with the oracles over `n` impressions.
pub fn metric_oracle_gap(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut gap = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
        (None, None) => {}
        _ => worst = f64::INFINITY,
    };
    for _ in 0..n {
        let (s, l) = random_impression(&mut r);
        gap(auc(&s, &l).unwrap(), auc_oracle(&s, &l));
        gap(mrr(&s, &l).unwrap(), mrr_oracle(&s, &l));
        for k in [1, 3, 5, 10] {
            gap(ndcg_at_k(&s, &l, k).unwrap(), ndcg_oracle(&s, &l, k));
        }
    }
    worst
}

/// Number of random pools where the top-k differs from a full sort.
pub fn topk_oracle_mismatches(pools: usize, seed: u64) -> usize {
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..pools {
        let n = r.gen_range(1..60);
        let d = r.gen_range(1..6);
        let coarse = r.gen_bool(0.3);
        let pool: Vec<f64> = (0..n * d)
            .map(|_| if coarse { r.gen_range(0..3) as f64 } else { r.gen_range(-1.0..1.0) })
            .collect();
        let query: Vec<f64> = (0..d).map(|_| if coarse { 1.0 } else { r.gen_range(-1.0..1.0) }).collect();
        let exclude: HashSet<usize> = (0..n).filter(|_| r.gen_bool(0.2)).collect();
        let k = r.gen_range(0..n + 5);
        let got = brute_force_topk(&query, &pool, k, &exclude).unwrap();
        let mut all: Vec<(f64, usize)> = (0..n)
            .filter(|i| !exclude.contains(i))
            .map(|i| {
                (kernels::dot(&query, &pool[i * d..(i + 1) * d]), i)
            })
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all.iter().take(k).map(|x| x.1).collect();
        if got.ids != want || got.truncated != (all.len() < k) {
            bad += 1;
        }
    }
    bad
}
