//! Ranking and recall metrics, evaluation protocols, reports and the
//! recall-embedding timing benchmark.

mod bench;
mod metrics;
mod protocol;
mod report;

pub use bench::{
    bench_recall_embedding, complexity_check, median, medians, timing_csv, BenchConfig,
    ComplexityCheck, TimingRow, PHASE_BASIS, PHASE_USER,
};
pub use metrics::{auc, brute_force_topk, mean_std, mrr, ndcg_at_k, recall_at_k, MeanAcc, RetrievalResult};
pub use protocol::{
    encode_all_news, encode_news_subset, evaluate_ranking, evaluate_recall, ranking_metrics,
    ranking_metrics_from_scores, recall_metrics, recall_users, referenced_news, score_impressions,
    user_embeddings_for, RankingMetrics, RecallMethod, RecallModel, RecallUser,
};
pub use report::{csv_field, MetricValue, MetricsReport};
