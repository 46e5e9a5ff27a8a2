//! Retrieval metrics with binary relevance: R@K, P@K, MRR, NDCG, AP/MAP and
//! the mean/median rank of the first relevant video, plus a run-level report
//! with optional grouping by language or category.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{QueryRecord, RankedList, RelevanceJudgments};

fn hits_in_top<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>, k: usize) -> usize {
    ranking.iter().take(k).filter(|v| relevant.contains(v)).count()
}

fn effective_k(k: usize, len: usize) -> usize {
    k.min(len).max(1)
}

/// `|top-k ∩ relevant| / |relevant|`. `k` is clamped to the ranking length.
pub fn recall_at_k<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let k = effective_k(k, ranking.len());
    hits_in_top(ranking, relevant, k) as f64 / relevant.len() as f64
}

/// `|top-k ∩ relevant| / k`. `k` is clamped to the ranking length.
pub fn precision_at_k<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>, k: usize) -> f64 {
    let k = effective_k(k, ranking.len());
    hits_in_top(ranking, relevant, k) as f64 / k as f64
}

/// 1-based rank of the first relevant item.
pub fn first_relevant_rank<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>) -> Option<usize> {
    ranking.iter().position(|v| relevant.contains(v)).map(|p| p + 1)
}

/// Mean 1-based rank over all relevant items that appear in the ranking.
pub fn mean_relevant_rank<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>) -> Option<f64> {
    let ranks: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, v)| relevant.contains(v))
        .map(|(i, _)| i + 1)
        .collect();
    if ranks.is_empty() {
        None
    } else {
        Some(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
    }
}

pub fn mrr<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>) -> f64 {
    first_relevant_rank(ranking, relevant).map_or(0.0, |r| 1.0 / r as f64)
}

/// Binary-gain NDCG with `1 / log2(rank + 1)` discounts. The ideal DCG places
/// `min(k, |relevant|)` relevant items first.
pub fn ndcg_at_k<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let k = effective_k(k, ranking.len());
    let discount = |rank0: usize| 1.0 / ((rank0 + 2) as f64).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, v)| relevant.contains(v))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..k.min(relevant.len())).map(discount).sum();
    dcg / idcg
}

/// Mean of precision at each relevant hit, over all relevant items.
pub fn average_precision<I: Eq + Hash>(ranking: &[I], relevant: &HashSet<I>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (i, v) in ranking.iter().enumerate() {
        if relevant.contains(v) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Which rank MnR/MdR summarize per query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankStatistic {
    /// Rank of the first relevant video.
    #[default]
    FirstRelevant,
    /// Mean rank over every relevant video.
    MeanOfRelevant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    Language,
    Category,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Cutoffs for R@K and P@K.
    pub ks: Vec<usize>,
    /// Extra NDCG cutoffs reported next to the full-ranking NDCG.
    #[serde(default)]
    pub ndcg_ks: Vec<usize>,
    #[serde(default)]
    pub rank_statistic: RankStatistic,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<GroupBy>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 5, 10],
            ndcg_ks: vec![10],
            rank_statistic: RankStatistic::FirstRelevant,
            group_by: None,
        }
    }
}

/// Metrics for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub ndcg: f64,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub average_precision: f64,
    /// The rank summarized by MnR/MdR for this query.
    pub rank: f64,
}

pub fn query_metrics(list: &RankedList, relevant: &BTreeSet<String>, config: &EvalConfig) -> QueryMetrics {
    let ranking: Vec<&str> = list.video_ids.iter().map(String::as_str).collect();
    let rel: HashSet<&str> = relevant.iter().map(String::as_str).collect();
    let n = ranking.len();
    // relevant videos missing from the ranking count as ranked just past the end
    let missing_rank = (n + 1) as f64;
    let rank = match config.rank_statistic {
        RankStatistic::FirstRelevant => {
            first_relevant_rank(&ranking, &rel).map_or(missing_rank, |r| r as f64)
        }
        RankStatistic::MeanOfRelevant => {
            let present: Vec<f64> = ranking
                .iter()
                .enumerate()
                .filter(|(_, v)| rel.contains(*v))
                .map(|(i, _)| (i + 1) as f64)
                .collect();
            let absent = rel.len() - present.len();
            (present.iter().sum::<f64>() + absent as f64 * missing_rank) / rel.len() as f64
        }
    };
    QueryMetrics {
        query_id: list.query_id.clone(),
        recall: config.ks.iter().map(|&k| (k, recall_at_k(&ranking, &rel, k))).collect(),
        precision: config.ks.iter().map(|&k| (k, precision_at_k(&ranking, &rel, k))).collect(),
        mrr: mrr(&ranking, &rel),
        ndcg: ndcg_at_k(&ranking, &rel, n),
        ndcg_at: config.ndcg_ks.iter().map(|&k| (k, ndcg_at_k(&ranking, &rel, k))).collect(),
        average_precision: average_precision(&ranking, &rel),
        rank,
    }
}

/// Macro-averaged metrics over judged queries. Proportions are in `[0, 1]`;
/// the TSV rendering scales them by 100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_queries: usize,
    pub recall: BTreeMap<usize, f64>,
    pub precision: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub ndcg: f64,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub map: f64,
    pub mnr: f64,
    pub mdr: f64,
    pub rank_statistic: RankStatistic,
    /// Cutoffs larger than the corpus, evaluated as the corpus size.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clamped_ks: Vec<usize>,
    #[serde(default)]
    pub unjudged_excluded: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, MetricReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Averages per-query metrics. `per_query` must be non-empty.
pub fn aggregate(per_query: &[QueryMetrics], config: &EvalConfig) -> MetricReport {
    let by_k = |f: &dyn Fn(&QueryMetrics) -> &BTreeMap<usize, f64>, ks: &[usize]| {
        ks.iter()
            .map(|k| (*k, mean(per_query.iter().map(|q| f(q)[k]))))
            .collect::<BTreeMap<_, _>>()
    };
    let mut ranks: Vec<f64> = per_query.iter().map(|q| q.rank).collect();
    MetricReport {
        num_queries: per_query.len(),
        recall: by_k(&|q| &q.recall, &config.ks),
        precision: by_k(&|q| &q.precision, &config.ks),
        mrr: mean(per_query.iter().map(|q| q.mrr)),
        ndcg: mean(per_query.iter().map(|q| q.ndcg)),
        ndcg_at: by_k(&|q| &q.ndcg_at, &config.ndcg_ks),
        map: mean(per_query.iter().map(|q| q.average_precision)),
        mnr: mean(ranks.iter().copied()),
        mdr: median(&mut ranks),
        rank_statistic: config.rank_statistic,
        clamped_ks: Vec::new(),
        unjudged_excluded: 0,
        groups: BTreeMap::new(),
    }
}

/// Evaluates a run. Queries without judgments are skipped and counted.
/// `queries` supplies language/category labels when judgments lack them.
pub fn evaluate_run(
    rankings: &[RankedList],
    judgments: &RelevanceJudgments,
    queries: &[QueryRecord],
    config: &EvalConfig,
) -> Result<MetricReport> {
    let mut per_query = Vec::new();
    let mut unjudged = 0;
    let mut max_len = 0;
    for list in rankings {
        match judgments.get(&list.query_id) {
            Some(rel) if !rel.is_empty() => {
                max_len = max_len.max(list.video_ids.len());
                per_query.push(query_metrics(list, rel, config));
            }
            _ => unjudged += 1,
        }
    }
    if per_query.is_empty() {
        return Err(Error::invalid("no judged queries in the run"));
    }
    let mut report = aggregate(&per_query, config);
    report.unjudged_excluded = unjudged;
    report.clamped_ks = config
        .ks
        .iter()
        .chain(&config.ndcg_ks)
        .copied()
        .filter(|&k| k > max_len)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    if let Some(group_by) = config.group_by {
        let records: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
        let label = |qid: &str| -> String {
            let from_judgments = judgments.labels.get(qid).and_then(|l| match group_by {
                GroupBy::Language => l.language.clone(),
                GroupBy::Category => l.category.clone(),
            });
            from_judgments
                .or_else(|| {
                    records.get(qid).and_then(|q| match group_by {
                        GroupBy::Language => q.language.clone(),
                        GroupBy::Category => q.category.clone(),
                    })
                })
                .unwrap_or_else(|| "unlabeled".to_string())
        };
        let mut buckets: BTreeMap<String, Vec<QueryMetrics>> = BTreeMap::new();
        for q in per_query {
            buckets.entry(label(&q.query_id)).or_default().push(q);
        }
        report.groups = buckets
            .into_iter()
            .map(|(g, qs)| (g, aggregate(&qs, config)))
            .collect();
    }
    Ok(report)
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

impl MetricReport {
    /// Column headers and values as rendered in the TSV report.
    pub fn columns(&self) -> Vec<(String, String)> {
        let mut cols = Vec::new();
        for (k, v) in &self.recall {
            cols.push((format!("R@{k}"), pct(*v)));
        }
        for (k, v) in &self.precision {
            cols.push((format!("P@{k}"), pct(*v)));
        }
        cols.push(("MRR".into(), format!("{:.2}", self.mrr)));
        cols.push(("NDCG".into(), pct(self.ndcg)));
        for (k, v) in &self.ndcg_at {
            cols.push((format!("NDCG@{k}"), pct(*v)));
        }
        cols.push(("MAP".into(), pct(self.map)));
        cols.push(("MnR".into(), format!("{:.2}", self.mnr)));
        cols.push(("MdR".into(), format_rank(self.mdr)));
        cols.push(("queries".into(), self.num_queries.to_string()));
        cols
    }

    /// Tab-separated table, one row for the whole run plus one per group.
    pub fn to_tsv(&self) -> String {
        let mut rows = vec![("all".to_string(), self.columns())];
        for (g, r) in &self.groups {
            rows.push((g.clone(), r.columns()));
        }
        render_tsv("group", &rows)
    }
}

pub(crate) fn format_rank(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.1}")
    }
}

/// Aligned TSV: values padded to column width, tab separated.
pub fn render_tsv(label_header: &str, rows: &[(String, Vec<(String, String)>)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let headers: Vec<&str> = std::iter::once(label_header)
        .chain(first.iter().map(|(h, _)| h.as_str()))
        .collect();
    let table: Vec<Vec<&str>> = rows
        .iter()
        .map(|(label, cols)| {
            std::iter::once(label.as_str())
                .chain(cols.iter().map(|(_, v)| v.as_str()))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..headers.len())
        .map(|c| {
            table
                .iter()
                .map(|r| r.get(c).map_or(0, |s| s.len()))
                .chain([headers[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[&str], out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{c:<w$}", w = widths[i]))
            .collect();
        let _ = writeln!(out, "{}", padded.join("\t").trim_end());
    };
    line(&headers, &mut out);
    for r in &table {
        line(r, &mut out);
    }
    out
}
