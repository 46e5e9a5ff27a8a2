//! Acceptance checks. Runs as a plain binary (`harness = false`) and prints
//! one PASS/FAIL line per criterion:
//!
//! ```text
//! cargo test -p eventrank-cli --test acceptance
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use eventrank::fusion::{fuse_matrix, FusionConfig, FusionMethod};
use eventrank::io::{read_json, read_matrices, read_rankings};
use eventrank::metrics::{evaluate_run, EvalConfig, RankStatistic};
use eventrank::model::{ComponentKind, RankedList, RelevanceJudgments, ScoreComponentMatrix, VideoRecord};
use eventrank::pipeline::sample_frames_uniform;
use eventrank::scoring::{aggregate_event_scores, max_sim_over_descriptions, Aggregation, AggregationPolicy};
use eventrank::similarity::{query_video_score, TokenEmbeddingSequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const FUSION_TOL: f64 = 1e-9;
const FUSION_INSTANCES: usize = 200;
const FUSION_BUDGET: Duration = Duration::from_secs(5);
const METRIC_TOL: f64 = 1e-9;
const METRIC_RUNS: usize = 100;
const METRIC_BUDGET: Duration = Duration::from_secs(5);
const SCORING_TOL: f64 = 1e-12;
const SCORING_CASES: usize = 100;
const SHIFT_INSTANCES: usize = 100;
const ABLATION_TOL: f64 = 1e-12;
const SAMPLING_MAX_N: usize = 1000;
const SAMPLING_KS: [usize; 6] = [2, 4, 8, 16, 32, 64];
const SAMPLING_BUDGET: Duration = Duration::from_secs(1);
const ENTROPY_FLOOR: f64 = 1e-12;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:03}")).collect()
}

/// Relative closeness, falling back to absolute for values below 1.
fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ---------------------------------------------------------------- oracles

/// `exp(s_v - m) / sum_u exp(s_u - m)` with `m` the largest score.
fn oracle_softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn oracle_entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &x in p {
        if x > 0.0 {
            h -= x * x.ln();
        }
    }
    h
}

/// 1-based rank of each video: one plus the number of videos strictly ahead
/// (higher value, or equal value and smaller id).
fn oracle_ranks(values: &[f64], ids: &[String]) -> Vec<usize> {
    (0..values.len())
        .map(|v| {
            1 + (0..values.len())
                .filter(|&u| values[u] > values[v] || (values[u] == values[v] && ids[u] < ids[v]))
                .count()
        })
        .collect()
}

fn oracle_order(values: &[f64], ids: &[String]) -> Vec<String> {
    let ranks = oracle_ranks(values, ids);
    let mut out = vec![String::new(); values.len()];
    for (v, r) in ranks.iter().enumerate() {
        out[r - 1] = ids[v].clone();
    }
    out
}

fn oracle_fuse(components: &[Vec<f64>], ids: &[String], method: FusionMethod) -> Vec<f64> {
    let probs: Vec<Vec<f64>> = components.iter().map(|s| oracle_softmax(s)).collect();
    let n = ids.len();
    let mut out = Vec::with_capacity(n);
    for v in 0..n {
        let score = match method {
            FusionMethod::InvEntropy => probs
                .iter()
                .map(|p| p[v] / oracle_entropy(p).max(ENTROPY_FLOOR))
                .sum(),
            FusionMethod::NegExpEntropy => probs.iter().map(|p| (-oracle_entropy(p)).exp() * p[v]).sum(),
            FusionMethod::Mean => probs.iter().map(|p| p[v]).sum::<f64>() / probs.len() as f64,
            FusionMethod::Max => probs.iter().map(|p| p[v]).fold(f64::MIN, f64::max),
            FusionMethod::Rrf => probs.iter().map(|p| 1.0 / oracle_ranks(p, ids)[v] as f64).sum(),
        };
        out.push(score);
    }
    out
}

fn matrix(components: &[Vec<f64>], ids: &[String]) -> ScoreComponentMatrix {
    let map: BTreeMap<ComponentKind, Vec<f64>> = ComponentKind::ALL
        .iter()
        .copied()
        .zip(components.iter().cloned())
        .collect();
    ScoreComponentMatrix::new("q", map, ids.to_vec()).unwrap()
}

/// Components in the matrix's own order, so oracle sums match term order.
fn components_of(m: &ScoreComponentMatrix) -> Vec<Vec<f64>> {
    m.components.values().cloned().collect()
}

fn random_components(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<String>) {
    let n_comp = rng.gen_range(1..=5);
    let n_vid = rng.gen_range(1..=50);
    let scale = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
    let mut comps: Vec<Vec<f64>> = (0..n_comp)
        .map(|_| (0..n_vid).map(|_| rng.gen_range(-1.0..1.0) * scale).collect())
        .collect();
    // exact ties exercise the id tie-break
    if n_vid > 2 && rng.gen_bool(0.3) {
        let (a, b) = (rng.gen_range(0..n_vid), rng.gen_range(0..n_vid));
        for c in &mut comps {
            c[b] = c[a];
        }
    }
    (comps, ids(n_vid))
}

// ------------------------------------------------------------- criteria

fn fusion_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for case in 0..FUSION_INSTANCES {
        let (comps, ids) = random_components(&mut rng);
        let m = matrix(&comps, &ids);
        let ordered = components_of(&m);
        for method in FusionMethod::ALL {
            let got = fuse_matrix(&m, &FusionConfig::from(method)).map_err(|e| e.to_string())?;
            let want = oracle_fuse(&ordered, &ids, method);
            for (g, w) in got.scores.iter().zip(&want) {
                let d = (g - w).abs();
                worst = worst.max(d);
                ensure!(d <= FUSION_TOL, "case {case} {method}: score {g} vs oracle {w}");
            }
            let got_order = got.ranked_list(&ids).video_ids;
            ensure!(got_order == oracle_order(&want, &ids), "case {case} {method}: ranking differs");
        }
    }
    let t = start.elapsed();
    ensure!(t < FUSION_BUDGET, "took {t:?}");
    Ok(format!("{FUSION_INSTANCES} instances x 5 rules, max |diff| {worst:.1e}, {t:.2?}"))
}

fn oracle_metrics(ranking: &[String], rel: &BTreeSet<String>, ks: &[usize], ndcg_k: usize) -> HashMap<String, f64> {
    let n = ranking.len();
    let pos: Vec<usize> = ranking
        .iter()
        .enumerate()
        .filter(|(_, v)| rel.contains(*v))
        .map(|(i, _)| i + 1)
        .collect();
    let mut m = HashMap::new();
    for &k in ks {
        let kk = k.min(n);
        let hits = pos.iter().filter(|&&p| p <= kk).count() as f64;
        m.insert(format!("R@{k}"), hits / rel.len() as f64);
        m.insert(format!("P@{k}"), hits / kk as f64);
    }
    m.insert("MRR".into(), pos.first().map_or(0.0, |&p| 1.0 / p as f64));
    let dcg = |k: usize| -> f64 {
        let got: f64 = pos.iter().filter(|&&p| p <= k).map(|&p| 1.0 / (p as f64 + 1.0).log2()).sum();
        let ideal: f64 = (1..=k.min(rel.len())).map(|p| 1.0 / (p as f64 + 1.0).log2()).sum();
        got / ideal
    };
    m.insert("NDCG".into(), dcg(n));
    m.insert(format!("NDCG@{ndcg_k}"), dcg(ndcg_k.min(n)));
    let ap: f64 = pos.iter().enumerate().map(|(j, &p)| (j + 1) as f64 / p as f64).sum::<f64>() / rel.len() as f64;
    m.insert("AP".into(), ap);
    m.insert("first".into(), pos.first().map_or((n + 1) as f64, |&p| p as f64));
    let missing = (rel.len() - pos.len()) as f64 * (n + 1) as f64;
    m.insert("meanrank".into(), (pos.iter().sum::<usize>() as f64 + missing) / rel.len() as f64);
    m
}

fn oracle_median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn metric_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let ks = [1usize, 5, 10];
    let ndcg_k = 10;
    for run in 0..METRIC_RUNS {
        let n_vid = rng.gen_range(3..=40);
        let n_q = rng.gen_range(1..=12);
        let vids = ids(n_vid);
        let mut rankings = Vec::new();
        let mut judgments = RelevanceJudgments::default();
        let mut per_query = Vec::new();
        for q in 0..n_q {
            let qid = format!("q{q}");
            let mut order = vids.clone();
            order.shuffle(&mut rng);
            // some relevant videos may be missing from a truncated ranking
            if rng.gen_bool(0.2) {
                order.truncate(rng.gen_range(1..=n_vid));
            }
            let n_rel = rng.gen_range(1..=n_vid.min(5));
            let rel: BTreeSet<String> = vids.choose_multiple(&mut rng, n_rel).cloned().collect();
            judgments.insert(&qid, rel.iter().cloned());
            per_query.push(oracle_metrics(&order, &rel, &ks, ndcg_k));
            rankings.push(RankedList {
                query_id: qid,
                scores: (0..order.len()).map(|i| -(i as f64)).collect(),
                video_ids: order,
            });
        }
        for stat in [RankStatistic::FirstRelevant, RankStatistic::MeanOfRelevant] {
            let config = EvalConfig {
                ks: ks.to_vec(),
                ndcg_ks: vec![ndcg_k],
                rank_statistic: stat,
                group_by: None,
            };
            let r = evaluate_run(&rankings, &judgments, &[], &config).map_err(|e| e.to_string())?;
            let mean = |key: &str| per_query.iter().map(|m| m[key]).sum::<f64>() / per_query.len() as f64;
            let rank_key = match stat {
                RankStatistic::FirstRelevant => "first",
                RankStatistic::MeanOfRelevant => "meanrank",
            };
            let mut pairs = vec![
                ("MRR".to_string(), r.mrr, mean("MRR")),
                ("NDCG".to_string(), r.ndcg, mean("NDCG")),
                (format!("NDCG@{ndcg_k}"), r.ndcg_at[&ndcg_k], mean(&format!("NDCG@{ndcg_k}"))),
                ("MAP".to_string(), r.map, mean("AP")),
                ("MnR".to_string(), r.mnr, mean(rank_key)),
                ("MdR".to_string(), r.mdr, oracle_median(per_query.iter().map(|m| m[rank_key]).collect())),
            ];
            for k in ks {
                pairs.push((format!("R@{k}"), r.recall[&k], mean(&format!("R@{k}"))));
                pairs.push((format!("P@{k}"), r.precision[&k], mean(&format!("P@{k}"))));
            }
            for (name, got, want) in pairs {
                ensure!((got - want).abs() <= METRIC_TOL, "run {run} {stat:?} {name}: {got} vs {want}");
            }
        }
    }

    // analytic fixtures
    let one = |ranking: &[&str], rel: &[&str]| -> eventrank::metrics::MetricReport {
        let mut j = RelevanceJudgments::default();
        j.insert("q", rel.iter().copied());
        let list = RankedList {
            query_id: "q".into(),
            video_ids: ranking.iter().map(|s| s.to_string()).collect(),
            scores: vec![0.0; ranking.len()],
        };
        evaluate_run(&[list], &j, &[], &EvalConfig::default()).unwrap()
    };
    let ten: Vec<String> = ids(12);
    let ten: Vec<&str> = ten.iter().map(String::as_str).collect();
    let r = one(&ten, &["v001"]);
    ensure!((r.ndcg_at[&10] - 1.0 / 3f64.log2()).abs() <= METRIC_TOL, "NDCG@10 at rank 2: {}", r.ndcg_at[&10]);
    ensure!(r.mrr == 0.5, "MRR at rank 2: {}", r.mrr);
    let r = one(&ten, &["v003"]);
    ensure!((r.map - 0.25).abs() <= METRIC_TOL, "AP at rank 4: {}", r.map);
    let r = one(&ten, &["v000", "v002", "v004", "v008", "v011"]);
    ensure!((r.recall[&10] - 0.8).abs() <= METRIC_TOL, "R@10 with 4 of 5: {}", r.recall[&10]);
    let r = one(&ten, &["v000"]);
    ensure!(r.mnr == 1.0 && r.mdr == 1.0 && r.ndcg == 1.0 && r.precision[&1] == 1.0, "perfect top-1");
    ensure!(oracle_median(vec![1.0, 6.0, 6.0]) == 6.0, "median fixture");
    let mut j = RelevanceJudgments::default();
    let mut lists = Vec::new();
    for (q, first) in [("a", "v000"), ("b", "v005"), ("c", "v005")] {
        j.insert(q, [first]);
        lists.push(RankedList {
            query_id: q.into(),
            video_ids: ten.iter().map(|s| s.to_string()).collect(),
            scores: vec![0.0; ten.len()],
        });
    }
    let r = evaluate_run(&lists, &j, &[], &EvalConfig::default()).unwrap();
    ensure!(r.mdr == 6.0, "MdR of ranks 1, 6, 6: {}", r.mdr);

    let t = start.elapsed();
    ensure!(t < METRIC_BUDGET, "took {t:?}");
    Ok(format!("{METRIC_RUNS} runs x 2 rank statistics plus analytic fixtures, {t:.2?}"))
}

fn random_sequence(rng: &mut ChaCha8Rng, dim: usize, max_len: usize) -> TokenEmbeddingSequence {
    let len = rng.gen_range(1..=max_len);
    let tokens = (0..len)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    TokenEmbeddingSequence::normalized("random", tokens).unwrap()
}

fn oracle_cos(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv)
}

/// Mean over query tokens of the best cosine against any document token.
fn oracle_sim(q: &TokenEmbeddingSequence, d: &TokenEmbeddingSequence) -> f64 {
    let mut sum = 0.0;
    for qt in q.tokens() {
        let mut best = -2.0;
        for dt in d.tokens() {
            let c = oracle_cos(qt, dt);
            if c > best {
                best = c;
            }
        }
        sum += best;
    }
    sum / q.len() as f64
}

fn oracle_reduce(values: &[f64], how: Aggregation) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    match how {
        Aggregation::Max => v[0],
        Aggregation::Mean => v.iter().sum::<f64>() / v.len() as f64,
        Aggregation::MeanTopK(k) => {
            let take = k.min(v.len());
            v[..take].iter().sum::<f64>() / take as f64
        }
    }
}

fn scoring_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let policies = [
        AggregationPolicy::default(),
        AggregationPolicy { over_events: Aggregation::Mean, over_captions: Aggregation::Max },
        AggregationPolicy { over_events: Aggregation::MeanTopK(3), over_captions: Aggregation::Max },
        AggregationPolicy { over_events: Aggregation::Max, over_captions: Aggregation::Mean },
    ];
    let mut worst: f64 = 0.0;
    let mut dominated_checked = 0;
    for case in 0..SCORING_CASES {
        let dim = rng.gen_range(2..=16);
        let caps: Vec<_> = (0..rng.gen_range(1..=6)).map(|_| random_sequence(&mut rng, dim, 8)).collect();
        let query = random_sequence(&mut rng, dim, 8);
        let events: Vec<_> = (0..rng.gen_range(1..=5)).map(|_| random_sequence(&mut rng, dim, 6)).collect();

        // query against descriptions
        let got = max_sim_over_descriptions(&query, &caps).map_err(|e| e.to_string())?;
        let want = caps.iter().map(|c| oracle_sim(&query, c)).fold(f64::MIN, f64::max);
        worst = worst.max((got - want).abs());
        ensure!((got - want).abs() <= SCORING_TOL, "case {case} query_desc: {got} vs {want}");

        // events against descriptions
        for p in policies {
            let got = aggregate_event_scores(&events, &caps, p).map_err(|e| e.to_string())?;
            let per_event: Vec<f64> = events
                .iter()
                .map(|e| oracle_reduce(&caps.iter().map(|c| oracle_sim(e, c)).collect::<Vec<_>>(), p.over_captions))
                .collect();
            let want = oracle_reduce(&per_event, p.over_events);
            worst = worst.max((got - want).abs());
            ensure!((got - want).abs() <= SCORING_TOL, "case {case} events {p}: {got} vs {want}");
        }

        // query against pooled frames
        let frames: Vec<Vec<f32>> = (0..rng.gen_range(1..=8))
            .map(|_| {
                let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                v.iter().map(|x| x / n).collect()
            })
            .collect();
        let qvec: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut pooled = vec![0.0; dim];
        for f in &frames {
            for (p, x) in pooled.iter_mut().zip(f) {
                *p += f64::from(*x) / frames.len() as f64;
            }
        }
        let want = 100.0 * oracle_cos(&qvec, &pooled);
        let video = VideoRecord {
            id: "v".into(),
            frame_count: frames.len(),
            frame_embeddings: frames,
            has_audio: false,
        };
        let got = query_video_score(&qvec, &video).map_err(|e| e.to_string())?;
        ensure!((got - want).abs() <= SCORING_TOL * 100.0, "case {case} query_video: {got} vs {want}");

        // a dominated extra event leaves the default-policy score unchanged
        let base = aggregate_event_scores(&events, &caps, AggregationPolicy::default()).unwrap();
        let extra = loop {
            let e = random_sequence(&mut rng, dim, 6);
            if caps.iter().all(|c| oracle_sim(&e, c) <= base) {
                break e;
            }
        };
        let mut with_extra = events.clone();
        with_extra.insert(rng.gen_range(0..=events.len()), extra);
        let after = aggregate_event_scores(&with_extra, &caps, AggregationPolicy::default()).unwrap();
        ensure!(after == base, "case {case}: dominated event moved the score {base} -> {after}");
        dominated_checked += 1;
    }
    Ok(format!(
        "{SCORING_CASES} cases x 4 policies, max |diff| {worst:.1e}; {dominated_checked} dominated-event cases unchanged"
    ))
}

fn shift_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for case in 0..SHIFT_INSTANCES {
        let (comps, ids) = random_components(&mut rng);
        let shifted: Vec<Vec<f64>> = comps
            .iter()
            .map(|c| {
                let k = rng.gen_range(-100.0..100.0);
                c.iter().map(|s| s + k).collect()
            })
            .collect();
        let (a, b) = (matrix(&comps, &ids), matrix(&shifted, &ids));
        for method in FusionMethod::ALL {
            let cfg = FusionConfig::from(method);
            let ra = fuse_matrix(&a, &cfg).unwrap().ranked_list(&ids).video_ids;
            let rb = fuse_matrix(&b, &cfg).unwrap().ranked_list(&ids).video_ids;
            ensure!(ra == rb, "case {case} {method}: ranking changed under shift");
        }
    }
    Ok(format!("{SHIFT_INSTANCES} instances x 5 rules, rankings identical"))
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/tiny")
}

fn eventrank(args: &[&str]) -> std::result::Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_eventrank"))
        .args(args)
        .env("RUST_LOG", "error")
        .env("RUST_BACKTRACE", "0")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(String::from_utf8_lossy(&out.stderr).into_owned())
    }
}

fn read(path: &Path) -> std::result::Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn same_rankings(got: &[RankedList], want: &[RankedList]) -> bool {
    got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            g.query_id == w.query_id
                && g.video_ids == w.video_ids
                && g.scores.iter().zip(&w.scores).all(|(a, b)| close(*a, *b, 1e-9))
        })
}

fn copy_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let target = to.join(entry.file_name());
        if entry.file_type()?.is_dir() {
            copy_dir(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), target)?;
        }
    }
    Ok(())
}

fn end_to_end_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = fixture_dir().join("run.json");
    let config = config.to_str().unwrap();
    let outs: Vec<PathBuf> = (1..=2).map(|i| tmp.path().join(format!("run{i}"))).collect();
    for o in &outs {
        eventrank(&["run", "--config", config, "--output", o.to_str().unwrap()])?;
    }
    for f in ["rankings.jsonl", "report.json", "report.tsv", "matrices.f64", "descriptions.jsonl"] {
        ensure!(read(&outs[0].join(f))? == read(&outs[1].join(f))?, "{f} differs between runs");
    }
    let golden = read_rankings(&fixture_dir().join("golden/rankings.jsonl")).map_err(|e| e.to_string())?;
    let got = read_rankings(&outs[0].join("rankings.jsonl")).map_err(|e| e.to_string())?;
    ensure!(same_rankings(&got, &golden), "rankings differ from the golden file");

    // without ASR the audio stores are never consulted: remove them and rerun
    let muted = tmp.path().join("fixture");
    copy_dir(&fixture_dir(), &muted).map_err(|e| e.to_string())?;
    fs::remove_file(muted.join("replay/asr.jsonl")).map_err(|e| e.to_string())?;
    fs::remove_file(muted.join("replay/translator.jsonl")).map_err(|e| e.to_string())?;
    let muted_config = muted.join("run.json");
    let no_asr = tmp.path().join("no_asr");
    eventrank(&[
        "run",
        "--config",
        muted_config.to_str().unwrap(),
        "--use_asr",
        "false",
        "--output",
        no_asr.to_str().unwrap(),
    ])?;
    let with_asr = eventrank(&[
        "run",
        "--config",
        muted_config.to_str().unwrap(),
        "--output",
        tmp.path().join("needs_asr").to_str().unwrap(),
    ]);
    ensure!(
        matches!(&with_asr, Err(e) if e.contains("replay cache miss")),
        "ASR-enabled run should miss the removed audio stores: {with_asr:?}"
    );
    let descriptions = fs::read_to_string(no_asr.join("descriptions.jsonl")).map_err(|e| e.to_string())?;
    ensure!(!descriptions.contains("\"transcript\""), "transcripts present with --use_asr false");
    ensure!(!no_asr.join("cache/transcribe").exists(), "transcribe stage ran with --use_asr false");
    let matrices = read_matrices(&no_asr, "matrices").map_err(|e| e.to_string())?;
    ensure!(
        matrices.iter().all(|m| m.components.len() == ComponentKind::ALL.len()),
        "no-ASR matrices should keep all five components"
    );
    let report: Value = read_json(&no_asr.join("report.json")).map_err(|e| e.to_string())?;
    ensure!(report["use_asr"] == Value::Bool(false), "report does not record use_asr=false");
    let golden = read_rankings(&fixture_dir().join("golden/rankings.no_asr.jsonl")).map_err(|e| e.to_string())?;
    let got = read_rankings(&no_asr.join("rankings.jsonl")).map_err(|e| e.to_string())?;
    ensure!(same_rankings(&got, &golden), "no-ASR rankings differ from the golden file");
    Ok("two runs byte-identical, golden rankings match, --use_asr false skips audio and keeps 5 components".into())
}

fn ablation_harness() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = fixture_dir();
    let out = tmp.path().join("ablate");
    eventrank(&[
        "ablate",
        "--config",
        fixture.join("run.json").to_str().unwrap(),
        "--grid",
        fixture.join("grid.json").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ])?;
    let grid: Value = read_json(&fixture.join("grid.json")).map_err(|e| e.to_string())?;
    let drops = grid["drop_components"].as_array().unwrap().len();
    let table: Value = read_json(&out.join("ablation/ablation.json")).map_err(|e| e.to_string())?;
    let rows = table["rows"].as_array().unwrap();
    ensure!(rows.len() == 5 * drops, "{} rows, expected {}", rows.len(), 5 * drops);
    let cells: BTreeSet<(String, String)> = rows
        .iter()
        .map(|r| (r["cell"]["fusion"].as_str().unwrap().to_string(), r["cell"]["drop_label"].as_str().unwrap().to_string()))
        .collect();
    ensure!(cells.len() == rows.len(), "duplicate cells");
    let tsv = fs::read_to_string(out.join("ablation/ablation.tsv")).map_err(|e| e.to_string())?;
    ensure!(tsv.lines().count() == rows.len() + 1, "TSV should have a header plus one line per cell");

    // the -event cell equals fusing query_video and query_desc directly
    let run = tmp.path().join("run");
    eventrank(&["score", "--config", fixture.join("run.json").to_str().unwrap(), "--output", run.to_str().unwrap()])?;
    let matrices = read_matrices(&run, "matrices").map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for row in rows.iter().filter(|r| r["cell"]["drop_label"] == "-event") {
        let id = row["cell"]["id"].as_str().unwrap();
        let method: FusionMethod = row["cell"]["fusion"].as_str().unwrap().parse().unwrap();
        let cell = read_rankings(&out.join(format!("ablation/{id}.rankings.jsonl"))).map_err(|e| e.to_string())?;
        ensure!(cell.len() == matrices.len(), "cell {id}: {} rankings", cell.len());
        for (m, list) in matrices.iter().zip(&cell) {
            let two = vec![
                m.components[&ComponentKind::QueryVideo].clone(),
                m.components[&ComponentKind::QueryDesc].clone(),
            ];
            let want = oracle_fuse(&two, &m.video_order, method);
            ensure!(
                list.video_ids == oracle_order(&want, &m.video_order),
                "cell {id} query {}: ranking differs from direct 2-component fusion",
                m.query_id
            );
            for (v, s) in list.video_ids.iter().zip(&list.scores) {
                let w = want[m.video_order.iter().position(|x| x == v).unwrap()];
                worst = worst.max((s - w).abs() / w.abs().max(1.0));
                ensure!(close(*s, w, ABLATION_TOL), "cell {id} {v}: {s} vs {w}");
            }
        }
    }
    Ok(format!("{} cells complete; -event equals direct 2-component fusion (max rel diff {worst:.1e})", rows.len()))
}

fn frame_sampling() -> Check {
    let start = Instant::now();
    let mut checked = 0;
    for n in 1..=SAMPLING_MAX_N {
        for k in SAMPLING_KS {
            let got = sample_frames_uniform(n, k).map_err(|e| e.to_string())?;
            let want: Vec<usize> = if n <= k { (0..n).collect() } else { (0..k).map(|i| i * n / k).collect() };
            ensure!(got == want, "N={n} K={k}: {got:?}");
            checked += 1;
        }
    }
    ensure!(sample_frames_uniform(0, 8).is_err(), "N=0 must error");
    ensure!(sample_frames_uniform(8, 0).is_err(), "K=0 must error");
    let t = start.elapsed();
    ensure!(t < SAMPLING_BUDGET, "took {t:?}");
    Ok(format!("{checked} (N, K) pairs, {t:.2?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 7] = [
        ("fusion oracle equivalence", fusion_oracle),
        ("metric oracle equivalence", metric_oracle),
        ("description scoring oracles", scoring_oracle),
        ("softmax shift invariance", shift_invariance),
        ("end-to-end determinism", end_to_end_determinism),
        ("ablation harness", ablation_harness),
        ("frame sampling", frame_sampling),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
