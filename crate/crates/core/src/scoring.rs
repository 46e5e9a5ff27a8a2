//! Builds the five score components for a query over every video.
//!
//! * `query_video`: `100 * cos(query sentence embedding, mean frame embedding)`
//! * `query_desc`: best late-interaction similarity between the query and any
//!   of the video's descriptions
//! * `prequel_desc`, `current_desc`, `sequel_desc`: similarity between each
//!   event of that kind and the descriptions, aggregated over descriptions and
//!   then over events. The default policy takes the global maximum, so one
//!   hallucinated event cannot pull a good match down.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    ComponentKind, Corpus, DescriptionSet, EventDecomposition, EventKind, QueryRecord,
    ScoreComponentMatrix,
};
use crate::similarity::{
    late_interaction_sim, query_video_score, EmbeddingProvider, TokenEmbeddingSequence,
};

/// Value written into text-based cells of a video that has no usable
/// descriptions (the minimum of the similarity range).
pub const TEXT_SCORE_FLOOR: f64 = -1.0;
/// Value written into the query/video cell when the video cannot be scored.
pub const VIDEO_SCORE_FLOOR: f64 = -100.0;

/// How a list of similarity values is reduced to one number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aggregation {
    Max,
    Mean,
    /// Mean of the `k` largest values, or of all values when fewer exist.
    MeanTopK(usize),
}

impl Aggregation {
    pub fn apply(self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::invalid("cannot aggregate an empty list"));
        }
        Ok(match self {
            Aggregation::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Aggregation::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Aggregation::MeanTopK(0) => return Err(Error::invalid("top-k needs k >= 1")),
            Aggregation::MeanTopK(k) => {
                let mut sorted = values.to_vec();
                sorted.sort_by(|a, b| b.total_cmp(a));
                let take = k.min(sorted.len());
                sorted[..take].iter().sum::<f64>() / take as f64
            }
        })
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregation::Max => f.write_str("max"),
            Aggregation::Mean => f.write_str("mean"),
            Aggregation::MeanTopK(k) => write!(f, "top{k}"),
        }
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => {
                let k = s
                    .strip_prefix("top")
                    .or_else(|| s.strip_prefix("mean_top"))
                    .and_then(|k| k.trim_start_matches('_').parse::<usize>().ok())
                    .ok_or_else(|| Error::invalid(format!("unknown aggregation `{s}`")))?;
                if k == 0 {
                    return Err(Error::invalid("top-k needs k >= 1"));
                }
                Ok(Aggregation::MeanTopK(k))
            }
        }
    }
}

impl TryFrom<String> for Aggregation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Aggregation> for String {
    fn from(a: Aggregation) -> String {
        a.to_string()
    }
}

/// Aggregation over events (outer) and over descriptions (inner). The
/// default is the global maximum. Serialized as `"<events>/<captions>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AggregationPolicy {
    pub over_events: Aggregation,
    pub over_captions: Aggregation,
}

impl Default for AggregationPolicy {
    fn default() -> Self {
        AggregationPolicy {
            over_events: Aggregation::Max,
            over_captions: Aggregation::Max,
        }
    }
}

impl fmt::Display for AggregationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.over_events, self.over_captions)
    }
}

/// Parses `<events>/<captions>`, e.g. `top3/max`.
impl FromStr for AggregationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (e, c) = s
            .split_once('/')
            .ok_or_else(|| Error::invalid(format!("expected <events>/<captions>, got `{s}`")))?;
        Ok(AggregationPolicy {
            over_events: e.parse()?,
            over_captions: c.parse()?,
        })
    }
}

impl TryFrom<String> for AggregationPolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregationPolicy> for String {
    fn from(p: AggregationPolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringConfig {
    #[serde(default)]
    pub policy: AggregationPolicy,
    /// Score events with their refined wording rather than the raw events.
    #[serde(default = "yes")]
    pub use_refined_events: bool,
}

fn yes() -> bool {
    true
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            policy: AggregationPolicy::default(),
            use_refined_events: true,
        }
    }
}

/// Highest late-interaction similarity between the query and any
/// description.
pub fn max_sim_over_descriptions(
    query: &TokenEmbeddingSequence,
    descriptions: &[TokenEmbeddingSequence],
) -> Result<f64> {
    if descriptions.is_empty() {
        return Err(Error::invalid("description set is empty"));
    }
    let sims = descriptions
        .iter()
        .map(|d| late_interaction_sim(query, d))
        .collect::<Result<Vec<_>>>()?;
    Aggregation::Max.apply(&sims)
}

/// Event-to-description score: each event is reduced over descriptions, then
/// the per-event values are reduced over events.
pub fn aggregate_event_scores(
    events: &[TokenEmbeddingSequence],
    descriptions: &[TokenEmbeddingSequence],
    policy: AggregationPolicy,
) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::invalid("event list is empty"));
    }
    if descriptions.is_empty() {
        return Err(Error::invalid("description set is empty"));
    }
    let per_event = events
        .iter()
        .map(|e| {
            let sims = descriptions
                .iter()
                .map(|d| late_interaction_sim(e, d))
                .collect::<Result<Vec<_>>>()?;
            policy.over_captions.apply(&sims)
        })
        .collect::<Result<Vec<_>>>()?;
    policy.over_events.apply(&per_event)
}

fn embed_descriptions(
    descs: &DescriptionSet,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<TokenEmbeddingSequence>> {
    let texts = descs.flattened();
    if texts.is_empty() {
        return Err(Error::invalid(format!(
            "video {} has an empty description set",
            descs.video_id
        )));
    }
    texts.into_iter().map(|t| provider.embed_text(t)).collect()
}

/// Query-to-descriptions score for one video.
pub fn score_query_vs_descriptions(
    query: &QueryRecord,
    descs: &DescriptionSet,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    let d = embed_descriptions(descs, provider)?;
    max_sim_over_descriptions(&provider.embed_text(&query.text)?, &d)
}

/// Events-to-descriptions score for one video.
pub fn score_events_vs_descriptions(
    events: &[String],
    descs: &DescriptionSet,
    policy: AggregationPolicy,
    provider: &dyn EmbeddingProvider,
) -> Result<f64> {
    if events.is_empty() {
        return Err(Error::invalid("event list is empty"));
    }
    let d = embed_descriptions(descs, provider)?;
    let e = events
        .iter()
        .map(|t| provider.embed_text(t))
        .collect::<Result<Vec<_>>>()?;
    aggregate_event_scores(&e, &d, policy)
}

/// Token embeddings of every video's flattened descriptions, computed once
/// and shared across queries.
#[derive(Debug, Default)]
pub struct DescriptionIndex {
    per_video: HashMap<String, Vec<TokenEmbeddingSequence>>,
}

impl DescriptionIndex {
    pub fn build(descriptions: &[DescriptionSet], provider: &dyn EmbeddingProvider) -> Result<Self> {
        let entries = descriptions
            .par_iter()
            .filter(|d| !d.flattened().is_empty())
            .map(|d| Ok((d.video_id.clone(), embed_descriptions(d, provider)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DescriptionIndex {
            per_video: entries.into_iter().collect(),
        })
    }

    pub fn get(&self, video_id: &str) -> Option<&[TokenEmbeddingSequence]> {
        self.per_video.get(video_id).map(Vec::as_slice)
    }
}

/// A video that could not be scored on some component; its cells hold the
/// floor value for that component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoScoreError {
    pub query_id: String,
    pub video_id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub matrix: ScoreComponentMatrix,
    pub video_errors: Vec<VideoScoreError>,
    /// True when no decomposition was available and only the two query
    /// components were computed.
    pub fallback: bool,
}

/// Builds the score matrix for one query.
///
/// With `decomposition = None` only `query_video` and `query_desc` are
/// computed. A decomposition with an empty event kind is a hard error.
pub fn build_score_matrix(
    query: &QueryRecord,
    decomposition: Option<&EventDecomposition>,
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    config: &ScoringConfig,
) -> Result<ScoreOutcome> {
    let index = DescriptionIndex::build(&corpus.descriptions, provider)?;
    build_score_matrix_indexed(query, decomposition, corpus, &index, provider, config)
}

pub fn build_score_matrix_indexed(
    query: &QueryRecord,
    decomposition: Option<&EventDecomposition>,
    corpus: &Corpus,
    index: &DescriptionIndex,
    provider: &dyn EmbeddingProvider,
    config: &ScoringConfig,
) -> Result<ScoreOutcome> {
    let mut event_tokens: Vec<(ComponentKind, Vec<TokenEmbeddingSequence>)> = Vec::new();
    if let Some(d) = decomposition {
        for kind in EventKind::ALL {
            let events = if config.use_refined_events {
                d.refined_events(kind)
            } else {
                d.events(kind)
            };
            if events.is_empty() {
                return Err(Error::MissingComponent(format!(
                    "{} for query {}",
                    kind.component(),
                    query.id
                )));
            }
            let toks = events
                .iter()
                .map(|e| provider.embed_text(e))
                .collect::<Result<Vec<_>>>()?;
            event_tokens.push((kind.component(), toks));
        }
    }

    let sentence = provider.embed_query_sentence(&query.text)?;
    let query_tokens = provider.embed_text(&query.text)?;

    let described: HashSet<&str> = corpus.descriptions.iter().map(|d| d.video_id.as_str()).collect();
    let rows: Vec<(Vec<(ComponentKind, f64)>, Vec<String>)> = corpus
        .videos
        .par_iter()
        .map(|video| {
            let mut cells = Vec::with_capacity(2 + event_tokens.len());
            let mut errors = Vec::new();
            match query_video_score(&sentence, video) {
                Ok(s) => cells.push((ComponentKind::QueryVideo, s)),
                Err(e) => {
                    errors.push(e.to_string());
                    cells.push((ComponentKind::QueryVideo, VIDEO_SCORE_FLOOR));
                }
            }
            match index.get(&video.id) {
                Some(descs) => {
                    let q = max_sim_over_descriptions(&query_tokens, descs);
                    match q {
                        Ok(s) => cells.push((ComponentKind::QueryDesc, s)),
                        Err(e) => {
                            errors.push(e.to_string());
                            cells.push((ComponentKind::QueryDesc, TEXT_SCORE_FLOOR));
                        }
                    }
                    for (kind, toks) in &event_tokens {
                        match aggregate_event_scores(toks, descs, config.policy) {
                            Ok(s) => cells.push((*kind, s)),
                            Err(e) => {
                                errors.push(e.to_string());
                                cells.push((*kind, TEXT_SCORE_FLOOR));
                            }
                        }
                    }
                }
                None => {
                    errors.push(if described.contains(video.id.as_str()) {
                        "description set is empty".to_string()
                    } else {
                        "no description set".to_string()
                    });
                    cells.push((ComponentKind::QueryDesc, TEXT_SCORE_FLOOR));
                    for (kind, _) in &event_tokens {
                        cells.push((*kind, TEXT_SCORE_FLOOR));
                    }
                }
            }
            (cells, errors)
        })
        .collect();

    let mut components: BTreeMap<ComponentKind, Vec<f64>> = BTreeMap::new();
    let mut video_errors = Vec::new();
    for (video, (cells, errors)) in corpus.videos.iter().zip(rows) {
        for (kind, value) in cells {
            components.entry(kind).or_default().push(value);
        }
        for message in errors {
            video_errors.push(VideoScoreError {
                query_id: query.id.clone(),
                video_id: video.id.clone(),
                message,
            });
        }
    }
    if corpus.videos.is_empty() {
        components.insert(ComponentKind::QueryVideo, Vec::new());
        components.insert(ComponentKind::QueryDesc, Vec::new());
        for (kind, _) in &event_tokens {
            components.insert(*kind, Vec::new());
        }
    }

    let matrix = ScoreComponentMatrix::new(query.id.clone(), components, corpus.video_ids())?;
    Ok(ScoreOutcome {
        matrix,
        video_errors,
        fallback: decomposition.is_none(),
    })
}
