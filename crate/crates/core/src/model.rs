//! Shared data model: queries, event decompositions, videos, description sets,
//! score matrices, fused rankings and relevance judgments.
//!
//! Everything here is plain data. Values are immutable once built and can be
//! shared across threads freely.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of stored unit vectors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

/// Maximum number of events kept per event kind.
pub const MAX_EVENTS_PER_KIND: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl QueryRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        QueryRecord {
            id: id.into(),
            text: text.into(),
            language: None,
            category: None,
        }
    }
}

/// The three kinds of sub-event a query is decomposed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Events that can lead up to the queried event.
    Prequel,
    /// Simpler events observable while the queried event happens.
    Current,
    /// Outcomes of the queried event.
    Sequel,
}

impl EventKind {
    pub const ALL: [EventKind; 3] = [EventKind::Prequel, EventKind::Current, EventKind::Sequel];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Prequel => "prequel",
            EventKind::Current => "current",
            EventKind::Sequel => "sequel",
        }
    }

    /// Score component fed by this event kind.
    pub fn component(self) -> ComponentKind {
        match self {
            EventKind::Prequel => ComponentKind::PrequelDesc,
            EventKind::Current => ComponentKind::CurrentDesc,
            EventKind::Sequel => ComponentKind::SequelDesc,
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prequel/current/sequel events for one query, with the facets used to
/// refine them and the refined variants.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventDecomposition {
    pub prequel: Vec<String>,
    pub current: Vec<String>,
    pub sequel: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
    #[serde(default)]
    pub refined_prequel: Vec<String>,
    #[serde(default)]
    pub refined_current: Vec<String>,
    #[serde(default)]
    pub refined_sequel: Vec<String>,
}

impl EventDecomposition {
    pub fn events(&self, kind: EventKind) -> &[String] {
        match kind {
            EventKind::Prequel => &self.prequel,
            EventKind::Current => &self.current,
            EventKind::Sequel => &self.sequel,
        }
    }

    pub fn refined_events(&self, kind: EventKind) -> &[String] {
        match kind {
            EventKind::Prequel => &self.refined_prequel,
            EventKind::Current => &self.refined_current,
            EventKind::Sequel => &self.refined_sequel,
        }
    }

    pub(crate) fn events_mut(&mut self, kind: EventKind) -> &mut Vec<String> {
        match kind {
            EventKind::Prequel => &mut self.prequel,
            EventKind::Current => &mut self.current,
            EventKind::Sequel => &mut self.sequel,
        }
    }

    pub(crate) fn refined_events_mut(&mut self, kind: EventKind) -> &mut Vec<String> {
        match kind {
            EventKind::Prequel => &mut self.refined_prequel,
            EventKind::Current => &mut self.refined_current,
            EventKind::Sequel => &mut self.refined_sequel,
        }
    }

    /// Checks the post-decomposition invariants: every kind holds 1..=5
    /// events and the refined lists line up with the raw ones.
    pub fn validate(&self) -> Result<()> {
        for kind in EventKind::ALL {
            let n = self.events(kind).len();
            if n == 0 || n > MAX_EVENTS_PER_KIND {
                return Err(Error::invalid(format!(
                    "{kind} event list has {n} entries, expected 1..={MAX_EVENTS_PER_KIND}"
                )));
            }
            let r = self.refined_events(kind).len();
            if r != n {
                return Err(Error::invalid(format!(
                    "refined {kind} list has {r} entries but raw list has {n}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    /// Embeddings of the sampled frames, one unit vector per frame.
    pub frame_embeddings: Vec<Vec<f32>>,
    /// Number of frames in the source video.
    pub frame_count: usize,
    pub has_audio: bool,
}

/// Per-video multimodal descriptions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub video_id: String,
    #[serde(default)]
    pub frame_captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
}

impl DescriptionSet {
    /// Frame captions in temporal order, then the video caption, then the
    /// transcript. Absent and blank entries are omitted.
    pub fn flattened(&self) -> Vec<&str> {
        self.frame_captions
            .iter()
            .map(String::as_str)
            .chain(self.video_caption.as_deref())
            .chain(self.transcript.as_deref())
            .filter(|s| !s.trim().is_empty())
            .collect()
    }
}

/// The five per-query score components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    QueryVideo,
    QueryDesc,
    PrequelDesc,
    CurrentDesc,
    SequelDesc,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 5] = [
        ComponentKind::QueryVideo,
        ComponentKind::QueryDesc,
        ComponentKind::PrequelDesc,
        ComponentKind::CurrentDesc,
        ComponentKind::SequelDesc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::QueryVideo => "query_video",
            ComponentKind::QueryDesc => "query_desc",
            ComponentKind::PrequelDesc => "prequel_desc",
            ComponentKind::CurrentDesc => "current_desc",
            ComponentKind::SequelDesc => "sequel_desc",
        }
    }

    /// Parses a component name or one of the group aliases used by the
    /// ablation harness: `video`, `query`, `event`, `prequel`, `current`,
    /// `sequel`.
    pub fn parse_group(name: &str) -> Result<Vec<ComponentKind>> {
        let kinds = match name.trim().to_ascii_lowercase().as_str() {
            "query_video" | "video" => vec![ComponentKind::QueryVideo],
            "query_desc" | "query" => vec![ComponentKind::QueryDesc],
            "prequel_desc" | "prequel" => vec![ComponentKind::PrequelDesc],
            "current_desc" | "current" => vec![ComponentKind::CurrentDesc],
            "sequel_desc" | "sequel" => vec![ComponentKind::SequelDesc],
            "event" | "events" => vec![
                ComponentKind::PrequelDesc,
                ComponentKind::CurrentDesc,
                ComponentKind::SequelDesc,
            ],
            other => return Err(Error::invalid(format!("unknown score component `{other}`"))),
        };
        Ok(kinds)
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Score vectors for one query, one per component, aligned with
/// `video_order`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreComponentMatrix {
    pub query_id: String,
    pub components: BTreeMap<ComponentKind, Vec<f64>>,
    pub video_order: Vec<String>,
}

impl ScoreComponentMatrix {
    pub fn new(
        query_id: impl Into<String>,
        components: BTreeMap<ComponentKind, Vec<f64>>,
        video_order: Vec<String>,
    ) -> Result<Self> {
        let m = ScoreComponentMatrix {
            query_id: query_id.into(),
            components,
            video_order,
        };
        m.check()?;
        Ok(m)
    }

    pub fn check(&self) -> Result<()> {
        let v = self.video_order.len();
        for (kind, scores) in &self.components {
            if scores.len() != v {
                return Err(Error::invalid(format!(
                    "component {kind} has {} scores for {v} videos",
                    scores.len()
                )));
            }
            if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
                return Err(Error::invalid(format!(
                    "component {kind} has non-finite score for video {}",
                    self.video_order[i]
                )));
            }
        }
        Ok(())
    }

    /// A copy with the given components removed. No other rescaling happens.
    pub fn without(&self, drop: &[ComponentKind]) -> ScoreComponentMatrix {
        let components = self
            .components
            .iter()
            .filter(|(k, _)| !drop.contains(k))
            .map(|(k, v)| (*k, v.clone()))
            .collect();
        ScoreComponentMatrix {
            query_id: self.query_id.clone(),
            components,
            video_order: self.video_order.clone(),
        }
    }
}

/// Final fused scores for one query and the ordering they induce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRanking {
    pub query_id: String,
    /// Fused score per video, aligned with the matrix's video order.
    pub scores: Vec<f64>,
    /// Video indices, best first.
    pub ranking: Vec<usize>,
}

impl FusedRanking {
    /// Orders videos by descending score, breaking ties by ascending video id.
    pub fn from_scores(
        query_id: impl Into<String>,
        scores: Vec<f64>,
        video_order: &[String],
    ) -> Result<Self> {
        if scores.len() != video_order.len() {
            return Err(Error::invalid(format!(
                "{} scores for {} videos",
                scores.len(),
                video_order.len()
            )));
        }
        let ranking = rank_descending(&scores, video_order);
        Ok(FusedRanking {
            query_id: query_id.into(),
            scores,
            ranking,
        })
    }

    pub fn ranked_list(&self, video_order: &[String]) -> RankedList {
        RankedList {
            query_id: self.query_id.clone(),
            video_ids: self.ranking.iter().map(|&i| video_order[i].clone()).collect(),
            scores: self.ranking.iter().map(|&i| self.scores[i]).collect(),
        }
    }
}

/// Indices sorted by descending score with ascending-id tie-break.
pub fn rank_descending(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    idx
}

/// One line of a rankings file: video ids best first, with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub video_ids: Vec<String>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLabels {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Query to relevant-video sets. Single-relevant and multi-relevant datasets
/// share this representation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgments {
    pub relevant: BTreeMap<String, BTreeSet<String>>,
    #[serde(default)]
    pub labels: BTreeMap<String, QueryLabels>,
}

impl RelevanceJudgments {
    pub fn insert(
        &mut self,
        query_id: impl Into<String>,
        videos: impl IntoIterator<Item = impl Into<String>>,
    ) {
        self.relevant
            .entry(query_id.into())
            .or_default()
            .extend(videos.into_iter().map(Into::into));
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }
}

/// Everything needed to score and evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// Frame embedding dimension shared by every video.
    pub dim: usize,
    pub queries: Vec<QueryRecord>,
    pub videos: Vec<VideoRecord>,
    pub descriptions: Vec<DescriptionSet>,
    pub judgments: RelevanceJudgments,
}

impl Corpus {
    pub fn video_ids(&self) -> Vec<String> {
        self.videos.iter().map(|v| v.id.clone()).collect()
    }
}

/// A single consistency problem found by [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    ZeroDimension,
    DuplicateQueryId { query: String },
    EmptyQueryText { query: String },
    DuplicateVideoId { video: String },
    NoFrameEmbeddings { video: String },
    DimensionMismatch { video: String, frame: usize, expected: usize, found: usize },
    NonUnitNorm { video: String, frame: usize, norm: String },
    DuplicateDescriptions { video: String },
    DescriptionsForUnknownVideo { video: String },
    EmptyDescriptions { video: String },
    JudgmentForUnknownQuery { query: String },
    JudgmentForUnknownVideo { query: String, video: String },
    EmptyJudgment { query: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            ZeroDimension => write!(f, "embedding dimension is zero"),
            DuplicateQueryId { query } => write!(f, "duplicate query id `{query}`"),
            EmptyQueryText { query } => write!(f, "query `{query}` has empty text"),
            DuplicateVideoId { video } => write!(f, "duplicate video id `{video}`"),
            NoFrameEmbeddings { video } => write!(f, "video `{video}` has no frame embeddings"),
            DimensionMismatch { video, frame, expected, found } => write!(
                f,
                "video `{video}` frame {frame} has dimension {found}, expected {expected}"
            ),
            NonUnitNorm { video, frame, norm } => {
                write!(f, "video `{video}` frame {frame} has norm {norm}, expected 1")
            }
            DuplicateDescriptions { video } => {
                write!(f, "video `{video}` has more than one description set")
            }
            DescriptionsForUnknownVideo { video } => {
                write!(f, "descriptions reference unknown video `{video}`")
            }
            EmptyDescriptions { video } => write!(f, "video `{video}` has an empty description set"),
            JudgmentForUnknownQuery { query } => {
                write!(f, "judgments reference unknown query `{query}`")
            }
            JudgmentForUnknownVideo { query, video } => {
                write!(f, "judgment for query `{query}` references unknown video `{video}`")
            }
            EmptyJudgment { query } => write!(f, "query `{query}` has no relevant videos"),
        }
    }
}

/// Lists every consistency problem in the corpus, sorted. An empty list means
/// the corpus is consistent.
///
/// Videos without any description set are not flagged here: descriptions are
/// usually produced later by the describe stage.
pub fn validate_corpus(corpus: &Corpus) -> Vec<Violation> {
    let mut out = BTreeSet::new();
    if corpus.dim == 0 {
        out.insert(Violation::ZeroDimension);
    }

    let mut query_ids = HashSet::new();
    for q in &corpus.queries {
        if !query_ids.insert(q.id.as_str()) {
            out.insert(Violation::DuplicateQueryId { query: q.id.clone() });
        }
        if q.text.trim().is_empty() {
            out.insert(Violation::EmptyQueryText { query: q.id.clone() });
        }
    }

    let mut video_ids = HashSet::new();
    for v in &corpus.videos {
        if !video_ids.insert(v.id.as_str()) {
            out.insert(Violation::DuplicateVideoId { video: v.id.clone() });
        }
        if v.frame_embeddings.is_empty() {
            out.insert(Violation::NoFrameEmbeddings { video: v.id.clone() });
        }
        for (i, e) in v.frame_embeddings.iter().enumerate() {
            if e.len() != corpus.dim {
                out.insert(Violation::DimensionMismatch {
                    video: v.id.clone(),
                    frame: i,
                    expected: corpus.dim,
                    found: e.len(),
                });
                continue;
            }
            let norm = e.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                out.insert(Violation::NonUnitNorm {
                    video: v.id.clone(),
                    frame: i,
                    norm: format!("{norm:.9}"),
                });
            }
        }
    }

    let mut described = HashSet::new();
    for d in &corpus.descriptions {
        if !video_ids.contains(d.video_id.as_str()) {
            out.insert(Violation::DescriptionsForUnknownVideo { video: d.video_id.clone() });
        }
        if !described.insert(d.video_id.as_str()) {
            out.insert(Violation::DuplicateDescriptions { video: d.video_id.clone() });
        }
        if d.flattened().is_empty() {
            out.insert(Violation::EmptyDescriptions { video: d.video_id.clone() });
        }
    }

    for (qid, rel) in &corpus.judgments.relevant {
        if !query_ids.contains(qid.as_str()) {
            out.insert(Violation::JudgmentForUnknownQuery { query: qid.clone() });
        }
        if rel.is_empty() {
            out.insert(Violation::EmptyJudgment { query: qid.clone() });
        }
        for vid in rel {
            if !video_ids.contains(vid.as_str()) {
                out.insert(Violation::JudgmentForUnknownVideo {
                    query: qid.clone(),
                    video: vid.clone(),
                });
            }
        }
    }

    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[axis] = 1.0;
        v
    }

    fn fixture() -> Corpus {
        let videos = (0..3)
            .map(|i| VideoRecord {
                id: format!("v{i}"),
                frame_embeddings: vec![unit(4, i), unit(4, (i + 1) % 4)],
                frame_count: 32,
                has_audio: i != 2,
            })
            .collect();
        let descriptions = (0..3)
            .map(|i| DescriptionSet {
                video_id: format!("v{i}"),
                frame_captions: vec![format!("caption {i}")],
                video_caption: None,
                transcript: None,
            })
            .collect();
        let mut judgments = RelevanceJudgments::default();
        judgments.insert("q0", ["v0"]);
        judgments.insert("q1", ["v1", "v2"]);
        Corpus {
            dim: 4,
            queries: vec![QueryRecord::new("q0", "la fire"), QueryRecord::new("q1", "flood")],
            videos,
            descriptions,
            judgments,
        }
    }

    #[test]
    fn consistent_fixture_has_no_violations() {
        assert!(validate_corpus(&fixture()).is_empty());
    }

    #[test]
    fn unknown_judged_video_is_named() {
        let mut c = fixture();
        c.judgments.insert("q0", ["vX"]);
        let report = validate_corpus(&c);
        assert_eq!(
            report,
            vec![Violation::JudgmentForUnknownVideo { query: "q0".into(), video: "vX".into() }]
        );
        assert!(report[0].to_string().contains("vX"));
    }

    #[test]
    fn half_norm_frame_is_flagged() {
        let mut c = fixture();
        c.videos[1].frame_embeddings[0] = vec![0.5, 0.0, 0.0, 0.0];
        let report = validate_corpus(&c);
        assert_eq!(report.len(), 1);
        match &report[0] {
            Violation::NonUnitNorm { video, frame, .. } => {
                assert_eq!(video, "v1");
                assert_eq!(*frame, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_dimensions_are_flagged() {
        let mut c = fixture();
        c.videos[0].frame_embeddings.push(vec![1.0, 0.0]);
        let report = validate_corpus(&c);
        assert!(matches!(report[0], Violation::DimensionMismatch { found: 2, expected: 4, .. }));
    }

    #[test]
    fn empty_descriptions_and_queries() {
        let mut c = fixture();
        c.descriptions[0].frame_captions = vec!["  ".into()];
        c.queries[1].text.clear();
        let report = validate_corpus(&c);
        assert!(report.contains(&Violation::EmptyDescriptions { video: "v0".into() }));
        assert!(report.contains(&Violation::EmptyQueryText { query: "q1".into() }));
    }

    #[test]
    fn flattening_order_is_frames_summary_transcript() {
        let d = DescriptionSet {
            video_id: "v".into(),
            frame_captions: vec!["f0".into(), "f1".into()],
            video_caption: Some("summary".into()),
            transcript: Some("speech".into()),
        };
        assert_eq!(d.flattened(), vec!["f0", "f1", "summary", "speech"]);
        let muted = DescriptionSet { transcript: None, ..d };
        assert_eq!(muted.flattened(), vec!["f0", "f1", "summary"]);
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let ids: Vec<String> = ["c", "a", "b"].iter().map(|s| s.to_string()).collect();
        let r = FusedRanking::from_scores("q", vec![0.5, 0.5, 0.9], &ids).unwrap();
        assert_eq!(r.ranking, vec![2, 1, 0]);
        let list = r.ranked_list(&ids);
        assert_eq!(list.video_ids, vec!["b", "a", "c"]);
    }

    #[test]
    fn decomposition_invariants() {
        let mut d = EventDecomposition::default();
        assert!(d.validate().is_err());
        for k in EventKind::ALL {
            d.events_mut(k).push("x".into());
            d.refined_events_mut(k).push("x refined".into());
        }
        d.validate().unwrap();
        d.refined_sequel.push("extra".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn component_groups() {
        assert_eq!(ComponentKind::parse_group("event").unwrap().len(), 3);
        assert_eq!(ComponentKind::parse_group("Video").unwrap(), vec![ComponentKind::QueryVideo]);
        assert!(ComponentKind::parse_group("audio").is_err());
    }
}
