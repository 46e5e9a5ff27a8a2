//! On-disk formats: the corpus manifest and its JSONL/binary parts, score
//! matrices, and rankings.
//!
//! A corpus directory holds a `corpus.json` manifest whose paths are relative
//! to the manifest:
//!
//! ```json
//! {
//!   "dim": 16,
//!   "queries": "queries.jsonl",
//!   "judgments": "judgments.jsonl",
//!   "frames": "frames.f32",
//!   "frames_index": "frames.json",
//!   "media": "media.jsonl",
//!   "descriptions": "descriptions.jsonl"
//! }
//! ```
//!
//! `frames.f32` is a flat little-endian `f32` buffer; `frames.json` lists each
//! video's byte offset and embedded frame count.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cache::write_atomic;
use crate::error::{Error, Result};
use crate::model::{
    ComponentKind, Corpus, DescriptionSet, QueryLabels, QueryRecord, RankedList, RelevanceJudgments,
    ScoreComponentMatrix, VideoRecord,
};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Json {
                path: path.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("model types serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    write_atomic(path, to_jsonl(items).as_bytes())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("model types serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        line: source.line(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub dim: usize,
    pub queries: PathBuf,
    pub judgments: PathBuf,
    pub frames: PathBuf,
    pub frames_index: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<PathBuf>,
}

/// One line of the judgments file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentLine {
    pub query_id: String,
    pub relevant: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

/// Where a video's frames and audio live, for captioning and transcription.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MediaRecord {
    pub video_id: String,
    pub total_frames: usize,
    /// Frame path or URL with an `{index}` placeholder.
    pub frame_template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio: Option<String>,
    /// Externally chosen frame indices (e.g. from scene detection), used in
    /// place of uniform sampling when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_frames: Option<Vec<usize>>,
}

impl MediaRecord {
    pub fn frame_ref(&self, index: usize) -> String {
        self.frame_template.replace("{index}", &index.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndexEntry {
    pub video_id: String,
    /// Byte offset into the frames buffer.
    pub offset: u64,
    /// Number of embedded frames.
    pub frames: usize,
    pub total_frames: usize,
    #[serde(default)]
    pub has_audio: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameIndex {
    pub dim: usize,
    pub videos: Vec<FrameIndexEntry>,
}

/// A loaded corpus plus media references and the directory it came from.
#[derive(Debug, Clone)]
pub struct CorpusBundle {
    pub root: PathBuf,
    pub corpus: Corpus,
    pub media: BTreeMap<String, MediaRecord>,
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub fn encode_frames(videos: &[VideoRecord], dim: usize) -> (Vec<u8>, FrameIndex) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(videos.len());
    for v in videos {
        entries.push(FrameIndexEntry {
            video_id: v.id.clone(),
            offset: bytes.len() as u64,
            frames: v.frame_embeddings.len(),
            total_frames: v.frame_count,
            has_audio: v.has_audio,
        });
        for x in v.frame_embeddings.iter().flatten() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    (bytes, FrameIndex { dim, videos: entries })
}

pub fn decode_frames(bytes: &[u8], index: &FrameIndex) -> Result<Vec<VideoRecord>> {
    let dim = index.dim;
    index
        .videos
        .iter()
        .map(|e| {
            let start = usize::try_from(e.offset).map_err(|_| Error::invalid("frame offset overflows"))?;
            let len = e.frames * dim * 4;
            let chunk = bytes.get(start..start + len).ok_or_else(|| {
                Error::invalid(format!("frames for `{}` run past the end of the buffer", e.video_id))
            })?;
            let floats: Vec<f32> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(VideoRecord {
                id: e.video_id.clone(),
                frame_embeddings: floats.chunks(dim.max(1)).map(<[f32]>::to_vec).collect(),
                frame_count: e.total_frames,
                has_audio: e.has_audio,
            })
        })
        .collect()
}

pub fn judgments_from_lines(lines: &[JudgmentLine]) -> RelevanceJudgments {
    let mut j = RelevanceJudgments::default();
    for l in lines {
        j.insert(&l.query_id, l.relevant.iter().cloned());
        if l.language.is_some() || l.category.is_some() {
            j.labels.insert(
                l.query_id.clone(),
                QueryLabels {
                    language: l.language.clone(),
                    category: l.category.clone(),
                },
            );
        }
    }
    j
}

pub fn judgments_to_lines(j: &RelevanceJudgments) -> Vec<JudgmentLine> {
    j.relevant
        .iter()
        .map(|(q, rel)| {
            let labels = j.labels.get(q).cloned().unwrap_or_default();
            JudgmentLine {
                query_id: q.clone(),
                relevant: rel.iter().cloned().collect(),
                language: labels.language,
                category: labels.category,
            }
        })
        .collect()
}

/// Loads a corpus from its manifest. Structural problems (bad offsets,
/// unreadable files) are errors; content problems are left to
/// [`crate::model::validate_corpus`].
pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<CorpusBundle> {
    let manifest_path = manifest_path.as_ref();
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let m: CorpusManifest = read_json(manifest_path)?;
    let queries: Vec<QueryRecord> = read_jsonl(&resolve(&root, &m.queries))?;
    let judgments = judgments_from_lines(&read_jsonl(&resolve(&root, &m.judgments))?);
    let index: FrameIndex = read_json(&resolve(&root, &m.frames_index))?;
    if index.dim != m.dim {
        return Err(Error::invalid(format!(
            "frame index dimension {} differs from manifest dimension {}",
            index.dim, m.dim
        )));
    }
    let frames_path = resolve(&root, &m.frames);
    let bytes = fs::read(&frames_path).map_err(|e| Error::io(&frames_path, e))?;
    let videos = decode_frames(&bytes, &index)?;
    let descriptions = match &m.descriptions {
        Some(p) => read_jsonl(&resolve(&root, p))?,
        None => Vec::new(),
    };
    let media = match &m.media {
        Some(p) => read_jsonl::<MediaRecord>(&resolve(&root, p))?
            .into_iter()
            .map(|r| (r.video_id.clone(), r))
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(CorpusBundle {
        root,
        corpus: Corpus {
            dim: m.dim,
            queries,
            videos,
            descriptions,
            judgments,
        },
        media,
    })
}

/// Writes a corpus directory with the standard file names and returns the
/// manifest path.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus, media: &[MediaRecord]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let (bytes, index) = encode_frames(&corpus.videos, corpus.dim);
    let manifest = CorpusManifest {
        dim: corpus.dim,
        queries: "queries.jsonl".into(),
        judgments: "judgments.jsonl".into(),
        frames: "frames.f32".into(),
        frames_index: "frames.json".into(),
        media: (!media.is_empty()).then(|| "media.jsonl".into()),
        descriptions: (!corpus.descriptions.is_empty()).then(|| "descriptions.jsonl".into()),
    };
    write_jsonl(&dir.join(&manifest.queries), &corpus.queries)?;
    write_jsonl(&dir.join(&manifest.judgments), &judgments_to_lines(&corpus.judgments))?;
    write_atomic(&dir.join(&manifest.frames), &bytes)?;
    write_json(&dir.join(&manifest.frames_index), &index)?;
    if let Some(p) = &manifest.media {
        write_jsonl(&dir.join(p), media)?;
    }
    if let Some(p) = &manifest.descriptions {
        write_jsonl(&dir.join(p), &corpus.descriptions)?;
    }
    let path = dir.join("corpus.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixIndexEntry {
    pub query_id: String,
    /// Byte offset into the matrix buffer.
    pub offset: u64,
    /// Components stored at this offset, in order, each `|video_order|` long.
    pub components: Vec<ComponentKind>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixIndex {
    pub video_order: Vec<String>,
    pub entries: Vec<MatrixIndexEntry>,
}

/// Component-major little-endian `f64` buffer plus its index. All matrices
/// must share one video order.
pub fn encode_matrices(matrices: &[ScoreComponentMatrix]) -> Result<(Vec<u8>, MatrixIndex)> {
    let video_order = matrices.first().map(|m| m.video_order.clone()).unwrap_or_default();
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    for m in matrices {
        if m.video_order != video_order {
            return Err(Error::invalid(format!("matrix `{}` has a different video order", m.query_id)));
        }
        entries.push(MatrixIndexEntry {
            query_id: m.query_id.clone(),
            offset: bytes.len() as u64,
            components: m.components.keys().copied().collect(),
        });
        for x in m.components.values().flatten() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok((bytes, MatrixIndex { video_order, entries }))
}

pub fn decode_matrices(bytes: &[u8], index: &MatrixIndex) -> Result<Vec<ScoreComponentMatrix>> {
    let n = index.video_order.len();
    index
        .entries
        .iter()
        .map(|e| {
            let mut at = usize::try_from(e.offset).map_err(|_| Error::invalid("matrix offset overflows"))?;
            let mut components = BTreeMap::new();
            for &c in &e.components {
                let chunk = bytes.get(at..at + n * 8).ok_or_else(|| {
                    Error::invalid(format!("matrix `{}` runs past the end of the buffer", e.query_id))
                })?;
                let values = chunk
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                components.insert(c, values);
                at += n * 8;
            }
            ScoreComponentMatrix::new(e.query_id.clone(), components, index.video_order.clone())
        })
        .collect()
}

/// Writes `<stem>.f64` and `<stem>.json` in `dir`.
pub fn write_matrices(dir: &Path, stem: &str, matrices: &[ScoreComponentMatrix]) -> Result<()> {
    let (bytes, index) = encode_matrices(matrices)?;
    write_atomic(&dir.join(format!("{stem}.f64")), &bytes)?;
    write_json(&dir.join(format!("{stem}.json")), &index)
}

pub fn read_matrices(dir: &Path, stem: &str) -> Result<Vec<ScoreComponentMatrix>> {
    let index: MatrixIndex = read_json(&dir.join(format!("{stem}.json")))?;
    let path = dir.join(format!("{stem}.f64"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    decode_matrices(&bytes, &index)
}

/// One row per (query, video) with a column per component; components a
/// query lacks are left blank.
pub fn matrices_to_tsv(matrices: &[ScoreComponentMatrix]) -> String {
    let kinds: BTreeSet<ComponentKind> = matrices.iter().flat_map(|m| m.components.keys().copied()).collect();
    let mut out = String::from("query_id\tvideo_id");
    for k in &kinds {
        out.push('\t');
        out.push_str(k.as_str());
    }
    out.push('\n');
    for m in matrices {
        for (j, vid) in m.video_order.iter().enumerate() {
            let _ = write!(out, "{}\t{vid}", m.query_id);
            for k in &kinds {
                out.push('\t');
                if let Some(v) = m.components.get(k) {
                    let _ = write!(out, "{}", v[j]);
                }
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_rankings(path: &Path, rankings: &[RankedList]) -> Result<()> {
    write_jsonl(path, rankings)
}

pub fn read_rankings(path: &Path) -> Result<Vec<RankedList>> {
    read_jsonl(path)
}

pub fn read_descriptions(path: &Path) -> Result<Vec<DescriptionSet>> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn small_corpus() -> (Corpus, Vec<MediaRecord>) {
        let mut judgments = RelevanceJudgments::default();
        judgments.insert("q1", ["v1"]);
        judgments.labels.insert("q1".into(), QueryLabels { language: Some("en".into()), category: None });
        let corpus = Corpus {
            dim: 3,
            queries: vec![QueryRecord::new("q1", "a fire")],
            videos: vec![
                VideoRecord { id: "v1".into(), frame_embeddings: vec![unit(vec![1.0, 2.0, 2.0]), vec![0.0, 0.0, 1.0]], frame_count: 30, has_audio: true },
                VideoRecord { id: "v2".into(), frame_embeddings: vec![vec![1.0, 0.0, 0.0]], frame_count: 8, has_audio: false },
            ],
            descriptions: vec![DescriptionSet { video_id: "v1".into(), frame_captions: vec!["smoke".into()], ..Default::default() }],
            judgments,
        };
        let media = vec![MediaRecord {
            video_id: "v1".into(),
            total_frames: 30,
            frame_template: "frames/v1/{index}.jpg".into(),
            audio: Some("audio/v1.wav".into()),
            scene_frames: None,
        }];
        (corpus, media)
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (corpus, media) = small_corpus();
        let path = write_corpus(dir.path(), &corpus, &media).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.corpus.videos, corpus.videos);
        assert_eq!(loaded.corpus.queries, corpus.queries);
        assert_eq!(loaded.corpus.descriptions, corpus.descriptions);
        assert_eq!(loaded.corpus.judgments, corpus.judgments);
        assert_eq!(loaded.media["v1"].frame_ref(4), "frames/v1/4.jpg");
    }

    #[test]
    fn truncated_frame_buffer_is_rejected() {
        let (corpus, _) = small_corpus();
        let (bytes, index) = encode_frames(&corpus.videos, 3);
        assert!(decode_frames(&bytes[..bytes.len() - 4], &index).is_err());
    }

    #[test]
    fn bad_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.jsonl");
        fs::write(&p, "{\"id\":\"q\",\"text\":\"t\"}\n\nnot json\n").unwrap();
        match read_jsonl::<QueryRecord>(&p) {
            Err(Error::Json { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matrix_tsv_has_blank_cells_for_missing_components() {
        let order = vec!["a".to_string(), "b".to_string()];
        let full = ScoreComponentMatrix::new(
            "q1",
            ComponentKind::ALL.iter().map(|&k| (k, vec![1.0, 2.0])).collect(),
            order.clone(),
        )
        .unwrap();
        let partial = full.without(&[ComponentKind::PrequelDesc, ComponentKind::CurrentDesc, ComponentKind::SequelDesc]);
        let tsv = matrices_to_tsv(&[full, ScoreComponentMatrix { query_id: "q2".into(), ..partial }]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3].split('\t').filter(|c| c.is_empty()).count(), 3);
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<ScoreComponentMatrix>> {
        (1usize..6, 1usize..4).prop_flat_map(|(n, q)| {
            let order: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
            proptest::collection::vec(
                (proptest::sample::subsequence(ComponentKind::ALL.to_vec(), 1..=5), proptest::collection::vec(-1e6f64..1e6, n * 5)),
                q,
            )
            .prop_map(move |specs| {
                specs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (kinds, vals))| {
                        let comps = kinds.iter().enumerate().map(|(c, &k)| (k, vals[c * n..(c + 1) * n].to_vec())).collect();
                        ScoreComponentMatrix::new(format!("q{i}"), comps, order.clone()).unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn matrices_round_trip_exactly(ms in matrix_strategy()) {
            let (bytes, index) = encode_matrices(&ms).unwrap();
            let back = decode_matrices(&bytes, &index).unwrap();
            prop_assert_eq!(back, ms);
        }

        #[test]
        fn frames_round_trip_exactly(vals in proptest::collection::vec(proptest::collection::vec(-1f32..1.0, 4), 1..6)) {
            let v = VideoRecord { id: "v".into(), frame_embeddings: vals, frame_count: 99, has_audio: true };
            let (bytes, index) = encode_frames(std::slice::from_ref(&v), 4);
            prop_assert_eq!(decode_frames(&bytes, &index).unwrap(), vec![v]);
        }
    }
}
