//! A small scripted world with deterministic stand-ins for every model
//! service, for fixtures, tests and offline demos.
//!
//! Videos are sequences of scene sentences; frame embeddings are
//! [`HashingEmbeddings::concept_vector`]s of those sentences, so words shared
//! between a query and a scene raise the query-video score. The scripted
//! services answer the bundled prompts from the world's ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::cache::{ReplayStore, StoreMode};
use crate::embedding::{HashingEmbeddings, RecordingEmbeddings};
use crate::error::{Error, Result};
use crate::io::{load_corpus, write_corpus, write_json, MediaRecord};
use crate::knowledge::{
    AsrClient, AsrOutput, ChatClient, ChatEndpointConfig, ChatRequest, ModelService, PromptKind, Recording, Translator,
};
use crate::model::{Corpus, QueryRecord, RelevanceJudgments, VideoRecord};
use crate::http::EndpointConfig;
use crate::pipeline::{replay_files, sample_frames_uniform, Pipeline, RunConfig, ServiceMode, Services, ServicesConfig, UpstreamSettings};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedSpeech {
    pub language: String,
    pub original: String,
    /// What the recognizer's own translation says.
    pub asr_english: String,
    /// What the translator says.
    pub mt_english: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedVideo {
    pub id: String,
    pub total_frames: usize,
    /// `(first_frame, sentence)` segments in frame order.
    pub scenes: Vec<(usize, String)>,
    pub speech: Option<ScriptedSpeech>,
}

impl ScriptedVideo {
    pub fn scene_at(&self, frame: usize) -> &str {
        self.scenes
            .iter()
            .rev()
            .find(|(start, _)| *start <= frame)
            .or(self.scenes.first())
            .map_or("", |(_, s)| s.as_str())
    }

    pub fn frame_template(&self) -> String {
        format!("frames/{}/{{index}}.jpg", self.id)
    }

    pub fn audio_ref(&self) -> Option<String> {
        self.speech.as_ref().map(|_| format!("audio/{}.wav", self.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedQuery {
    pub id: String,
    pub text: String,
    pub language: Option<String>,
    pub category: Option<String>,
    pub prequel: Vec<String>,
    pub current: Vec<String>,
    pub sequel: Vec<String>,
    pub primary_event: Option<String>,
    pub place: Option<String>,
    pub time: Option<String>,
    pub relevant: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedWorld {
    pub dim: usize,
    pub seed: u64,
    /// Frames embedded per video when building the corpus.
    pub embedded_frames: usize,
    pub queries: Vec<ScriptedQuery>,
    pub videos: Vec<ScriptedVideo>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl ScriptedWorld {
    /// Two queries and three videos: a wildfire with Spanish speech, a flood
    /// with English speech, and a muted marathon shorter than 16 frames.
    pub fn tiny(seed: u64) -> Self {
        let scenes = |xs: &[(usize, &str)]| xs.iter().map(|(i, s)| (*i, s.to_string())).collect();
        ScriptedWorld {
            dim: 128,
            seed,
            embedded_frames: 16,
            videos: vec![
                ScriptedVideo {
                    id: "v1".into(),
                    total_frames: 40,
                    scenes: scenes(&[
                        (0, "smoke rising above a dry pine forest"),
                        (10, "firefighters spraying water on the burning forest"),
                        (25, "a helicopter dropping water on the fire"),
                        (35, "residents evacuate on a crowded highway"),
                    ]),
                    speech: Some(ScriptedSpeech {
                        language: "es".into(),
                        original: "el fuego se acerca a las casas".into(),
                        asr_english: "the fire approaches the houses".into(),
                        mt_english: "the fire is getting close to the homes".into(),
                    }),
                },
                ScriptedVideo {
                    id: "v2".into(),
                    total_frames: 24,
                    scenes: scenes(&[
                        (0, "heavy rain falling on a city street"),
                        (8, "flood water covering houses and parked cars"),
                        (16, "rescue boats carrying people through the flood"),
                    ]),
                    speech: Some(ScriptedSpeech {
                        language: "en".into(),
                        original: "the river burst its banks overnight".into(),
                        asr_english: "the river burst its banks overnight".into(),
                        mt_english: "the river overflowed during the night".into(),
                    }),
                },
                ScriptedVideo {
                    id: "v3".into(),
                    total_frames: 12,
                    scenes: scenes(&[
                        (0, "runners gathering at the start line"),
                        (6, "a crowd cheering as runners cross the finish line"),
                    ]),
                    speech: None,
                },
            ],
            queries: vec![
                ScriptedQuery {
                    id: "q1".into(),
                    text: "forest fire forces residents to evacuate in California 2020".into(),
                    language: Some("en".into()),
                    category: Some("disaster".into()),
                    prequel: strings(&["a dry forest catches fire", "smoke rising above the trees"]),
                    current: strings(&[
                        "firefighters battle the burning forest",
                        "a helicopter drops water on the fire",
                        "residents evacuate by car",
                    ]),
                    sequel: strings(&["burned hills covered in ash", "families return to damaged houses"]),
                    primary_event: Some("wildfire".into()),
                    place: Some("California, USA".into()),
                    time: Some("2020".into()),
                    relevant: strings(&["v1"]),
                },
                ScriptedQuery {
                    id: "q2".into(),
                    text: "rescue boats save people from a city flood".into(),
                    language: Some("en".into()),
                    category: Some("emergency".into()),
                    prequel: strings(&["heavy rain falls for days"]),
                    // the last event is deliberately off-topic
                    current: strings(&["water floods the streets", "rescue boats carry people", "a marathon crowd cheers"]),
                    sequel: strings(&["people clean mud from their houses"]),
                    primary_event: Some("flood".into()),
                    place: None,
                    time: None,
                    relevant: strings(&["v2"]),
                },
            ],
        }
    }

    pub fn embeddings(&self) -> HashingEmbeddings {
        HashingEmbeddings::new(self.dim, self.seed)
    }

    /// Corpus (without descriptions, which the pipeline generates) and media
    /// references.
    pub fn corpus(&self) -> Result<(Corpus, Vec<MediaRecord>)> {
        let emb = self.embeddings();
        let mut videos = Vec::new();
        let mut media = Vec::new();
        for v in &self.videos {
            let frames = sample_frames_uniform(v.total_frames, self.embedded_frames)?;
            let frame_embeddings = frames
                .iter()
                .map(|&i| {
                    let c = emb.concept_vector(v.scene_at(i))?;
                    let f: Vec<f32> = c.iter().map(|&x| x as f32).collect();
                    let n = f.iter().map(|x| x * x).sum::<f32>().sqrt();
                    Ok(f.iter().map(|x| x / n).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            videos.push(VideoRecord {
                id: v.id.clone(),
                frame_embeddings,
                frame_count: v.total_frames,
                has_audio: v.speech.is_some(),
            });
            media.push(MediaRecord {
                video_id: v.id.clone(),
                total_frames: v.total_frames,
                frame_template: v.frame_template(),
                audio: v.audio_ref(),
                scene_frames: None,
            });
        }
        let mut judgments = RelevanceJudgments::default();
        let queries = self
            .queries
            .iter()
            .map(|q| {
                judgments.insert(&q.id, q.relevant.iter().cloned());
                QueryRecord {
                    id: q.id.clone(),
                    text: q.text.clone(),
                    language: q.language.clone(),
                    category: q.category.clone(),
                }
            })
            .collect();
        Ok((
            Corpus {
                dim: self.dim,
                queries,
                videos,
                descriptions: Vec::new(),
                judgments,
            },
            media,
        ))
    }

    /// Scripted services answering from this world.
    pub fn services(self: &Arc<Self>) -> Services {
        Services::new(
            Arc::new(ScriptedLlm(self.clone())),
            Arc::new(ScriptedVlm(self.clone())),
            Arc::new(ScriptedAsr(self.clone())),
            Arc::new(ScriptedTranslator(self.clone())),
            Arc::new(self.embeddings()),
        )
    }

    /// Scripted services whose every response is also recorded into replay
    /// stores under `replay_dir`. Stores are compacted on
    /// [`Services::finish`].
    pub fn recording_services(self: &Arc<Self>, replay_dir: &Path) -> Result<Services> {
        fs::create_dir_all(replay_dir).map_err(|e| Error::io(replay_dir, e))?;
        let open = |name: &str| ReplayStore::open(replay_dir.join(name), StoreMode::Record);
        let llm = Arc::new(Recording::new(ScriptedLlm(self.clone()), open(replay_files::LLM)?));
        let vlm = Arc::new(Recording::new(ScriptedVlm(self.clone()), open(replay_files::VLM)?));
        let asr = Arc::new(Recording::new(ScriptedAsr(self.clone()), open(replay_files::ASR)?));
        let mt = Arc::new(Recording::new(ScriptedTranslator(self.clone()), open(replay_files::TRANSLATOR)?));
        let emb = Arc::new(RecordingEmbeddings::new(
            self.embeddings(),
            open(replay_files::EMBED_TOKENS)?,
            open(replay_files::EMBED_SENTENCES)?,
        ));
        let (l, v, a, t, e) = (llm.clone(), vlm.clone(), asr.clone(), mt.clone(), emb.clone());
        Ok(Services::new(llm, vlm, asr, mt, emb).on_finish(move || {
            l.store().compact()?;
            v.store().compact()?;
            a.store().compact()?;
            t.store().compact()?;
            e.compact()
        }))
    }

    /// Service settings naming the scripted models, so replayed lookups hit
    /// the recorded keys.
    pub fn services_config() -> ServicesConfig {
        ServicesConfig {
            llm: ChatEndpointConfig::new("", "scripted-llm"),
            vlm: ChatEndpointConfig::new("", "scripted-vlm"),
            asr: EndpointConfig::new("", "scripted-asr"),
            translator: EndpointConfig::new("", "scripted-translator"),
            ..ServicesConfig::default()
        }
    }

    fn query_by_text(&self, text: &str) -> Option<&ScriptedQuery> {
        self.queries.iter().find(|q| q.text == text)
    }
}

/// Upstream settings recorded by [`write_fixture`] besides the defaults:
/// no ASR, raw events and a 4-frame budget.
pub fn fixture_variants(base: &UpstreamSettings) -> Vec<UpstreamSettings> {
    let mut out = vec![base.clone()];
    out.push(UpstreamSettings { use_asr: false, ..base.clone() });
    let mut raw = base.clone();
    raw.scoring.use_refined_events = false;
    out.push(raw);
    out.push(UpstreamSettings { frame_count: 4, ..base.clone() });
    out
}

/// Writes a self-contained replay fixture into `dir`:
///
/// - `corpus/` with the manifest `corpus.json`,
/// - `replay/` with every recorded service response,
/// - `run.json`, a replay-mode config with paths relative to `dir`.
///
/// Every upstream setting in [`fixture_variants`] is recorded, so runs with
/// those settings replay without misses. Returns the path of `run.json`.
pub fn write_fixture(world: ScriptedWorld, dir: &Path) -> Result<PathBuf> {
    let (corpus, media) = world.corpus()?;
    let manifest = write_corpus(dir.join("corpus"), &corpus, &media)?;
    let seed = world.seed;
    let world = Arc::new(world);

    let mut file_config = RunConfig::new("corpus/corpus.json");
    file_config.mode = ServiceMode::Replay;
    file_config.replay_dir = Some("replay".into());
    file_config.services = ScriptedWorld::services_config();
    file_config.seed = seed;

    let mut record_config = file_config.clone();
    record_config.resolve_paths(dir);
    record_config.mode = ServiceMode::Record;
    let scratch = dir.join(".recording");
    record_config.output_dir = scratch.clone();
    let services = world.recording_services(&dir.join("replay"))?;
    let pipeline = Pipeline::new(record_config.clone(), load_corpus(&manifest)?, services)?;
    for settings in fixture_variants(&UpstreamSettings::from_config(&record_config)) {
        pipeline.upstream(&settings)?;
    }
    pipeline.services.finish()?;
    fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;

    let path = dir.join("run.json");
    write_json(&path, &file_config)?;
    Ok(path)
}

/// Text following the last occurrence of `marker`, up to the end of its line.
fn after<'a>(text: &'a str, marker: &str) -> Option<&'a str> {
    text.rfind(marker).map(|i| text[i + marker.len()..].lines().next().unwrap_or("").trim())
}

/// Text after `heading` up to the first of `ends`.
fn block<'a>(text: &'a str, heading: &str, ends: &[&str]) -> Option<&'a str> {
    let start = text.find(heading)? + heading.len();
    let rest = &text[start..];
    let end = ends.iter().filter_map(|e| rest.find(e)).min().unwrap_or(rest.len());
    Some(rest[..end].trim())
}

fn numbered(items: &[String]) -> String {
    items
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {e}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn or_na(v: &Option<String>) -> &str {
    v.as_deref().unwrap_or("NOT AVAILABLE")
}

#[derive(Debug)]
pub struct ScriptedLlm(pub Arc<ScriptedWorld>);

impl ModelService for ScriptedLlm {
    fn model_name(&self) -> &str {
        "scripted-llm"
    }
}

impl ChatClient for ScriptedLlm {
    fn complete(&self, r: &ChatRequest) -> Result<String> {
        let t = &r.text;
        let query = || after(t, "from: ").and_then(|q| self.0.query_by_text(q));
        let events = |f: fn(&ScriptedQuery) -> &Vec<String>| match query() {
            Some(q) => format!("EXPLANATION: scripted.\nEVENTS:\n{}", numbered(f(q))),
            None => "EXPLANATION: I do not recognize this query.".into(),
        };
        Ok(match r.prompt {
            PromptKind::DecomposePrequel => events(|q| &q.prequel),
            PromptKind::DecomposeCurrent => events(|q| &q.current),
            PromptKind::DecomposeSequel => events(|q| &q.sequel),
            PromptKind::PrimaryEvent => match query().and_then(|q| q.primary_event.as_ref()) {
                Some(e) => format!("EXPLANATION: scripted.\nEVENTS:\n1. {e}"),
                None => "EXPLANATION: scripted.\nEVENTS: NOT AVAILABLE".into(),
            },
            PromptKind::Location => format!(
                "EXPLANATION: scripted.\nLOCATION INFORMATION: {}",
                query().map_or("NOT AVAILABLE", |q| or_na(&q.place))
            ),
            PromptKind::Temporal => format!(
                "EXPLANATION: scripted.\nTEMPORAL INFORMATION: {}",
                query().map_or("NOT AVAILABLE", |q| or_na(&q.time))
            ),
            PromptKind::RefineQuery => {
                let base = after(t, "Base Query: ").unwrap_or("");
                let place = after(t, "Place: ").unwrap_or("");
                let time = after(t, "Time: ").unwrap_or("");
                let mut refined = base.to_string();
                if !place.is_empty() {
                    refined.push_str(&format!(" in {place}"));
                }
                if !time.is_empty() {
                    refined.push_str(&format!(" during {time}"));
                }
                format!("EXPLANATION: scripted.\nREFINED QUERY: {refined}")
            }
            PromptKind::VideoCaption => {
                let frames = block(t, "# Frame Descriptions:", &["\n# "]).unwrap_or("");
                let mut captions: Vec<&str> = Vec::new();
                for line in frames.lines().map(str::trim) {
                    if !line.is_empty() && !line.starts_with("## Frame") && captions.last() != Some(&line) {
                        captions.push(line);
                    }
                }
                let mut summary = format!("The video shows {}.", captions.join(", then "));
                if let Some(asr) = block(t, "# Original ASR Transcript (Entire Video):", &["\n# "]) {
                    summary.push_str(&format!(" A voice says: {asr}."));
                }
                summary
            }
            PromptKind::RefineAsr => {
                let ends = ["\n#", "\nOutput the refined"];
                let second = block(t, "## Translation 2:", &ends);
                let first = block(t, "## Translation 1:", &ends).unwrap_or("");
                let original = block(t, "## Original Transcript:", &ends).unwrap_or("");
                if original.is_empty() {
                    "Not Available".into()
                } else {
                    second.unwrap_or(first).to_string()
                }
            }
            PromptKind::FrameCaption => {
                return Err(Error::invalid("the language model does not caption frames"));
            }
        })
    }
}

#[derive(Debug)]
pub struct ScriptedVlm(pub Arc<ScriptedWorld>);

impl ModelService for ScriptedVlm {
    fn model_name(&self) -> &str {
        "scripted-vlm"
    }
}

impl ChatClient for ScriptedVlm {
    fn complete(&self, r: &ChatRequest) -> Result<String> {
        let image = r.images.first().ok_or_else(|| Error::invalid("frame caption needs an image"))?;
        let (video, frame) = image
            .strip_prefix("frames/")
            .and_then(|s| s.strip_suffix(".jpg"))
            .and_then(|s| s.split_once('/'))
            .ok_or_else(|| Error::invalid(format!("unknown frame reference `{image}`")))?;
        let frame: usize = frame.parse().map_err(|_| Error::invalid(format!("bad frame index in `{image}`")))?;
        let v = self
            .0
            .videos
            .iter()
            .find(|v| v.id == video)
            .ok_or_else(|| Error::invalid(format!("unknown video `{video}`")))?;
        let mut caption = v.scene_at(frame).to_string();
        if r.text.contains("# Original ASR Transcript") {
            caption.push_str(" while someone is speaking");
        }
        Ok(caption)
    }
}

#[derive(Debug)]
pub struct ScriptedAsr(pub Arc<ScriptedWorld>);

impl ModelService for ScriptedAsr {
    fn model_name(&self) -> &str {
        "scripted-asr"
    }
}

impl AsrClient for ScriptedAsr {
    fn transcribe(&self, audio_ref: &str) -> Result<AsrOutput> {
        let v = self
            .0
            .videos
            .iter()
            .find(|v| v.audio_ref().as_deref() == Some(audio_ref))
            .ok_or_else(|| Error::invalid(format!("unknown audio `{audio_ref}`")))?;
        let s = v.speech.as_ref().expect("audio_ref implies speech");
        Ok(AsrOutput {
            original_text: s.original.clone(),
            english_text: s.asr_english.clone(),
            language: Some(s.language.clone()),
        })
    }
}

#[derive(Debug)]
pub struct ScriptedTranslator(pub Arc<ScriptedWorld>);

impl ModelService for ScriptedTranslator {
    fn model_name(&self) -> &str {
        "scripted-translator"
    }
}

impl Translator for ScriptedTranslator {
    fn translate(&self, text: &str, _source_language: Option<&str>) -> Result<String> {
        let by_original: BTreeMap<&str, &str> = self
            .0
            .videos
            .iter()
            .filter_map(|v| v.speech.as_ref())
            .map(|s| (s.original.as_str(), s.mt_english.as_str()))
            .collect();
        by_original
            .get(text)
            .map(|s| s.to_string())
            .ok_or_else(|| Error::invalid("no scripted translation"))
    }
}
