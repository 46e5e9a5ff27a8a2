use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{content_key, ArtifactStore};
use crate::error::{Error, Result};
use crate::fusion::{fuse_matrix, FusionConfig};
use crate::io::{matrices_to_tsv, write_json, write_jsonl, write_matrices, write_rankings, CorpusBundle};
use crate::knowledge::{AsrStages, DecompositionOutcome, Knowledge, PromptKind, PromptSet, TranscriptOutcome};
use crate::metrics::{evaluate_run, EvalConfig, MetricReport};
use crate::model::{Corpus, DescriptionSet, EventDecomposition, RankedList, ScoreComponentMatrix};
use crate::scoring::{build_score_matrix_indexed, DescriptionIndex, ScoringConfig};

use super::config::{sample_frames_uniform, RunConfig, Services, FRAME_SAMPLING_RULE};

/// Something worth knowing about a run that did not stop it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub stage: String,
    pub subject: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryDecomposition {
    pub query_id: String,
    #[serde(flatten)]
    pub outcome: DecompositionOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoTranscript {
    pub video_id: String,
    #[serde(flatten)]
    pub outcome: TranscriptOutcome,
}

/// Stored result of describing one video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct DescribeArtifact {
    frame_indices: Vec<usize>,
    frame_captions: Vec<String>,
    video_caption: Option<String>,
    notes: Vec<String>,
}

/// Settings that change the score matrices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpstreamSettings {
    pub frame_count: usize,
    pub use_asr: bool,
    pub asr_stages: AsrStages,
    pub scoring: ScoringConfig,
}

impl UpstreamSettings {
    pub fn from_config(config: &RunConfig) -> Self {
        UpstreamSettings {
            frame_count: config.frame_count,
            use_asr: config.use_asr,
            asr_stages: config.asr_stages,
            scoring: config.scoring(),
        }
    }
}

/// Per-query score matrices plus which queries lacked a decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRun {
    pub matrices: Vec<ScoreComponentMatrix>,
    pub fallback: Vec<String>,
}

/// Top-level report written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub frame_sampling: String,
    pub frame_count: usize,
    pub use_asr: bool,
    pub asr_stages: AsrStages,
    pub use_refined_events: bool,
    pub aggregation: String,
    pub fusion: FusionConfig,
    pub queries_ranked: usize,
    pub queries_without_events: usize,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub decompositions: Vec<QueryDecomposition>,
    pub descriptions: Vec<DescriptionSet>,
    pub scored: ScoredRun,
    pub rankings: Vec<RankedList>,
    pub report: RunReport,
    pub diagnostics: Vec<Diagnostic>,
}

/// Stage runner over one corpus. Stage outputs are cached in an
/// [`ArtifactStore`] keyed on their inputs, prompt hashes and model names,
/// so reruns only redo stages whose inputs changed.
pub struct Pipeline {
    pub config: RunConfig,
    pub bundle: CorpusBundle,
    pub services: Services,
    knowledge: Knowledge,
    artifacts: ArtifactStore,
    diagnostics: Mutex<Vec<Diagnostic>>,
}

impl Pipeline {
    pub fn new(config: RunConfig, bundle: CorpusBundle, services: Services) -> Result<Self> {
        config.validate()?;
        let prompts = match &config.prompts_dir {
            Some(dir) => PromptSet::load_dir(dir)?,
            None => PromptSet::builtin(),
        };
        let knowledge = Knowledge::new(prompts, config.retry());
        let artifacts = ArtifactStore::new(config.cache_dir());
        Ok(Pipeline {
            config,
            bundle,
            services,
            knowledge,
            artifacts,
            diagnostics: Mutex::new(Vec::new()),
        })
    }

    /// Loads the corpus and builds services as configured.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let bundle = crate::io::load_corpus(&config.corpus)?;
        let services = Services::from_config(&config, &bundle.root)?;
        Pipeline::new(config, bundle, services)
    }

    pub fn corpus(&self) -> &Corpus {
        &self.bundle.corpus
    }

    fn note(&self, stage: &str, subject: &str, message: impl Into<String>) {
        self.diagnostics.lock().unwrap().push(Diagnostic {
            stage: stage.into(),
            subject: subject.into(),
            message: message.into(),
        });
    }

    /// Sorted and de-duplicated diagnostics gathered so far.
    pub fn diagnostics(&self) -> Vec<Diagnostic> {
        let mut d = self.diagnostics.lock().unwrap().clone();
        d.sort();
        d.dedup();
        d
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.config.workers {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n.max(1))
                    .build()
                    .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
                Ok(pool.install(f))
            }
            None => Ok(f()),
        }
    }

    fn cached<T: Serialize + serde::de::DeserializeOwned>(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        if let Some(v) = self.artifacts.get(stage, key)? {
            return Ok(v);
        }
        let v = compute()?;
        self.artifacts.put(stage, key, &v)?;
        Ok(v)
    }

    fn prompt_hash(&self, kind: PromptKind) -> &str {
        self.knowledge.prompts.get(kind).hash()
    }

    /// Event decomposition and refinement for every query.
    pub fn decompose(&self) -> Result<Vec<QueryDecomposition>> {
        let llm = self.services.llm.as_ref();
        let mut key_base: Vec<String> = vec!["decompose".into(), llm.model_name().into()];
        key_base.extend(
            [
                PromptKind::DecomposePrequel,
                PromptKind::DecomposeCurrent,
                PromptKind::DecomposeSequel,
                PromptKind::PrimaryEvent,
                PromptKind::Location,
                PromptKind::Temporal,
                PromptKind::RefineQuery,
            ]
            .map(|k| self.prompt_hash(k).to_string()),
        );
        key_base.push(self.knowledge.retry.attempts.to_string());
        let out = self.in_pool(|| {
            self.corpus()
                .queries
                .par_iter()
                .map(|q| {
                    let mut parts = key_base.clone();
                    parts.push(q.text.clone());
                    let outcome: DecompositionOutcome =
                        self.cached("decompose", &content_key(&parts), || self.knowledge.decompose_query(q, llm))?;
                    for w in &outcome.warnings {
                        self.note("decompose", &q.id, w.clone());
                    }
                    Ok(QueryDecomposition {
                        query_id: q.id.clone(),
                        outcome,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        out
    }

    /// Speech transcripts for videos that have audio. Muted videos and videos
    /// without an audio reference get no transcript and make no calls.
    pub fn transcribe(&self, stages: AsrStages) -> Result<Vec<VideoTranscript>> {
        let s = &self.services;
        let key_base = vec![
            "transcribe".to_string(),
            s.asr.model_name().into(),
            s.translator.model_name().into(),
            s.llm.model_name().into(),
            self.prompt_hash(PromptKind::RefineAsr).into(),
            serde_json::to_string(&stages).expect("plain struct"),
        ];
        let out = self.in_pool(|| {
            self.corpus()
                .videos
                .par_iter()
                .map(|v| {
                    let audio = self.bundle.media.get(&v.id).and_then(|m| m.audio.as_deref());
                    let outcome = match (v.has_audio, audio) {
                        (true, Some(audio)) => {
                            let mut parts = key_base.clone();
                            parts.push(audio.to_string());
                            self.cached("transcribe", &content_key(&parts), || {
                                self.knowledge.transcribe_and_refine(
                                    audio,
                                    s.asr.as_ref(),
                                    Some(s.translator.as_ref()),
                                    Some(s.llm.as_ref()),
                                    stages,
                                )
                            })?
                        }
                        _ => TranscriptOutcome {
                            notes: vec!["no audio".into()],
                            ..Default::default()
                        },
                    };
                    for n in &outcome.notes {
                        self.note("transcribe", &v.id, n.clone());
                    }
                    Ok(VideoTranscript {
                        video_id: v.id.clone(),
                        outcome,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        out
    }

    /// Description sets for every video. Videos with media get `k` sampled
    /// frame captions (each conditioned on the previous one) and a summary;
    /// videos without media fall back to descriptions shipped with the
    /// corpus. Without `transcripts` the audio-free prompt variants are used
    /// and no transcript is attached.
    pub fn describe(&self, k: usize, transcripts: Option<&[VideoTranscript]>) -> Result<Vec<DescriptionSet>> {
        let by_video: BTreeMap<&str, &TranscriptOutcome> = transcripts
            .unwrap_or_default()
            .iter()
            .map(|t| (t.video_id.as_str(), &t.outcome))
            .collect();
        let provided: BTreeMap<&str, &DescriptionSet> =
            self.corpus().descriptions.iter().map(|d| (d.video_id.as_str(), d)).collect();
        let s = &self.services;
        let key_base = vec![
            "describe".to_string(),
            s.vlm.model_name().into(),
            s.llm.model_name().into(),
            self.prompt_hash(PromptKind::FrameCaption).into(),
            self.prompt_hash(PromptKind::VideoCaption).into(),
            self.knowledge.retry.attempts.to_string(),
        ];
        let use_asr = transcripts.is_some();
        let out = self.in_pool(|| {
            self.corpus()
                .videos
                .par_iter()
                .map(|v| {
                    let t = by_video.get(v.id.as_str());
                    let transcript = t.and_then(|t| t.transcript.clone());
                    let Some(media) = self.bundle.media.get(&v.id) else {
                        return Ok(match provided.get(v.id.as_str()) {
                            Some(d) => DescriptionSet {
                                transcript: if use_asr { d.transcript.clone() } else { None },
                                ..(*d).clone()
                            },
                            None => {
                                self.note("describe", &v.id, "no media and no provided descriptions");
                                DescriptionSet {
                                    video_id: v.id.clone(),
                                    ..Default::default()
                                }
                            }
                        });
                    };
                    let frame_indices = match &media.scene_frames {
                        Some(idx) => idx.clone(),
                        None => sample_frames_uniform(media.total_frames, k)?,
                    };
                    let refs: Vec<String> = frame_indices.iter().map(|&i| media.frame_ref(i)).collect();
                    // frame captions see the original-language speech; the
                    // summary sees the refined English transcript
                    let original = t
                        .and_then(|t| t.asr.as_ref())
                        .map(|a| a.original_text.trim().to_string())
                        .filter(|s| !s.is_empty());
                    let mut parts = key_base.clone();
                    parts.extend(refs.iter().cloned());
                    parts.push(original.clone().unwrap_or_default());
                    parts.push(transcript.clone().unwrap_or_default());
                    parts.push(use_asr.to_string());
                    let art: DescribeArtifact = self.cached("describe", &content_key(&parts), || {
                        self.describe_video(&refs, frame_indices.clone(), original.as_deref(), transcript.as_deref(), use_asr)
                    })?;
                    for n in &art.notes {
                        self.note("describe", &v.id, n.clone());
                    }
                    Ok(DescriptionSet {
                        video_id: v.id.clone(),
                        frame_captions: art.frame_captions,
                        video_caption: art.video_caption,
                        transcript,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        out
    }

    fn describe_video(
        &self,
        refs: &[String],
        frame_indices: Vec<usize>,
        original: Option<&str>,
        transcript: Option<&str>,
        use_asr: bool,
    ) -> Result<DescribeArtifact> {
        let vlm = self.services.vlm.as_ref();
        let mut captions = Vec::new();
        let mut notes = Vec::new();
        let mut prev: Option<String> = None;
        let frame_context = if use_asr { original } else { None };
        for r in refs {
            match self.knowledge.caption_frame(r, prev.as_deref(), frame_context, vlm) {
                Ok(c) => {
                    prev = Some(c.clone());
                    captions.push(c);
                }
                Err(e @ Error::ReplayMiss { .. }) => return Err(e),
                Err(e) => notes.push(format!("caption for {r} missing: {e}")),
            }
        }
        let summary_context = if use_asr { transcript } else { None };
        let video_caption = if captions.is_empty() {
            notes.push("no frame captions, skipping summary".into());
            None
        } else {
            match self.knowledge.summarize_video(&captions, summary_context, self.services.llm.as_ref()) {
                Ok(s) => Some(s),
                Err(e @ Error::ReplayMiss { .. }) => return Err(e),
                Err(e) => {
                    notes.push(format!("summary missing: {e}"));
                    None
                }
            }
        };
        Ok(DescribeArtifact {
            frame_indices,
            frame_captions: captions,
            video_caption,
            notes,
        })
    }

    /// Score matrices for every query that could be scored. Frame embeddings
    /// are subsampled to `frame_count` with the same uniform rule.
    pub fn score(
        &self,
        decompositions: &[QueryDecomposition],
        descriptions: &[DescriptionSet],
        frame_count: usize,
        scoring: &ScoringConfig,
    ) -> Result<ScoredRun> {
        let corpus = self.corpus();
        let mut sampled = Corpus {
            dim: corpus.dim,
            queries: corpus.queries.clone(),
            videos: corpus.videos.clone(),
            descriptions: descriptions.to_vec(),
            judgments: corpus.judgments.clone(),
        };
        for v in &mut sampled.videos {
            if !v.frame_embeddings.is_empty() {
                let keep = sample_frames_uniform(v.frame_embeddings.len(), frame_count)?;
                v.frame_embeddings = keep.iter().map(|&i| v.frame_embeddings[i].clone()).collect();
            }
        }
        let provider = self.services.embeddings.as_ref();
        let decomp: BTreeMap<&str, Option<&EventDecomposition>> = decompositions
            .iter()
            .map(|d| (d.query_id.as_str(), d.outcome.decomposition.as_ref()))
            .collect();
        let results = self.in_pool(|| -> Result<Vec<_>> {
            let index = DescriptionIndex::build(&sampled.descriptions, provider)?;
            sampled
                .queries
                .par_iter()
                .map(|q| {
                    let d = decomp.get(q.id.as_str()).copied().flatten();
                    match build_score_matrix_indexed(q, d, &sampled, &index, provider, scoring) {
                        Ok(o) => Ok(Some(o)),
                        Err(e @ Error::ReplayMiss { .. }) => Err(e),
                        Err(e) => {
                            self.note("score", &q.id, format!("query not scored: {e}"));
                            Ok(None)
                        }
                    }
                })
                .collect()
        })??;
        let mut run = ScoredRun {
            matrices: Vec::new(),
            fallback: Vec::new(),
        };
        for outcome in results.into_iter().flatten() {
            for e in &outcome.video_errors {
                self.note("score", &format!("{}/{}", e.query_id, e.video_id), e.message.clone());
            }
            if outcome.fallback {
                self.note("score", &outcome.matrix.query_id, "no decomposition, scored on query components only");
                run.fallback.push(outcome.matrix.query_id.clone());
            }
            run.matrices.push(outcome.matrix);
        }
        Ok(run)
    }

    /// Runs every stage that feeds the score matrices.
    pub fn upstream(&self, settings: &UpstreamSettings) -> Result<(Vec<QueryDecomposition>, Vec<DescriptionSet>, ScoredRun)> {
        let decompositions = self.decompose()?;
        let transcripts = if settings.use_asr {
            Some(self.transcribe(settings.asr_stages)?)
        } else {
            None
        };
        let descriptions = self.describe(settings.frame_count, transcripts.as_deref())?;
        let scored = self.score(&decompositions, &descriptions, settings.frame_count, &settings.scoring)?;
        Ok((decompositions, descriptions, scored))
    }

    /// The full pipeline, writing every artifact to `output_dir`.
    pub fn run(&self) -> Result<RunOutput> {
        let settings = UpstreamSettings::from_config(&self.config);
        let (decompositions, descriptions, scored) = self.upstream(&settings)?;
        let rankings = fuse_all(&scored.matrices, &self.config.fusion)?;
        let metrics = evaluate_run(&rankings, &self.corpus().judgments, &self.corpus().queries, &self.config.eval)?;
        let report = RunReport {
            frame_sampling: FRAME_SAMPLING_RULE.into(),
            frame_count: self.config.frame_count,
            use_asr: self.config.use_asr,
            asr_stages: self.config.asr_stages,
            use_refined_events: self.config.use_refined_events,
            aggregation: self.config.aggregation.to_string(),
            fusion: self.config.fusion,
            queries_ranked: rankings.len(),
            queries_without_events: scored.fallback.len(),
            metrics,
        };
        let out = RunOutput {
            decompositions,
            descriptions,
            scored,
            rankings,
            report,
            diagnostics: self.diagnostics(),
        };
        self.write_outputs(&out)?;
        self.services.finish()?;
        Ok(out)
    }

    fn write_outputs(&self, out: &RunOutput) -> Result<()> {
        let dir = &self.config.output_dir;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.resolved.json"), &self.config)?;
        write_jsonl(&dir.join("decompositions.jsonl"), &out.decompositions)?;
        write_jsonl(&dir.join("descriptions.jsonl"), &out.descriptions)?;
        write_matrices(dir, "matrices", &out.scored.matrices)?;
        crate::cache::write_atomic(&dir.join("matrices.tsv"), matrices_to_tsv(&out.scored.matrices).as_bytes())?;
        write_rankings(&dir.join("rankings.jsonl"), &out.rankings)?;
        write_json(&dir.join("report.json"), &out.report)?;
        crate::cache::write_atomic(&dir.join("report.tsv"), out.report.metrics.to_tsv().as_bytes())?;
        write_jsonl(&dir.join("diagnostics.jsonl"), &out.diagnostics)
    }
}

/// Fuses every matrix; order follows the input.
pub fn fuse_all(matrices: &[ScoreComponentMatrix], fusion: &FusionConfig) -> Result<Vec<RankedList>> {
    matrices
        .par_iter()
        .map(|m| Ok(fuse_matrix(m, fusion)?.ranked_list(&m.video_order)))
        .collect()
}

/// Evaluates stored rankings against a corpus's judgments.
pub fn evaluate_rankings(rankings: &[RankedList], corpus: &Corpus, eval: &EvalConfig) -> Result<MetricReport> {
    evaluate_run(rankings, &corpus.judgments, &corpus.queries, eval)
}

pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_json(&dir.join("report.json"), report)?;
    crate::cache::write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())
}
