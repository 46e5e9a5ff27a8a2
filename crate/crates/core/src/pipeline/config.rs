use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cache::{ReplayStore, StoreMode};
use crate::embedding::{HttpEmbeddings, RecordingEmbeddings, ReplayEmbeddings};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::http::{EndpointConfig, RetryPolicy};
use crate::io::read_json;
use crate::knowledge::{
    AsrClient, AsrStages, ChatClient, ChatEndpointConfig, HttpAsr, HttpChat, HttpTranslator,
    Recording, Replay, Translator,
};
use crate::metrics::EvalConfig;
use crate::scoring::{AggregationPolicy, ScoringConfig};
use crate::similarity::EmbeddingProvider;

/// How model services are reached.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceMode {
    /// Recorded outputs only; no network access.
    #[default]
    Replay,
    /// Live calls, with every output appended to the replay stores.
    Record,
    /// Live calls without recording.
    Live,
}

/// Replay store file names inside `replay_dir`.
pub mod replay_files {
    pub const LLM: &str = "llm.jsonl";
    pub const VLM: &str = "vlm.jsonl";
    pub const ASR: &str = "asr.jsonl";
    pub const TRANSLATOR: &str = "translator.jsonl";
    pub const EMBED_TOKENS: &str = "embed_tokens.jsonl";
    pub const EMBED_SENTENCES: &str = "embed_sentences.jsonl";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServicesConfig {
    /// Language model for decomposition, refinement, summaries and transcript
    /// refinement.
    pub llm: ChatEndpointConfig,
    /// Vision-language model for frame captions.
    pub vlm: ChatEndpointConfig,
    pub asr: EndpointConfig,
    pub translator: EndpointConfig,
    /// Token-level text embeddings for description matching.
    pub text_embedding: EndpointConfig,
    /// Sentence embeddings in the frame-embedding space.
    pub sentence_embedding: EndpointConfig,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        ServicesConfig {
            llm: ChatEndpointConfig::new("", "llm"),
            vlm: ChatEndpointConfig::new("", "vlm"),
            asr: EndpointConfig::new("", "asr"),
            translator: EndpointConfig::new("", "translator"),
            text_embedding: EndpointConfig::new("", "text-embedding"),
            sentence_embedding: EndpointConfig::new("", "sentence-embedding"),
        }
    }
}

fn default_frame_count() -> usize {
    16
}

fn yes() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything one retrieval run needs. Relative paths in a config file are
/// resolved against the file's directory by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to the corpus manifest.
    pub corpus: PathBuf,
    /// Frames sampled per video (K).
    #[serde(default = "default_frame_count")]
    pub frame_count: usize,
    #[serde(default = "yes")]
    pub use_asr: bool,
    #[serde(default)]
    pub asr_stages: AsrStages,
    #[serde(default = "yes")]
    pub use_refined_events: bool,
    #[serde(default)]
    pub aggregation: AggregationPolicy,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub mode: ServiceMode,
    #[serde(default)]
    pub services: ServicesConfig,
    /// Directory holding the replay stores; required unless `mode` is live.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_dir: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts_dir: Option<PathBuf>,
    /// Only used for synthetic fixture generation.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; defaults to the number of CPUs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Stage artifact cache; defaults to `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn new(corpus: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus: corpus.into(),
            frame_count: default_frame_count(),
            use_asr: true,
            asr_stages: AsrStages::default(),
            use_refined_events: true,
            aggregation: AggregationPolicy::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            mode: ServiceMode::Replay,
            services: ServicesConfig::default(),
            replay_dir: None,
            prompts_dir: None,
            seed: 0,
            workers: None,
            cache_dir: None,
            output_dir: default_output_dir(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    /// Makes every relative path absolute-from-`base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        for p in [&mut self.replay_dir, &mut self.prompts_dir, &mut self.cache_dir].into_iter().flatten() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_count == 0 {
            return Err(Error::Config("frame_count must be at least 1".into()));
        }
        if self.mode != ServiceMode::Live && self.replay_dir.is_none() {
            return Err(Error::Config("replay and record modes need `replay_dir`".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.ndcg_ks.contains(&0) {
            return Err(Error::Config("metric cutoffs must be non-empty and positive".into()));
        }
        self.services.llm.validate()?;
        self.services.vlm.validate()?;
        Ok(())
    }

    /// Endpoints must have URLs when real clients are built from them.
    fn check_endpoints(&self) -> Result<()> {
        let s = &self.services;
        for (name, url) in [
            ("llm", &s.llm.endpoint.base_url),
            ("vlm", &s.vlm.endpoint.base_url),
            ("asr", &s.asr.base_url),
            ("translator", &s.translator.base_url),
            ("text_embedding", &s.text_embedding.base_url),
            ("sentence_embedding", &s.sentence_embedding.base_url),
        ] {
            if url.is_empty() {
                return Err(Error::Config(format!("service `{name}` needs a base_url outside replay mode")));
            }
        }
        Ok(())
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig {
            policy: self.aggregation,
            use_refined_events: self.use_refined_events,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// Retry policy for unparseable model responses. Replayed runs never wait.
    pub fn retry(&self) -> RetryPolicy {
        match self.mode {
            ServiceMode::Replay => RetryPolicy::immediate(self.services.llm.endpoint.retry.attempts),
            _ => self.services.llm.endpoint.retry,
        }
    }
}

type Finisher = Box<dyn Fn() -> Result<()> + Send + Sync>;

/// The model services a pipeline calls.
pub struct Services {
    pub llm: Arc<dyn ChatClient>,
    pub vlm: Arc<dyn ChatClient>,
    pub asr: Arc<dyn AsrClient>,
    pub translator: Arc<dyn Translator>,
    pub embeddings: Arc<dyn EmbeddingProvider>,
    finishers: Vec<Finisher>,
}

impl std::fmt::Debug for Services {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Services")
            .field("llm", &self.llm.model_name())
            .field("vlm", &self.vlm.model_name())
            .field("asr", &self.asr.model_name())
            .field("translator", &self.translator.model_name())
            .finish_non_exhaustive()
    }
}

fn replay_store(path: &Path) -> Result<ReplayStore> {
    if path.exists() {
        ReplayStore::open(path, StoreMode::ReadOnly)
    } else {
        // every lookup misses, which surfaces as an attributed replay error
        Ok(ReplayStore::in_memory())
    }
}

impl Services {
    pub fn new(
        llm: Arc<dyn ChatClient>,
        vlm: Arc<dyn ChatClient>,
        asr: Arc<dyn AsrClient>,
        translator: Arc<dyn Translator>,
        embeddings: Arc<dyn EmbeddingProvider>,
    ) -> Self {
        Services {
            llm,
            vlm,
            asr,
            translator,
            embeddings,
            finishers: Vec::new(),
        }
    }

    /// Registers work to run after a pipeline finishes, such as compacting
    /// recorded stores.
    pub fn on_finish(mut self, f: impl Fn() -> Result<()> + Send + Sync + 'static) -> Self {
        self.finishers.push(Box::new(f));
        self
    }

    pub fn finish(&self) -> Result<()> {
        self.finishers.iter().try_for_each(|f| f())
    }

    /// Builds services for `config.mode`. `media_root` is where relative
    /// frame and audio references resolve (the corpus directory).
    pub fn from_config(config: &RunConfig, media_root: &Path) -> Result<Self> {
        let s = &config.services;
        let dir = config.replay_dir.clone();
        let file = |name: &str| dir.as_ref().map(|d| d.join(name)).ok_or_else(|| Error::Config("missing replay_dir".into()));
        if config.mode != ServiceMode::Replay {
            config.check_endpoints()?;
        }
        match config.mode {
            ServiceMode::Replay => {
                let tokens = replay_store(&file(replay_files::EMBED_TOKENS)?)?;
                let sentences = replay_store(&file(replay_files::EMBED_SENTENCES)?)?;
                Ok(Services::new(
                    Arc::new(Replay::new(&s.llm.endpoint.model_name, replay_store(&file(replay_files::LLM)?)?)),
                    Arc::new(Replay::new(&s.vlm.endpoint.model_name, replay_store(&file(replay_files::VLM)?)?)),
                    Arc::new(Replay::new(&s.asr.model_name, replay_store(&file(replay_files::ASR)?)?)),
                    Arc::new(Replay::new(&s.translator.model_name, replay_store(&file(replay_files::TRANSLATOR)?)?)),
                    Arc::new(ReplayEmbeddings::from_stores(&tokens, &sentences)?),
                ))
            }
            ServiceMode::Live => Ok(Services::new(
                Arc::new(HttpChat::new(s.llm.clone())?),
                Arc::new(HttpChat::new(s.vlm.clone())?.with_media_root(media_root)),
                Arc::new(HttpAsr::new(s.asr.clone()).with_media_root(media_root)),
                Arc::new(HttpTranslator::new(s.translator.clone())),
                Arc::new(HttpEmbeddings::new(s.text_embedding.clone(), s.sentence_embedding.clone())),
            )),
            ServiceMode::Record => {
                let open = |name: &str| ReplayStore::open(file(name)?, StoreMode::Record);
                let llm = Arc::new(Recording::new(HttpChat::new(s.llm.clone())?, open(replay_files::LLM)?));
                let vlm = Arc::new(Recording::new(
                    HttpChat::new(s.vlm.clone())?.with_media_root(media_root),
                    open(replay_files::VLM)?,
                ));
                let asr = Arc::new(Recording::new(
                    HttpAsr::new(s.asr.clone()).with_media_root(media_root),
                    open(replay_files::ASR)?,
                ));
                let mt = Arc::new(Recording::new(HttpTranslator::new(s.translator.clone()), open(replay_files::TRANSLATOR)?));
                let emb = Arc::new(RecordingEmbeddings::new(
                    HttpEmbeddings::new(s.text_embedding.clone(), s.sentence_embedding.clone()),
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
        }
    }
}

/// Uniformly spaced frame indices: all frames when `n <= k`, otherwise
/// `floor(i * n / k)` for `i` in `0..k`.
pub fn sample_frames_uniform(n: usize, k: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("cannot sample frames from an empty video"));
    }
    if k == 0 {
        return Err(Error::invalid("frame count must be at least 1"));
    }
    if n <= k {
        return Ok((0..n).collect());
    }
    Ok((0..k).map(|i| (i as u128 * n as u128 / k as u128) as usize).collect())
}

/// Human-readable sampling rule, written into reports.
pub const FRAME_SAMPLING_RULE: &str = "uniform: all frames if N <= K, else floor(i*N/K) for i in 0..K";
