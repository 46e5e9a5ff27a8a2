//! Model service adapters: chat completion (optionally with images), speech
//! recognition and translation. Each has a live HTTP implementation, and all
//! three share the file-backed [`Replay`] and [`Recording`] wrappers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cache::{content_key, sha256_hex, ReplayStore, StoreMode};
use crate::error::{Error, Result};
use crate::http::{EndpointConfig, JsonEndpoint};

use super::prompts::{PromptKind, Template};

/// One rendered prompt plus image attachments (paths, URLs or data URLs).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub prompt: PromptKind,
    pub template_hash: String,
    pub text: String,
    pub images: Vec<String>,
    /// Retry index; attempts after the first get their own cache entries.
    pub attempt: u32,
}

impl ChatRequest {
    pub fn new(template: &Template, text: impl Into<String>) -> Self {
        ChatRequest {
            prompt: template.kind(),
            template_hash: template.hash().to_string(),
            text: text.into(),
            images: Vec::new(),
            attempt: 0,
        }
    }

    pub fn with_image(mut self, image: impl Into<String>) -> Self {
        self.images.push(image.into());
        self
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }

    /// Hash of the rendered prompt and attachment references.
    pub fn input_hash(&self) -> String {
        let mut parts = vec![self.text.as_str()];
        parts.extend(self.images.iter().map(String::as_str));
        content_key(&parts)
    }

    /// Cache key over (model, template hash, rendered input, attempt).
    pub fn cache_key(&self, model: &str) -> String {
        let attempt = self.attempt.to_string();
        let mut parts = vec!["chat", model, &self.template_hash, &self.text];
        parts.extend(self.images.iter().map(String::as_str));
        if self.attempt > 0 {
            parts.push(&attempt);
        }
        content_key(&parts)
    }
}

/// Transcript in the spoken language plus the recognizer's own English.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrOutput {
    #[serde(default)]
    pub original_text: String,
    #[serde(default)]
    pub english_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

pub trait ModelService: Send + Sync {
    fn model_name(&self) -> &str;
}

pub trait ChatClient: ModelService {
    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

pub trait AsrClient: ModelService {
    fn transcribe(&self, audio_ref: &str) -> Result<AsrOutput>;
}

pub trait Translator: ModelService {
    /// Translates `text` into English.
    fn translate(&self, text: &str, source_language: Option<&str>) -> Result<String>;
}

macro_rules! forward_impls {
    ($($ptr:ty),*) => {$(
        impl<T: ModelService + ?Sized> ModelService for $ptr {
            fn model_name(&self) -> &str { (**self).model_name() }
        }
        impl<T: ChatClient + ?Sized> ChatClient for $ptr {
            fn complete(&self, r: &ChatRequest) -> Result<String> { (**self).complete(r) }
        }
        impl<T: AsrClient + ?Sized> AsrClient for $ptr {
            fn transcribe(&self, a: &str) -> Result<AsrOutput> { (**self).transcribe(a) }
        }
        impl<T: Translator + ?Sized> Translator for $ptr {
            fn translate(&self, t: &str, l: Option<&str>) -> Result<String> { (**self).translate(t, l) }
        }
    )*};
}
forward_impls!(&T, Box<T>, Arc<T>);

fn asr_key(model: &str, audio_ref: &str) -> String {
    content_key(&["asr", model, audio_ref])
}

fn translate_key(model: &str, text: &str, source_language: Option<&str>) -> String {
    content_key(&["translate", model, source_language.unwrap_or(""), text])
}

fn log_chat(model: &str, request: &ChatRequest) {
    log::debug!(
        "chat {} model={model} prompt={} input={}",
        request.prompt,
        &request.template_hash[..12],
        &request.input_hash()[..12]
    );
}

/// Serves recorded outputs only. Never touches the network; a missing key is
/// a [`Error::ReplayMiss`].
#[derive(Debug)]
pub struct Replay {
    model: String,
    store: ReplayStore,
}

impl Replay {
    pub fn new(model: impl Into<String>, store: ReplayStore) -> Self {
        Replay {
            model: model.into(),
            store,
        }
    }

    pub fn open(model: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        Ok(Replay::new(model, ReplayStore::open(path, StoreMode::ReadOnly)?))
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    fn lookup(&self, stage: &str, key: String) -> Result<Value> {
        self.store.get(&key).ok_or(Error::ReplayMiss {
            stage: stage.to_string(),
            key,
        })
    }
}

fn as_text(stage: &str, v: Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s),
        other => Err(Error::Parse {
            stage: stage.into(),
            reason: format!("expected a string output, found {other}"),
        }),
    }
}

impl ModelService for Replay {
    fn model_name(&self) -> &str {
        &self.model
    }
}

impl ChatClient for Replay {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        log_chat(&self.model, request);
        let stage = request.prompt.as_str();
        as_text(stage, self.lookup(stage, request.cache_key(&self.model))?)
    }
}

impl AsrClient for Replay {
    fn transcribe(&self, audio_ref: &str) -> Result<AsrOutput> {
        let v = self.lookup("asr", asr_key(&self.model, audio_ref))?;
        serde_json::from_value(v).map_err(|e| Error::Parse {
            stage: "asr".into(),
            reason: e.to_string(),
        })
    }
}

impl Translator for Replay {
    fn translate(&self, text: &str, source_language: Option<&str>) -> Result<String> {
        let v = self.lookup("translate", translate_key(&self.model, text, source_language))?;
        as_text("translate", v)
    }
}

/// Calls `inner` on a cache miss and records the output. Identical requests
/// return the first recorded output.
#[derive(Debug)]
pub struct Recording<C> {
    inner: C,
    store: ReplayStore,
}

impl<C> Recording<C> {
    pub fn new(inner: C, store: ReplayStore) -> Self {
        Recording { inner, store }
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    fn through(&self, key: String, call: impl FnOnce() -> Result<Value>) -> Result<Value> {
        if let Some(v) = self.store.get(&key) {
            return Ok(v);
        }
        let v = call()?;
        self.store.record(&key, v)
    }
}

impl<C: ModelService> ModelService for Recording<C> {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

impl<C: ChatClient> ChatClient for Recording<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let key = request.cache_key(self.model_name());
        let v = self.through(key, || self.inner.complete(request).map(Value::String))?;
        as_text(request.prompt.as_str(), v)
    }
}

impl<C: AsrClient> AsrClient for Recording<C> {
    fn transcribe(&self, audio_ref: &str) -> Result<AsrOutput> {
        let key = asr_key(self.model_name(), audio_ref);
        let v = self.through(key, || {
            Ok(serde_json::to_value(self.inner.transcribe(audio_ref)?).expect("plain struct"))
        })?;
        serde_json::from_value(v).map_err(|e| Error::Parse {
            stage: "asr".into(),
            reason: e.to_string(),
        })
    }
}

impl<C: Translator> Translator for Recording<C> {
    fn translate(&self, text: &str, source_language: Option<&str>) -> Result<String> {
        let key = translate_key(self.model_name(), text, source_language);
        let v = self.through(key, || self.inner.translate(text, source_language).map(Value::String))?;
        as_text("translate", v)
    }
}

/// Chat endpoint settings: connection plus sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    #[serde(flatten)]
    pub endpoint: EndpointConfig,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
}

fn default_temperature() -> f64 {
    0.8
}

fn default_top_p() -> f64 {
    0.95
}

impl ChatEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ChatEndpointConfig {
            endpoint: EndpointConfig::new(base_url, model_name),
            temperature: default_temperature(),
            top_p: default_top_p(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) {
            return Err(Error::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        Ok(())
    }
}

/// Turns a local path into a base64 data URL; URLs pass through. Relative
/// paths are resolved against `root` when given.
pub fn media_url(reference: &str, root: Option<&Path>, default_mime: &str) -> Result<String> {
    if ["http://", "https://", "data:"].iter().any(|p| reference.starts_with(p)) {
        return Ok(reference.to_string());
    }
    let path = match root {
        Some(r) if Path::new(reference).is_relative() => r.join(reference),
        _ => PathBuf::from(reference),
    };
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    let mime = match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        Some("wav") => "audio/wav",
        Some("mp3") => "audio/mpeg",
        Some("flac") => "audio/flac",
        Some("ogg") => "audio/ogg",
        _ => default_mime,
    };
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{data}"))
}

/// OpenAI-compatible `chat/completions` client. `base_url` is the API root,
/// e.g. `http://localhost:8000/v1`.
#[derive(Debug)]
pub struct HttpChat {
    config: ChatEndpointConfig,
    endpoint: JsonEndpoint,
    media_root: Option<PathBuf>,
}

impl HttpChat {
    pub fn new(config: ChatEndpointConfig) -> Result<Self> {
        config.validate()?;
        let endpoint = JsonEndpoint::new(config.endpoint.clone());
        Ok(HttpChat {
            config,
            endpoint,
            media_root: None,
        })
    }

    /// Directory that relative image references are resolved against.
    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = Some(root.into());
        self
    }

    fn body(&self, request: &ChatRequest) -> Result<Value> {
        let content = if request.images.is_empty() {
            json!(request.text)
        } else {
            let mut parts = vec![json!({"type": "text", "text": request.text})];
            for img in &request.images {
                let url = media_url(img, self.media_root.as_deref(), "image/jpeg")?;
                parts.push(json!({"type": "image_url", "image_url": {"url": url}}));
            }
            Value::Array(parts)
        };
        Ok(json!({
            "model": self.config.endpoint.model_name,
            "messages": [{"role": "user", "content": content}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
        }))
    }
}

impl ModelService for HttpChat {
    fn model_name(&self) -> &str {
        &self.config.endpoint.model_name
    }
}

impl ChatClient for HttpChat {
    fn complete(&self, request: &ChatRequest) -> Result<String> {
        log_chat(self.model_name(), request);
        let resp = self.endpoint.post("chat/completions", &self.body(request)?)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse {
                stage: request.prompt.to_string(),
                reason: "response has no choices[0].message.content".into(),
            })
    }
}

/// Speech recognizer posting `{model, audio}` to `base_url` and expecting
/// `{original_text, english_text, language?}` back.
#[derive(Debug)]
pub struct HttpAsr {
    endpoint: JsonEndpoint,
    media_root: Option<PathBuf>,
}

impl HttpAsr {
    pub fn new(config: EndpointConfig) -> Self {
        HttpAsr {
            endpoint: JsonEndpoint::new(config),
            media_root: None,
        }
    }

    /// Directory that relative audio references are resolved against.
    pub fn with_media_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.media_root = Some(root.into());
        self
    }
}

impl ModelService for HttpAsr {
    fn model_name(&self) -> &str {
        &self.endpoint.config().model_name
    }
}

impl AsrClient for HttpAsr {
    fn transcribe(&self, audio_ref: &str) -> Result<AsrOutput> {
        log::debug!("asr model={} input={}", self.model_name(), &sha256_hex(audio_ref)[..12]);
        let body = json!({"model": self.model_name(), "audio": media_url(audio_ref, self.media_root.as_deref(), "audio/wav")?});
        let resp = self.endpoint.post("", &body)?;
        serde_json::from_value(resp).map_err(|e| Error::Parse {
            stage: "asr".into(),
            reason: e.to_string(),
        })
    }
}

/// Translator posting `{model, text, source_language, target_language}` to
/// `base_url` and reading `translation` (or `text`) from the reply.
#[derive(Debug)]
pub struct HttpTranslator {
    endpoint: JsonEndpoint,
}

impl HttpTranslator {
    pub fn new(config: EndpointConfig) -> Self {
        HttpTranslator {
            endpoint: JsonEndpoint::new(config),
        }
    }
}

impl ModelService for HttpTranslator {
    fn model_name(&self) -> &str {
        &self.endpoint.config().model_name
    }
}

impl Translator for HttpTranslator {
    fn translate(&self, text: &str, source_language: Option<&str>) -> Result<String> {
        log::debug!("translate model={} input={}", self.model_name(), &sha256_hex(text)[..12]);
        let body = json!({
            "model": self.model_name(),
            "text": text,
            "source_language": source_language,
            "target_language": "en",
        });
        let resp = self.endpoint.post("", &body)?;
        resp.get("translation")
            .or_else(|| resp.get("text"))
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Parse {
                stage: "translate".into(),
                reason: "response has no `translation` field".into(),
            })
    }
}
