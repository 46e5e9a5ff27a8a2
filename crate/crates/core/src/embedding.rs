//! Embedding backends: replay files, a generic HTTP endpoint, a recorder that
//! fills replay files from a live backend, and a deterministic hashing
//! embedder for synthetic corpora.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::cache::{sha256_hex, ReplayStore, StoreMode};
use crate::error::{Error, Result};
use crate::http::{EndpointConfig, JsonEndpoint};
use crate::similarity::{norm, EmbeddingProvider, TokenEmbeddingSequence};

/// Replay key of a text: the hex SHA-256 of its UTF-8 bytes.
pub fn text_key(text: &str) -> String {
    sha256_hex(text)
}

/// Offline backend reading two replay files: token embeddings and sentence
/// embeddings, both keyed by [`text_key`]. Any miss is a hard error.
#[derive(Debug, Default)]
pub struct ReplayEmbeddings {
    tokens: HashMap<String, Vec<Vec<f64>>>,
    sentences: HashMap<String, Vec<f64>>,
}

impl ReplayEmbeddings {
    pub fn open(tokens_path: impl AsRef<Path>, sentences_path: impl AsRef<Path>) -> Result<Self> {
        let t = ReplayStore::open(tokens_path.as_ref(), StoreMode::ReadOnly)?;
        let s = ReplayStore::open(sentences_path.as_ref(), StoreMode::ReadOnly)?;
        Self::from_stores(&t, &s)
    }

    pub fn from_stores(tokens: &ReplayStore, sentences: &ReplayStore) -> Result<Self> {
        let parse_err = |stage: &str, key: &str, e: serde_json::Error| Error::Parse {
            stage: stage.into(),
            reason: format!("entry {key}: {e}"),
        };
        let mut out = ReplayEmbeddings::default();
        for (k, v) in tokens.snapshot() {
            let t = serde_json::from_value(v).map_err(|e| parse_err("embed_text", &k, e))?;
            out.tokens.insert(k, t);
        }
        for (k, v) in sentences.snapshot() {
            let s = serde_json::from_value(v).map_err(|e| parse_err("embed_query_sentence", &k, e))?;
            out.sentences.insert(k, s);
        }
        Ok(out)
    }
}

impl EmbeddingProvider for ReplayEmbeddings {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let key = text_key(text);
        let tokens = self.tokens.get(&key).ok_or(Error::ReplayMiss {
            stage: "embed_text".into(),
            key,
        })?;
        TokenEmbeddingSequence::normalized(text, tokens.clone())
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let key = text_key(text);
        self.sentences.get(&key).cloned().ok_or(Error::ReplayMiss {
            stage: "embed_query_sentence".into(),
            key,
        })
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingPayload {
    Tokens(Vec<Vec<f64>>),
    Single(Vec<f64>),
}

fn extract_embedding(resp: &Value) -> Result<EmbeddingPayload> {
    let raw = resp
        .pointer("/data/0/embedding")
        .or_else(|| resp.pointer("/embeddings/0"))
        .ok_or_else(|| Error::Parse {
            stage: "embedding".into(),
            reason: "response has neither data[0].embedding nor embeddings[0]".into(),
        })?;
    serde_json::from_value(raw.clone()).map_err(|e| Error::Parse {
        stage: "embedding".into(),
        reason: e.to_string(),
    })
}

/// Generic embeddings endpoint. Requests are `{"model", "input": [text]}`;
/// the response carries `data[0].embedding` (or `embeddings[0]`), either a
/// single vector or a list of token vectors.
#[derive(Debug)]
pub struct HttpEmbeddings {
    text: JsonEndpoint,
    sentence: JsonEndpoint,
}

impl HttpEmbeddings {
    pub fn new(text: EndpointConfig, sentence: EndpointConfig) -> Self {
        HttpEmbeddings {
            text: JsonEndpoint::new(text),
            sentence: JsonEndpoint::new(sentence),
        }
    }
}

impl EmbeddingProvider for HttpEmbeddings {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let body = json!({ "model": self.text.config().model_name, "input": [text] });
        let tokens = match extract_embedding(&self.text.post("", &body)?)? {
            EmbeddingPayload::Tokens(t) => t,
            EmbeddingPayload::Single(v) => vec![v],
        };
        TokenEmbeddingSequence::normalized(text, tokens)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let body = json!({ "model": self.sentence.config().model_name, "input": [text] });
        match extract_embedding(&self.sentence.post("", &body)?)? {
            EmbeddingPayload::Single(v) => Ok(v),
            EmbeddingPayload::Tokens(_) => Err(Error::Parse {
                stage: "embed_query_sentence".into(),
                reason: "expected a single vector, got token vectors".into(),
            }),
        }
    }
}

/// Serves from replay stores when possible, otherwise calls `inner` and
/// records the result.
pub struct RecordingEmbeddings<P> {
    inner: P,
    tokens: ReplayStore,
    sentences: ReplayStore,
}

impl<P: EmbeddingProvider> RecordingEmbeddings<P> {
    pub fn new(inner: P, tokens: ReplayStore, sentences: ReplayStore) -> Self {
        RecordingEmbeddings {
            inner,
            tokens,
            sentences,
        }
    }

    pub fn compact(&self) -> Result<()> {
        self.tokens.compact()?;
        self.sentences.compact()
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for RecordingEmbeddings<P> {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let key = text_key(text);
        let raw = match self.tokens.get(&key) {
            Some(v) => v,
            None => {
                let seq = self.inner.embed_text(text)?;
                self.tokens.record(&key, json!(seq.tokens()))?
            }
        };
        let tokens: Vec<Vec<f64>> = serde_json::from_value(raw).map_err(|e| Error::Parse {
            stage: "embed_text".into(),
            reason: e.to_string(),
        })?;
        TokenEmbeddingSequence::normalized(text, tokens)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        let key = text_key(text);
        let raw = match self.sentences.get(&key) {
            Some(v) => v,
            None => {
                let v = self.inner.embed_query_sentence(text)?;
                self.sentences.record(&key, json!(v))?
            }
        };
        serde_json::from_value(raw).map_err(|e| Error::Parse {
            stage: "embed_query_sentence".into(),
            reason: e.to_string(),
        })
    }
}

/// Deterministic bag-of-words embedder for synthetic corpora and demos.
///
/// Each lowercase alphanumeric word maps to a fixed pseudo-random unit
/// vector derived from `(seed, word)`. The sentence embedding is the
/// normalized mean of the word vectors, so it lives in the same space as
/// [`HashingEmbeddings::concept_vector`], which synthetic fixtures use for
/// frame embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbeddings {
    pub dim: usize,
    pub seed: u64,
}

impl HashingEmbeddings {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashingEmbeddings { dim, seed }
    }

    pub fn words(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    pub fn word_vector(&self, word: &str) -> Vec<f64> {
        let mut seed = [0u8; 32];
        let digest = sha256_hex(format!("{}:{word}", self.seed));
        hex::decode_to_slice(&digest, &mut seed).expect("sha256 hex is 32 bytes");
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let n = norm(&v);
            if n > 1e-6 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// Normalized mean of the word vectors of `text`.
    pub fn concept_vector(&self, text: &str) -> Result<Vec<f64>> {
        let words = Self::words(text);
        if words.is_empty() {
            return Err(Error::invalid(format!("no words to embed in {text:?}")));
        }
        let vecs: Vec<Vec<f64>> = words.iter().map(|w| self.word_vector(w)).collect();
        let mean = crate::similarity::mean_pool(&vecs)?;
        let n = norm(&mean);
        if n == 0.0 {
            return Err(Error::invalid(format!("word vectors of {text:?} cancel out")));
        }
        Ok(mean.into_iter().map(|x| x / n).collect())
    }
}

impl EmbeddingProvider for HashingEmbeddings {
    fn embed_text(&self, text: &str) -> Result<TokenEmbeddingSequence> {
        let tokens: Vec<Vec<f64>> = Self::words(text).iter().map(|w| self.word_vector(w)).collect();
        if tokens.is_empty() {
            return Err(Error::invalid(format!("no words to embed in {text:?}")));
        }
        TokenEmbeddingSequence::normalized(text, tokens)
    }

    fn embed_query_sentence(&self, text: &str) -> Result<Vec<f64>> {
        self.concept_vector(text)
    }
}
