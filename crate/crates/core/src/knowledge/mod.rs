//! Language-model, vision-model and speech adapters, and the operations that
//! drive them: query decomposition and refinement, frame captioning, video
//! summaries and the speech transcript pipeline.

pub mod client;
pub mod ops;
pub mod parse;
pub mod prompts;

pub use client::{
    AsrClient, AsrOutput, ChatClient, ChatEndpointConfig, ChatRequest, HttpAsr, HttpChat,
    HttpTranslator, ModelService, Recording, Replay, Translator,
};
pub use ops::{AsrStages, DecompositionOutcome, Facets, Knowledge, TranscriptOutcome};
pub use parse::SectionedResponse;
pub use prompts::{PromptKind, PromptSet, Template};
