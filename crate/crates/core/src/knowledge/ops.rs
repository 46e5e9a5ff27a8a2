use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::RetryPolicy;
use crate::model::{EventDecomposition, EventKind, QueryRecord, MAX_EVENTS_PER_KIND};

use super::client::{AsrClient, AsrOutput, ChatClient, ChatRequest, Translator};
use super::parse::{
    first_line, is_not_available, parse_list, SectionedResponse, EVENTS, LOCATION_INFORMATION,
    REFINED_QUERY, TEMPORAL_INFORMATION,
};
use super::prompts::{PromptKind, PromptSet};

/// Placeholder put in the prompt where the frame image is attached.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

/// Splits errors into hard failures (replay misses, which must abort the run)
/// and soft ones that callers degrade around.
fn soft<T>(r: Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ Error::ReplayMiss { .. }) => Err(e),
        Err(e) => Ok(Err(e.to_string())),
    }
}

/// Optional facets pulled out of a query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Facets {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub primary_event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub place: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionOutcome {
    /// `None` when decomposition failed and the query is scored on its raw
    /// text alone.
    pub decomposition: Option<EventDecomposition>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Which parts of the audio pipeline run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsrStages {
    /// Use the recognizer's own English output.
    pub asr_translation: bool,
    /// Translate the original-language transcript with the translator.
    pub translator: bool,
    /// Merge candidates with the refiner model.
    pub refiner: bool,
}

impl Default for AsrStages {
    fn default() -> Self {
        AsrStages {
            asr_translation: true,
            translator: true,
            refiner: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptOutcome {
    pub transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asr: Option<AsrOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translation: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

fn non_blank(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

/// Prompt templates plus the retry policy applied to unparseable responses.
/// Each retry is a distinct cache entry, so recorded retries replay exactly.
#[derive(Debug, Clone, Default)]
pub struct Knowledge {
    pub prompts: PromptSet,
    pub retry: RetryPolicy,
}

impl Knowledge {
    pub fn new(prompts: PromptSet, retry: RetryPolicy) -> Self {
        Knowledge { prompts, retry }
    }

    fn ask<T>(
        &self,
        client: &dyn ChatClient,
        prompt: PromptKind,
        vars: &BTreeMap<&str, String>,
        image: Option<&str>,
        parse: impl Fn(&str) -> Result<T>,
    ) -> Result<T> {
        let template = self.prompts.get(prompt);
        let text = template.render(vars)?;
        self.retry.run(|attempt| {
            let mut req = ChatRequest::new(template, text.clone()).with_attempt(attempt);
            if let Some(img) = image {
                req = req.with_image(img);
            }
            parse(&client.complete(&req)?)
        })
    }

    /// Sub-events of one kind, capped at five. Fails if no attempt yields a
    /// non-empty EVENTS list.
    pub fn decompose_events(&self, query: &str, kind: EventKind, client: &dyn ChatClient) -> Result<Vec<String>> {
        if query.trim().is_empty() {
            return Err(Error::invalid("query text is empty"));
        }
        let vars = BTreeMap::from([("query", query.to_string())]);
        let prompt = PromptKind::decompose(kind);
        self.ask(client, prompt, &vars, None, |out| {
            let sections = SectionedResponse::parse(out)?;
            let body = sections.get(EVENTS).ok_or_else(|| Error::Parse {
                stage: prompt.to_string(),
                reason: "no EVENTS section".into(),
            })?;
            let mut events = parse_list(body);
            events.retain(|e| !is_not_available(e));
            if events.is_empty() {
                return Err(Error::Parse {
                    stage: prompt.to_string(),
                    reason: "EVENTS section is empty".into(),
                });
            }
            events.truncate(MAX_EVENTS_PER_KIND);
            Ok(events)
        })
    }

    /// Primary event, place and time. A facet that is missing, marked not
    /// available, or unparseable is left out; parse failures become warnings.
    pub fn extract_facets(&self, query: &str, client: &dyn ChatClient) -> Result<(Facets, Vec<String>)> {
        let vars = BTreeMap::from([("query", query.to_string())]);
        let mut warnings = Vec::new();
        let mut facet = |prompt: PromptKind, header: &'static str, list: bool| -> Result<Option<String>> {
            let r = self.ask(client, prompt, &vars, None, |out| {
                let sections = SectionedResponse::parse(out)?;
                if sections.get(header).is_none() {
                    return Err(Error::Parse {
                        stage: prompt.to_string(),
                        reason: format!("no {header} section"),
                    });
                }
                Ok(sections.available(header).and_then(|body| {
                    if list {
                        let items: Vec<String> =
                            parse_list(body).into_iter().filter(|e| !is_not_available(e)).collect();
                        (!items.is_empty()).then(|| items.join("; "))
                    } else {
                        first_line(body).filter(|l| !is_not_available(l)).map(str::to_string)
                    }
                }))
            });
            Ok(soft(r)?.unwrap_or_else(|e| {
                warnings.push(format!("{prompt}: {e}"));
                None
            }))
        };
        let facets = Facets {
            primary_event: facet(PromptKind::PrimaryEvent, EVENTS, true)?,
            place: facet(PromptKind::Location, LOCATION_INFORMATION, false)?,
            time: facet(PromptKind::Temporal, TEMPORAL_INFORMATION, false)?,
        };
        Ok((facets, warnings))
    }

    /// One-line refined event text. Falls back to `base` (with a warning)
    /// when no attempt yields a REFINED QUERY line.
    pub fn refine_event(&self, base: &str, facets: &Facets, client: &dyn ChatClient) -> Result<(String, Option<String>)> {
        let vars = BTreeMap::from([
            ("base", base.to_string()),
            ("event", facets.primary_event.clone().unwrap_or_default()),
            ("place", facets.place.clone().unwrap_or_default()),
            ("time", facets.time.clone().unwrap_or_default()),
        ]);
        let r = self.ask(client, PromptKind::RefineQuery, &vars, None, |out| {
            let sections = SectionedResponse::parse(out)?;
            sections
                .available(REFINED_QUERY)
                .and_then(first_line)
                .map(|l| l.trim_matches('"').to_string())
                .filter(|l| !l.is_empty())
                .ok_or_else(|| Error::Parse {
                    stage: PromptKind::RefineQuery.to_string(),
                    reason: "no REFINED QUERY line".into(),
                })
        });
        Ok(match soft(r)? {
            Ok(refined) => (refined, None),
            Err(e) => (base.to_string(), Some(format!("refine `{base}` kept unrefined: {e}"))),
        })
    }

    /// Full decomposition: three event lists, facets, then one refinement per
    /// event. Any event-list failure leaves the query undecomposed.
    pub fn decompose_query(&self, query: &QueryRecord, client: &dyn ChatClient) -> Result<DecompositionOutcome> {
        let mut out = DecompositionOutcome::default();
        let mut d = EventDecomposition::default();
        for kind in EventKind::ALL {
            match soft(self.decompose_events(&query.text, kind, client))? {
                Ok(events) => *d.events_mut(kind) = events,
                Err(e) => {
                    out.warnings.push(format!("{} decomposition failed, scoring raw query only: {e}", kind.as_str()));
                    return Ok(out);
                }
            }
        }
        let (facets, warnings) = self.extract_facets(&query.text, client)?;
        out.warnings.extend(warnings);
        for kind in EventKind::ALL {
            let mut refined = Vec::new();
            for base in d.events(kind) {
                let (text, warning) = self.refine_event(base, &facets, client)?;
                out.warnings.extend(warning);
                refined.push(text);
            }
            *d.refined_events_mut(kind) = refined;
        }
        d.primary_event = facets.primary_event;
        d.place = facets.place;
        d.time = facets.time;
        d.validate()?;
        out.decomposition = Some(d);
        Ok(out)
    }

    /// Caption for one frame, given the caption of the previous sampled frame
    /// (empty for the first) and, in the audio-aware variant, the transcript.
    pub fn caption_frame(
        &self,
        frame_ref: &str,
        prev_caption: Option<&str>,
        asr_context: Option<&str>,
        client: &dyn ChatClient,
    ) -> Result<String> {
        let mut vars = BTreeMap::from([
            ("prev_caption", prev_caption.unwrap_or("").to_string()),
            ("frame", IMAGE_PLACEHOLDER.to_string()),
        ]);
        if let Some(asr) = asr_context {
            vars.insert("asr", asr.to_string());
        }
        self.ask(client, PromptKind::FrameCaption, &vars, Some(frame_ref), nonempty(PromptKind::FrameCaption))
    }

    /// Single summary over ordered frame captions (and transcript, if given).
    pub fn summarize_video(&self, frame_captions: &[String], asr_context: Option<&str>, client: &dyn ChatClient) -> Result<String> {
        if frame_captions.is_empty() {
            return Err(Error::invalid("video summary needs at least one frame caption"));
        }
        let mut vars = BTreeMap::from([("frame_descriptions", frame_description_block(frame_captions))]);
        if let Some(asr) = asr_context {
            vars.insert("asr", asr.to_string());
        }
        self.ask(client, PromptKind::VideoCaption, &vars, None, nonempty(PromptKind::VideoCaption))
    }

    /// Recognizer, optional translator and optional refiner. Returns no
    /// transcript when there is no speech, recognition fails, every source is
    /// disabled, or the refiner reports the audio as not refinable.
    pub fn transcribe_and_refine(
        &self,
        audio_ref: &str,
        asr: &dyn AsrClient,
        translator: Option<&dyn Translator>,
        refiner: Option<&dyn ChatClient>,
        stages: AsrStages,
    ) -> Result<TranscriptOutcome> {
        let mut out = TranscriptOutcome::default();
        let recognized = match soft(asr.transcribe(audio_ref))? {
            Ok(r) => r,
            Err(e) => {
                out.notes.push(format!("speech recognition failed: {e}"));
                return Ok(out);
            }
        };
        let Some(original) = non_blank(&recognized.original_text) else {
            out.notes.push("no speech recognized".into());
            out.asr = Some(recognized);
            return Ok(out);
        };
        let asr_english = stages
            .asr_translation
            .then(|| non_blank(&recognized.english_text))
            .flatten();
        let language = recognized.language.clone();
        out.asr = Some(recognized);

        if let (true, Some(t)) = (stages.translator, translator) {
            match soft(t.translate(&original, language.as_deref()))? {
                Ok(text) => out.translation = non_blank(&text),
                Err(e) => out.notes.push(format!("translation failed: {e}")),
            }
        }

        let candidates: Vec<String> = asr_english.iter().chain(&out.translation).cloned().collect();
        let Some(first) = candidates.first().cloned() else {
            out.notes.push("no English transcript candidate".into());
            return Ok(out);
        };
        let refiner = if stages.refiner { refiner } else { None };
        let Some(refiner) = refiner else {
            out.transcript = Some(first);
            return Ok(out);
        };

        let mut vars = BTreeMap::from([("original", original), ("translation_1", first.clone())]);
        if let Some(second) = candidates.get(1) {
            vars.insert("translation_2", second.clone());
        }
        let r = self.ask(refiner, PromptKind::RefineAsr, &vars, None, nonempty(PromptKind::RefineAsr));
        match soft(r)? {
            Ok(text) if is_not_available(&text) => out.notes.push("refiner reported transcript not available".into()),
            Ok(text) => out.transcript = Some(text),
            Err(e) => {
                out.notes.push(format!("refiner failed, using first translation: {e}"));
                out.transcript = Some(first);
            }
        }
        Ok(out)
    }
}

fn nonempty(prompt: PromptKind) -> impl Fn(&str) -> Result<String> {
    move |out| {
        non_blank(out).ok_or_else(|| Error::Parse {
            stage: prompt.to_string(),
            reason: "empty response".into(),
        })
    }
}

/// `## Frame i Description` blocks, 1-based, in caption order.
pub fn frame_description_block(captions: &[String]) -> String {
    captions
        .iter()
        .enumerate()
        .map(|(i, c)| format!("## Frame {} Description\n\n{c}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n")
}
