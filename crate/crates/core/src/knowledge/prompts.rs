//! Prompt templates loaded from text assets.
//!
//! Syntax: `{{name}}` substitutes a variable; `{{#name}}...{{/name}}` keeps the
//! enclosed text only when `name` is set. Blocks do not nest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cache::sha256_hex;
use crate::error::{Error, Result};
use crate::model::EventKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DecomposePrequel,
    DecomposeCurrent,
    DecomposeSequel,
    PrimaryEvent,
    Location,
    Temporal,
    RefineQuery,
    FrameCaption,
    VideoCaption,
    RefineAsr,
}

impl PromptKind {
    pub const ALL: [PromptKind; 10] = [
        PromptKind::DecomposePrequel,
        PromptKind::DecomposeCurrent,
        PromptKind::DecomposeSequel,
        PromptKind::PrimaryEvent,
        PromptKind::Location,
        PromptKind::Temporal,
        PromptKind::RefineQuery,
        PromptKind::FrameCaption,
        PromptKind::VideoCaption,
        PromptKind::RefineAsr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::DecomposePrequel => "decompose_prequel",
            PromptKind::DecomposeCurrent => "decompose_current",
            PromptKind::DecomposeSequel => "decompose_sequel",
            PromptKind::PrimaryEvent => "primary_event",
            PromptKind::Location => "location",
            PromptKind::Temporal => "temporal",
            PromptKind::RefineQuery => "refine_query",
            PromptKind::FrameCaption => "frame_caption",
            PromptKind::VideoCaption => "video_caption",
            PromptKind::RefineAsr => "refine_asr",
        }
    }

    pub fn decompose(kind: EventKind) -> PromptKind {
        match kind {
            EventKind::Prequel => PromptKind::DecomposePrequel,
            EventKind::Current => PromptKind::DecomposeCurrent,
            EventKind::Sequel => PromptKind::DecomposeSequel,
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.as_str())
    }

    fn builtin(self) -> &'static str {
        match self {
            PromptKind::DecomposePrequel => include_str!("../../prompts/decompose_prequel.txt"),
            PromptKind::DecomposeCurrent => include_str!("../../prompts/decompose_current.txt"),
            PromptKind::DecomposeSequel => include_str!("../../prompts/decompose_sequel.txt"),
            PromptKind::PrimaryEvent => include_str!("../../prompts/primary_event.txt"),
            PromptKind::Location => include_str!("../../prompts/location.txt"),
            PromptKind::Temporal => include_str!("../../prompts/temporal.txt"),
            PromptKind::RefineQuery => include_str!("../../prompts/refine_query.txt"),
            PromptKind::FrameCaption => include_str!("../../prompts/frame_caption.txt"),
            PromptKind::VideoCaption => include_str!("../../prompts/video_caption.txt"),
            PromptKind::RefineAsr => include_str!("../../prompts/refine_asr.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    kind: PromptKind,
    text: String,
    hash: String,
}

impl Template {
    pub fn new(kind: PromptKind, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        check_syntax(&text).map_err(|reason| Error::Config(format!("prompt `{kind}`: {reason}")))?;
        let hash = sha256_hex(&text);
        Ok(Template { kind, text, hash })
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// SHA-256 of the template source; part of every cache key built from it.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Every variable referenced by the template, including block guards.
    pub fn variables(&self) -> Vec<String> {
        let mut out: Vec<String> = tags(&self.text)
            .into_iter()
            .map(|(_, _, tag)| tag.trim_start_matches(['#', '/']).to_string())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Renders with `vars`. A plain `{{name}}` with no value is an error; a
    /// block whose guard is unset is dropped.
    pub fn render(&self, vars: &BTreeMap<&str, String>) -> Result<String> {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut pos = 0;
        let mut skipping: Option<&str> = None;
        for (start, end, tag) in tags(&self.text) {
            if skipping.is_none() {
                out.push_str(&self.text[pos..start]);
            }
            pos = end;
            if let Some(name) = tag.strip_prefix('#') {
                if !vars.contains_key(name) {
                    skipping = Some(name);
                }
            } else if let Some(name) = tag.strip_prefix('/') {
                if skipping == Some(name) {
                    skipping = None;
                }
            } else if skipping.is_none() {
                let value = vars.get(tag).ok_or_else(|| {
                    Error::Config(format!("prompt `{}` needs variable `{tag}`", self.kind))
                })?;
                out.push_str(value);
            }
        }
        if skipping.is_none() {
            out.push_str(&self.text[pos..]);
        }
        Ok(out)
    }
}

/// `(start, end, inner)` for every `{{...}}` tag.
fn tags(text: &str) -> Vec<(usize, usize, &str)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(open) = text[from..].find("{{") {
        let start = from + open;
        let Some(close) = text[start + 2..].find("}}") else { break };
        let end = start + 2 + close + 2;
        out.push((start, end, text[start + 2..end - 2].trim()));
        from = end;
    }
    out
}

fn check_syntax(text: &str) -> std::result::Result<(), String> {
    let mut open: Option<&str> = None;
    for (_, _, tag) in tags(text) {
        if tag.is_empty() {
            return Err("empty tag".into());
        }
        if let Some(name) = tag.strip_prefix('#') {
            if let Some(outer) = open {
                return Err(format!("block `{name}` opened inside `{outer}`"));
            }
            open = Some(name);
        } else if let Some(name) = tag.strip_prefix('/') {
            if open != Some(name) {
                return Err(format!("unexpected close of `{name}`"));
            }
            open = None;
        }
    }
    match open {
        Some(name) => Err(format!("block `{name}` is never closed")),
        None => Ok(()),
    }
}

/// The full set of templates used by the knowledge operations.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<PromptKind, Template>,
}

impl Default for PromptSet {
    fn default() -> Self {
        PromptSet::builtin()
    }
}

impl PromptSet {
    /// Templates compiled into the library.
    pub fn builtin() -> Self {
        let templates = PromptKind::ALL
            .iter()
            .map(|&k| (k, Template::new(k, k.builtin()).expect("bundled prompts are well formed")))
            .collect();
        PromptSet { templates }
    }

    /// Loads `<dir>/<kind>.txt` where present and uses the bundled template
    /// for the rest.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = PromptSet::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            match std::fs::read_to_string(&path) {
                Ok(text) => {
                    set.templates.insert(kind, Template::new(kind, text)?);
                }
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(e) => return Err(Error::io(path, e)),
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &Template {
        &self.templates[&kind]
    }
}
