//! Parsing of sectioned model responses such as
//! `EXPLANATION: ... EVENTS: 1. ... 2. ...`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const EXPLANATION: &str = "EXPLANATION";
pub const EVENTS: &str = "EVENTS";
pub const REFINED_QUERY: &str = "REFINED QUERY";
pub const LOCATION_INFORMATION: &str = "LOCATION INFORMATION";
pub const TEMPORAL_INFORMATION: &str = "TEMPORAL INFORMATION";

pub const KNOWN_HEADERS: [&str; 5] = [
    EXPLANATION,
    EVENTS,
    REFINED_QUERY,
    LOCATION_INFORMATION,
    TEMPORAL_INFORMATION,
];

/// Section bodies keyed by header. Text before the first header is dropped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SectionedResponse {
    pub sections: BTreeMap<String, String>,
}

fn is_boundary(c: Option<char>) -> bool {
    c.map_or(true, |c| !c.is_alphanumeric() && c != '_')
}

impl SectionedResponse {
    /// Finds every `HEADER:` occurrence (case-sensitive, not glued to a
    /// preceding word) and slices bodies between them. A header that appears
    /// twice is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut hits: Vec<(usize, usize, &str)> = Vec::new();
        for header in KNOWN_HEADERS {
            let mut from = 0;
            while let Some(i) = text[from..].find(header) {
                let start = from + i;
                let mut end = start + header.len();
                from = end;
                if !is_boundary(text[..start].chars().next_back()) {
                    continue;
                }
                // tolerate markdown emphasis between the header and the colon
                let rest = &text[end..];
                let stars = rest.len() - rest.trim_start_matches('*').len();
                if !rest[stars..].starts_with(':') {
                    continue;
                }
                end += stars + 1;
                hits.push((start, end, header));
            }
        }
        hits.sort();
        // drop headers nested inside a longer header match
        hits.dedup_by(|b, a| b.0 < a.1);

        let mut sections = BTreeMap::new();
        for (i, &(_, end, header)) in hits.iter().enumerate() {
            let stop = hits.get(i + 1).map_or(text.len(), |h| h.0);
            let body = clean_body(&text[end..stop]);
            if sections.insert(header.to_string(), body).is_some() {
                return Err(Error::Parse {
                    stage: "sections".into(),
                    reason: format!("header `{header}` appears more than once"),
                });
            }
        }
        Ok(SectionedResponse { sections })
    }

    pub fn get(&self, header: &str) -> Option<&str> {
        self.sections.get(header).map(String::as_str)
    }

    /// The section body, or `None` when missing, empty, or "NOT AVAILABLE".
    pub fn available(&self, header: &str) -> Option<&str> {
        self.get(header).filter(|b| !b.is_empty() && !is_not_available(b))
    }
}

fn clean_body(raw: &str) -> String {
    raw.trim()
        .trim_start_matches('*')
        .trim_end_matches(['*', '#'])
        .trim()
        .to_string()
}

/// True for the literal "NOT AVAILABLE" marker in any case, optionally quoted
/// or followed by a period.
pub fn is_not_available(text: &str) -> bool {
    let t = text.trim().trim_matches(['"', '\'', '*', '.']).trim();
    t.eq_ignore_ascii_case("not available")
}

fn strip_bullet(line: &str) -> Option<&str> {
    let line = line.trim_start();
    for b in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(b) {
            return Some(rest);
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(rest.trim_start());
        }
    }
    None
}

/// Items of a numbered or bulleted list. Accepts `1.`, `1)`, `-`, `*`; if no
/// line carries a marker, every non-empty line is an item.
pub fn parse_list(body: &str) -> Vec<String> {
    let lines: Vec<&str> = body.lines().map(str::trim_end).filter(|l| !l.trim().is_empty()).collect();
    let bulleted: Vec<String> = lines
        .iter()
        .filter_map(|l| strip_bullet(l))
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if !bulleted.is_empty() {
        return bulleted;
    }
    lines.iter().map(|l| l.trim().to_string()).collect()
}

/// First non-empty line of a body.
pub fn first_line(body: &str) -> Option<&str> {
    body.lines().map(str::trim).find(|l| !l.is_empty())
}
