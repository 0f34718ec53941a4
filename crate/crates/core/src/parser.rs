//! Tagged generation grammar: `<think>` (concise rationale), `<answer>`
//! (JSON geometric payload) and `<d_think>` (detailed explanation).
//!
//! [`parse`] is total. Structural defects never fail the call; they leave the
//! affected section absent and are listed in
//! [`StructuredResponse::diagnostics`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometricAnswer, Point};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("malformed-payload: {0}")]
    MalformedPayload(String),
    #[error("invalid section order: {0}")]
    InvalidOrder(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SectionKind {
    Concise,
    Answer,
    Detailed,
}

impl SectionKind {
    pub const ALL: [SectionKind; 3] = [SectionKind::Concise, SectionKind::Answer, SectionKind::Detailed];

    pub fn tag(self) -> &'static str {
        match self {
            SectionKind::Concise => "think",
            SectionKind::Answer => "answer",
            SectionKind::Detailed => "d_think",
        }
    }

    /// One-letter code used in order strings such as `cAd`.
    pub fn code(self) -> char {
        match self {
            SectionKind::Concise => 'c',
            SectionKind::Answer => 'A',
            SectionKind::Detailed => 'd',
        }
    }

    fn open(self) -> &'static str {
        match self {
            SectionKind::Concise => "<think>",
            SectionKind::Answer => "<answer>",
            SectionKind::Detailed => "<d_think>",
        }
    }

    fn close(self) -> &'static str {
        match self {
            SectionKind::Concise => "</think>",
            SectionKind::Answer => "</answer>",
            SectionKind::Detailed => "</d_think>",
        }
    }
}

impl fmt::Display for SectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Generation order of sections: no duplicates, `Answer` always present.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SectionOrder(Vec<SectionKind>);

impl SectionOrder {
    pub fn new(kinds: Vec<SectionKind>) -> Result<Self, ParseError> {
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(ParseError::InvalidOrder(format!("duplicate section {k}")));
            }
        }
        if !kinds.contains(&SectionKind::Answer) {
            return Err(ParseError::InvalidOrder("answer section is required".into()));
        }
        Ok(SectionOrder(kinds))
    }

    /// Concise rationale, answer, detailed explanation.
    pub fn training() -> Self {
        SectionOrder(vec![SectionKind::Concise, SectionKind::Answer, SectionKind::Detailed])
    }

    /// Concise rationale then answer; the detailed explanation is dropped.
    pub fn inference() -> Self {
        SectionOrder(vec![SectionKind::Concise, SectionKind::Answer])
    }

    pub fn kinds(&self) -> &[SectionKind] {
        &self.0
    }

    pub fn contains(&self, kind: SectionKind) -> bool {
        self.0.contains(&kind)
    }

    pub fn position(&self, kind: SectionKind) -> Option<usize> {
        self.0.iter().position(|&k| k == kind)
    }

    /// The same order with `kind` removed. Removing the answer is refused.
    pub fn without(&self, kind: SectionKind) -> Result<Self, ParseError> {
        SectionOrder::new(self.0.iter().copied().filter(|&k| k != kind).collect())
    }

    pub fn code(&self) -> String {
        self.0.iter().map(|k| k.code()).collect()
    }
}

impl fmt::Display for SectionOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for SectionOrder {
    type Err = ParseError;

    /// Parses codes like `cAd` or `dcA`; `a` is accepted for the answer.
    fn from_str(s: &str) -> Result<Self, ParseError> {
        let kinds = s
            .chars()
            .map(|c| match c {
                'c' | 'C' => Ok(SectionKind::Concise),
                'a' | 'A' => Ok(SectionKind::Answer),
                'd' | 'D' => Ok(SectionKind::Detailed),
                other => Err(ParseError::InvalidOrder(format!(
                    "unknown section code {other:?} in {s:?}"
                ))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        SectionOrder::new(kinds)
    }
}

impl TryFrom<String> for SectionOrder {
    type Error = ParseError;

    fn try_from(s: String) -> Result<Self, ParseError> {
        s.parse()
    }
}

impl From<SectionOrder> for String {
    fn from(o: SectionOrder) -> Self {
        o.code()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum Diagnostic {
    UnclosedTag(SectionKind),
    NestedTag(SectionKind),
    InterleavedTag(SectionKind),
    UnmatchedClose(SectionKind),
    DuplicateSection(SectionKind),
    MissingAnswer,
    StrayText,
    MalformedPayload(String),
}

impl Diagnostic {
    pub fn code(&self) -> &'static str {
        match self {
            Diagnostic::UnclosedTag(_) => "unclosed-tag",
            Diagnostic::NestedTag(_) => "nested-tag",
            Diagnostic::InterleavedTag(_) => "interleaved-tag",
            Diagnostic::UnmatchedClose(_) => "unmatched-close",
            Diagnostic::DuplicateSection(_) => "duplicate-section",
            Diagnostic::MissingAnswer => "missing-answer",
            Diagnostic::StrayText => "stray-text",
            Diagnostic::MalformedPayload(_) => "malformed-payload",
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::UnclosedTag(k)
            | Diagnostic::NestedTag(k)
            | Diagnostic::InterleavedTag(k)
            | Diagnostic::UnmatchedClose(k)
            | Diagnostic::DuplicateSection(k) => write!(f, "{}: <{}>", self.code(), k.tag()),
            Diagnostic::MalformedPayload(why) => write!(f, "{}: {why}", self.code()),
            Diagnostic::MissingAnswer | Diagnostic::StrayText => f.write_str(self.code()),
        }
    }
}

/// A parsed generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredResponse {
    pub concise: Option<String>,
    pub answer_raw: Option<String>,
    pub answer: Option<GeometricAnswer>,
    pub detailed: Option<String>,
    /// Well-formed sections in order of appearance.
    pub order: Vec<SectionKind>,
    pub raw: String,
    pub diagnostics: Vec<Diagnostic>,
}

impl StructuredResponse {
    pub fn section(&self, kind: SectionKind) -> Option<&str> {
        match kind {
            SectionKind::Concise => self.concise.as_deref(),
            SectionKind::Answer => self.answer_raw.as_deref(),
            SectionKind::Detailed => self.detailed.as_deref(),
        }
    }

    pub fn has(&self, kind: SectionKind) -> bool {
        self.order.contains(&kind)
    }

    pub fn has_diagnostic(&self, code: &str) -> bool {
        self.diagnostics.iter().any(|d| d.code() == code)
    }

    /// Renders the given sections in `order` and parses the result, so the
    /// returned value is exactly what [`parse`] yields for that text.
    pub fn compose(
        order: &SectionOrder,
        concise: Option<&str>,
        answer_payload: &str,
        detailed: Option<&str>,
    ) -> Result<Self, ParseError> {
        let mut out = String::new();
        for &kind in order.kinds() {
            let body = match kind {
                SectionKind::Concise => concise,
                SectionKind::Answer => Some(answer_payload),
                SectionKind::Detailed => detailed,
            }
            .ok_or_else(|| {
                ParseError::InvalidInput(format!("order {order} needs a <{kind}> section"))
            })?;
            push_section(&mut out, kind, body)?;
        }
        Ok(parse(&out))
    }
}

fn push_section(out: &mut String, kind: SectionKind, body: &str) -> Result<(), ParseError> {
    if SectionKind::ALL
        .iter()
        .any(|k| body.contains(k.open()) || body.contains(k.close()))
    {
        return Err(ParseError::InvalidInput(format!(
            "<{kind}> body contains a section tag"
        )));
    }
    out.push_str(kind.open());
    out.push_str(body);
    out.push_str(kind.close());
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct TagHit {
    pos: usize,
    len: usize,
    kind: SectionKind,
    closing: bool,
}

fn scan_tags(raw: &str) -> Vec<TagHit> {
    let bytes = raw.as_bytes();
    let mut hits = Vec::new();
    let mut i = 0;
    while let Some(off) = raw[i..].find('<') {
        let pos = i + off;
        let rest = &bytes[pos..];
        let hit = SectionKind::ALL.iter().find_map(|&kind| {
            if rest.starts_with(kind.open().as_bytes()) {
                Some((kind, false, kind.open().len()))
            } else if rest.starts_with(kind.close().as_bytes()) {
                Some((kind, true, kind.close().len()))
            } else {
                None
            }
        });
        match hit {
            Some((kind, closing, len)) => {
                hits.push(TagHit {
                    pos,
                    len,
                    kind,
                    closing,
                });
                i = pos + len;
            }
            None => i = pos + 1,
        }
    }
    hits
}

/// Extracts the tagged sections of `raw`. Never fails.
pub fn parse(raw: &str) -> StructuredResponse {
    let mut diagnostics = Vec::new();
    let mut poisoned = [false; 3];
    let idx = |k: SectionKind| k as usize;
    // (kind, start of opening tag, end of opening tag)
    let mut stack: Vec<(SectionKind, usize, usize)> = Vec::new();
    // (kind, tag start, content start, content end)
    let mut found: Vec<(SectionKind, usize, usize, usize)> = Vec::new();
    let mut top_level_text = false;
    let mut cursor = 0;

    for hit in scan_tags(raw) {
        if stack.is_empty() && !raw[cursor..hit.pos].trim().is_empty() {
            top_level_text = true;
        }
        if !hit.closing {
            if let Some(&(outer, _, _)) = stack.last() {
                if stack.iter().any(|&(k, _, _)| k == hit.kind) {
                    diagnostics.push(Diagnostic::NestedTag(hit.kind));
                } else {
                    diagnostics.push(Diagnostic::InterleavedTag(hit.kind));
                }
                for &(k, _, _) in &stack {
                    poisoned[idx(k)] = true;
                }
                poisoned[idx(outer)] = true;
                poisoned[idx(hit.kind)] = true;
            }
            stack.push((hit.kind, hit.pos, hit.pos + hit.len));
        } else {
            match stack.iter().rposition(|&(k, _, _)| k == hit.kind) {
                Some(at) => {
                    if at + 1 != stack.len() {
                        for &(k, _, _) in &stack[at + 1..] {
                            diagnostics.push(Diagnostic::InterleavedTag(k));
                            poisoned[idx(k)] = true;
                        }
                        poisoned[idx(hit.kind)] = true;
                    }
                    let (kind, tag_start, content_start) = stack[at];
                    stack.truncate(at);
                    if stack.is_empty() {
                        found.push((kind, tag_start, content_start, hit.pos));
                    }
                }
                None => {
                    diagnostics.push(Diagnostic::UnmatchedClose(hit.kind));
                    poisoned[idx(hit.kind)] = true;
                }
            }
        }
        cursor = hit.pos + hit.len;
    }
    if stack.is_empty() {
        if !raw[cursor..].trim().is_empty() {
            top_level_text = true;
        }
    } else {
        for &(k, _, _) in &stack {
            diagnostics.push(Diagnostic::UnclosedTag(k));
            poisoned[idx(k)] = true;
        }
    }

    for kind in SectionKind::ALL {
        if found.iter().filter(|f| f.0 == kind).count() > 1 {
            diagnostics.push(Diagnostic::DuplicateSection(kind));
            poisoned[idx(kind)] = true;
        }
    }
    found.retain(|f| !poisoned[idx(f.0)]);
    found.sort_by_key(|f| f.1);

    let mut resp = StructuredResponse {
        concise: None,
        answer_raw: None,
        answer: None,
        detailed: None,
        order: found.iter().map(|f| f.0).collect(),
        raw: raw.to_string(),
        diagnostics: Vec::new(),
    };
    for &(kind, _, start, end) in &found {
        let body = raw[start..end].to_string();
        match kind {
            SectionKind::Concise => resp.concise = Some(body),
            SectionKind::Answer => resp.answer_raw = Some(body),
            SectionKind::Detailed => resp.detailed = Some(body),
        }
    }
    match resp.answer_raw.as_deref().map(decode_answer) {
        Some(Ok(a)) => resp.answer = Some(a),
        Some(Err(ParseError::MalformedPayload(why))) => {
            diagnostics.push(Diagnostic::MalformedPayload(why))
        }
        Some(Err(other)) => diagnostics.push(Diagnostic::MalformedPayload(other.to_string())),
        None => diagnostics.push(Diagnostic::MissingAnswer),
    }
    if top_level_text {
        diagnostics.push(Diagnostic::StrayText);
    }
    resp.diagnostics = diagnostics;
    resp
}

/// Decodes `{"bbox": [x1, y1, x2, y2], "points": [[x, y], ...]}`. The point
/// list is optional and extra keys are ignored.
pub fn decode_answer(payload: &str) -> Result<GeometricAnswer, ParseError> {
    let bad = |why: String| ParseError::MalformedPayload(why);
    let value: Value = serde_json::from_str(payload).map_err(|e| bad(format!("not JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("payload is not a JSON object".into()))?;
    let bbox = obj.get("bbox").ok_or_else(|| bad("missing `bbox`".into()))?;
    let c = numbers(bbox, 4).map_err(|e| bad(format!("bbox: {e}")))?;
    let bbox = BoundingBox::new(c[0], c[1], c[2], c[3]).map_err(|e| bad(e.to_string()))?;
    let points = match obj.get("points") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, p)| {
                numbers(p, 2)
                    .map(|c| Point { x: c[0], y: c[1] })
                    .map_err(|e| bad(format!("points[{i}]: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(bad("`points` is not a list".into())),
    };
    Ok(GeometricAnswer { bbox, points })
}

fn numbers(v: &Value, arity: usize) -> Result<Vec<f64>, String> {
    let items = v.as_array().ok_or("expected a list")?;
    if items.len() != arity {
        return Err(format!("expected {arity} numbers, got {}", items.len()));
    }
    items
        .iter()
        .map(|x| x.as_f64().filter(|f| f.is_finite()).ok_or_else(|| format!("non-numeric value {x}")))
        .collect()
}

/// Canonical JSON payload for an answer. Integral coordinates are printed
/// without a fractional part.
pub fn render_answer(answer: &GeometricAnswer) -> String {
    let mut out = String::from("{\"bbox\":[");
    push_numbers(&mut out, &answer.bbox.coords());
    out.push(']');
    if !answer.points.is_empty() {
        out.push_str(",\"points\":[");
        for (i, p) in answer.points.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push('[');
            push_numbers(&mut out, &[p.x, p.y]);
            out.push(']');
        }
        out.push(']');
    }
    out.push('}');
    out
}

fn push_numbers(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        if v.fract() == 0.0 && v.abs() < 1e15 {
            out.push_str(&(*v as i64).to_string());
        } else {
            out.push_str(&v.to_string());
        }
    }
}

/// Emits the response's sections in its observed order using the exact tag
/// names.
pub fn serialize(resp: &StructuredResponse) -> Result<String, ParseError> {
    if !resp.order.contains(&SectionKind::Answer) {
        return Err(ParseError::InvalidInput("response has no answer section".into()));
    }
    SectionOrder::new(resp.order.clone())?;
    let mut out = String::new();
    for &kind in &resp.order {
        let body = match kind {
            SectionKind::Answer => match (&resp.answer_raw, &resp.answer) {
                (Some(raw), _) => raw.clone(),
                (None, Some(a)) => render_answer(a),
                (None, None) => {
                    return Err(ParseError::InvalidInput("answer section has no payload".into()))
                }
            },
            other => resp
                .section(other)
                .ok_or_else(|| ParseError::InvalidInput(format!("<{other}> listed but absent")))?
                .to_string(),
        };
        push_section(&mut out, kind, &body)?;
    }
    Ok(out)
}

/// The observed section order, or `None` when no well-formed answer exists.
pub fn detect_order(resp: &StructuredResponse) -> Option<SectionOrder> {
    SectionOrder::new(resp.order.clone()).ok()
}
