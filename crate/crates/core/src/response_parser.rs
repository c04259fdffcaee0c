//! Pulls candidate source code out of a raw model reply.
//!
//! Strategies, tried in order:
//! 1. the first complete fenced block (lines starting with three back ticks;
//!    a language tag after the opening fence is dropped),
//! 2. a JSON envelope `{"code": "..."}`,
//! 3. the whole reply, when its first non-blank line starts with `def`.
//!
//! Under the JSON-envelope contract the envelope is tried before fences.
//! Nothing here errors: an unusable reply comes back as an
//! `ExtractionFailure` record so the caller can count it.

use serde::{Deserialize, Serialize};

use crate::failure::FailureRecord;
use crate::prompt_builder::ResponseContract;

pub const FENCE: &str = "```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionStrategy {
    Fenced,
    JsonEnvelope,
    BareSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub source: String,
    pub strategy: ExtractionStrategy,
}

pub type ExtractionResult = Result<Extracted, FailureRecord>;

#[derive(Debug, PartialEq, Eq)]
enum FenceScan<'a> {
    None,
    Unterminated,
    Block(Vec<&'a str>),
}

fn scan_fences(text: &str) -> FenceScan<'_> {
    let mut body: Option<Vec<&str>> = None;
    for line in text.split('\n') {
        let is_fence = line.starts_with(FENCE);
        match (&mut body, is_fence) {
            (None, true) => body = Some(Vec::new()),
            (None, false) => {}
            (Some(lines), true) => return FenceScan::Block(std::mem::take(lines)),
            (Some(lines), false) => lines.push(line),
        }
    }
    match body {
        Some(_) => FenceScan::Unterminated,
        None => FenceScan::None,
    }
}

fn envelope_code(text: &str) -> Option<String> {
    let value: serde_json::Value = serde_json::from_str(text.trim()).ok()?;
    let code = value.get("code")?.as_str()?.replace("\r\n", "\n");
    let code = match scan_fences(&code) {
        FenceScan::Block(lines) => lines.join("\n"),
        _ => code,
    };
    (!code.trim().is_empty()).then_some(code)
}

pub fn starts_with_definition(text: &str) -> bool {
    let first = text.trim_start();
    let rest = first.strip_prefix("async").map(str::trim_start).unwrap_or(first);
    rest.strip_prefix("def")
        .is_some_and(|r| r.starts_with([' ', '\t']))
}

fn found(source: String, strategy: ExtractionStrategy) -> ExtractionResult {
    Ok(Extracted { source, strategy })
}

pub fn extract_code(reply: &str, contract: ResponseContract) -> ExtractionResult {
    let text = reply.replace("\r\n", "\n");

    if contract == ResponseContract::JsonEnvelope {
        if let Some(code) = envelope_code(&text) {
            return found(code, ExtractionStrategy::JsonEnvelope);
        }
    }

    match scan_fences(&text) {
        FenceScan::Block(lines) => {
            let body = lines.join("\n");
            if contract == ResponseContract::JsonEnvelope {
                if let Some(code) = envelope_code(&body) {
                    return found(code, ExtractionStrategy::JsonEnvelope);
                }
            }
            if body.trim().is_empty() {
                return Err(FailureRecord::extraction("empty fenced block"));
            }
            return found(body, ExtractionStrategy::Fenced);
        }
        FenceScan::Unterminated => return Err(FailureRecord::extraction("unterminated fence")),
        FenceScan::None => {}
    }

    if contract == ResponseContract::Fenced {
        if let Some(code) = envelope_code(&text) {
            return found(code, ExtractionStrategy::JsonEnvelope);
        }
    }

    if starts_with_definition(&text) {
        return found(text, ExtractionStrategy::BareSource);
    }

    let detail = if text.trim().is_empty() {
        "empty reply"
    } else {
        "no fence, no envelope, no definition keyword"
    };
    Err(FailureRecord::extraction(detail))
}
