//! Extraction of the first JSON object from free-form model output.

use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JsonParseError {
    #[error("no JSON object in response ({len} bytes)")]
    NoObject { len: usize },
    #[error("JSON object opened at byte {offset} is never closed")]
    Unbalanced { offset: usize },
    #[error("invalid JSON at byte {offset}: {message}")]
    Invalid { offset: usize, message: String },
}

impl JsonParseError {
    pub fn offset(&self) -> usize {
        match self {
            JsonParseError::NoObject { len } => *len,
            JsonParseError::Unbalanced { offset } | JsonParseError::Invalid { offset, .. } => *offset,
        }
    }
}

/// Byte range of the first fenced block's body, if the text has a fence.
fn fenced_body(raw: &str) -> Option<(usize, usize)> {
    let open = raw.find("```")?;
    let after = open + 3;
    // Skip the info string (e.g. `json`) up to the end of the line.
    let body_start = raw[after..].find('\n').map_or(raw.len(), |n| after + n + 1);
    let body_end = raw[body_start..].find("```").map_or(raw.len(), |n| body_start + n);
    Some((body_start, body_end))
}

/// End (exclusive) of the balanced object starting at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, b) in text.bytes().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn parse_in(raw: &str, base: usize, region: &str) -> Result<Map<String, Value>, JsonParseError> {
    let start = region.find('{').ok_or(JsonParseError::NoObject { len: raw.len() })?;
    let end = balanced_end(region, start).ok_or(JsonParseError::Unbalanced { offset: base + start })?;
    let block = &region[start..end];
    match serde_json::from_str::<Value>(block) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(_) => unreachable!("a balanced block starting with '{{' is an object"),
        Err(e) => Err(JsonParseError::Invalid {
            offset: base + start + line_col_offset(block, e.line(), e.column()),
            message: e.to_string(),
        }),
    }
}

fn line_col_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Strips code fences, takes the first balanced `{...}` block and parses it
/// strictly.
pub fn parse_json_object(raw: &str) -> Result<Map<String, Value>, JsonParseError> {
    if let Some((s, e)) = fenced_body(raw) {
        if let Ok(map) = parse_in(raw, s, &raw[s..e]) {
            return Ok(map);
        }
    }
    parse_in(raw, 0, raw)
}
