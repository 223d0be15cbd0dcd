//! Shared text normalization.
//!
//! A single normalizer serves questions, entity names and predicate paths:
//! input is lowercased and split into maximal alphanumeric runs, so
//! `"/location/location/major_cities"` becomes `["location", "location",
//! "major", "cities"]` and `"U.S. Route 2"` becomes `["u", "s", "route", "2"]`.
//! Anything that is not alphanumeric (whitespace, `/`, `_`, `.`, `,`,
//! punctuation) separates tokens.

use std::ops::Range;

/// Lowercase a string for token- and character-level processing.
pub fn lowercase(text: &str) -> String {
    text.to_lowercase()
}

fn is_separator(c: char) -> bool {
    !c.is_alphanumeric()
}

/// Tokenize raw text: lowercase, then split into maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = lowercase(text);
    token_spans(&lower)
        .into_iter()
        .map(|r| lower[r].to_string())
        .collect()
}

/// Byte spans of the tokens of an already-lowercased string.
///
/// The spans index into `lower`, so callers can recover the raw surface
/// form of any token run (mentions keep their original punctuation and
/// inner spacing this way).
pub fn token_spans(lower: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (pos, c) in lower.char_indices() {
        if is_separator(c) {
            if let Some(s) = start.take() {
                spans.push(s..pos);
            }
        } else if start.is_none() {
            start = Some(pos);
        }
    }
    if let Some(s) = start {
        spans.push(s..lower.len());
    }
    spans
}

/// The reserved token that stands in for a replaced entity mention.
pub const ENTITY_SLOT: &str = "<e>";
