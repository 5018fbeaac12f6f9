//! Extraction of the final probability from free-form model output.
//!
//! Models are asked to wrap their final decimal forecast in asterisks,
//! e.g. `*0.42*`. The scanner collects every asterisk-delimited number and
//! keeps the right-most one that lies in `[0, 1]`. Earlier stars (an
//! "initial probability" step, a think block) lose to the final answer.
//!
//! Accepted number forms are `0`, `1`, `0.25`, `1.0` and `.25`. Percent
//! forms such as `*42%*` never match. In the default lenient mode a run of
//! consecutive asterisks acts as a single delimiter, so markdown bold
//! (`**0.4**`) is read the same as `*0.4*`.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// Runs of asterisks collapse to one delimiter.
    #[default]
    Lenient,
    /// Only a lone `*` delimits; `**0.4**` does not match.
    Strict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedForecast {
    pub probability: f64,
    /// Byte range of the whole delimited token, asterisks included.
    pub span: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("no_forecast_found: no asterisk-delimited decimal in text")]
    NoForecastFound,
    #[error("out_of_range: every delimited number lies outside [0, 1] (last seen {value})")]
    OutOfRange { value: f64 },
}

impl ParseError {
    pub fn code(&self) -> &'static str {
        match self {
            ParseError::NoForecastFound => "no_forecast_found",
            ParseError::OutOfRange { .. } => "out_of_range",
        }
    }
}

/// Parses with the default (lenient) delimiter rule.
pub fn parse(text: &str) -> Result<ParsedForecast, ParseError> {
    parse_with(text, Strictness::Lenient)
}

pub fn parse_with(text: &str, strictness: Strictness) -> Result<ParsedForecast, ParseError> {
    let runs = asterisk_runs(text);
    let usable = |r: &Range<usize>| strictness == Strictness::Lenient || r.len() == 1;
    let mut out_of_range = None;

    // Adjacent runs, right to left. A run that is not a usable delimiter
    // still separates its neighbours.
    for pair in runs.windows(2).rev() {
        let (open, close) = (&pair[0], &pair[1]);
        if !usable(open) || !usable(close) {
            continue;
        }
        let inner = &text[open.end..close.start];
        if !is_decimal(inner) {
            continue;
        }
        let Ok(value) = inner.parse::<f64>() else {
            continue;
        };
        if (0.0..=1.0).contains(&value) {
            return Ok(ParsedForecast {
                probability: value,
                span: open.start..close.end,
            });
        }
        out_of_range.get_or_insert(value);
    }

    match out_of_range {
        Some(value) => Err(ParseError::OutOfRange { value }),
        None => Err(ParseError::NoForecastFound),
    }
}

/// Byte ranges of maximal runs of `*`.
fn asterisk_runs(text: &str) -> Vec<Range<usize>> {
    let bytes = text.as_bytes();
    let mut runs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'*' {
            i += 1;
            continue;
        }
        let start = i;
        while i < bytes.len() && bytes[i] == b'*' {
            i += 1;
        }
        runs.push(start..i);
    }
    runs
}

/// `digits[.digits]` or `.digits`, ASCII only.
fn is_decimal(s: &str) -> bool {
    let (int_part, frac_part) = match s.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (s, None),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    match frac_part {
        None => !int_part.is_empty() && all_digits(int_part),
        Some(frac) => !frac.is_empty() && all_digits(frac) && all_digits(int_part),
    }
}
