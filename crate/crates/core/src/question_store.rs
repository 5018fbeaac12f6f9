//! Resolved binary questions: ingestion, validation, storage and the
//! temporal train/test split.
//!
//! The canonical store file is JSONL sorted by question id. Loading rebuilds
//! the in-memory index; the store is read-only afterwards.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use chrono::{DateTime, NaiveDate, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::records::{self, ReadError};

/// Resolved outcome of a binary question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Outcome {
    No,
    Yes,
}

impl Outcome {
    pub fn as_f64(self) -> f64 {
        match self {
            Outcome::No => 0.0,
            Outcome::Yes => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Outcome::No => 0,
            Outcome::Yes => 1,
        }
    }

    /// Parses one of the two binary tokens, `"0"` or `"1"`, and nothing else.
    pub fn from_token(token: &str) -> Option<Self> {
        match token {
            "0" => Some(Outcome::No),
            "1" => Some(Outcome::Yes),
            _ => None,
        }
    }
}

impl TryFrom<u8> for Outcome {
    type Error = u8;
    fn try_from(v: u8) -> Result<Self, u8> {
        match v {
            0 => Ok(Outcome::No),
            1 => Ok(Outcome::Yes),
            other => Err(other),
        }
    }
}

impl Serialize for Outcome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Outcome::try_from(v).map_err(|v| serde::de::Error::custom(format!("outcome {v} is not 0 or 1")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub background: String,
    #[serde(default)]
    pub resolution_criteria: String,
    pub close_date: NaiveDate,
    pub resolution_date: NaiveDate,
    pub outcome: Outcome,
}

/// An unvalidated input record. Dates and outcome stay textual until
/// [`ingest`] checks them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawQuestion {
    pub id: Option<String>,
    pub title: Option<String>,
    #[serde(default)]
    pub background: Option<String>,
    #[serde(default)]
    pub resolution_criteria: Option<String>,
    pub close_date: Option<String>,
    pub resolution_date: Option<String>,
    #[serde(default, deserialize_with = "outcome_token")]
    pub outcome: Option<String>,
}

/// Accepts the outcome as a JSON string or number and keeps its exact
/// textual form, so `1`, `"1"` pass and `0.5`, `1.0`, `"yes"` do not.
fn outcome_token<'de, D: Deserializer<'de>>(d: D) -> Result<Option<String>, D::Error> {
    let v = Option::<serde_json::Value>::deserialize(d)?;
    Ok(match v {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        Some(other) => Some(other.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    MissingField { field: String },
    MalformedDate { field: String, value: String },
    NonBinaryOutcome { value: String },
    DuplicateId,
    MalformedRecord { detail: String },
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::MissingField { .. } => "missing_field",
            RejectReason::MalformedDate { .. } => "malformed_date",
            RejectReason::NonBinaryOutcome { .. } => "non_binary_outcome",
            RejectReason::DuplicateId => "duplicate_id",
            RejectReason::MalformedRecord { .. } => "malformed_record",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based position of the record in its input.
    pub record: usize,
    pub id: Option<String>,
    #[serde(flatten)]
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("csv header has no column {column:?} for field {field}")]
    CsvMapping { field: String, column: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("duplicate question id {0} in store file")]
    CorruptStore(String),
}

/// Parses `YYYY-MM-DD` or an RFC 3339 timestamp, normalized to a UTC date.
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|dt| dt.with_timezone(&Utc).date_naive()))
}

fn validate(raw: RawQuestion) -> Result<Question, RejectReason> {
    fn required(v: Option<String>, field: &str) -> Result<String, RejectReason> {
        v.filter(|s| !s.trim().is_empty()).ok_or_else(|| RejectReason::MissingField {
            field: field.to_string(),
        })
    }
    fn date(v: Option<String>, field: &str) -> Result<NaiveDate, RejectReason> {
        let v = required(v, field)?;
        parse_date(&v).ok_or_else(|| RejectReason::MalformedDate {
            field: field.to_string(),
            value: v,
        })
    }

    let id = required(raw.id, "id")?;
    let title = required(raw.title, "title")?;
    let close_date = date(raw.close_date, "close_date")?;
    let resolution_date = date(raw.resolution_date, "resolution_date")?;
    let token = required(raw.outcome, "outcome")?;
    let outcome = Outcome::from_token(token.trim()).ok_or(RejectReason::NonBinaryOutcome { value: token })?;
    Ok(Question {
        id,
        title,
        background: raw.background.unwrap_or_default(),
        resolution_criteria: raw.resolution_criteria.unwrap_or_default(),
        close_date,
        resolution_date,
        outcome,
    })
}

/// Read-only collection of validated questions, indexed by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Store {
    questions: BTreeMap<String, Question>,
}

impl Store {
    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.questions.get(id)
    }

    /// Questions in id order.
    pub fn iter(&self) -> impl Iterator<Item = &Question> {
        self.questions.values()
    }

    /// Validates records into a new store.
    pub fn ingest<I>(records: I) -> (Store, IngestReport)
    where
        I: IntoIterator<Item = Result<RawQuestion, String>>,
    {
        let mut store = Store::default();
        let report = store.ingest_more(records);
        (store, report)
    }

    /// Validates records into this store; ids already present are rejected
    /// as duplicates.
    pub fn ingest_more<I>(&mut self, records: I) -> IngestReport
    where
        I: IntoIterator<Item = Result<RawQuestion, String>>,
    {
        let mut report = IngestReport::default();
        for (i, rec) in records.into_iter().enumerate() {
            let reject = |id, reason| Rejection {
                record: i + 1,
                id,
                reason,
            };
            let raw = match rec {
                Ok(raw) => raw,
                Err(detail) => {
                    report.rejected.push(reject(None, RejectReason::MalformedRecord { detail }));
                    continue;
                }
            };
            let id = raw.id.clone();
            match validate(raw) {
                Ok(q) if self.questions.contains_key(&q.id) => {
                    report.rejected.push(reject(id, RejectReason::DuplicateId));
                }
                Ok(q) => {
                    self.questions.insert(q.id.clone(), q);
                    report.accepted += 1;
                }
                Err(reason) => report.rejected.push(reject(id, reason)),
            }
        }
        report
    }

    /// Canonical form: one question per line, sorted by id.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        let qs: Vec<&Question> = self.iter().collect();
        records::write_jsonl(path, &qs)
    }

    pub fn load(path: &Path) -> Result<Store, StoreError> {
        let qs: Vec<Question> = records::read_jsonl(path)?;
        let mut questions = BTreeMap::new();
        for q in qs {
            if let Some(prev) = questions.insert(q.id.clone(), q) {
                return Err(StoreError::CorruptStore(prev.id));
            }
        }
        Ok(Store { questions })
    }

    pub fn from_questions(qs: impl IntoIterator<Item = Question>) -> Store {
        Store {
            questions: qs.into_iter().map(|q| (q.id.clone(), q)).collect(),
        }
    }
}

/// Raw records from a JSONL file. Lines that are not JSON objects of the
/// expected shape become `Err` entries so they are reported, not dropped.
pub fn read_raw_jsonl(path: &Path) -> io::Result<Vec<Result<RawQuestion, String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str::<RawQuestion>(l).map_err(|e| e.to_string()))
        .collect())
}

/// Column names used by the CSV adapter for each question field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvMapping {
    pub id: String,
    pub title: String,
    pub background: String,
    pub resolution_criteria: String,
    pub close_date: String,
    pub resolution_date: String,
    pub outcome: String,
}

impl Default for CsvMapping {
    fn default() -> Self {
        CsvMapping {
            id: "id".into(),
            title: "title".into(),
            background: "background".into(),
            resolution_criteria: "resolution_criteria".into(),
            close_date: "close_date".into(),
            resolution_date: "resolution_date".into(),
            outcome: "outcome".into(),
        }
    }
}

/// Raw records from a CSV file with a header row. Optional columns
/// (background, resolution criteria) may be absent from the header.
pub fn read_raw_csv(
    reader: impl io::Read,
    mapping: &CsvMapping,
) -> Result<Vec<Result<RawQuestion, String>>, StoreError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |field: &str, name: &str, required: bool| -> Result<Option<usize>, StoreError> {
        match headers.iter().position(|h| h == name) {
            Some(i) => Ok(Some(i)),
            None if required => Err(StoreError::CsvMapping {
                field: field.into(),
                column: name.into(),
            }),
            None => Ok(None),
        }
    };
    let id = col("id", &mapping.id, true)?;
    let title = col("title", &mapping.title, true)?;
    let background = col("background", &mapping.background, false)?;
    let criteria = col("resolution_criteria", &mapping.resolution_criteria, false)?;
    let close = col("close_date", &mapping.close_date, true)?;
    let resolution = col("resolution_date", &mapping.resolution_date, true)?;
    let outcome = col("outcome", &mapping.outcome, true)?;

    let mut out = Vec::new();
    for row in rdr.records() {
        out.push(row.map_err(|e| e.to_string()).map(|row| {
            let get = |i: Option<usize>| i.and_then(|i| row.get(i)).map(str::to_string);
            RawQuestion {
                id: get(id),
                title: get(title),
                background: get(background),
                resolution_criteria: get(criteria),
                close_date: get(close),
                resolution_date: get(resolution),
                outcome: get(outcome),
            }
        }));
    }
    Ok(out)
}

/// Inclusive resolution-date windows for the training and test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl Partition {
    /// Training on questions resolved 2024-07-01..=2024-12-15, testing on
    /// 2024-12-25..=2025-01-23.
    pub fn reference_windows() -> Partition {
        let d = |y, m, d| NaiveDate::from_ymd_opt(y, m, d).expect("valid literal date");
        Partition {
            train_start: d(2024, 7, 1),
            train_end: d(2024, 12, 15),
            test_start: d(2024, 12, 25),
            test_end: d(2025, 1, 23),
        }
    }

    pub fn validate(&self) -> Result<(), StoreError> {
        if self.train_start > self.train_end {
            return Err(StoreError::InvalidPartition(format!(
                "train_start {} is after train_end {}",
                self.train_start, self.train_end
            )));
        }
        if self.test_start > self.test_end {
            return Err(StoreError::InvalidPartition(format!(
                "test_start {} is after test_end {}",
                self.test_start, self.test_end
            )));
        }
        if self.train_end >= self.test_start {
            return Err(StoreError::InvalidPartition(format!(
                "train_end {} must be strictly before test_start {}",
                self.train_end, self.test_start
            )));
        }
        Ok(())
    }

    pub fn split_of(&self, resolution_date: NaiveDate) -> Option<Split> {
        if (self.train_start..=self.train_end).contains(&resolution_date) {
            Some(Split::Train)
        } else if (self.test_start..=self.test_end).contains(&resolution_date) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Splits by resolution date. Both halves come back in id order.
pub fn partition<'a>(
    store: &'a Store,
    p: &Partition,
) -> Result<(Vec<&'a Question>, Vec<&'a Question>), StoreError> {
    p.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for q in store.iter() {
        match p.split_of(q.resolution_date) {
            Some(Split::Train) => train.push(q),
            Some(Split::Test) => test.push(q),
            None => {}
        }
    }
    Ok((train, test))
}
