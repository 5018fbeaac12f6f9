//! Outcome-ranked preference pairs and the preference dataset file.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::question_store::{Outcome, Store};
use crate::records::{self, file_sha256, sha256_hex, Manifest, ReadError};
use crate::selfplay::{same_forecast, ReasoningTrace};

pub const STAGE: &str = "emit-dpo";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    TrueOutcome,
    Randomized,
}

impl LabelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelMode::TrueOutcome => "true_outcome",
            LabelMode::Randomized => "randomized",
        }
    }
}

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("tie_pair: both forecasts are {0}")]
    TiePair(f64),
    #[error("empty_dataset: nothing to emit")]
    EmptyDataset,
    #[error("pairs mix label modes")]
    MixedLabelModes,
    #[error("manifest_mismatch: {0}")]
    ManifestMismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Read(#[from] ReadError),
}

impl RerankError {
    pub fn code(&self) -> &'static str {
        match self {
            RerankError::TiePair(_) => "tie_pair",
            RerankError::EmptyDataset => "empty_dataset",
            RerankError::MixedLabelModes => "mixed_label_modes",
            RerankError::ManifestMismatch(_) => "manifest_mismatch",
            RerankError::Io(_) | RerankError::Read(_) => "io",
        }
    }
}

/// `r(p, o) = |p - o|`.
pub fn distance(p: f64, o: Outcome) -> f64 {
    (p - o.as_f64()).abs()
}

/// Index order `(chosen, rejected)`: the forecast nearer the outcome wins.
pub fn rank_pair(p1: f64, p2: f64, o: Outcome) -> Result<(usize, usize), RerankError> {
    if same_forecast(p1, p2) {
        return Err(RerankError::TiePair(p1));
    }
    if distance(p1, o) < distance(p2, o) {
        Ok((0, 1))
    } else {
        Ok((1, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub question_id: String,
    pub chosen: ReasoningTrace,
    pub rejected: ReasoningTrace,
    pub outcome: Outcome,
    pub r_chosen: f64,
    pub r_rejected: f64,
    pub label_mode: LabelMode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PairSkip {
    WrongTraceCount { count: usize },
    MissingOutcome,
    Tie,
    PromptMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub question_id: String,
    #[serde(flatten)]
    pub reason: PairSkip,
}

/// One pair per question with exactly two traces and a stored outcome, in
/// question-id order. In randomized mode a seeded coin decides orientation,
/// drawn once per built pair in that order.
pub fn build_pairs(
    traces: &[ReasoningTrace],
    store: &Store,
    mode: LabelMode,
    seed: u64,
) -> (Vec<PreferencePair>, Vec<Skipped>) {
    let mut by_q: BTreeMap<&str, Vec<&ReasoningTrace>> = BTreeMap::new();
    for t in traces {
        by_q.entry(t.question_id.as_str()).or_default().push(t);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(by_q.len());
    let mut skipped = Vec::new();
    let mut skip = |id: &str, reason: PairSkip| {
        warn!("skipping {id}: {reason:?}");
        skipped.push(Skipped {
            question_id: id.to_string(),
            reason,
        });
    };

    for (id, mut ts) in by_q {
        if ts.len() != 2 {
            skip(id, PairSkip::WrongTraceCount { count: ts.len() });
            continue;
        }
        let Some(q) = store.get(id) else {
            skip(id, PairSkip::MissingOutcome);
            continue;
        };
        ts.sort_by_key(|t| t.attempt_index);
        let (a, b) = (ts[0], ts[1]);
        if a.prompt != b.prompt {
            skip(id, PairSkip::PromptMismatch);
            continue;
        }
        let Ok((ci, _)) = rank_pair(a.probability, b.probability, q.outcome) else {
            skip(id, PairSkip::Tie);
            continue;
        };
        let first_chosen = match mode {
            LabelMode::TrueOutcome => ci == 0,
            LabelMode::Randomized => rng.random_bool(0.5),
        };
        let (chosen, rejected) = if first_chosen { (a, b) } else { (b, a) };
        pairs.push(PreferencePair {
            question_id: id.to_string(),
            r_chosen: distance(chosen.probability, q.outcome),
            r_rejected: distance(rejected.probability, q.outcome),
            chosen: chosen.clone(),
            rejected: rejected.clone(),
            outcome: q.outcome,
            label_mode: mode,
        });
    }
    (pairs, skipped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoMetadata {
    pub question_id: String,
    pub label_mode: LabelMode,
    pub outcome: u8,
    pub r_chosen: f64,
    pub r_rejected: f64,
}

/// One line of the preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoExample {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub metadata: DpoMetadata,
}

impl From<&PreferencePair> for DpoExample {
    fn from(p: &PreferencePair) -> Self {
        DpoExample {
            prompt: p.chosen.prompt.clone(),
            chosen: p.chosen.raw_text.clone(),
            rejected: p.rejected.raw_text.clone(),
            metadata: DpoMetadata {
                question_id: p.question_id.clone(),
                label_mode: p.label_mode,
                outcome: p.outcome.as_u8(),
                r_chosen: p.r_chosen,
                r_rejected: p.r_rejected,
            },
        }
    }
}

/// Writes the dataset sorted by question id, then its manifest. Nothing is
/// left behind at `path` if writing fails.
pub fn emit_dataset(pairs: &[PreferencePair], path: &Path, seed: u64) -> Result<Manifest, RerankError> {
    let Some(first) = pairs.first() else {
        return Err(RerankError::EmptyDataset);
    };
    let mode = first.label_mode;
    if pairs.iter().any(|p| p.label_mode != mode) {
        return Err(RerankError::MixedLabelModes);
    }
    let mut examples: Vec<DpoExample> = pairs.iter().map(DpoExample::from).collect();
    examples.sort_by(|a, b| a.metadata.question_id.cmp(&b.metadata.question_id));
    let bytes = records::to_jsonl(&examples).map_err(io::Error::other)?;
    records::write_atomic(path, &bytes)?;

    let manifest = Manifest {
        stage: STAGE.into(),
        artifact: path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        count: examples.len(),
        sha256: sha256_hex(&bytes),
        params: BTreeMap::from([
            ("label_mode".to_string(), serde_json::json!(mode.as_str())),
            ("seed".to_string(), serde_json::json!(seed)),
        ]),
    };
    if let Err(e) = manifest.write(path) {
        let _ = std::fs::remove_file(path);
        return Err(e.into());
    }
    Ok(manifest)
}

/// Reads a dataset and checks it against its manifest.
pub fn read_dataset(path: &Path) -> Result<(Vec<DpoExample>, Manifest), RerankError> {
    let manifest = Manifest::read(path)?;
    let examples: Vec<DpoExample> = records::read_jsonl(path)?;
    if examples.is_empty() {
        return Err(RerankError::EmptyDataset);
    }
    if examples.len() != manifest.count {
        return Err(RerankError::ManifestMismatch(format!(
            "manifest count {} but {} records",
            manifest.count,
            examples.len()
        )));
    }
    let hash = file_sha256(path)?;
    if hash != manifest.sha256 {
        return Err(RerankError::ManifestMismatch(format!(
            "content hash {hash} differs from manifest {}",
            manifest.sha256
        )));
    }
    Ok((examples, manifest))
}
