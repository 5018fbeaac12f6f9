//! Paired reasoning traces per question: prompt rendering, sampling with
//! retries until the forecasts differ, and the trace record.

use std::fmt::Write as _;

use chrono::NaiveDate;
use log::debug;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endpoint::{ChatEndpoint, ChatMessage, ChatRequest};
use crate::forecast_parser::{self, Strictness};
use crate::news_client::NewsContext;
use crate::question_store::Question;

/// Retries after the first generation.
pub const MAX_RETRIES: usize = 4;

pub const NO_NEWS: &str = "No news available.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Scratchpad,
    ZeroShotThink,
}

impl PromptStyle {
    /// Reasoning models that emit think tags get the zero-shot persona
    /// prompt; everything else gets the scratchpad.
    pub fn default_for_model(model: &str) -> Self {
        let m = model.to_ascii_lowercase();
        if m.contains("deepseek-r1") || m.contains("r1-distill") || m.contains("think") {
            PromptStyle::ZeroShotThink
        } else {
            PromptStyle::Scratchpad
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SelfplayError {
    #[error("{question_id}: today_date {today} is after close_date {close}")]
    TemporalLeak {
        question_id: String,
        today: NaiveDate,
        close: NaiveDate,
    },
    #[error("{question_id}: generation failed after {attempts} attempts: {cause}")]
    GenerationFailed {
        question_id: String,
        attempts: usize,
        cause: String,
    },
}

impl SelfplayError {
    pub fn code(&self) -> &'static str {
        match self {
            SelfplayError::TemporalLeak { .. } => "temporal_leak",
            SelfplayError::GenerationFailed { .. } => "generation_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub question_id: String,
    pub title: String,
    pub background: String,
    pub resolution_criteria: String,
    pub today_date: NaiveDate,
    pub close_date: NaiveDate,
    pub news: NewsContext,
    pub style: PromptStyle,
}

impl PromptBundle {
    pub fn new(q: &Question, today_date: NaiveDate, news: NewsContext, style: PromptStyle) -> Result<Self, SelfplayError> {
        if today_date > q.close_date {
            return Err(SelfplayError::TemporalLeak {
                question_id: q.id.clone(),
                today: today_date,
                close: q.close_date,
            });
        }
        Ok(PromptBundle {
            question_id: q.id.clone(),
            title: q.title.clone(),
            background: q.background.clone(),
            resolution_criteria: q.resolution_criteria.clone(),
            today_date,
            close_date: q.close_date,
            news,
            style,
        })
    }

    /// Dated at the earlier of close and resolution.
    pub fn for_question(q: &Question, news: NewsContext, style: PromptStyle) -> Self {
        let today = q.close_date.min(q.resolution_date);
        Self::new(q, today, news, style).expect("today is at most close_date")
    }
}

const SCRATCHPAD_STEPS: &str = "\
Instructions:
1. Given the above question, rephrase and expand it to help you do better answering. Maintain all information in the original question.
{ Insert rephrased and expanded question. }
2. Using your knowledge of the world and topic, as well as the information provided, provide a few reasons why the answer might be no. Rate the strength of each reason.
{ Insert your thoughts }
3. Using your knowledge of the world and topic, as well as the information provided, provide a few reasons why the answer might be yes. Rate the strength of each reason.
{ Insert your thoughts }
4. Aggregate your considerations. Think like a superforecaster (e.g. Nate Silver).
{ Insert your aggregated considerations }
5. Output an initial probability (prediction) given steps 1-4.
{ Insert initial probability. }
6. Evaluate whether your calculated probability is excessively confident or not confident enough. Also, consider anything else that might affect the forecast that you did not before consider (e.g. base rate of the event).
{ Insert your thoughts }
7. Output your final prediction (a number between 0 and 1) with an asterisk at the beginning and end of the decimal.
{ Insert your answer }";

const PERSONA: &str = "You are an expert superforecaster, familiar with Structured Analytic Techniques as well as Superforecasting by Philip Tetlock and related work. Predict the probability that the following question will be resolved as true/yes. You MUST give a probability estimate between 0 and 1 UNDER ALL CIRCUMSTANCES.";

const ZERO_SHOT_OUTPUT: &str = "Output your final prediction (a number between 0 and 1) with an asterisk at the beginning and end of the decimal (Ex: *<probability>*).
{ Insert your answer }";

fn question_block(b: &PromptBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Question: {}", b.title);
    let _ = writeln!(s, "Question Background: {}", b.background);
    let _ = writeln!(s, "Resolution Criteria: {}", b.resolution_criteria);
    let _ = writeln!(s, "Today's Date: {}", b.today_date);
    let _ = writeln!(s, "Question Close Date: {}", b.close_date);
    let _ = writeln!(s, "News Summaries:");
    if b.news.summaries.is_empty() {
        let _ = writeln!(s, "{NO_NEWS}");
    }
    for (i, a) in b.news.summaries.iter().enumerate() {
        let _ = writeln!(
            s,
            "[{}] {} ({}, {}): {}",
            i + 1,
            a.title,
            a.source,
            a.published_at.format("%Y-%m-%d"),
            a.summary
        );
    }
    s
}

pub fn render_prompt(b: &PromptBundle) -> String {
    match b.style {
        PromptStyle::Scratchpad => format!("{}\n{SCRATCHPAD_STEPS}\n", question_block(b)),
        PromptStyle::ZeroShotThink => format!("{PERSONA}\n\n{}\n{ZERO_SHOT_OUTPUT}\n", question_block(b)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub question_id: String,
    /// Zero-based index among the generations for this question.
    pub attempt_index: u8,
    pub raw_text: String,
    pub probability: f64,
    pub style: PromptStyle,
    pub today_date: NaiveDate,
    /// The exact prompt the trace was sampled from.
    pub prompt: String,
    #[serde(default)]
    pub truncated: bool,
}

/// Probabilities are compared after rounding to 6 decimal places.
pub fn canonical(p: f64) -> i64 {
    (p * 1e6).round() as i64
}

pub fn same_forecast(a: f64, b: f64) -> bool {
    canonical(a) == canonical(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelfplaySettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    pub strictness: Strictness,
    /// Overrides the model-name default when set.
    pub style: Option<PromptStyle>,
}

impl Default for SelfplaySettings {
    fn default() -> Self {
        SelfplaySettings {
            model: "phi-4".into(),
            temperature: 1.0,
            max_tokens: Some(2048),
            strictness: Strictness::Lenient,
            style: None,
        }
    }
}

impl SelfplaySettings {
    pub fn style(&self) -> PromptStyle {
        self.style.unwrap_or_else(|| PromptStyle::default_for_model(&self.model))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairResult {
    Pair(ReasoningTrace, ReasoningTrace),
    /// No second, different forecast within the retry budget.
    Dropped { attempts: usize },
}

pub fn attempt_tag(i: usize) -> String {
    format!("selfplay/attempt-{i}")
}

/// Samples up to `1 + MAX_RETRIES` generations. The first parsable one is
/// `t1`; the first later one whose forecast differs is `t2` and ends the
/// loop. Unparsable generations use up budget.
pub fn generate_pair(
    q: &Question,
    bundle: &PromptBundle,
    chat: &dyn ChatEndpoint,
    settings: &SelfplaySettings,
) -> Result<PairResult, SelfplayError> {
    let prompt = render_prompt(bundle);
    let budget = 1 + MAX_RETRIES;
    let mut first: Option<ReasoningTrace> = None;
    for i in 0..budget {
        let req = ChatRequest {
            scope: q.id.clone(),
            tag: attempt_tag(i),
            model: settings.model.clone(),
            messages: vec![ChatMessage::user(prompt.clone())],
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
        };
        let resp = chat.complete(&req).map_err(|e| SelfplayError::GenerationFailed {
            question_id: q.id.clone(),
            attempts: i + 1,
            cause: e.to_string(),
        })?;
        let parsed = match forecast_parser::parse_with(&resp.text, settings.strictness) {
            Ok(p) => p,
            Err(e) => {
                debug!("{} attempt {i}: {}", q.id, e.code());
                continue;
            }
        };
        let trace = ReasoningTrace {
            question_id: q.id.clone(),
            attempt_index: i as u8,
            raw_text: resp.text,
            probability: parsed.probability,
            style: bundle.style,
            today_date: bundle.today_date,
            prompt: prompt.clone(),
            truncated: resp.truncated,
        };
        match &first {
            None => first = Some(trace),
            Some(t1) if same_forecast(t1.probability, trace.probability) => {}
            Some(t1) => return Ok(PairResult::Pair(t1.clone(), trace)),
        }
    }
    match first {
        Some(_) => Ok(PairResult::Dropped { attempts: budget }),
        None => Err(SelfplayError::GenerationFailed {
            question_id: q.id.clone(),
            attempts: budget,
            cause: "no generation contained a parsable forecast".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{ChatResponse, EndpointError};
    use crate::question_store::Outcome;
    use std::sync::Mutex;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn question() -> Question {
        Question {
            id: "q7".into(),
            title: "Will the bill pass?".into(),
            background: "A vote is scheduled.".into(),
            resolution_criteria: "Resolves yes on passage.".into(),
            close_date: d("2024-10-01"),
            resolution_date: d("2024-10-03"),
            outcome: Outcome::Yes,
        }
    }

    fn bundle(style: PromptStyle) -> PromptBundle {
        let q = question();
        PromptBundle::for_question(&q, NewsContext::empty(&q), style)
    }

    /// Replies in order and records every request.
    struct Script {
        replies: Mutex<Vec<Result<String, EndpointError>>>,
        seen: Mutex<Vec<ChatRequest>>,
    }
    impl Script {
        fn new(replies: Vec<&str>) -> Self {
            Script {
                replies: Mutex::new(replies.into_iter().map(|r| Ok(r.to_string())).collect()),
                seen: Mutex::new(vec![]),
            }
        }
        fn calls(&self) -> usize {
            self.seen.lock().unwrap().len()
        }
    }
    impl ChatEndpoint for Script {
        fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
            self.seen.lock().unwrap().push(req.clone());
            self.replies.lock().unwrap().remove(0).map(|text| ChatResponse { text, truncated: false })
        }
    }

    fn run(replies: Vec<&str>) -> (Result<PairResult, SelfplayError>, usize) {
        let s = Script::new(replies);
        let r = generate_pair(&question(), &bundle(PromptStyle::Scratchpad), &s, &SelfplaySettings::default());
        (r, s.calls())
    }

    #[test]
    fn templates() {
        let s = render_prompt(&bundle(PromptStyle::Scratchpad));
        assert!(s.contains("Think like a superforecaster"));
        assert!(s.contains("7. Output your final prediction"));
        assert!(s.contains("Will the bill pass?"));
        assert!(s.contains("A vote is scheduled."));
        assert!(s.contains("Resolves yes on passage."));
        assert!(s.contains("Today's Date: 2024-10-01"));
        assert!(s.contains("Question Close Date: 2024-10-01"));
        assert!(s.contains(NO_NEWS));
        let z = render_prompt(&bundle(PromptStyle::ZeroShotThink));
        assert!(z.contains("You are an expert superforecaster"));
        assert!(!z.contains("Think like a superforecaster"));
    }

    #[test]
    fn style_defaults() {
        assert_eq!(PromptStyle::default_for_model("phi-4"), PromptStyle::Scratchpad);
        assert_eq!(
            PromptStyle::default_for_model("DeepSeek-R1-Distill-Qwen-14B"),
            PromptStyle::ZeroShotThink
        );
    }

    #[test]
    fn today_cannot_pass_close() {
        let q = question();
        let err = PromptBundle::new(&q, d("2024-10-02"), NewsContext::empty(&q), PromptStyle::Scratchpad).unwrap_err();
        assert_eq!(err.code(), "temporal_leak");
    }

    #[test]
    fn all_identical_is_dropped_after_five() {
        let (r, calls) = run(vec!["*0.30*", "*0.30*", "*0.3*", "*0.300*", "*0.30*"]);
        assert_eq!(r.unwrap(), PairResult::Dropped { attempts: 5 });
        assert_eq!(calls, 5);
    }

    #[test]
    fn first_differing_retry_stops() {
        let (r, calls) = run(vec!["*0.30*", "*0.40*", "*0.5*"]);
        let PairResult::Pair(t1, t2) = r.unwrap() else { panic!() };
        assert_eq!((t1.probability, t2.probability), (0.3, 0.4));
        assert_eq!((t1.attempt_index, t2.attempt_index), (0, 1));
        assert_eq!(calls, 2);
        assert_eq!(t1.prompt, t2.prompt);
    }

    #[test]
    fn unparsable_count_against_budget() {
        let (r, calls) = run(vec!["no idea", "*0.2*", "hmm", "*0.2*", "*0.25*"]);
        let PairResult::Pair(t1, t2) = r.unwrap() else { panic!() };
        assert_eq!((t1.attempt_index, t2.attempt_index), (1, 4));
        assert_eq!(calls, 5);

        let (r, _) = run(vec!["a", "b", "c", "d", "e"]);
        assert_eq!(r.unwrap_err().code(), "generation_failed");
    }

    #[test]
    fn differences_below_six_decimals_are_identical() {
        let (r, _) = run(vec!["*0.3*", "*0.3000001*", "*0.3000004*", "*0.2999996*", "*0.3*"]);
        assert_eq!(r.unwrap(), PairResult::Dropped { attempts: 5 });
        let (r, _) = run(vec!["*0.3*", "*0.300001*"]);
        assert!(matches!(r.unwrap(), PairResult::Pair(..)));
    }

    #[test]
    fn endpoint_failure_is_generation_failed() {
        let s = Script {
            replies: Mutex::new(vec![Ok("*0.3*".into()), Err(EndpointError::Timeout)]),
            seen: Mutex::new(vec![]),
        };
        let r = generate_pair(&question(), &bundle(PromptStyle::Scratchpad), &s, &SelfplaySettings::default());
        assert_eq!(r.unwrap_err().code(), "generation_failed");
    }

    #[test]
    fn requests_use_temperature_one_and_distinct_tags() {
        let s = Script::new(vec!["*0.1*", "*0.2*"]);
        generate_pair(&question(), &bundle(PromptStyle::Scratchpad), &s, &SelfplaySettings::default()).unwrap();
        let seen = s.seen.lock().unwrap();
        assert!(seen.iter().all(|r| r.temperature == 1.0));
        assert_ne!(seen[0].transcript_key(), seen[1].transcript_key());
    }
}
