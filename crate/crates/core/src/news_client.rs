//! News retrieval for a question: query generation, search over the
//! 14 days before resolution, and per-article summaries.

use std::collections::BTreeSet;

use chrono::{DateTime, Days, NaiveDate, Utc};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::endpoint::{ChatEndpoint, ChatMessage, ChatRequest, NewsArticle, NewsEndpoint, NewsQuery};
use crate::question_store::Question;

pub const WINDOW_DAYS: u64 = 14;
pub const MAX_QUERIES: usize = 5;
pub const MAX_SUMMARIES: usize = 10;

pub const SUMMARY_INSTRUCTION: &str =
    "Summarize the following article in ≤3 sentences, preserving dates and numbers.";

/// `(resolution_date - 14 days, resolution_date)`.
pub fn retrieval_window(q: &Question) -> (NaiveDate, NaiveDate) {
    window_ending(q.resolution_date)
}

pub fn window_ending(end: NaiveDate) -> (NaiveDate, NaiveDate) {
    let start = end.checked_sub_days(Days::new(WINDOW_DAYS)).unwrap_or(NaiveDate::MIN);
    (start, end)
}

/// Articles are admitted from the first instant of `start` up to, but not
/// including, the first instant of `end`: nothing published on or after the
/// resolution date can reach a prompt.
pub fn in_window(published_at: DateTime<Utc>, (start, end): (NaiveDate, NaiveDate)) -> bool {
    let d = published_at.date_naive();
    d >= start && d < end
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", rename_all = "snake_case")]
pub enum NewsWarning {
    NewsQueryGenerationFailed { error: String },
    NewsFetchFailed { query: String, error: String },
    SummarizationFailed { title: String, error: String },
}

impl NewsWarning {
    pub fn code(&self) -> &'static str {
        match self {
            NewsWarning::NewsQueryGenerationFailed { .. } => "news_query_generation_failed",
            NewsWarning::NewsFetchFailed { .. } => "news_fetch_failed",
            NewsWarning::SummarizationFailed { .. } => "summarization_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArticleSummary {
    pub source: String,
    pub title: String,
    pub published_at: DateTime<Utc>,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsContext {
    pub question_id: String,
    pub retrieval_window: (NaiveDate, NaiveDate),
    /// Most recent first, at most [`MAX_SUMMARIES`].
    pub summaries: Vec<ArticleSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<NewsWarning>,
}

impl NewsContext {
    pub fn empty(q: &Question) -> Self {
        NewsContext {
            question_id: q.id.clone(),
            retrieval_window: retrieval_window(q),
            summaries: Vec::new(),
            warnings: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewsSettings {
    /// Model used for query generation and summaries.
    pub assistant_model: String,
    /// Results requested per query.
    pub results_per_query: usize,
    /// Cap on distinct articles kept after dedup.
    pub max_articles: usize,
    pub summary_max_tokens: Option<u32>,
}

impl Default for NewsSettings {
    fn default() -> Self {
        NewsSettings {
            assistant_model: "gpt-4o".into(),
            results_per_query: 20,
            max_articles: 50,
            summary_max_tokens: Some(200),
        }
    }
}

pub fn query_prompt(q: &Question) -> String {
    format!(
        "I want to find recent news that helps forecast the following question.\n\n\
         Question: {}\nBackground: {}\n\n\
         Write between 1 and {MAX_QUERIES} short search-engine queries, one per line, with no numbering or commentary.",
        q.title, q.background
    )
}

/// Splits an assistant reply into at most [`MAX_QUERIES`] distinct queries,
/// dropping list markers and surrounding quotes.
pub fn parse_queries(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in text.lines() {
        let mut s = line.trim();
        s = s.trim_start_matches(|c: char| c.is_ascii_digit() || matches!(c, '-' | '*' | '•' | '.' | ')'));
        let s = s.trim().trim_matches('"').trim();
        if s.is_empty() || !seen.insert(s.to_lowercase()) {
            continue;
        }
        out.push(s.to_string());
        if out.len() == MAX_QUERIES {
            break;
        }
    }
    out
}

/// 1 to 5 queries; falls back to the title when the endpoint fails or
/// returns nothing usable.
pub fn build_queries(
    q: &Question,
    chat: &dyn ChatEndpoint,
    settings: &NewsSettings,
) -> (Vec<String>, Option<NewsWarning>) {
    let req = ChatRequest {
        scope: q.id.clone(),
        tag: "news/queries".into(),
        model: settings.assistant_model.clone(),
        messages: vec![ChatMessage::user(query_prompt(q))],
        temperature: 0.0,
        max_tokens: Some(200),
    };
    match chat.complete(&req) {
        Ok(resp) => {
            let queries = parse_queries(&resp.text);
            if queries.is_empty() {
                (vec![q.title.clone()], None)
            } else {
                (queries, None)
            }
        }
        Err(e) => {
            warn!("{}: news_query_generation_failed: {e}", q.id);
            (
                vec![q.title.clone()],
                Some(NewsWarning::NewsQueryGenerationFailed { error: e.to_string() }),
            )
        }
    }
}

/// Runs every query, keeps in-window articles, dedups on (source, title)
/// keeping the first seen, orders most recent first and caps the count.
pub fn fetch(
    scope: &str,
    queries: &[String],
    window: (NaiveDate, NaiveDate),
    news: &dyn NewsEndpoint,
    settings: &NewsSettings,
) -> (Vec<NewsArticle>, Vec<NewsWarning>) {
    let mut seen = BTreeSet::new();
    let mut articles = Vec::new();
    let mut warnings = Vec::new();
    for query in queries {
        let req = NewsQuery {
            scope: scope.to_string(),
            query: query.clone(),
            from: window.0,
            to: window.1,
            max_results: settings.results_per_query,
        };
        match news.search(&req) {
            Ok(found) => {
                for a in found {
                    if in_window(a.published_at, window) && seen.insert((a.source.clone(), a.title.clone())) {
                        articles.push(a);
                    }
                }
            }
            Err(e) => {
                warn!("{scope}: news_fetch_failed for {query:?}: {e}");
                warnings.push(NewsWarning::NewsFetchFailed {
                    query: query.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    sort_recent_first(&mut articles);
    articles.truncate(settings.max_articles);
    (articles, warnings)
}

fn sort_recent_first(articles: &mut [NewsArticle]) {
    // stable: ties keep retrieval order
    articles.sort_by(|a, b| b.published_at.cmp(&a.published_at));
}

pub fn summary_prompt(a: &NewsArticle) -> String {
    format!(
        "{SUMMARY_INSTRUCTION}\n\nTitle: {}\nSource: {}\nPublished: {}\n\n{}",
        a.title,
        a.source,
        a.published_at.format("%Y-%m-%d"),
        a.body
    )
}

/// Summarizes the 10 most recent articles, one call each. A failed call
/// keeps the raw title as that article's summary.
pub fn summarize(
    q: &Question,
    articles: &[NewsArticle],
    chat: &dyn ChatEndpoint,
    settings: &NewsSettings,
) -> NewsContext {
    let mut ordered = articles.to_vec();
    sort_recent_first(&mut ordered);
    ordered.truncate(MAX_SUMMARIES);

    let mut ctx = NewsContext::empty(q);
    for (i, a) in ordered.iter().enumerate() {
        let req = ChatRequest {
            scope: q.id.clone(),
            tag: format!("news/summary/{i}"),
            model: settings.assistant_model.clone(),
            messages: vec![ChatMessage::user(summary_prompt(a))],
            temperature: 0.0,
            max_tokens: settings.summary_max_tokens,
        };
        let summary = match chat.complete(&req) {
            Ok(r) if !r.text.trim().is_empty() => r.text.trim().to_string(),
            Ok(_) => a.title.clone(),
            Err(e) => {
                warn!("{}: summarization_failed for {:?}: {e}", q.id, a.title);
                ctx.warnings.push(NewsWarning::SummarizationFailed {
                    title: a.title.clone(),
                    error: e.to_string(),
                });
                a.title.clone()
            }
        };
        ctx.summaries.push(ArticleSummary {
            source: a.source.clone(),
            title: a.title.clone(),
            published_at: a.published_at,
            summary,
        });
    }
    ctx
}

/// Queries, search and summaries for one question.
pub fn gather(
    q: &Question,
    chat: &dyn ChatEndpoint,
    news: &dyn NewsEndpoint,
    settings: &NewsSettings,
) -> NewsContext {
    let window = retrieval_window(q);
    let (queries, qwarn) = build_queries(q, chat, settings);
    let (articles, fwarn) = fetch(&q.id, &queries, window, news, settings);
    let mut ctx = summarize(q, &articles, chat, settings);
    let mut warnings: Vec<NewsWarning> = qwarn.into_iter().chain(fwarn).collect();
    warnings.append(&mut ctx.warnings);
    ctx.warnings = warnings;
    ctx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::endpoint::{ChatResponse, EndpointError, RecordingChat, ReplayChat, TranscriptStore};
    use crate::question_store::Outcome;
    use chrono::TimeZone;
    use std::sync::Mutex;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn question(res: &str) -> Question {
        Question {
            id: "q1".into(),
            title: "Will Modi win reelection?".into(),
            background: "General election.".into(),
            resolution_criteria: String::new(),
            close_date: d(res),
            resolution_date: d(res),
            outcome: Outcome::Yes,
        }
    }

    fn art(source: &str, title: &str, day: &str) -> NewsArticle {
        let date = d(day);
        NewsArticle {
            source: source.into(),
            published_at: Utc.from_utc_datetime(&date.and_hms_opt(12, 0, 0).unwrap()),
            title: title.into(),
            body: format!("{title} body"),
        }
    }

    struct Scripted(Mutex<Vec<Result<ChatResponse, EndpointError>>>);
    impl ChatEndpoint for Scripted {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, EndpointError> {
            self.0.lock().unwrap().remove(0)
        }
    }
    fn text(s: &str) -> Result<ChatResponse, EndpointError> {
        Ok(ChatResponse {
            text: s.into(),
            truncated: false,
        })
    }

    struct FixedNews(Vec<(String, Result<Vec<NewsArticle>, ()>)>);
    impl NewsEndpoint for FixedNews {
        fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
            match self.0.iter().find(|(k, _)| *k == q.query) {
                Some((_, Ok(v))) => Ok(v.clone()),
                Some((_, Err(()))) => Err(EndpointError::Http {
                    status: 500,
                    body: String::new(),
                }),
                None => Ok(vec![]),
            }
        }
    }

    #[test]
    fn windows() {
        assert_eq!(retrieval_window(&question("2024-12-01")), (d("2024-11-17"), d("2024-12-01")));
        assert_eq!(retrieval_window(&question("2024-03-14")), (d("2024-02-29"), d("2024-03-14")));
        assert_eq!(retrieval_window(&question("2025-01-01")), (d("2024-12-18"), d("2025-01-01")));
        let w = (d("2024-11-17"), d("2024-12-01"));
        assert!(in_window(art("s", "t", "2024-11-17").published_at, w));
        assert!(in_window(art("s", "t", "2024-11-30").published_at, w));
        assert!(!in_window(art("s", "t", "2024-12-01").published_at, w));
        assert!(!in_window(art("s", "t", "2024-11-16").published_at, w));
    }

    #[test]
    fn queries_replay_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let q = question("2024-06-04");
        let s = NewsSettings::default();
        let rec = RecordingChat {
            inner: Scripted(Mutex::new(vec![text("Modi election polls\nBJP seat projections")])),
            store: TranscriptStore::new(dir.path()),
        };
        let (live, _) = build_queries(&q, &rec, &s);
        let (replayed, w) = build_queries(&q, &ReplayChat(TranscriptStore::new(dir.path())), &s);
        assert_eq!(replayed, vec!["Modi election polls", "BJP seat projections"]);
        assert_eq!(live, replayed);
        assert!(w.is_none());
    }

    #[test]
    fn query_fallbacks() {
        let q = question("2024-06-04");
        let s = NewsSettings::default();
        let (qs, w) = build_queries(&q, &Scripted(Mutex::new(vec![text("  \n")])), &s);
        assert_eq!(qs, vec![q.title.clone()]);
        assert!(w.is_none());
        let (qs, w) = build_queries(&q, &Scripted(Mutex::new(vec![Err(EndpointError::Timeout)])), &s);
        assert_eq!(qs, vec![q.title.clone()]);
        assert_eq!(w.unwrap().code(), "news_query_generation_failed");
    }

    #[test]
    fn query_parsing() {
        let qs = parse_queries("1. \"alpha\"\n- beta\n\n* alpha\n2) gamma\nd\ne\nf\ng");
        assert_eq!(qs, vec!["alpha", "beta", "gamma", "d", "e"]);
    }

    #[test]
    fn fetch_dedups_filters_and_orders() {
        let window = (d("2024-11-17"), d("2024-12-01"));
        let news = FixedNews(vec![
            ("a".into(), Ok(vec![art("x", "Same", "2024-11-20"), art("x", "Late", "2024-12-02")])),
            ("b".into(), Ok(vec![art("x", "Same", "2024-11-20"), art("y", "Newer", "2024-11-28")])),
            ("c".into(), Err(())),
        ]);
        let (arts, warns) = fetch("q1", &["a".into(), "b".into(), "c".into()], window, &news, &NewsSettings::default());
        let titles: Vec<_> = arts.iter().map(|a| a.title.as_str()).collect();
        assert_eq!(titles, vec!["Newer", "Same"]);
        assert_eq!(warns.len(), 1);
        assert_eq!(warns[0].code(), "news_fetch_failed");

        let (none, _) = fetch("q1", &["zzz".into()], window, &news, &NewsSettings::default());
        assert!(none.is_empty());
    }

    #[test]
    fn summarize_caps_at_ten_most_recent() {
        let q = question("2024-12-01");
        let arts: Vec<_> = (0..14).map(|i| art("s", &format!("t{i}"), &format!("2024-11-{:02}", 17 + i))).collect();
        let replies = (0..10).map(|i| text(&format!("sum {i}"))).collect();
        let ctx = summarize(&q, &arts, &Scripted(Mutex::new(replies)), &NewsSettings::default());
        assert_eq!(ctx.summaries.len(), 10);
        assert_eq!(ctx.summaries[0].title, "t13");
        assert_eq!(ctx.summaries[9].title, "t4");
        assert_eq!(ctx.summaries[0].summary, "sum 0");
        assert!(ctx.summaries.iter().all(|s| s.published_at.date_naive() < q.resolution_date));

        let empty = summarize(&q, &[], &Scripted(Mutex::new(vec![])), &NewsSettings::default());
        assert!(empty.summaries.is_empty());
    }

    #[test]
    fn summarize_falls_back_to_titles() {
        let q = question("2024-12-01");
        let arts = vec![art("s", "Headline", "2024-11-20")];
        let ctx = summarize(
            &q,
            &arts,
            &Scripted(Mutex::new(vec![Err(EndpointError::Timeout)])),
            &NewsSettings::default(),
        );
        assert_eq!(ctx.summaries[0].summary, "Headline");
        assert_eq!(ctx.warnings[0].code(), "summarization_failed");
    }

    #[test]
    fn summarize_is_idempotent_under_replay() {
        let dir = tempfile::tempdir().unwrap();
        let q = question("2024-12-01");
        let arts: Vec<_> = (0..3).map(|i| art("s", &format!("t{i}"), &format!("2024-11-2{i}"))).collect();
        let rec = RecordingChat {
            inner: Scripted(Mutex::new((0..3).map(|i| text(&format!("s{i}"))).collect())),
            store: TranscriptStore::new(dir.path()),
        };
        let live = summarize(&q, &arts, &rec, &NewsSettings::default());
        let replay = ReplayChat(TranscriptStore::new(dir.path()));
        let a = summarize(&q, &arts, &replay, &NewsSettings::default());
        let b = summarize(&q, &arts, &replay, &NewsSettings::default());
        assert_eq!(a, live);
        assert_eq!(a, b);
        assert_eq!(a.summaries.iter().map(|s| s.summary.as_str()).collect::<Vec<_>>(), ["s0", "s1", "s2"]);
    }
}
