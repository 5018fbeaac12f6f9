//! A simulated forecasting world for offline end-to-end runs.
//!
//! Each question has a latent probability `q` and an outcome drawn from it.
//! News articles carry cue words whose polarity is positive with chance `q`.
//! The simulated assistant writes search queries and summaries; the
//! simulated forecaster reads cue words off its prompt and answers with a
//! noisy probability, occasionally stubbornly repeating itself or forgetting
//! the asterisk format.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::endpoint::{ChatEndpoint, ChatRequest, ChatResponse, EndpointError, NewsArticle, NewsEndpoint, NewsQuery};
use crate::question_store::{Outcome, Question, RawQuestion};

pub const POSITIVE_CUES: [&str; 8] = [
    "confirmed", "approved", "ahead", "surged", "agreed", "secured", "accelerated", "endorsed",
];
pub const NEGATIVE_CUES: [&str; 8] = [
    "stalled", "delayed", "rejected", "collapsed", "faltered", "blocked", "postponed", "doubtful",
];

const ENTITIES: [&str; 12] = [
    "Northland",
    "the Coastal Alliance",
    "Meridian Corp",
    "the Varos central bank",
    "Team Halcyon",
    "Senator Abara",
    "the Orin Transit Authority",
    "Kestrel Motors",
    "the city of Bellmar",
    "the Tavish Party",
    "Lumen Health",
    "the Sorrel Valley council",
];

const ACTIONS: [&str; 10] = [
    "sign the regional trade agreement",
    "announce an interest rate cut",
    "complete its proposed merger",
    "win the championship final",
    "pass the annual budget bill",
    "launch its new observation satellite",
    "hold the promised referendum",
    "open the new rail line",
    "receive approval for its flagship drug",
    "reach a settlement in the labour dispute",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub train_questions: usize,
    pub test_questions: usize,
    pub gap_questions: usize,
    /// Share of questions on which the forecaster never changes its answer.
    pub stubborn_rate: f64,
    /// Per-generation chance of an answer without a usable forecast.
    pub unparsable_rate: f64,
    /// Weight of the cue balance on the forecaster's log-odds.
    pub cue_weight: f64,
    /// Standard deviation of the forecaster's log-odds noise.
    pub noise_sd: f64,
    /// Standard deviation of the latent log-odds of each question.
    pub latent_sd: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 2024,
            train_questions: 140,
            test_questions: 50,
            gap_questions: 10,
            stubborn_rate: 0.05,
            unparsable_rate: 0.03,
            cue_weight: 3.0,
            noise_sd: 1.0,
            latent_sd: 2.0,
        }
    }
}

fn derived_seed(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn rng_for(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    let seed = seed.to_string();
    let mut all = vec![seed.as_str()];
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(derived_seed(&all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentQuestion {
    pub question: Question,
    pub q: f64,
    pub articles: Vec<NewsArticle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: SyntheticSpec,
    pub questions: BTreeMap<String, LatentQuestion>,
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).expect("valid calendar date")
}

fn random_day(rng: &mut ChaCha8Rng, from: NaiveDate, to: NaiveDate) -> NaiveDate {
    let span = (to - from).num_days();
    from + chrono::Duration::days(rng.random_range(0..=span))
}

impl World {
    pub fn new(spec: SyntheticSpec) -> World {
        let mut rng = rng_for(spec.seed, &["world"]);
        let windows = [
            (spec.train_questions, day(2024, 7, 1), day(2024, 12, 15)),
            (spec.test_questions, day(2024, 12, 25), day(2025, 1, 23)),
            (spec.gap_questions, day(2024, 12, 16), day(2024, 12, 24)),
        ];
        let mut questions = BTreeMap::new();
        let mut n = 0;
        for (count, from, to) in windows {
            for _ in 0..count {
                let id = format!("syn-{n:04}");
                n += 1;
                let lq = Self::question(&mut rng, id, from, to, spec.latent_sd);
                questions.insert(lq.question.id.clone(), lq);
            }
        }
        World { spec, questions }
    }

    fn question(rng: &mut ChaCha8Rng, id: String, from: NaiveDate, to: NaiveDate, latent_sd: f64) -> LatentQuestion {
        let entity = *ENTITIES.choose(rng).expect("non-empty");
        let action = *ACTIONS.choose(rng).expect("non-empty");
        let resolution_date = random_day(rng, from, to);
        let close_date = if rng.random_bool(0.1) {
            // resolved ahead of the scheduled close
            resolution_date + Days::new(3)
        } else {
            resolution_date - Days::new(rng.random_range(0..=5))
        };
        let z = Normal::new(0.0, latent_sd).expect("finite sd").sample(rng);
        let q = (1.0 / (1.0 + (-z).exp())).clamp(0.01, 0.99);
        let outcome = if rng.random_bool(q) { Outcome::Yes } else { Outcome::No };

        let n_articles = rng.random_range(3..=12);
        let mut articles = Vec::with_capacity(n_articles + 2);
        for k in 0..n_articles {
            let published = random_day(rng, resolution_date - Days::new(14), resolution_date - Days::new(1));
            articles.push(Self::article(rng, entity, action, q, published, k));
        }
        // Outside the window; a careless search backend may still return these.
        articles.push(Self::article(rng, entity, action, q, resolution_date + Days::new(1), n_articles));
        articles.push(Self::article(rng, entity, action, q, resolution_date - Days::new(20), n_articles + 1));

        let title = format!("Will {entity} {action} by {close_date}?");
        LatentQuestion {
            question: Question {
                id,
                title,
                background: format!(
                    "Observers have followed whether {entity} will {action}. Coverage has been mixed."
                ),
                resolution_criteria: format!(
                    "Resolves YES if credible reporting confirms that {entity} did {action} on or before {close_date}; otherwise NO."
                ),
                close_date,
                resolution_date,
                outcome,
            },
            q,
            articles,
        }
    }

    fn article(rng: &mut ChaCha8Rng, entity: &str, action: &str, q: f64, published: NaiveDate, k: usize) -> NewsArticle {
        let cue = |rng: &mut ChaCha8Rng| {
            let list = if rng.random_bool(q) { &POSITIVE_CUES } else { &NEGATIVE_CUES };
            *list.choose(rng).expect("non-empty")
        };
        let (c1, c2) = (cue(rng), cue(rng));
        let sources = ["wire.example", "daily-ledger.example", "the-courier.example", "metro-post.example"];
        let source = sources[k % sources.len()];
        let pct: u32 = rng.random_range(2..60);
        let hour: u32 = rng.random_range(6..22);
        NewsArticle {
            source: source.to_string(),
            published_at: Utc.from_utc_datetime(&published.and_hms_opt(hour, 0, 0).expect("valid time")),
            title: format!("Efforts by {entity} {c1} (report {k})"),
            body: format!(
                "Reports on {published} said the effort to {action} had {c1}. \
                 People close to {entity} described progress as {c2}. \
                 One estimate put the relevant figure at {pct} percent."
            ),
        }
    }

    pub fn raw_questions(&self) -> Vec<RawQuestion> {
        self.questions
            .values()
            .map(|lq| {
                let q = &lq.question;
                RawQuestion {
                    id: Some(q.id.clone()),
                    title: Some(q.title.clone()),
                    background: Some(q.background.clone()),
                    resolution_criteria: Some(q.resolution_criteria.clone()),
                    close_date: Some(q.close_date.to_string()),
                    resolution_date: Some(q.resolution_date.to_string()),
                    outcome: Some(q.outcome.as_u8().to_string()),
                }
            })
            .collect()
    }

    /// Valid records followed by a few that ingestion must reject.
    pub fn raw_questions_with_defects(&self) -> Vec<RawQuestion> {
        let mut out = self.raw_questions();
        if let Some(first) = out.first().cloned() {
            out.push(RawQuestion {
                title: Some("Duplicate of an existing id".into()),
                ..first.clone()
            });
            out.push(RawQuestion {
                id: Some("syn-ambiguous".into()),
                outcome: Some("0.5".into()),
                ..first.clone()
            });
            out.push(RawQuestion {
                id: Some("syn-baddate".into()),
                resolution_date: Some("2024-13-40".into()),
                ..first
            });
        }
        out
    }
}

/// Search backend over the world's articles. Each query sees a
/// deterministic subset, so several queries overlap and exercise dedup.
/// Date bounds are ignored on purpose.
pub struct SimNews<'a>(pub &'a World);

impl NewsEndpoint for SimNews<'_> {
    fn search(&self, q: &NewsQuery) -> Result<Vec<NewsArticle>, EndpointError> {
        let Some(lq) = self.0.questions.get(&q.scope) else {
            return Ok(Vec::new());
        };
        let mut rng = rng_for(self.0.spec.seed, &["news", &q.scope, &q.query]);
        Ok(lq
            .articles
            .iter()
            .filter(|_| rng.random_bool(0.75))
            .take(q.max_results)
            .cloned()
            .collect())
    }
}

/// Plays both the assistant (queries, summaries) and the forecaster, by
/// request tag.
pub struct SimChat {
    pub spec: SyntheticSpec,
}

fn line_value<'t>(prompt: &'t str, key: &str) -> &'t str {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key))
        .map(str::trim)
        .unwrap_or_default()
}

/// Positive minus negative cue words in the news part of a forecasting
/// prompt, and their total.
pub fn cue_balance(prompt: &str) -> (i64, i64) {
    let news = prompt
        .split_once("News Summaries:")
        .map(|(_, rest)| rest.split_once("Instructions:").map_or(rest, |(n, _)| n))
        .unwrap_or_default();
    let (mut pos, mut neg) = (0i64, 0i64);
    for token in news.split(|c: char| !c.is_alphanumeric()) {
        let t = token.to_ascii_lowercase();
        if POSITIVE_CUES.contains(&t.as_str()) {
            pos += 1;
        } else if NEGATIVE_CUES.contains(&t.as_str()) {
            neg += 1;
        }
    }
    (pos - neg, pos + neg)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn to_percent_grid(p: f64) -> f64 {
    ((p * 100.0).round() / 100.0).clamp(0.01, 0.99)
}

impl SimChat {
    fn queries(&self, req: &ChatRequest) -> String {
        let prompt = &req.messages[0].content;
        let title = line_value(prompt, "Question:");
        let core = title
            .trim_start_matches("Will ")
            .split(" by ")
            .next()
            .unwrap_or(title)
            .to_string();
        format!("{core}\n{core} latest news\n\"{core}\" analysis")
    }

    fn summary(&self, req: &ChatRequest) -> String {
        let prompt = &req.messages[0].content;
        let body = prompt.rsplit("\n\n").next().unwrap_or_default();
        body.split_inclusive(". ").take(2).collect::<String>().trim().to_string()
    }

    fn forecast(&self, req: &ChatRequest) -> String {
        let prompt = &req.messages[0].content;
        let (balance, total) = cue_balance(prompt);
        let score = balance as f64 / (total as f64 + 2.0);
        let center = self.spec.cue_weight * score;
        let title = line_value(prompt, "Question:");

        let stubborn = rng_for(self.spec.seed, &["stubborn", &req.scope]).random_bool(self.spec.stubborn_rate);
        let mut rng = rng_for(self.spec.seed, &["forecast", &req.scope, &req.tag]);
        let noise = Normal::new(0.0, self.spec.noise_sd).expect("positive sd");
        let p = if stubborn {
            to_percent_grid(sigmoid(center))
        } else {
            to_percent_grid(sigmoid(center + noise.sample(&mut rng)))
        };

        let unparsable = rng.random_bool(self.spec.unparsable_rate);
        let initial = to_percent_grid(sigmoid(center + noise.sample(&mut rng)));
        let with_initial = rng.random_bool(0.3);
        let bold = rng.random_bool(0.1);

        let mut s = format!(
            "1. The question asks: {title}\n\
             2. Reasons for no: the coverage mentions setbacks. Strength: moderate.\n\
             3. Reasons for yes: {} of {total} cue words in the news point to progress. Strength: moderate.\n\
             4. Weighing these, the balance of evidence is {balance:+}.\n",
            (total + balance) / 2
        );
        if with_initial {
            s.push_str(&format!("5. Initial probability: *{initial:.2}*\n"));
        } else {
            s.push_str(&format!("5. Initial probability: about {initial:.2}\n"));
        }
        s.push_str("6. The estimate seems reasonably calibrated given the base rate.\n");
        if unparsable {
            s.push_str(&format!("7. Final answer: roughly {:.0}%", p * 100.0));
        } else if bold {
            s.push_str(&format!("7. Final answer: **{p:.2}**"));
        } else {
            s.push_str(&format!("7. Final answer: *{p:.2}*"));
        }
        s
    }
}

impl ChatEndpoint for SimChat {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        let text = if req.tag == "news/queries" {
            self.queries(req)
        } else if req.tag.starts_with("news/summary/") {
            self.summary(req)
        } else {
            self.forecast(req)
        };
        Ok(ChatResponse { text, truncated: false })
    }
}
