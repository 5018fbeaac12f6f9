use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bh_adjust, brier, t_test_with, BrierSummary, ForecastRecord, StatsError, TTestKind};
use crate::records::write_atomic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub model_a: String,
    pub model_b: String,
    pub t_statistic: f64,
    pub df: f64,
    pub p_value: f64,
    pub p_adjusted: f64,
    /// Both score vectors were constant and equal; reported as t = 0, p = 1.
    #[serde(default)]
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub question_id: String,
    pub probability: f64,
    pub outcome: u8,
    pub brier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_tag: String,
    #[serde(flatten)]
    pub summary: BrierSummary,
    #[serde(skip)]
    pub per_question: Vec<QuestionScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub test_kind: TTestKind,
    /// In tag order.
    pub models: Vec<ModelSummary>,
    /// Every unordered pair `(a, b)` with `a < b` in tag order.
    pub pairwise: Vec<PairwiseTest>,
}

/// Scores every model tag and runs all pairwise tests on the per-question
/// Brier scores, BH-adjusting across the whole family.
pub fn report(
    models: &BTreeMap<String, Vec<ForecastRecord>>,
    test_kind: TTestKind,
) -> Result<EvalReport, StatsError> {
    if models.is_empty() {
        return Err(StatsError::NoModels);
    }

    let id_sets: BTreeMap<&str, BTreeSet<&str>> = models
        .iter()
        .map(|(tag, recs)| (tag.as_str(), recs.iter().map(|r| r.question_id.as_str()).collect()))
        .collect();
    let tags: Vec<&str> = id_sets.keys().copied().collect();
    for pair in tags.windows(2) {
        if id_sets[pair[0]] != id_sets[pair[1]] {
            return Err(StatsError::UnalignedSamples {
                a: pair[0].to_string(),
                b: pair[1].to_string(),
            });
        }
    }

    let mut summaries = Vec::with_capacity(models.len());
    for (tag, recs) in models {
        let mut sorted: Vec<&ForecastRecord> = recs.iter().collect();
        sorted.sort_by(|a, b| a.question_id.cmp(&b.question_id));
        let owned: Vec<ForecastRecord> = sorted.iter().map(|r| (*r).clone()).collect();
        let summary = brier(&owned)?;
        let per_question = owned
            .iter()
            .zip(&summary.scores)
            .map(|(r, &s)| QuestionScore {
                question_id: r.question_id.clone(),
                probability: r.probability,
                outcome: r.outcome.as_u8(),
                brier: s,
            })
            .collect();
        summaries.push(ModelSummary {
            model_tag: tag.clone(),
            summary,
            per_question,
        });
    }

    let mut pairwise = Vec::new();
    for i in 0..summaries.len() {
        for j in i + 1..summaries.len() {
            let (a, b) = (&summaries[i], &summaries[j]);
            let (t_statistic, df, p_value, degenerate) =
                match t_test_with(&a.summary.scores, &b.summary.scores, test_kind) {
                    Ok(t) => (t.t_statistic, t.df, t.p_value, false),
                    Err(StatsError::DegenerateTest) => (0.0, f64::NAN, 1.0, true),
                    Err(e) => return Err(e),
                };
            pairwise.push(PairwiseTest {
                model_a: a.model_tag.clone(),
                model_b: b.model_tag.clone(),
                t_statistic,
                df,
                p_value,
                p_adjusted: f64::NAN,
                degenerate,
            });
        }
    }
    let raw: Vec<f64> = pairwise.iter().map(|t| t.p_value).collect();
    for (t, adj) in pairwise.iter_mut().zip(bh_adjust(&raw)?) {
        t.p_adjusted = adj;
    }

    Ok(EvalReport {
        test_kind,
        models: summaries,
        pairwise,
    })
}

#[derive(Serialize)]
#[serde(tag = "section", rename_all = "snake_case")]
enum Line<'a> {
    Config { test_kind: TTestKind, p_adjustment: &'a str },
    Summary(&'a ModelSummary),
    Pairwise(&'a PairwiseTest),
}

impl EvalReport {
    pub fn to_jsonl(&self) -> serde_json::Result<Vec<u8>> {
        let mut lines = vec![Line::Config {
            test_kind: self.test_kind,
            p_adjustment: "benjamini_hochberg",
        }];
        lines.extend(self.models.iter().map(Line::Summary));
        lines.extend(self.pairwise.iter().map(Line::Pairwise));
        crate::records::to_jsonl(&lines)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Brier scores (lower is better; 0.25 = always 50%)");
        let _ = writeln!(
            s,
            "{:<20} {:>6} {:>7} {:>7} {:>7} {:>17} {:>8} {:>8}",
            "model", "n", "mean", "sd", "sem", "95% CI", ">0.5", "<0.05"
        );
        for m in &self.models {
            let b = &m.summary;
            let _ = writeln!(
                s,
                "{:<20} {:>6} {:>7.4} {:>7.4} {:>7.4}  [{:.4}, {:.4}] {:>7.2}% {:>7.2}%",
                m.model_tag,
                b.n,
                b.mean,
                b.sd,
                b.sem,
                b.ci95.0,
                b.ci95.1,
                100.0 * b.frac_above_half,
                100.0 * b.frac_below_0_05
            );
        }
        let kind = match self.test_kind {
            TTestKind::Welch => "Welch",
            TTestKind::Pooled => "pooled-variance",
        };
        let _ = writeln!(s, "\nPairwise {kind} t-tests (BH-adjusted)");
        for t in &self.pairwise {
            let _ = writeln!(
                s,
                "{:<20} vs {:<20} t = {:>8.4}  p = {:.4}  adj. p = {:.4}{}",
                t.model_a,
                t.model_b,
                t.t_statistic,
                t.p_value,
                t.p_adjusted,
                if t.degenerate { "  (degenerate)" } else { "" }
            );
        }
        s
    }

    /// Per-question scores for one tag, for external plotting.
    pub fn scores_csv(model: &ModelSummary) -> io::Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for q in &model.per_question {
            w.serialize(q).map_err(io::Error::other)?;
        }
        w.into_inner().map_err(|e| io::Error::other(e.to_string()))
    }
}

/// Writes `report.jsonl`, `report.txt` and `scores/<tag>.csv` under `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> io::Result<()> {
    let jsonl = report.to_jsonl().map_err(io::Error::other)?;
    write_atomic(&dir.join("report.jsonl"), &jsonl)?;
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    for m in &report.models {
        let name = format!("{}.csv", sanitize(&m.model_tag));
        write_atomic(&dir.join("scores").join(name), &EvalReport::scores_csv(m)?)?;
    }
    Ok(())
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
