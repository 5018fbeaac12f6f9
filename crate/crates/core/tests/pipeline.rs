mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use foresight::eval_stats::TTestKind;
use foresight::news_client::NewsContext;
use foresight::pipeline::{self, PipelineError, StatusRecord};
use foresight::question_store::IngestReport;
use foresight::records::{self, file_sha256, Manifest};
use foresight::reranker::{self, LabelMode, PreferencePair};
use foresight::selfplay::{same_forecast, ReasoningTrace};

fn hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, file_sha256(&p).unwrap());
            }
        }
    }
    out
}

fn full(run: &common::Run) {
    for mode in [LabelMode::TrueOutcome, LabelMode::Randomized] {
        pipeline::rank(&run.cfg, mode, 3).unwrap();
        pipeline::emit_dpo(&run.cfg, mode).unwrap();
        let out = pipeline::train_toy(&run.cfg, mode, &run.cfg.dpo).unwrap();
        pipeline::forecast_toy(&run.cfg, &out.policy, mode.as_str()).unwrap();
    }
    pipeline::forecast_chat(&run.cfg, &run.chat, "base").unwrap();
}

#[test]
fn ingest_rejects_the_defective_records() {
    let run = common::fresh();
    let report = pipeline::ingest(&run.cfg).unwrap();
    assert_eq!(report.accepted, 200);
    let codes: Vec<&str> = report.rejected.iter().map(|r| r.reason.code()).collect();
    assert_eq!(codes.len(), 3, "{codes:?}");
    let saved: IngestReport = serde_json::from_slice(&fs::read(run.cfg.layout().ingest_report()).unwrap()).unwrap();
    assert_eq!(saved, report);
    let m = Manifest::read(&run.cfg.layout().store()).unwrap();
    assert_eq!(m.count, 200);
}

#[test]
fn counting_and_leakage_invariants() {
    let run = common::through_selfplay();
    let layout = run.cfg.layout();
    let store = pipeline::load_store(&run.cfg).unwrap();

    let traces: Vec<ReasoningTrace> = records::read_jsonl(&layout.traces()).unwrap();
    let status: Vec<StatusRecord> = records::read_jsonl(&layout.selfplay_status()).unwrap();
    let kept = status
        .iter()
        .filter(|s| s.status == pipeline::PairStatus::Kept)
        .count();
    assert_eq!(traces.len(), 2 * kept);
    assert_eq!(status.len(), 140);
    for t in &traces {
        let q = store.get(&t.question_id).unwrap();
        assert!(t.today_date <= q.close_date, "{}", t.question_id);
    }
    for pair in traces.chunks(2) {
        assert_eq!(pair[0].question_id, pair[1].question_id);
        assert!(!same_forecast(pair[0].probability, pair[1].probability));
    }

    let contexts: Vec<NewsContext> = records::read_jsonl(&layout.news()).unwrap();
    assert_eq!(contexts.len(), 190);
    for c in &contexts {
        let q = store.get(&c.question_id).unwrap();
        assert!(c.summaries.len() <= 10);
        for s in &c.summaries {
            let d = s.published_at.date_naive();
            assert!(d >= c.retrieval_window.0 && d < q.resolution_date, "{} {d}", c.question_id);
        }
    }

    let (pairs, m) = pipeline::rank(&run.cfg, LabelMode::TrueOutcome, 0).unwrap();
    assert_eq!(pairs.len(), kept);
    assert_eq!(m.count, kept);
    for p in &pairs {
        assert!(p.r_chosen < p.r_rejected);
        assert!(!same_forecast(p.chosen.probability, p.rejected.probability));
    }
}

#[test]
fn reruns_are_byte_identical() {
    let a = common::through_selfplay();
    full(&a);
    let b = common::through_selfplay();
    full(&b);
    let (ha, hb) = (hashes(&a.cfg.work_dir), hashes(&b.cfg.work_dir));
    assert!(ha.len() > 15, "{ha:?}");
    assert_eq!(ha, hb);

    // Same work directory again: resumable stages find nothing to do.
    let before = hashes(&a.cfg.work_dir);
    let news = pipeline::fetch_news(&a.cfg, &a.chat, &a.news).unwrap();
    assert_eq!((news.fetched, news.skipped_existing), (0, 190));
    let sp = pipeline::selfplay(&a.cfg, &a.chat).unwrap();
    assert_eq!((sp.kept, sp.dropped, sp.skipped_existing), (0, 0, 140));
    full(&a);
    assert_eq!(hashes(&a.cfg.work_dir), before);
}

#[test]
fn interrupted_selfplay_resumes_to_the_same_result() {
    let whole = common::through_selfplay();
    let part = common::fresh();
    pipeline::ingest(&part.cfg).unwrap();
    pipeline::fetch_news(&part.cfg, &part.chat, &part.news).unwrap();
    pipeline::selfplay(&part.cfg, &part.chat).unwrap();

    // Cut both files back to the first 40 finished questions.
    let layout = part.cfg.layout();
    let status: Vec<StatusRecord> = records::read_jsonl(&layout.selfplay_status()).unwrap();
    let done: Vec<&StatusRecord> = status.iter().take(40).collect();
    let ids: Vec<&str> = done.iter().map(|s| s.question_id.as_str()).collect();
    let traces: Vec<ReasoningTrace> = records::read_jsonl(&layout.traces()).unwrap();
    let kept: Vec<&ReasoningTrace> = traces.iter().filter(|t| ids.contains(&t.question_id.as_str())).collect();
    records::write_jsonl(&layout.selfplay_status(), &done).unwrap();
    records::write_jsonl(&layout.traces(), &kept).unwrap();

    let s = pipeline::selfplay(&part.cfg, &part.chat).unwrap();
    assert_eq!(s.skipped_existing, 40);
    for path in [layout.traces(), layout.selfplay_status()] {
        let other = whole.cfg.layout().root.join(path.strip_prefix(&layout.root).unwrap());
        assert_eq!(fs::read(&path).unwrap(), fs::read(other).unwrap(), "{}", path.display());
    }
}

#[test]
fn randomized_ranking_is_seeded_and_keeps_completions() {
    let run = common::through_selfplay();
    let (a, ma) = pipeline::rank(&run.cfg, LabelMode::Randomized, 7).unwrap();
    let (_, mb) = pipeline::rank(&run.cfg, LabelMode::Randomized, 7).unwrap();
    assert_eq!(ma.sha256, mb.sha256);
    let (_, mc) = pipeline::rank(&run.cfg, LabelMode::Randomized, 8).unwrap();
    assert_ne!(ma.sha256, mc.sha256);

    let (t, _) = pipeline::rank(&run.cfg, LabelMode::TrueOutcome, 7).unwrap();
    let texts = |ps: &[PreferencePair]| {
        let mut v: Vec<String> = ps
            .iter()
            .flat_map(|p| [p.chosen.raw_text.clone(), p.rejected.raw_text.clone()])
            .collect();
        v.sort();
        v
    };
    assert_eq!(texts(&a), texts(&t));
    let agree = a
        .iter()
        .zip(&t)
        .filter(|(x, y)| x.chosen.raw_text == y.chosen.raw_text)
        .count();
    assert!(agree > 0 && agree < a.len());
}

#[test]
fn emitted_dataset_matches_its_manifest() {
    let run = common::through_selfplay();
    pipeline::rank(&run.cfg, LabelMode::TrueOutcome, 0).unwrap();
    let m = pipeline::emit_dpo(&run.cfg, LabelMode::TrueOutcome).unwrap();
    let path = run.cfg.layout().dataset(LabelMode::TrueOutcome);
    let (examples, read) = reranker::read_dataset(&path).unwrap();
    assert_eq!(read, m);
    assert_eq!(examples.len(), m.count);

    // Drop the last line: the manifest no longer matches.
    let text = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    fs::write(&path, lines[..lines.len() - 1].join("\n") + "\n").unwrap();
    let err = reranker::read_dataset(&path).unwrap_err();
    assert_eq!(err.code(), "manifest_mismatch");
}

#[test]
fn evaluate_compares_every_pair_of_tags() {
    let run = common::through_selfplay();
    full(&run);
    let tags = pipeline::forecast_tags(&run.cfg).unwrap();
    assert_eq!(tags, ["base", "randomized", "true_outcome"]);
    let report = pipeline::evaluate(&run.cfg, &tags, TTestKind::Welch).unwrap();
    assert_eq!(report.models.len(), 3);
    assert_eq!(report.pairwise.len(), 3);
    assert!(run.cfg.layout().eval_dir().read_dir().unwrap().count() > 0);
}

#[test]
fn stages_need_their_inputs() {
    let run = common::fresh();
    let err = pipeline::rank(&run.cfg, LabelMode::TrueOutcome, 0).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { .. }), "{err}");
    assert_eq!(err.exit_code(), 1);
    pipeline::ingest(&run.cfg).unwrap();
    let err = pipeline::selfplay(&run.cfg, &run.chat).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifact { needs: "fetch-news", .. }), "{err}");
}

#[test]
fn unrecorded_requests_fail_without_recording_status() {
    let mut run = common::fresh();
    pipeline::ingest(&run.cfg).unwrap();
    pipeline::fetch_news(&run.cfg, &run.chat, &run.news).unwrap();
    run.cfg.selfplay.model = "some-other-model".into();
    let s = pipeline::selfplay(&run.cfg, &run.chat).unwrap();
    assert_eq!((s.kept, s.dropped, s.failed), (0, 0, 140));
    assert!(!run.cfg.layout().selfplay_status().exists());
}
