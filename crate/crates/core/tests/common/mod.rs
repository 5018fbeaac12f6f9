#![allow(dead_code)]

use std::path::{Path, PathBuf};

use foresight::endpoint::{ReplayChat, ReplayNews, TranscriptStore};
use foresight::pipeline::{self, PipelineConfig};
use tempfile::TempDir;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/synthetic")
}

pub struct Run {
    pub cfg: PipelineConfig,
    pub chat: ReplayChat,
    pub news: ReplayNews,
    _work: TempDir,
}

/// The bundled fixture config with a fresh work directory; nothing run yet.
pub fn fresh() -> Run {
    let mut cfg = PipelineConfig::load(&fixture_dir().join("config.toml")).expect("fixture config loads");
    let work = tempfile::tempdir().unwrap();
    cfg.work_dir = work.path().to_path_buf();
    let chat = ReplayChat(TranscriptStore::new(cfg.chat.transcripts.clone().unwrap()));
    let news = ReplayNews(TranscriptStore::new(cfg.news.transcripts.clone().unwrap()));
    Run {
        cfg,
        chat,
        news,
        _work: work,
    }
}

/// Fixture run through ingest, news and self-play, all from transcripts.
pub fn through_selfplay() -> Run {
    let run = fresh();
    pipeline::ingest(&run.cfg).unwrap();
    pipeline::fetch_news(&run.cfg, &run.chat, &run.news).unwrap();
    pipeline::selfplay(&run.cfg, &run.chat).unwrap();
    run
}
