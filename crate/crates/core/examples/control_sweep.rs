//! Train the toy policy on one synthetic world with true labels and with
//! randomized labels over several seeds, and print held-out Brier scores.
//!
//! cargo run --release --example control_sweep -- [world_seed] [control_seeds]

use foresight::dpo::DpoConfig;
use foresight::endpoint::{ReplayChat, ReplayNews, TranscriptStore};
use foresight::eval_stats::{brier, one_sample_t_test};
use foresight::pipeline::{self, PipelineConfig};
use foresight::reranker::LabelMode;
use foresight::synthetic::SyntheticSpec;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let world: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(SyntheticSpec::default().seed);
    let seeds: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);

    let dir = tempfile::tempdir()?;
    let spec = SyntheticSpec {
        seed: world,
        ..SyntheticSpec::default()
    };
    pipeline::synth(&spec, dir.path())?;
    let cfg = PipelineConfig::load(&dir.path().join("config.toml"))?;
    let chat = ReplayChat(TranscriptStore::new(cfg.chat.transcripts.clone().unwrap()));
    let news = ReplayNews(TranscriptStore::new(cfg.news.transcripts.clone().unwrap()));
    pipeline::ingest(&cfg)?;
    pipeline::fetch_news(&cfg, &chat, &news)?;
    pipeline::selfplay(&cfg, &chat)?;

    let run = |mode: LabelMode, seed: u64| -> Result<(f64, f64), Box<dyn std::error::Error>> {
        pipeline::rank(&cfg, mode, seed)?;
        pipeline::emit_dpo(&cfg, mode)?;
        let dpo = DpoConfig { seed, ..cfg.dpo.clone() };
        let out = pipeline::train_toy(&cfg, mode, &dpo)?;
        let init = brier(&pipeline::forecast_toy(&cfg, &out.reference, "init")?)?.mean;
        let trained = brier(&pipeline::forecast_toy(&cfg, &out.policy, "trained")?)?.mean;
        Ok((init, trained))
    };

    let (init, trained) = run(LabelMode::TrueOutcome, cfg.seed)?;
    println!("world {world}: init {init:.4}, true labels {trained:.4} ({:+.2}%)", 100.0 * (init - trained) / init);
    let mut rel = Vec::new();
    for seed in 0..seeds {
        let (i, t) = run(LabelMode::Randomized, seed)?;
        rel.push((i - t) / i);
    }
    let test = one_sample_t_test(&rel, 0.0)?;
    println!(
        "control over {seeds} seeds: mean {:+.2}%, t = {:.3}, p = {:.4}",
        100.0 * rel.iter().sum::<f64>() / rel.len() as f64,
        test.t_statistic,
        test.p_value
    );
    Ok(())
}
