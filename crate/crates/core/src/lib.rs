pub mod dpo;
pub mod endpoint;
pub mod eval_stats;
pub mod forecast_parser;
pub mod news_client;
pub mod pipeline;
pub mod question_store;
pub mod records;
pub mod reranker;
pub mod selfplay;
pub mod synthetic;
