//! Desk-scale preference trainer for [`ToyPolicy`].
//!
//! The reference policy is a frozen copy of the initialization, which puts
//! the empirical distribution of training forecasts on the bias logits.
//! Updates are plain SGD (or AdamW) with a linearly decaying learning rate,
//! averaged over `batch_size * grad_accumulation` pairs per step. Everything
//! runs on one thread in a fixed order, so a seed fully determines the
//! result.

use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dpo_grad, dpo_loss, PolicyLogProbs};
use super::policy::{bin_of, FeatureSpec, ToyPolicy, NUM_BINS};
use super::DpoError;
use crate::forecast_parser;
use crate::records::{to_jsonl, write_atomic};
use crate::reranker::DpoExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    /// Share of usable pairs held out for validation.
    pub validation_fraction: f64,
    /// Relative epoch-over-epoch improvement below which the curve counts
    /// as flat.
    pub plateau_tolerance: f64,
    /// Pseudo-count added to every bin of the initial forecast histogram.
    pub prior_smoothing: f64,
    pub features: FeatureSpec,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig {
            beta: 0.1,
            learning_rate: 5e-5,
            epochs: 5,
            batch_size: 2,
            grad_accumulation: 4,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            weight_decay: 0.0,
            validation_fraction: 0.1,
            plateau_tolerance: 0.005,
            prior_smoothing: 1.0,
            features: FeatureSpec::default(),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        let bad = |m: String| Err(DpoError::InvalidConfig(m));
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be positive, got {}", self.beta));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return bad("batch_size and grad_accumulation must be positive".into());
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad(format!("validation_fraction must be in [0, 1), got {}", self.validation_fraction));
        }
        if self.features.buckets == 0 {
            return bad("features.buckets must be positive".into());
        }
        if !(self.prior_smoothing > 0.0) {
            return bad("prior_smoothing must be positive".into());
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accumulation
    }
}

/// One usable pair: prompt features and the forecast bins of both
/// completions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub features: Vec<f64>,
    pub chosen_bin: usize,
    pub rejected_bin: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub unparsable: usize,
    /// Both completions round to the same forecast bin.
    pub same_bin: usize,
}

/// Maps examples to bins; unusable examples are counted, not fatal.
pub fn prepare(examples: &[DpoExample], features: &FeatureSpec) -> (Vec<TrainingPair>, SkipCounts) {
    let mut pairs = Vec::with_capacity(examples.len());
    let mut skipped = SkipCounts::default();
    for ex in examples {
        let (Ok(c), Ok(r)) = (forecast_parser::parse(&ex.chosen), forecast_parser::parse(&ex.rejected)) else {
            skipped.unparsable += 1;
            continue;
        };
        let (chosen_bin, rejected_bin) = (bin_of(c.probability), bin_of(r.probability));
        if chosen_bin == rejected_bin {
            skipped.same_bin += 1;
            continue;
        }
        pairs.push(TrainingPair {
            features: features.features(&ex.prompt),
            chosen_bin,
            rejected_bin,
        });
    }
    (pairs, skipped)
}

/// Mean hashed features over the training prompts.
fn feature_mean<'a>(pairs: impl Iterator<Item = &'a TrainingPair>, dim: usize) -> Vec<f64> {
    let mut sum = vec![0.0; dim];
    let mut n = 0usize;
    for p in pairs {
        sum.iter_mut().zip(&p.features).for_each(|(s, x)| *s += x);
        n += 1;
    }
    if n > 0 {
        sum.iter_mut().for_each(|s| *s /= n as f64);
    }
    sum
}

/// Reference policy: bias logits from the smoothed histogram of every
/// forecast bin in the training pairs.
pub fn initial_policy(pairs: &[TrainingPair], cfg: &DpoConfig) -> ToyPolicy {
    let mut prior = [cfg.prior_smoothing; NUM_BINS];
    for p in pairs {
        prior[p.chosen_bin] += 1.0;
        prior[p.rejected_bin] += 1.0;
    }
    ToyPolicy::from_prior(cfg.features, &prior)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 0 is the untrained policy.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Share of validation pairs with a positive implicit-reward margin.
    pub val_margin_accuracy: Option<f64>,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub config: DpoConfig,
    pub n_examples: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub skipped: SkipCounts,
    pub epochs: Vec<EpochStats>,
    /// First epoch whose monitored loss improved by less than the plateau
    /// tolerance (validation loss when a validation split exists).
    pub plateau_epoch: Option<usize>,
}

impl TrainingReport {
    /// Line-delimited JSON: a config line, one line per epoch, a summary.
    pub fn to_jsonl(&self) -> serde_json::Result<Vec<u8>> {
        #[derive(Serialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Line<'a> {
            Config {
                seed: u64,
                config: &'a DpoConfig,
            },
            Epoch(&'a EpochStats),
            Summary {
                n_examples: usize,
                n_train: usize,
                n_validation: usize,
                skipped: SkipCounts,
                plateau_epoch: Option<usize>,
                final_train_loss: Option<f64>,
            },
        }
        let mut lines = vec![Line::Config {
            seed: self.config.seed,
            config: &self.config,
        }];
        lines.extend(self.epochs.iter().map(Line::Epoch));
        lines.push(Line::Summary {
            n_examples: self.n_examples,
            n_train: self.n_train,
            n_validation: self.n_validation,
            skipped: self.skipped,
            plateau_epoch: self.plateau_epoch,
            final_train_loss: self.epochs.last().map(|e| e.train_loss),
        });
        to_jsonl(&lines)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, &self.to_jsonl().map_err(io::Error::other)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub reference: ToyPolicy,
    pub report: TrainingReport,
}

struct Prepared<'a> {
    pair: &'a TrainingPair,
    chosen_reference: f64,
    rejected_reference: f64,
}

impl Prepared<'_> {
    fn log_probs(&self, policy: &ToyPolicy) -> PolicyLogProbs {
        let lp = policy.log_probs(&self.pair.features);
        PolicyLogProbs {
            chosen_policy: lp[self.pair.chosen_bin],
            rejected_policy: lp[self.pair.rejected_bin],
            chosen_reference: self.chosen_reference,
            rejected_reference: self.rejected_reference,
        }
    }
}

fn prepare_refs<'a>(pairs: impl Iterator<Item = &'a TrainingPair>, reference: &ToyPolicy) -> Vec<Prepared<'a>> {
    pairs
        .map(|pair| {
            let lp = reference.log_probs(&pair.features);
            Prepared {
                pair,
                chosen_reference: lp[pair.chosen_bin],
                rejected_reference: lp[pair.rejected_bin],
            }
        })
        .collect()
}

fn mean_loss(set: &[Prepared<'_>], policy: &ToyPolicy, beta: f64) -> Result<(f64, f64), DpoError> {
    let mut total = 0.0;
    let mut positive = 0usize;
    for p in set {
        let lp = p.log_probs(policy);
        total += dpo_loss(&lp, beta)?;
        positive += usize::from(lp.margin() > 0.0);
    }
    let n = set.len() as f64;
    Ok((total / n, positive as f64 / n))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains on already-prepared pairs.
pub fn train_pairs(
    pairs: &[TrainingPair],
    cfg: &DpoConfig,
    n_examples: usize,
    skipped: SkipCounts,
) -> Result<TrainOutcome, DpoError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(DpoError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if pairs.len() >= 2 {
        ((pairs.len() as f64 * cfg.validation_fraction).floor() as usize).min(pairs.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let center = feature_mean(train_idx.iter().map(|&i| &pairs[i]), cfg.features.dim());
    let pairs: Vec<TrainingPair> = pairs
        .iter()
        .map(|p| TrainingPair {
            features: p.features.iter().zip(&center).map(|(x, c)| x - c).collect(),
            ..p.clone()
        })
        .collect();
    let train_pairs: Vec<TrainingPair> = train_idx.iter().map(|&i| pairs[i].clone()).collect();
    let mut reference = initial_policy(&train_pairs, cfg);
    reference.center = center;
    let mut policy = reference.clone();
    let train = prepare_refs(train_idx.iter().map(|&i| &pairs[i]), &reference);
    let mut val_sorted = val_idx.to_vec();
    val_sorted.sort_unstable();
    let val = prepare_refs(val_sorted.iter().map(|&i| &pairs[i]), &reference);

    let eff = cfg.effective_batch();
    let steps_per_epoch = train.len().div_ceil(eff);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut step = 0usize;
    let mut grad = vec![0.0; policy.weights.len()];
    let mut adam = Adam {
        m: vec![0.0; grad.len()],
        v: vec![0.0; grad.len()],
        t: 0,
    };

    let record = |epoch: usize, policy: &ToyPolicy, lr: f64| -> Result<EpochStats, DpoError> {
        let (train_loss, _) = mean_loss(&train, policy, cfg.beta)?;
        if !train_loss.is_finite() {
            return Err(DpoError::NonFiniteLoss { epoch });
        }
        let (val_loss, val_acc) = if val.is_empty() {
            (None, None)
        } else {
            let (l, a) = mean_loss(&val, policy, cfg.beta)?;
            (Some(l), Some(a))
        };
        Ok(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_margin_accuracy: val_acc,
            learning_rate: lr,
        })
    };

    let mut epochs = vec![record(0, &policy, cfg.learning_rate)?];
    let mut plateau_epoch = None;
    let mut visit: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        visit.shuffle(&mut rng);
        let mut lr = cfg.learning_rate;
        for chunk in visit.chunks(eff) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let p = &train[i];
                let lp = p.log_probs(&policy);
                let g = dpo_grad(&lp, cfg.beta)?;
                let n = chunk.len() as f64;
                policy.accumulate_log_prob_grad(&p.pair.features, p.pair.chosen_bin, g.chosen_policy / n, &mut grad);
                policy.accumulate_log_prob_grad(&p.pair.features, p.pair.rejected_bin, g.rejected_policy / n, &mut grad);
            }
            lr = cfg.learning_rate * (1.0 - step as f64 / total_steps as f64);
            apply_update(&mut policy.weights, &grad, lr, cfg, &mut adam);
            step += 1;
        }
        if policy.weights.iter().any(|w| !w.is_finite()) {
            return Err(DpoError::NonFiniteLoss { epoch });
        }
        let stats = record(epoch, &policy, lr)?;
        let monitored = |s: &EpochStats| s.val_loss.unwrap_or(s.train_loss);
        let prev = monitored(epochs.last().expect("epoch 0 recorded"));
        let cur = monitored(&stats);
        if plateau_epoch.is_none() && epoch >= 2 && (prev - cur) / prev < cfg.plateau_tolerance {
            plateau_epoch = Some(epoch);
        }
        epochs.push(stats);
    }

    Ok(TrainOutcome {
        policy,
        reference,
        report: TrainingReport {
            config: cfg.clone(),
            n_examples,
            n_train: train.len(),
            n_validation: val.len(),
            skipped,
            epochs,
            plateau_epoch,
        },
    })
}

fn apply_update(weights: &mut [f64], grad: &[f64], lr: f64, cfg: &DpoConfig, adam: &mut Adam) {
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            for (w, g) in weights.iter_mut().zip(grad) {
                *w -= lr * (g + cfg.weight_decay * *w);
            }
        }
        OptimizerKind::AdamW => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let c1 = 1.0 - B1.powi(adam.t);
            let c2 = 1.0 - B2.powi(adam.t);
            for (i, (w, g)) in weights.iter_mut().zip(grad).enumerate() {
                adam.m[i] = B1 * adam.m[i] + (1.0 - B1) * g;
                adam.v[i] = B2 * adam.v[i] + (1.0 - B2) * g * g;
                let update = (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + EPS);
                *w -= lr * (update + cfg.weight_decay * *w);
            }
        }
    }
}

/// Parses completions into bins and trains.
pub fn train_toy(examples: &[DpoExample], cfg: &DpoConfig) -> Result<TrainOutcome, DpoError> {
    cfg.validate()?;
    let (pairs, skipped) = prepare(examples, &cfg.features);
    train_pairs(&pairs, cfg, examples.len(), skipped)
}
