//! Minibatch optimization of the negative ELBO with KL annealing and
//! validation-based early stopping.

mod adam;

pub use adam::Adam;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{dense_batch, DatasetSplit, HeldoutSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricSpec};
use crate::model::{ModelConfig, ModelParams, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub beta_cap: f64,
    /// Steps of linear KL warm-up; `None` means the steps of 20 epochs.
    pub anneal_steps: Option<u64>,
    pub dropout_rate: f64,
    pub patience: usize,
    pub seed: u64,
    pub eval_metric: MetricSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 500,
            max_epochs: 200,
            learning_rate: 1e-3,
            beta_cap: 0.2,
            anneal_steps: None,
            dropout_rate: 0.5,
            patience: 10,
            seed: 0,
            eval_metric: MetricSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.beta_cap) {
            return err(format!("beta_cap must lie in [0, 1], got {}", self.beta_cap));
        }
        if self.anneal_steps == Some(0) {
            return err("anneal_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Warm-up length for `n_train` training users.
    pub fn resolved_anneal_steps(&self, n_train: usize) -> u64 {
        self.anneal_steps
            .unwrap_or_else(|| 20 * n_train.div_ceil(self.batch_size).max(1) as u64)
    }
}

/// KL weight after `step` updates: linear from 0 to `cap` over
/// `anneal_steps`, then constant.
pub fn beta_at(step: u64, cap: f64, anneal_steps: u64) -> f64 {
    (cap * step as f64 / anneal_steps.max(1) as f64).min(cap)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_elbo: f64,
    pub mean_recon: f64,
    pub mean_kl_z1: f64,
    pub mean_kl_z2: f64,
    /// KL weight of the epoch's last step.
    pub beta: f64,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    /// Training hit a non-finite loss or gradient; the best model so far
    /// is kept.
    NonFinite(String),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the initial parameters if
    /// no epoch finished).
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
    pub log: Vec<EpochLog>,
    pub stop: StopReason,
    pub steps: u64,
}

/// Independent random streams derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn train(split: &DatasetSplit, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(split, model, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every finished epoch.
pub fn train_with(
    split: &DatasetSplit,
    model: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if split.train.is_empty() {
        return Err(Error::EmptyDataset("no training users".into()));
    }
    if split.validation.iter().all(|u| u.heldout.is_empty()) {
        return Err(Error::EmptyDataset("no usable validation users".into()));
    }
    if model.n_items != split.n_items() {
        return Err(Error::Config(format!(
            "model has {} items, split vocabulary has {}",
            model.n_items,
            split.n_items()
        )));
    }

    let mut params = ModelParams::init(model.clone(), Some(&split.train), &mut stream(cfg.seed, STREAM_INIT))?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut noise_rng = stream(cfg.seed, STREAM_NOISE);
    let mut opt = Adam::new(&params.net);
    let anneal = cfg.resolved_anneal_steps(split.train.len());
    let mode = Mode::Train {
        dropout_rate: cfg.dropout_rate,
    };
    let specs = [cfg.eval_metric];

    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_metric: Option<f64> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let start = Instant::now();
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0; 4];
        let mut beta = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            beta = beta_at(opt.step, cfg.beta_cap, anneal);
            assert!(beta <= cfg.beta_cap, "KL weight above its cap");
            let x = dense_batch(batch.iter().map(|&u| &split.train[u]), split.n_items())?;
            let (report, grads) = params.elbo_with_grads(&x, beta, mode, &mut noise_rng)?;
            if !report.elbo.is_finite() {
                stop = StopReason::NonFinite(format!(
                    "non-finite loss at step {} (epoch {epoch})",
                    opt.step + 1
                ));
                break 'epochs;
            }
            if let Err(e) = opt.update(&mut params.net, &grads, cfg.learning_rate) {
                match e {
                    Error::NonFinite { .. } => {
                        stop = StopReason::NonFinite(e.to_string());
                        break 'epochs;
                    }
                    other => return Err(other),
                }
            }
            let n = batch.len() as f64;
            sums[0] += report.elbo * n;
            sums[1] += report.recon * n;
            sums[2] += report.kl_z1 * n;
            sums[3] += report.kl_z2 * n;
        }

        let (val, _) = evaluate(&split.validation, &params, &specs)?;
        let metric = val.rows[0].mean;
        let n = split.train.len() as f64;
        let entry = EpochLog {
            epoch,
            mean_elbo: sums[0] / n,
            mean_recon: sums[1] / n,
            mean_kl_z1: sums[2] / n,
            mean_kl_z2: sums[3] / n,
            beta,
            val_metric: metric,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        if best_metric.is_none_or(|b| metric > b) {
            best_metric = Some(metric);
            best_epoch = Some(epoch);
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience && epoch < cfg.max_epochs {
            stop = StopReason::Patience;
            break;
        }
    }

    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        log,
        stop,
        steps: opt.step,
    })
}

/// Validation metric of `params`, as used for early stopping.
pub fn validation_metric(split: &DatasetSplit, params: &ModelParams, metric: MetricSpec) -> Result<f64> {
    let (report, _) = evaluate(split.heldout(HeldoutSet::Validation), params, &[metric])?;
    Ok(report.rows[0].mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, synthetic, SplitParams};
    use crate::model::Variant;

    #[test]
    fn beta_schedule() {
        assert_eq!(beta_at(50, 0.2, 100), 0.1);
        assert_eq!(beta_at(0, 0.2, 100), 0.0);
        assert_eq!(beta_at(100, 0.2, 100), 0.2);
        assert_eq!(beta_at(10_000, 0.2, 100), 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { beta_cap: 1.5, ..Default::default() },
            TrainConfig { anneal_steps: Some(0), ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { dropout_rate: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let c = TrainConfig { batch_size: 100, ..Default::default() };
        assert_eq!(c.resolved_anneal_steps(250), 60);
    }

    fn tiny_split() -> DatasetSplit {
        let users = synthetic::ArchetypeConfig {
            n_users: 120,
            n_items: 40,
            min_items: 5,
            max_items: 10,
            ..Default::default()
        }
        .generate(0);
        split(&users, &SplitParams { n_heldout_users: 10, fold_in_fraction: 0.8, seed: 0 }).unwrap()
    }

    fn tiny_model(n_items: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            latent_z1: 3,
            latent_z2: 4,
            n_pseudo: 5,
            ..ModelConfig::new(n_items, Variant::HVampGated)
        }
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let s = tiny_split();
        let cfg = TrainConfig { patience: 0, batch_size: 32, max_epochs: 5, ..Default::default() };
        let out = train(&s, &tiny_model(s.n_items()), &cfg).unwrap();
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.stop, StopReason::Patience);
    }

    #[test]
    fn log_and_best_are_consistent() {
        let s = tiny_split();
        let cfg = TrainConfig {
            patience: 100,
            batch_size: 32,
            max_epochs: 4,
            eval_metric: "ndcg@10".parse().unwrap(),
            ..Default::default()
        };
        let mut seen = Vec::new();
        let out = train_with(&s, &tiny_model(s.n_items()), &cfg, |e| seen.push(e.epoch)).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4]);
        let max = out.log.iter().map(|e| e.val_metric).fold(f64::MIN, f64::max);
        assert_eq!(out.best_metric, Some(max));
        assert_eq!(validation_metric(&s, &out.best, cfg.eval_metric).unwrap(), max);
        assert!(out.log.iter().all(|e| e.beta <= cfg.beta_cap));
        assert_eq!(out.steps, 4 * 100usize.div_ceil(32) as u64);
    }

    #[test]
    fn training_is_deterministic() {
        let s = tiny_split();
        let cfg = TrainConfig { batch_size: 16, max_epochs: 2, patience: 5, ..Default::default() };
        let a = train(&s, &tiny_model(s.n_items()), &cfg).unwrap();
        let b = train(&s, &tiny_model(s.n_items()), &cfg).unwrap();
        assert_eq!(a.best, b.best);
    }

    #[test]
    fn vocabulary_size_must_match() {
        let s = tiny_split();
        let r = train(&s, &tiny_model(s.n_items() + 1), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
