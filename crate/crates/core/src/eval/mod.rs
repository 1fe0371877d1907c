//! Ranking metrics and fold-in evaluation of heldout users.
//!
//! Each heldout user's fold-in items are fed to a [`Scorer`]; the fold-in
//! items are masked out of the ranking and the remaining top-K list is
//! scored against the heldout items.

mod metrics;
mod report;

pub use metrics::{
    ndcg_at_k, ndcg_of_ranking, recall_at_k, recall_of_ranking, top_k, Metric, MetricSpec,
};
pub use report::{MetricReport, MetricRow, UserMetrics};

use crate::dataset::{dense_batch, DatasetSplit, HeldoutSet, HeldoutUser, InteractionVector};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numcore::Matrix;

/// Produces item scores (higher is better) for a batch of fold-in rows.
pub trait Scorer {
    fn n_items(&self) -> usize;
    fn score(&self, fold_in: &Matrix) -> Result<Matrix>;
}

impl Scorer for ModelParams {
    fn n_items(&self) -> usize {
        self.config.n_items
    }

    fn score(&self, fold_in: &Matrix) -> Result<Matrix> {
        self.scores(fold_in)
    }
}

/// Scores every item by its training consumption count.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(train: &[InteractionVector], n_items: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::EmptyDataset("popularity of an empty training set".into()));
        }
        Ok(Popularity {
            counts: popularity_baseline(train, n_items)?,
        })
    }
}

impl Scorer for Popularity {
    fn n_items(&self) -> usize {
        self.counts.len()
    }

    fn score(&self, fold_in: &Matrix) -> Result<Matrix> {
        let m = self.counts.len();
        Ok(Matrix::from_fn(fold_in.rows(), m, |_, c| self.counts[c]))
    }
}

/// Training consumption count of every item.
pub fn popularity_baseline(train: &[InteractionVector], n_items: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; n_items];
    for u in train {
        for &i in u.items() {
            *counts.get_mut(i).ok_or(Error::Bounds {
                index: i,
                len: n_items,
            })? += 1.0;
        }
    }
    Ok(counts)
}

/// Users scored per call to the scorer.
const EVAL_BATCH: usize = 256;

/// Evaluates `scorer` on heldout users at every metric in `specs`. Users
/// with an empty heldout part are skipped and counted.
pub fn evaluate(
    users: &[HeldoutUser],
    scorer: &dyn Scorer,
    specs: &[MetricSpec],
) -> Result<(MetricReport, Vec<UserMetrics>)> {
    if specs.is_empty() {
        return Err(Error::Config("no metrics requested".into()));
    }
    let n_items = scorer.n_items();
    let max_k = specs.iter().map(|s| s.k).max().unwrap_or(1);
    let mut per_user = Vec::with_capacity(users.len());
    let mut skipped = 0;
    let active: Vec<&HeldoutUser> = users
        .iter()
        .filter(|u| {
            let empty = u.heldout.is_empty();
            skipped += empty as usize;
            !empty
        })
        .collect();
    for chunk in active.chunks(EVAL_BATCH) {
        let x = dense_batch(chunk.iter().map(|u| &u.fold_in), n_items)?;
        let scores = scorer.score(&x)?;
        if scores.shape() != (chunk.len(), n_items) {
            return Err(Error::Shape(format!(
                "scorer returned {}x{} for {} users over {n_items} items",
                scores.rows(),
                scores.cols(),
                chunk.len()
            )));
        }
        for (r, user) in chunk.iter().enumerate() {
            let mask = user.fold_in.items();
            let heldout = user.heldout.items();
            if let Some(i) = heldout.iter().find(|&&i| user.fold_in.contains(i)) {
                return Err(Error::Evaluation(format!(
                    "user {}: item {i} is both fold-in and heldout",
                    user.fold_in.user
                )));
            }
            let ranked = top_k(scores.row(r), mask, max_k);
            if ranked.iter().any(|&i| user.fold_in.contains(i)) {
                return Err(Error::Evaluation("masked item reached a top-K list".into()));
            }
            let values: Vec<f64> = specs
                .iter()
                .map(|s| match s.metric {
                    Metric::Ndcg => ndcg_of_ranking(&ranked, heldout, s.k),
                    Metric::Recall => recall_of_ranking(&ranked, heldout, s.k),
                })
                .collect();
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Evaluation(format!("metric value {v} outside [0, 1]")));
            }
            per_user.push(UserMetrics {
                user: user.fold_in.user,
                values,
            });
        }
    }
    Ok((MetricReport::aggregate(specs, &per_user, skipped), per_user))
}

/// Evaluates a model on one heldout set of `split`, checking that the
/// model was trained on the same vocabulary.
pub fn evaluate_model(
    split: &DatasetSplit,
    which: HeldoutSet,
    params: &ModelParams,
    model_fingerprint: &str,
    specs: &[MetricSpec],
) -> Result<(MetricReport, Vec<UserMetrics>)> {
    let data = split.fingerprint();
    if data != model_fingerprint || params.config.n_items != split.n_items() {
        return Err(Error::VocabMismatch {
            model: model_fingerprint.to_string(),
            data,
        });
    }
    let (mut report, users) = evaluate(split.heldout(which), params, specs)?;
    report.vocab_fingerprint = data;
    report.model = params.config.cell_name();
    Ok((report, users))
}

/// The metric set `ndcg@k` and `recall@k` for each `k`.
pub fn standard_specs(ks: &[usize]) -> Vec<MetricSpec> {
    [Metric::Ndcg, Metric::Recall]
        .into_iter()
        .flat_map(|metric| ks.iter().map(move |&k| MetricSpec { metric, k }))
        .collect()
}
