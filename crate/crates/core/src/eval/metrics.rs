use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Ndcg,
    Recall,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Ndcg => "ndcg",
            Metric::Recall => "recall",
        }
    }
}

/// A metric at a cutoff, written `ndcg@100` or `recall@20`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MetricSpec {
    pub metric: Metric,
    pub k: usize,
}

impl fmt::Display for MetricSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.metric.as_str(), self.k)
    }
}

impl FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("expected ndcg@K or recall@K, got {s:?}"));
        let (name, k) = s.trim().split_once('@').ok_or_else(bad)?;
        let metric = match name.to_ascii_lowercase().as_str() {
            "ndcg" => Metric::Ndcg,
            "recall" => Metric::Recall,
            _ => return Err(bad()),
        };
        let k: usize = k.parse().map_err(|_| bad())?;
        if k == 0 {
            return Err(Error::Config("metric cutoff K must be at least 1".into()));
        }
        Ok(MetricSpec { metric, k })
    }
}

impl TryFrom<String> for MetricSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MetricSpec> for String {
    fn from(m: MetricSpec) -> String {
        m.to_string()
    }
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec {
            metric: Metric::Ndcg,
            k: 100,
        }
    }
}

fn rank_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// The `k` highest-scoring item indices, best first, with ties broken by
/// ascending index. Items in `mask` never appear; the list is shorter than
/// `k` only when fewer unmasked items exist.
pub fn top_k(scores: &[f64], mask: &[usize], k: usize) -> Vec<usize> {
    let mut masked = vec![false; scores.len()];
    for &i in mask {
        if i < masked.len() {
            masked[i] = true;
        }
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !masked[i]).collect();
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| rank_order(scores, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| rank_order(scores, a, b));
    candidates
}

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 1) as f64).log2()
}

/// NDCG@k of a ranked list against a non-empty heldout set.
pub fn ndcg_of_ranking(ranked: &[usize], heldout: &[usize], k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| heldout.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let idcg: f64 = (1..=k.min(heldout.len())).map(discount).sum();
    dcg / idcg
}

/// Recall@k of a ranked list, normalized by min(k, |heldout|).
pub fn recall_of_ranking(ranked: &[usize], heldout: &[usize], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| heldout.contains(i)).count();
    hits as f64 / k.min(heldout.len()) as f64
}

fn check(heldout: &[usize], mask: &[usize], k: usize) -> Result<bool> {
    if k == 0 {
        return Err(Error::Evaluation("metric cutoff K must be at least 1".into()));
    }
    if let Some(i) = heldout.iter().find(|i| mask.contains(i)) {
        return Err(Error::Evaluation(format!(
            "item {i} is both heldout and masked"
        )));
    }
    Ok(!heldout.is_empty())
}

/// NDCG@k with fold-in items masked; `None` when `heldout` is empty.
pub fn ndcg_at_k(scores: &[f64], heldout: &[usize], mask: &[usize], k: usize) -> Result<Option<f64>> {
    if !check(heldout, mask, k)? {
        return Ok(None);
    }
    Ok(Some(ndcg_of_ranking(&top_k(scores, mask, k), heldout, k)))
}

/// Recall@k with fold-in items masked; `None` when `heldout` is empty.
pub fn recall_at_k(scores: &[f64], heldout: &[usize], mask: &[usize], k: usize) -> Result<Option<f64>> {
    if !check(heldout, mask, k)? {
        return Ok(None);
    }
    Ok(Some(recall_of_ranking(&top_k(scores, mask, k), heldout, k)))
}
