use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::MetricSpec;

/// Metric values of one user, aligned with the report's rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: MetricSpec,
    pub mean: f64,
    /// Sample standard deviation over users divided by √users.
    pub std_err: f64,
    pub users: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub n_users: usize,
    /// Users left out because their heldout part was empty.
    pub skipped_users: usize,
    pub model: String,
    pub vocab_fingerprint: String,
}

impl MetricReport {
    pub fn aggregate(specs: &[MetricSpec], users: &[UserMetrics], skipped: usize) -> Self {
        let n = users.len();
        let rows = specs
            .iter()
            .enumerate()
            .map(|(j, &metric)| {
                let (mean, std_err) = mean_and_std_err(users.iter().map(|u| u.values[j]), n);
                MetricRow {
                    metric,
                    mean,
                    std_err,
                    users: n,
                }
            })
            .collect();
        MetricReport {
            rows,
            n_users: n,
            skipped_users: skipped,
            model: String::new(),
            vocab_fingerprint: String::new(),
        }
    }

    pub fn get(&self, spec: MetricSpec) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.metric == spec)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        if !self.model.is_empty() {
            let _ = writeln!(out, "model: {}", self.model);
        }
        let _ = writeln!(
            out,
            "users: {} evaluated, {} skipped (empty heldout)",
            self.n_users, self.skipped_users
        );
        let names: Vec<String> = self.rows.iter().map(|r| r.metric.to_string()).collect();
        let width = names.iter().map(String::len).max().unwrap_or(0).max(6);
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>6}", "metric", "mean", "std_err", "users");
        for (name, r) in names.iter().zip(&self.rows) {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>8.5}  {:>8.5}  {:>6}",
                r.mean, r.std_err, r.users
            );
        }
        out
    }

    /// One CSV row per (user, metric, K).
    pub fn per_user_csv(&self, users: &[UserMetrics]) -> String {
        let mut out = String::from("user_index,metric,k,value\n");
        for u in users {
            for (r, v) in self.rows.iter().zip(&u.values) {
                let _ = writeln!(out, "{},{},{},{v}", u.user, r.metric.metric.as_str(), r.metric.k);
            }
        }
        out
    }
}

fn mean_and_std_err(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
