//! In-memory experiment results before they reach the writer.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How a CSV artifact is drawn. Column names refer to the CSV header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlotSpec {
    /// One polyline per `y` column and distinct value of `series`.
    Line { title: String, x: String, y: Vec<String>, series: Option<String>, log_y: bool },
    /// Long-format table drawn as a grid of `value` over (`row`, `col`).
    Heat { title: String, row: String, col: String, value: String },
    /// Wide matrix in the columns prefixed `c`, rows reordered by clustering.
    Matrix { title: String, cluster: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Path relative to the run directory.
    pub path: String,
    pub contents: String,
    pub plot: Option<PlotSpec>,
}

impl Artifact {
    pub fn data(path: impl Into<String>, contents: String) -> Self {
        Artifact { path: path.into(), contents, plot: None }
    }

    pub fn plotted(path: impl Into<String>, contents: String, plot: PlotSpec) -> Self {
        Artifact { path: path.into(), contents, plot: Some(plot) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckItem {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckItem { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub experiment: String,
    pub items: Vec<CheckItem>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.items.iter().all(|i| i.passed)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check {}", self.experiment)?;
        for item in &self.items {
            writeln!(f, "  {} {}: {}", if item.passed { "PASS" } else { "FAIL" }, item.name, item.detail)?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "some checks failed" })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub artifacts: Vec<Artifact>,
    pub checks: Vec<CheckItem>,
    /// Choices fixed by the preset rather than the config, recorded in the manifest.
    pub decisions: BTreeMap<String, Value>,
    pub seed_seconds: Vec<(u64, f64)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    if sx == 0.0 || sy == 0.0 {
        0.0
    } else {
        cov / (sx * sy)
    }
}
