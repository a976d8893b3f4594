//! Learned user variance bucketed by interaction sparsity (o1) and genre
//! diversity (o2).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{GenreMap, SplitDataset};
use crate::model::{Model, Side};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("bucket edges must be finite and strictly increasing, got {0:?}")]
    Edges(Vec<f64>),
    #[error("the o2 metric needs item genres")]
    MissingGenres,
    #[error("model has no learned variances (point embeddings)")]
    NoVariance,
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// log₁₀ of the training interaction count.
    O1,
    /// Mean pairwise genre Jaccard distance over the user's items.
    O2,
}

impl MetricKind {
    pub fn default_edges(self) -> Vec<f64> {
        match self {
            Self::O1 => vec![1.1, 1.5, 1.9, 2.3, 2.7, 3.1, 3.5],
            Self::O2 => vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        }
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "o1" => Ok(Self::O1),
            "o2" => Ok(Self::O2),
            other => Err(format!("unknown metric `{other}` (expected o1 or o2)")),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::O1 => "o1",
            Self::O2 => "o2",
        })
    }
}

pub fn compute_o1(user: usize, split: &SplitDataset) -> Option<f64> {
    let n = split.train_items.get(user)?.len();
    (n > 0).then(|| (n as f64).log10())
}

/// `1 − |A ∩ B| / |A ∪ B|` over genre bitmasks.
pub fn jaccard_distance(a: u64, b: u64) -> f64 {
    let union = (a | b).count_ones();
    if union == 0 {
        return 0.0;
    }
    1.0 - (a & b).count_ones() as f64 / union as f64
}

/// Mean genre distance over all unordered pairs of the user's
/// genre-tagged training items. `None` with fewer than two such items.
pub fn compute_o2(user: usize, split: &SplitDataset, genres: &GenreMap) -> Option<f64> {
    // identical genre sets contribute 0, so pairs only matter across masks
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for &item in split.train_items.get(user)? {
        if let Some(mask) = genres.of(item) {
            *counts.entry(mask).or_default() += 1;
        }
    }
    let n: u64 = counts.values().sum();
    if n < 2 {
        return None;
    }
    let mut masks: Vec<(u64, u64)> = counts.into_iter().collect();
    masks.sort_unstable();
    let mut total = 0.0;
    for (i, &(a, ca)) in masks.iter().enumerate() {
        for &(b, cb) in &masks[i + 1..] {
            total += (ca * cb) as f64 * jaccard_distance(a, b);
        }
    }
    Some(total / (n * (n - 1) / 2) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBucket {
    pub metric: MetricKind,
    pub lo: f64,
    pub hi: f64,
    pub members: Vec<usize>,
    /// Mean over members and dimensions of the activated variance.
    pub mean_variance: Option<f64>,
}

impl UncertaintyBucket {
    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }
}

/// Mean over dimensions of `ELU(raw) + 1` for each user.
pub fn user_mean_variances(model: &Model) -> Option<Vec<f64>> {
    let v = model.variances(Side::User)?;
    let d = v.shape()[1].max(1);
    Some(
        v.data()
            .chunks(d)
            .map(|row| row.iter().sum::<f64>() / d as f64)
            .collect(),
    )
}

fn check_edges(edges: &[f64]) -> Result<(), AnalysisError> {
    let ok = edges.len() >= 2
        && edges.iter().all(|e| e.is_finite())
        && edges.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(AnalysisError::Edges(edges.to_vec()))
    }
}

/// Buckets evaluable users by `metric` into `[lo, hi)` ranges (the last one
/// closed) and averages their learned variance. Users outside every range
/// or lacking the metric are left out.
pub fn bucket_report(
    metric: MetricKind,
    edges: &[f64],
    model: &Model,
    split: &SplitDataset,
    genres: Option<&GenreMap>,
) -> Result<Vec<UncertaintyBucket>, AnalysisError> {
    check_edges(edges)?;
    let variances = user_mean_variances(model).ok_or(AnalysisError::NoVariance)?;
    if metric == MetricKind::O2 && genres.is_none() {
        return Err(AnalysisError::MissingGenres);
    }
    let mut buckets: Vec<UncertaintyBucket> = edges
        .windows(2)
        .map(|w| UncertaintyBucket {
            metric,
            lo: w[0],
            hi: w[1],
            members: Vec::new(),
            mean_variance: None,
        })
        .collect();
    let last = buckets.len() - 1;
    let mut skipped = 0usize;
    for user in split.evaluable_users() {
        let value = match metric {
            MetricKind::O1 => compute_o1(user, split),
            MetricKind::O2 => compute_o2(user, split, genres.expect("checked above")),
        };
        let Some(x) = value else {
            skipped += 1;
            continue;
        };
        let slot = buckets
            .iter()
            .position(|b| b.lo <= x && x < b.hi)
            .or_else(|| (x == buckets[last].hi).then_some(last));
        if let Some(i) = slot {
            buckets[i].members.push(user);
        }
    }
    if skipped > 0 {
        warn!("{skipped} user(s) excluded from {metric}: not enough data to compute it");
    }
    for b in &mut buckets {
        if !b.members.is_empty() {
            let sum: f64 = b.members.iter().map(|&u| variances[u]).sum();
            b.mean_variance = Some(sum / b.members.len() as f64);
        }
    }
    Ok(buckets)
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation between bucket midpoints and mean variance over
/// non-empty buckets.
pub fn trend(buckets: &[UncertaintyBucket]) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = buckets
        .iter()
        .filter_map(|b| b.mean_variance.map(|v| (b.midpoint(), v)))
        .unzip();
    spearman(&x, &y)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Rows `metric,lo,hi,count,mean_variance`; empty buckets leave the last
/// field blank.
pub fn write_bucket_csv(path: &Path, buckets: &[UncertaintyBucket]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path)(e.into()))?;
    let mut row = |r: [String; 5]| w.write_record(r).map_err(|e| io_err(path)(e.into()));
    row(["metric", "lo", "hi", "count", "mean_variance"].map(String::from))?;
    for b in buckets {
        row([
            b.metric.to_string(),
            b.lo.to_string(),
            b.hi.to_string(),
            b.members.len().to_string(),
            b.mean_variance.map_or(String::new(), |v| format!("{v:.6}")),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Two whitespace-separated columns, bucket midpoint and mean variance,
/// for non-empty buckets.
pub fn write_plot_file(path: &Path, buckets: &[UncertaintyBucket]) -> Result<(), AnalysisError> {
    let mut out = String::new();
    for b in buckets {
        if let Some(v) = b.mean_variance {
            out.push_str(&format!("{} {v:.6}\n", b.midpoint()));
        }
    }
    std::fs::write(path, out).map_err(io_err(path))
}
