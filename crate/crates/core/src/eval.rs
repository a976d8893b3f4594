//! Leave-one-out ranking evaluation with HR@k and nDCG@k.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::CandidateList;
use crate::model::{Model, ModelError, ModelKind, Noise};
use crate::ndcore::rng::{self, tag};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluable users (every user has a single interaction)")]
    NoUsers,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Anything that can score a user's candidate list reproducibly.
pub trait Scorer: Sync {
    fn score_candidates(&self, user: usize, items: &[usize], eval_seed: u64)
        -> Result<Vec<f64>, ModelError>;
}

impl Scorer for Model {
    /// One noise draw per user from `(eval_seed, user)`, shared by every
    /// candidate, so candidates are compared under the same samples.
    fn score_candidates(
        &self,
        user: usize,
        items: &[usize],
        eval_seed: u64,
    ) -> Result<Vec<f64>, ModelError> {
        let c = self.config();
        let (k, d) = (c.samples, c.dim);
        let noise = if c.kind.is_gaussian() {
            let mut r = rng::stream(eval_seed, &[tag::EVAL_NOISE, user as u64]);
            let eps_u = rng::standard_normal(&mut r, k * d);
            let eps_v = rng::standard_normal(&mut r, k * d);
            Noise::shared(&eps_u, &eps_v, items.len(), k, d)
        } else {
            Noise::zeros(items.len(), 0, 0)
        };
        self.score_with_noise(&vec![user; items.len()], items, &noise)
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// 1-based rank of `scores[positive]`, counting ties and NaNs as higher.
pub fn pessimistic_rank(scores: &[f64], positive: usize) -> usize {
    let p = scores[positive];
    if p.is_nan() {
        return scores.len();
    }
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != positive && (s >= p || s.is_nan()))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: usize,
    pub rank: usize,
    pub scores: Vec<f64>,
}

pub fn rank_candidates(
    scorer: &impl Scorer,
    list: &CandidateList,
    eval_seed: u64,
) -> Result<RankResult, ModelError> {
    let scores = scorer.score_candidates(list.user, &list.items, eval_seed)?;
    Ok(RankResult {
        user: list.user,
        rank: pessimistic_rank(&scores, list.positive_index),
        scores,
    })
}

/// The four headline metrics, averaged over users with equal weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hr3: f64,
    pub ndcg3: f64,
    pub hr10: f64,
    pub ndcg10: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Option<Self> {
        let mut sum = Metrics::default();
        let mut n = 0usize;
        for r in ranks {
            sum.hr3 += hr_at_k(r, 3);
            sum.ndcg3 += ndcg_at_k(r, 3);
            sum.hr10 += hr_at_k(r, 10);
            sum.ndcg10 += ndcg_at_k(r, 10);
            n += 1;
        }
        (n > 0).then(|| {
            let n = n as f64;
            Metrics {
                hr3: sum.hr3 / n,
                ndcg3: sum.ndcg3 / n,
                hr10: sum.hr10 / n,
                ndcg10: sum.ndcg10 / n,
            }
        })
    }

    /// Aligned table in the order HR@3, nDCG@3, HR@10, nDCG@10.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            "HR@3", "nDCG@3", "HR@10", "nDCG@10", self.hr3, self.ndcg3, self.hr10, self.ndcg10
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_kind: ModelKind,
    pub config_fingerprint: String,
    pub eval_seed: u64,
    pub users: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    #[serde(skip)]
    pub per_user: Vec<RankResult>,
}

impl MetricsReport {
    /// Rows `user,rank,hr3,ndcg3,hr10,ndcg10`; `user` is the dense id unless
    /// `names` maps it back to an original id.
    pub fn write_ranks_csv(
        &self,
        path: &Path,
        names: Option<&dyn Fn(usize) -> String>,
    ) -> Result<(), EvalError> {
        let io = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
        w.write_record(["user", "rank", "hr3", "ndcg3", "hr10", "ndcg10"])
            .map_err(|e| io(e.into()))?;
        for r in &self.per_user {
            let user = names.map_or_else(|| r.user.to_string(), |f| f(r.user));
            w.write_record([
                user,
                r.rank.to_string(),
                hr_at_k(r.rank, 3).to_string(),
                ndcg_at_k(r.rank, 3).to_string(),
                hr_at_k(r.rank, 10).to_string(),
                ndcg_at_k(r.rank, 10).to_string(),
            ])
            .map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)
    }
}

/// Ranks every candidate list, fanning users out over `threads` workers.
/// Results do not depend on the thread count.
pub fn evaluate_all(
    scorer: &impl Scorer,
    candidates: &[CandidateList],
    eval_seed: u64,
    threads: usize,
) -> Result<(Metrics, Vec<RankResult>), EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::NoUsers);
    }
    let threads = threads.clamp(1, candidates.len());
    let chunk = candidates.len().div_ceil(threads);
    let ranked: Vec<Result<Vec<RankResult>, ModelError>> = if threads == 1 {
        vec![candidates
            .iter()
            .map(|l| rank_candidates(scorer, l, eval_seed))
            .collect()]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = candidates
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|l| rank_candidates(scorer, l, eval_seed))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut results = Vec::with_capacity(candidates.len());
    for part in ranked {
        results.extend(part?);
    }
    let metrics = Metrics::from_ranks(results.iter().map(|r| r.rank)).ok_or(EvalError::NoUsers)?;
    Ok((metrics, results))
}

/// Available cores, or 1 when unknown.
pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        assert_eq!(hr_at_k(1, 10), 1.0);
        assert_eq!(hr_at_k(4, 3), 0.0);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(4, 3), 0.0);
    }

    #[test]
    fn ties_count_against_the_positive() {
        assert_eq!(pessimistic_rank(&[0.9, 0.1, 0.5], 0), 1);
        assert_eq!(pessimistic_rank(&[0.9, 0.9, 0.5], 0), 2);
        assert_eq!(pessimistic_rank(&[0.5, 0.5, 0.5], 2), 3);
        assert_eq!(pessimistic_rank(&[0.2, f64::NAN, 0.1], 0), 2);
        assert_eq!(pessimistic_rank(&[f64::NAN, 0.3, 0.1], 0), 3);
    }

    #[test]
    fn all_first_gives_perfect_metrics() {
        let m = Metrics::from_ranks([1, 1, 1]).unwrap();
        assert_eq!(
            m,
            Metrics {
                hr3: 1.0,
                ndcg3: 1.0,
                hr10: 1.0,
                ndcg10: 1.0
            }
        );
        assert!(Metrics::from_ranks([]).is_none());
    }
}
