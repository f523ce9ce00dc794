//! Leave-one-out ranking metrics and denoiser scoring.

use std::collections::BTreeSet;
use std::io::Write;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::graphs::BipartiteGraph;
use crate::numcore::sub_rng;

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_SAMPLED_NEGATIVES: usize = 99;

/// Which items compete with the held-out one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CandidateMode {
    /// Every item except the user's training target interactions.
    Full,
    /// The held-out item plus this many negatives drawn from the full set.
    Sampled(usize),
}

impl CandidateMode {
    pub fn label(&self) -> &'static str {
        match self {
            CandidateMode::Full => "full",
            CandidateMode::Sampled(_) => "sampled",
        }
    }
}

impl FromStr for CandidateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CandidateMode::Full),
            "sampled" => Ok(CandidateMode::Sampled(DEFAULT_SAMPLED_NEGATIVES)),
            other => Err(Error::InvalidArgument(format!(
                "eval mode must be full or sampled, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankingResult {
    pub user: usize,
    pub item: usize,
    /// 1-based.
    pub rank: usize,
    pub candidates: usize,
}

/// 1 + number of candidates that beat `held_out`: a higher score, or an
/// equal score with a lower item id.
pub fn rank_among(scores: impl Fn(usize) -> f64, held_out: usize, candidates: &[usize]) -> usize {
    let target = scores(held_out);
    1 + candidates
        .iter()
        .filter(|&&c| c != held_out)
        .filter(|&&c| {
            let s = scores(c);
            s > target || (s == target && c < held_out)
        })
        .count()
}

/// Ranks one user's held-out item by inner product. `excluded` holds the
/// user's training target items.
pub fn rank_target(
    user: usize,
    user_rep: ArrayView1<f64>,
    items: &Array2<f64>,
    held_out: usize,
    excluded: &[usize],
    mode: CandidateMode,
    seed: u64,
) -> Result<RankingResult> {
    let num_items = items.nrows();
    if held_out >= num_items || excluded.contains(&held_out) {
        return Err(Error::HeldOutMissing {
            user,
            item: held_out,
        });
    }
    let pool: Vec<usize> = (0..num_items).filter(|i| !excluded.contains(i)).collect();
    let candidates = match mode {
        CandidateMode::Full => pool,
        CandidateMode::Sampled(n) => {
            let others: Vec<usize> = pool.into_iter().filter(|&i| i != held_out).collect();
            let mut rng = sub_rng(seed, &format!("eval/sampled/{user}"));
            let take = n.min(others.len());
            let mut chosen: Vec<usize> = sample(&mut rng, others.len(), take)
                .into_iter()
                .map(|k| others[k])
                .collect();
            chosen.push(held_out);
            chosen
        }
    };
    let score = |i: usize| user_rep.dot(&items.row(i));
    Ok(RankingResult {
        user,
        item: held_out,
        rank: rank_among(score, held_out, &candidates),
        candidates: candidates.len(),
    })
}

/// Ranks every held-out pair. Order of the output follows `test`.
pub fn rank_all(
    users: &Array2<f64>,
    items: &Array2<f64>,
    train_target: &BipartiteGraph,
    test: &[(usize, usize)],
    mode: CandidateMode,
    seed: u64,
) -> Result<Vec<RankingResult>> {
    test.par_iter()
        .map(|&(u, i)| {
            if u >= users.nrows() {
                return Err(Error::OutOfRange {
                    what: "user",
                    index: u,
                    len: users.nrows(),
                });
            }
            rank_target(u, users.row(u), items, i, train_target.items_of(u), mode, seed)
        })
        .collect()
}

pub fn hr_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    results.iter().filter(|r| r.rank <= k).count() as f64 / results.len() as f64
}

pub fn ndcg_at_k(results: &[RankingResult], k: usize) -> f64 {
    if results.is_empty() {
        return 0.0;
    }
    let total: f64 = results
        .iter()
        .filter(|r| r.rank <= k)
        .map(|r| 1.0 / ((r.rank + 1) as f64).log2())
        .sum();
    total / results.len() as f64
}

/// One metric record, serialized as a single JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub stage: u8,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "HR")]
    pub hr: f64,
    #[serde(rename = "NDCG")]
    pub ndcg: f64,
    pub users: usize,
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_variant: Option<String>,
}

impl MetricReport {
    pub fn from_results(
        stage: u8,
        k: usize,
        results: &[RankingResult],
        seed: u64,
        config_hash: &str,
        mode: CandidateMode,
    ) -> Self {
        Self {
            stage,
            k,
            hr: hr_at_k(results, k),
            ndcg: ndcg_at_k(results, k),
            users: results.len(),
            seed,
            config_hash: config_hash.to_string(),
            mode: mode.label().to_string(),
            prompt_variant: None,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

/// Per-user dump: `user,item,rank,candidates`.
pub fn write_rankings_csv<W: Write>(results: &[RankingResult], mut out: W) -> Result<()> {
    writeln!(out, "user,item,rank,candidates")?;
    for r in results {
        writeln!(out, "{},{},{},{}", r.user, r.item, r.rank, r.candidates)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DenoiseQuality {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub removed: usize,
    pub noisy: usize,
    pub hits: usize,
}

/// Precision and recall of removed edges against planted noise. Precision
/// is 1 when nothing was removed; recall is 1 when nothing was planted.
pub fn denoise_quality(
    removed: &[(usize, usize, usize)],
    noisy: &BTreeSet<(usize, usize, usize)>,
) -> DenoiseQuality {
    let removed_set: BTreeSet<_> = removed.iter().copied().collect();
    let hits = removed_set.intersection(noisy).count();
    let precision = if removed_set.is_empty() {
        1.0
    } else {
        hits as f64 / removed_set.len() as f64
    };
    let recall = if noisy.is_empty() {
        1.0
    } else {
        hits as f64 / noisy.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    DenoiseQuality {
        precision,
        recall,
        f1,
        removed: removed_set.len(),
        noisy: noisy.len(),
        hits,
    }
}
