//! Ranking metrics under sampled-negative evaluation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Draws `n` distinct items from `1..=num_items`, excluding `history` and
/// `target`. The draw depends only on `(seed, user)`.
pub fn sample_negatives(
    history: &[u32],
    target: u32,
    num_items: usize,
    n: usize,
    seed: u64,
    user: u32,
) -> Result<Vec<u32>> {
    let seen: HashSet<u32> = history.iter().copied().chain([target]).collect();
    let candidates: Vec<u32> = (1..=num_items as u32).filter(|i| !seen.contains(i)).collect();
    if candidates.len() < n {
        return Err(Error::Eval(format!(
            "user {user}: only {} candidate negatives, {n} requested",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(user)).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    Ok(candidates.choose_multiple(&mut rng, n).copied().collect())
}

/// Per-user ranking outcome.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankOutcome {
    pub rank: usize,
    pub recall: f64,
    pub rr: f64,
    pub ndcg: f64,
}

/// Rank of the target among the negatives; equal scores rank above the target.
pub fn rank_of(target: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= target).count()
}

pub fn rank_metrics(target: f64, negatives: &[f64], k: usize) -> RankOutcome {
    let rank = rank_of(target, negatives);
    if rank > k {
        return RankOutcome {
            rank,
            recall: 0.0,
            rr: 0.0,
            ndcg: 0.0,
        };
    }
    RankOutcome {
        rank,
        recall: 1.0,
        rr: 1.0 / rank as f64,
        ndcg: 1.0 / ((rank + 1) as f64).log2(),
    }
}

/// Mean metrics over evaluated users.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub recall_at_k: f64,
    pub mrr_at_k: f64,
    pub ndcg_at_k: f64,
    pub k: usize,
    pub num_users: usize,
    pub negatives: usize,
    pub skipped: usize,
}

impl EvalResult {
    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "recall@{k}={:.6}\nmrr@{k}={:.6}\nndcg@{k}={:.6}\nusers={}\nnegatives={}\nskipped={}\n",
            self.recall_at_k,
            self.mrr_at_k,
            self.ndcg_at_k,
            self.num_users,
            self.negatives,
            self.skipped,
            k = self.k
        )
    }
}

/// Running sums of per-user outcomes.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    recall: f64,
    rr: f64,
    ndcg: f64,
    users: usize,
    skipped: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, o: &RankOutcome) {
        self.recall += o.recall;
        self.rr += o.rr;
        self.ndcg += o.ndcg;
        self.users += 1;
    }

    pub fn skip(&mut self) {
        self.skipped += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.recall += other.recall;
        self.rr += other.rr;
        self.ndcg += other.ndcg;
        self.users += other.users;
        self.skipped += other.skipped;
    }

    pub fn finish(&self, k: usize, negatives: usize) -> EvalResult {
        let n = self.users.max(1) as f64;
        EvalResult {
            recall_at_k: self.recall / n,
            mrr_at_k: self.rr / n,
            ndcg_at_k: self.ndcg / n,
            k,
            num_users: self.users,
            negatives,
            skipped: self.skipped,
        }
    }
}
