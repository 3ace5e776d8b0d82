//! Full-ranking top-K evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{IflError, Result};
use crate::model::{similarity, ModelState};
use crate::scalar::Scalar;
use crate::schema::{Dataset, Side, Split};

pub const DEFAULT_KS: [usize; 4] = [10, 20, 50, 100];

/// Sorts candidate items by descending score, ties by ascending index.
fn order_by_score<T: Scalar>(scores: &[T], exclude: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|i| !exclude[*i]).collect();
    idx.sort_by(|a, b| {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    });
    idx
}

/// Items ranked by cosine score against `z_user`, excluded items removed.
pub fn rank_with_reps<T: Scalar>(z_user: &[T], z_items: &[Vec<T>], exclude: &BTreeSet<usize>) -> Vec<usize> {
    let scores: Vec<T> = z_items.iter().map(|z| similarity(z_user, z)).collect();
    let n = z_items.len();
    let mut mask = vec![false; n];
    for i in exclude.iter().filter(|i| **i < n) {
        mask[*i] = true;
    }
    order_by_score(&scores, &mask)
}

/// Full ranking for one user with eval-mode masks.
pub fn rank_items<T: Scalar>(state: &ModelState<T>, d: &Dataset, user: usize, exclude: &BTreeSet<usize>) -> Vec<usize> {
    let zu = state.encode(Side::User, &d.users[user], Some(&state.masks.eval_mask(Side::User)));
    let zi = state.encode_all(Side::Item, &d.items);
    rank_with_reps(&zu, &zi, exclude)
}

fn check(relevant: &BTreeSet<usize>, k: usize) -> Result<()> {
    if relevant.is_empty() {
        return Err(IflError::EmptyRelevant);
    }
    if k == 0 {
        return Err(IflError::Invalid("K must be at least 1".into()));
    }
    Ok(())
}

/// `|top-K ∩ relevant| / |relevant|`
pub fn recall_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Ok(hits as f64 / relevant.len() as f64)
}

/// Binary-relevance NDCG with `1 / log2(rank + 1)` discounts (ranks from 1).
pub fn ndcg_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Result<f64> {
    check(relevant, k)?;
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(relevant.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    Ok(dcg / idcg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub at: BTreeMap<usize, AtK>,
    pub n_users: usize,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.recall)
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.at.get(&k).map(|m| m.ndcg)
    }
}

/// Splits whose positives are hidden from the ranking when evaluating `split`.
fn excluded_splits(split: Split) -> &'static [Split] {
    match split {
        Split::Val => &[Split::Train],
        _ => &[Split::Train, Split::Val],
    }
}

/// Mean Recall@K and NDCG@K over users with at least one positive in `split`.
pub fn evaluate<T: Scalar>(state: &ModelState<T>, d: &Dataset, split: Split, ks: &[usize]) -> Result<MetricsReport> {
    if split == Split::Train {
        return Err(IflError::Invalid("cannot evaluate on the train split".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(IflError::Invalid("Ks must be non-empty and at least 1".into()));
    }
    let hidden = excluded_splits(split);
    let mut relevant: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut exclude: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    for r in d.interactions.iter().filter(|r| r.is_positive()) {
        if r.split == split {
            relevant.entry(r.user).or_default().insert(r.item);
        } else if hidden.contains(&r.split) {
            exclude.entry(r.user).or_default().insert(r.item);
        }
    }
    if relevant.is_empty() {
        return Err(IflError::NoEvaluableUsers(split.as_str()));
    }
    let mu = state.masks.eval_mask(Side::User);
    let zi = state.encode_all(Side::Item, &d.items);
    let empty = BTreeSet::new();
    let mut sums: BTreeMap<usize, AtK> = ks.iter().map(|k| (*k, AtK { recall: 0.0, ndcg: 0.0 })).collect();
    for (u, rel) in &relevant {
        let zu = state.encode(Side::User, &d.users[*u], Some(&mu));
        let ranked = rank_with_reps(&zu, &zi, exclude.get(u).unwrap_or(&empty));
        for (k, acc) in sums.iter_mut() {
            acc.recall += recall_at_k(&ranked, rel, *k)?;
            acc.ndcg += ndcg_at_k(&ranked, rel, *k)?;
        }
    }
    let n = relevant.len() as f64;
    for acc in sums.values_mut() {
        acc.recall /= n;
        acc.ndcg /= n;
    }
    Ok(MetricsReport {
        split,
        at: sums,
        n_users: relevant.len(),
        config_hash: String::new(),
    })
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    split: &'a str,
    #[serde(rename = "K")]
    k: usize,
    recall: f64,
    ndcg: f64,
    n_users: usize,
    config_hash: &'a str,
}

/// `metrics.json`: one `{split, K, recall, ndcg, n_users, config_hash}` object per (split, K).
pub fn write_metrics_json(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let rows: Vec<MetricsRow> = reports
        .iter()
        .flat_map(|r| {
            r.at.iter().map(move |(k, m)| MetricsRow {
                split: r.split.as_str(),
                k: *k,
                recall: m.recall,
                ndcg: m.ndcg,
                n_users: r.n_users,
                config_hash: &r.config_hash,
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&rows)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[usize]) -> BTreeSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn tie_rule() {
        let order = order_by_score(&[0.9, 0.1, 0.9], &[false; 3]);
        assert_eq!(order, vec![0, 2, 1]);
        assert!(order_by_score(&[0.9, 0.1], &[true, true]).is_empty());
    }

    #[test]
    fn recall_cases() {
        let ranked = [4, 1, 2, 3, 0];
        assert_eq!(recall_at_k(&ranked, &set(&[1, 0]), 2).unwrap(), 0.5);
        assert_eq!(recall_at_k(&ranked, &set(&[4, 1]), 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&ranked, &set(&[0]), 2).unwrap(), 0.0);
        assert!(matches!(recall_at_k(&ranked, &set(&[]), 2), Err(IflError::EmptyRelevant)));
    }

    #[test]
    fn ndcg_cases() {
        let ranked = [4, 1, 2, 3, 0];
        assert_eq!(ndcg_at_k(&ranked, &set(&[2]), 3).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranked, &set(&[4, 1]), 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranked, &set(&[3]), 3).unwrap(), 0.0);
    }
}
