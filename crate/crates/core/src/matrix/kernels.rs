use std::cmp::Ordering;

use crate::error::{Error, Result};

use super::{InteractionMatrix, SimilarityMatrix};

/// One user's scores over the full item catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub user: usize,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Sets every listed item to `-inf` so it never ranks.
    pub fn mask(&mut self, items: &[u32]) {
        for &i in items {
            self.scores[i as usize] = f64::NEG_INFINITY;
        }
    }
}

/// `out[i] = sum_j w(u, j) * s_ji` over the user's row of `r`.
pub fn score_row_into(r: &InteractionMatrix, s: &SimilarityMatrix, user: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, w) in r.row(user).iter() {
        let (targets, vals) = s.row(j);
        for (&i, &v) in targets.iter().zip(vals) {
            out[i as usize] += w * v;
        }
    }
}

/// Rows of `R S` for the requested users.
pub fn spmm_rows(
    r: &InteractionMatrix,
    s: &SimilarityMatrix,
    users: &[usize],
) -> Result<Vec<ScoreVector>> {
    if r.n_items() != s.n_items() {
        return Err(Error::Shape(format!(
            "interaction matrix has {} items, similarity matrix {}",
            r.n_items(),
            s.n_items()
        )));
    }
    users
        .iter()
        .map(|&u| {
            if u >= r.n_users() {
                return Err(Error::Index {
                    what: "user",
                    index: u,
                    bound: r.n_users(),
                });
            }
            let mut scores = vec![0.0; r.n_items()];
            score_row_into(r, s, u, &mut scores);
            Ok(ScoreVector { user: u, scores })
        })
        .collect()
}

/// Descending by value, ties to the lower index.
#[inline]
pub(crate) fn rank_order(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

/// Indices of the `k` largest values among those `keep` admits, best first.
pub fn topk_filtered(values: &[f64], k: usize, keep: impl Fn(usize) -> bool) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut cand: Vec<usize> = (0..values.len()).filter(|&i| keep(i)).collect();
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, |&a, &b| rank_order(values, a, b));
        cand.truncate(k);
    }
    cand.sort_unstable_by(|&a, &b| rank_order(values, a, b));
    cand
}

/// Indices of the `k` largest `values` not listed in `exclude`, descending by
/// value with ties broken toward the lower index.
pub fn row_topk(values: &[f64], k: usize, exclude: &[usize]) -> Vec<usize> {
    if exclude.is_empty() {
        return topk_filtered(values, k, |_| true);
    }
    let mut blocked = vec![false; values.len()];
    for &e in exclude {
        if e < blocked.len() {
            blocked[e] = true;
        }
    }
    topk_filtered(values, k, |i| !blocked[i])
}

/// Top-`k` skipping a sorted index list (typically a user's training row).
pub fn topk_excluding_sorted(values: &[f64], k: usize, sorted: &[u32]) -> Vec<usize> {
    topk_filtered(values, k, |i| sorted.binary_search(&(i as u32)).is_err())
}
