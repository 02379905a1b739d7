//! Cross-view alignment: pseudo-positives from one view feed the other.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{topk_excluding_sorted, Entry, InteractionMatrix, Provenance, SimilarityMatrix};
use crate::scoring::Scorer;
use crate::sparse::{fit_slim, SlimConfig};

/// Candidate neighbourhood sizes searched when a target pseudo ratio is set.
pub const K_GRID: [usize; 8] = [0, 5, 10, 15, 20, 25, 30, 50];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Top items taken per user by sparse score.
    pub k_user: usize,
    /// Top users taken per item by sparse score.
    pub k_item: usize,
    /// Weight of a sparse-proposed pseudo-positive in the dense loss.
    pub lambda_conf: f64,
    /// Neighbourhood size for dense-proposed entries (per user and per item).
    pub k_d2s: usize,
    /// When set, `k_user = k_item` is picked from [`K_GRID`] to land near this
    /// fraction of pseudo entries in the augmented dense input.
    pub target_pseudo_ratio: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            k_user: 10,
            k_item: 10,
            lambda_conf: 0.5,
            k_d2s: 10,
            target_pseudo_ratio: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_conf) {
            return Err(Error::Config("align.lambda_conf must lie in [0, 1]".into()));
        }
        if let Some(p) = self.target_pseudo_ratio {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config("align.target_pseudo_ratio must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    score: f64,
    user: u32,
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Cand {
    // Greater is better: higher score, then lower user index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then(other.user.cmp(&self.user))
    }
}

/// Ranked unobserved neighbours on both sides, up to a common depth.
#[derive(Clone, Debug)]
pub struct TopkCandidates {
    pub depth: usize,
    /// `per_user[u]`: best unobserved items of user `u`, best first.
    pub per_user: Vec<Vec<u32>>,
    /// `per_item[i]`: best users (among those who have not seen `i`), best first.
    pub per_item: Vec<Vec<u32>>,
}

const USER_CHUNK: usize = 64;

impl TopkCandidates {
    /// One pass over every user's score row; observed pairs are never candidates.
    pub fn collect(scorer: &impl Scorer, r: &InteractionMatrix, depth: usize) -> Self {
        let (n_users, n_items) = (r.n_users(), r.n_items());
        if depth == 0 {
            return TopkCandidates {
                depth,
                per_user: vec![Vec::new(); n_users],
                per_item: vec![Vec::new(); n_items],
            };
        }
        let mut per_user = Vec::with_capacity(n_users);
        let mut heaps: Vec<BinaryHeap<Reverse<Cand>>> = vec![BinaryHeap::new(); n_items];
        let users: Vec<usize> = (0..n_users).collect();
        for chunk in users.chunks(USER_CHUNK) {
            let rows: Vec<(Vec<f64>, Vec<u32>)> = chunk
                .par_iter()
                .map(|&u| {
                    let mut scores = vec![0.0; n_items];
                    scorer.score_into(u, &mut scores);
                    let observed = r.row(u).items;
                    let top = topk_excluding_sorted(&scores, depth, observed)
                        .into_iter()
                        .map(|i| i as u32)
                        .collect();
                    for &i in observed {
                        scores[i as usize] = f64::NEG_INFINITY;
                    }
                    (scores, top)
                })
                .collect();
            for (&u, (scores, top)) in chunk.iter().zip(rows) {
                per_user.push(top);
                for (i, &s) in scores.iter().enumerate() {
                    if s == f64::NEG_INFINITY {
                        continue;
                    }
                    let cand = Cand { score: s, user: u as u32 };
                    let heap = &mut heaps[i];
                    if heap.len() < depth {
                        heap.push(Reverse(cand));
                    } else if heap.peek().is_some_and(|w| cand > w.0) {
                        heap.pop();
                        heap.push(Reverse(cand));
                    }
                }
            }
        }
        let per_item = heaps
            .into_iter()
            .map(|h| {
                let mut v: Vec<Cand> = h.into_iter().map(|r| r.0).collect();
                v.sort_unstable_by(|a, b| b.cmp(a));
                v.into_iter().map(|c| c.user).collect()
            })
            .collect();
        TopkCandidates {
            depth,
            per_user,
            per_item,
        }
    }

    /// Pairs in the first `k_user` of a user's list or the first `k_item` of an
    /// item's list, sorted by (user, item) without duplicates.
    pub fn select(&self, k_user: usize, k_item: usize) -> Vec<(u32, u32)> {
        assert!(k_user <= self.depth && k_item <= self.depth, "selection deeper than collected");
        let mut pairs = Vec::new();
        for (u, items) in self.per_user.iter().enumerate() {
            pairs.extend(items.iter().take(k_user).map(|&i| (u as u32, i)));
        }
        for (i, users) in self.per_item.iter().enumerate() {
            pairs.extend(users.iter().take(k_item).map(|&u| (u, i as u32)));
        }
        pairs.sort_unstable();
        pairs.dedup();
        pairs
    }
}

fn pseudo_matrix(r: &InteractionMatrix, pairs: &[(u32, u32)], weight: f64, provenance: Provenance) -> Result<InteractionMatrix> {
    let entries = pairs
        .iter()
        .map(|&(u, i)| Entry {
            user: u as usize,
            item: i as usize,
            weight,
            provenance,
        })
        .collect();
    InteractionMatrix::from_entries(r.n_users(), r.n_items(), entries)
}

/// `R*`: unobserved pairs in the sparse view's top-`k_user` items of a user or
/// top-`k_item` users of an item, tagged as sparse-to-dense pseudo entries.
pub fn s2d_pseudo_positives(
    sparse_scores: &impl Scorer,
    r: &InteractionMatrix,
    k_user: usize,
    k_item: usize,
) -> Result<InteractionMatrix> {
    let cands = TopkCandidates::collect(sparse_scores, r, k_user.max(k_item));
    pseudo_matrix(r, &cands.select(k_user, k_item), 1.0, Provenance::PseudoS2d)
}

/// `R^ = R + lambda R*`: observed entries keep weight 1, pseudo entries get `lambda`.
pub fn augment_dense_input(r: &InteractionMatrix, r_star: &InteractionMatrix, lambda_conf: f64) -> Result<InteractionMatrix> {
    if !(0.0..=1.0).contains(&lambda_conf) {
        return Err(Error::Config("align.lambda_conf must lie in [0, 1]".into()));
    }
    let weighted: Vec<Entry> = r_star
        .entries()
        .map(|e| Entry {
            weight: lambda_conf,
            ..e
        })
        .collect();
    let weighted = InteractionMatrix::from_entries(r_star.n_users(), r_star.n_items(), weighted)?;
    r.union_disjoint(&weighted)
}

/// `R' = R OR Q`, with `Q` the dense view's top-`k` unobserved items per user and
/// users per item; merged entries carry weight 1.
pub fn d2s_augment(dense_scores: &impl Scorer, r: &InteractionMatrix, k: usize) -> Result<InteractionMatrix> {
    let cands = TopkCandidates::collect(dense_scores, r, k);
    let q = pseudo_matrix(r, &cands.select(k, k), 1.0, Provenance::PseudoD2s)?;
    r.or_merge(&q)
}

/// Refits the sparse view on `R'`; scores are then `R' S'`.
pub fn realign_sparse(r_prime: &InteractionMatrix, cfg: &SlimConfig) -> Result<SimilarityMatrix> {
    fit_slim(r_prime, cfg)
}

/// `|R*| / (|R| + |R*|)`.
pub fn pseudo_ratio(n_observed: usize, n_pseudo: usize) -> f64 {
    if n_observed + n_pseudo == 0 {
        0.0
    } else {
        n_pseudo as f64 / (n_observed + n_pseudo) as f64
    }
}

/// Picks the `K` in [`K_GRID`] (used on both sides) whose pseudo ratio is
/// closest to `target` on a log scale. Returns `(K, ratio)`.
pub fn pick_k_for_ratio(cands: &TopkCandidates, n_observed: usize, target: f64) -> (usize, f64) {
    let mut best: Option<(usize, f64, f64)> = None;
    for &k in K_GRID.iter().filter(|&&k| k > 0 && k <= cands.depth) {
        let ratio = pseudo_ratio(n_observed, cands.select(k, k).len());
        let gap = (ratio / target).ln().abs();
        if best.is_none_or(|b| gap < b.2) {
            best = Some((k, ratio, gap));
        }
    }
    let (k, ratio, _) = best.unwrap_or((0, 0.0, f64::INFINITY));
    if ratio < target / 2.0 || ratio > target * 2.0 {
        warn!("no K reaches pseudo ratio {target} within a factor of two; using K={k} (ratio {ratio:.4})");
    } else {
        info!("K={k} gives pseudo ratio {ratio:.4} for target {target}");
    }
    (k, ratio)
}

/// Sparse-to-dense step with the configured or ratio-selected neighbourhood.
/// Returns `R*` and the `(k_user, k_item)` used.
pub fn s2d_with_config(
    sparse_scores: &impl Scorer,
    r: &InteractionMatrix,
    cfg: &AlignConfig,
) -> Result<(InteractionMatrix, (usize, usize))> {
    cfg.validate()?;
    let (ku, ki, cands) = match cfg.target_pseudo_ratio {
        Some(p) => {
            let cands = TopkCandidates::collect(sparse_scores, r, *K_GRID.last().unwrap());
            let (k, _) = pick_k_for_ratio(&cands, r.nnz(), p);
            (k, k, cands)
        }
        None => {
            let depth = cfg.k_user.max(cfg.k_item);
            (cfg.k_user, cfg.k_item, TopkCandidates::collect(sparse_scores, r, depth))
        }
    };
    let r_star = pseudo_matrix(r, &cands.select(ku, ki), 1.0, Provenance::PseudoS2d)?;
    Ok((r_star, (ku, ki)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::csr_from_triplets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fixed score table standing in for a model.
    struct Table(Vec<Vec<f64>>);

    impl Scorer for Table {
        fn n_items(&self) -> usize {
            self.0[0].len()
        }
        fn score_into(&self, user: usize, out: &mut [f64]) {
            out.copy_from_slice(&self.0[user]);
        }
    }

    /// Direct enumeration of the union rule over every (u, i).
    fn brute_union(y: &[Vec<f64>], r: &InteractionMatrix, ku: usize, ki: usize) -> Vec<(u32, u32)> {
        let (nu, ni) = (r.n_users(), r.n_items());
        let better = |a: f64, ia: usize, b: f64, ib: usize| a > b || (a == b && ia < ib);
        let mut out = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if r.contains(u, i) {
                    continue;
                }
                let rank_in_user = (0..ni)
                    .filter(|&j| !r.contains(u, j) && better(y[u][j], j, y[u][i], i))
                    .count();
                let rank_in_item = (0..nu)
                    .filter(|&v| !r.contains(v, i) && better(y[v][i], v, y[u][i], u))
                    .count();
                if rank_in_user < ku || rank_in_item < ki {
                    out.push((u as u32, i as u32));
                }
            }
        }
        out
    }

    #[test]
    fn zero_k_gives_empty_pseudo_set() {
        let r = csr_from_triplets(&[(0, 0, 1.0)], 2, 3).unwrap();
        let y = Table(vec![vec![0.1, 0.2, 0.3]; 2]);
        let rs = s2d_pseudo_positives(&y, &r, 0, 0).unwrap();
        assert!(rs.is_empty());
        assert_eq!(augment_dense_input(&r, &rs, 0.5).unwrap(), r);
    }

    #[test]
    fn per_user_argmax_of_unobserved() {
        let r = csr_from_triplets(&[(0, 2, 1.0), (1, 0, 1.0)], 2, 3).unwrap();
        let y = Table(vec![vec![0.2, 0.5, 0.9], vec![0.9, 0.1, 0.3]]);
        let rs = s2d_pseudo_positives(&y, &r, 1, 0).unwrap();
        assert_eq!(rs.to_triplets(), vec![(0, 1, 1.0), (1, 2, 1.0)]);
        assert!(rs.entries().all(|e| e.provenance == Provenance::PseudoS2d));
    }

    #[test]
    fn item_side_only_pair_is_kept() {
        // user 1 prefers item 0, but user 1 is item 1's best user
        let r = InteractionMatrix::empty(2, 2);
        let y = Table(vec![vec![0.9, 0.1], vec![0.8, 0.5]]);
        let rs = s2d_pseudo_positives(&y, &r, 1, 1).unwrap();
        let pairs: Vec<(usize, usize)> = rs.entries().map(|e| (e.user, e.item)).collect();
        assert_eq!(pairs, vec![(0, 0), (1, 0), (1, 1)]);
    }

    #[test]
    fn union_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let nu = rng.random_range(1..9);
            let ni = rng.random_range(1..9);
            let mut trip = Vec::new();
            for u in 0..nu {
                for i in 0..ni {
                    if rng.random_bool(0.3) {
                        trip.push((u, i, 1.0));
                    }
                }
            }
            let r = csr_from_triplets(&trip, nu, ni).unwrap();
            // coarse values force ties
            let y: Vec<Vec<f64>> = (0..nu)
                .map(|_| (0..ni).map(|_| rng.random_range(0..4) as f64).collect())
                .collect();
            let ku = rng.random_range(0..4);
            let ki = rng.random_range(0..4);
            let got = s2d_pseudo_positives(&Table(y.clone()), &r, ku, ki).unwrap();
            let got: Vec<(u32, u32)> = got.entries().map(|e| (e.user as u32, e.item as u32)).collect();
            assert_eq!(got, brute_union(&y, &r, ku, ki));
        }
    }

    #[test]
    fn augmentation_weights_and_counts() {
        let r = csr_from_triplets(&[(0, 0, 1.0), (1, 1, 1.0)], 2, 3).unwrap();
        let y = Table(vec![vec![0.0, 0.4, 0.2], vec![0.3, 0.0, 0.1]]);
        let rs = s2d_pseudo_positives(&y, &r, 1, 0).unwrap();
        for lambda in [0.0, 0.3, 1.0] {
            let rh = augment_dense_input(&r, &rs, lambda).unwrap();
            assert_eq!(rh.nnz(), r.nnz() + rs.nnz());
            for e in rh.entries() {
                let w = if e.provenance == Provenance::Observed { 1.0 } else { lambda };
                assert_eq!(e.weight, w);
            }
        }
        assert!(augment_dense_input(&r, &r, 0.5).is_err());
        assert!(augment_dense_input(&r, &rs, 1.5).is_err());
    }

    #[test]
    fn d2s_examples() {
        let r = csr_from_triplets(&[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)], 3, 3).unwrap();
        let y = vec![
            vec![5.0, 0.2, 0.7],
            vec![0.6, 5.0, 0.1],
            vec![0.3, 0.4, 5.0],
        ];
        assert_eq!(d2s_augment(&Table(y.clone()), &r, 0).unwrap(), r);
        let rp = d2s_augment(&Table(y.clone()), &r, 1).unwrap();
        let mut expected: Vec<(u32, u32)> = r.entries().map(|e| (e.user as u32, e.item as u32)).collect();
        expected.extend(brute_union(&y, &r, 1, 1));
        expected.sort();
        let got: Vec<(u32, u32)> = rp.entries().map(|e| (e.user as u32, e.item as u32)).collect();
        assert_eq!(got, expected);
        assert!(rp.entries().all(|e| e.weight == 1.0));
        assert_eq!(rp.count_provenance(Provenance::Observed), 3);
        // OR idempotence
        assert_eq!(rp.or_merge(&rp).unwrap(), rp);
    }

    #[test]
    fn growth_is_monotone_and_strict_for_positive_k() {
        let r = csr_from_triplets(&[(0, 0, 1.0), (1, 1, 1.0)], 2, 4).unwrap();
        let y = Table(vec![vec![0.1, 0.2, 0.3, 0.4]; 2]);
        for k in 0..3 {
            let rh = augment_dense_input(&r, &s2d_pseudo_positives(&y, &r, k, k).unwrap(), 0.5).unwrap();
            let rp = d2s_augment(&y, &r, k).unwrap();
            assert_eq!(rh.nnz() > r.nnz(), k > 0);
            assert_eq!(rp.nnz() > r.nnz(), k > 0);
        }
    }

    #[test]
    fn realign_with_empty_q_is_identity_and_new_cooccurrence_raises_weight() {
        let cfg = SlimConfig {
            l1: 0.0,
            l2: 0.1,
            max_iters: 10_000,
            tol: 1e-12,
            topk_cap: 0,
            ..SlimConfig::default()
        };
        let r = csr_from_triplets(
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0), (3, 2, 1.0)],
            4,
            3,
        )
        .unwrap();
        let s = fit_slim(&r, &cfg).unwrap();
        let none = Table(vec![vec![0.0; 3]; 4]);
        let same = realign_sparse(&d2s_augment(&none, &r, 0).unwrap(), &cfg).unwrap();
        assert_eq!(same, s);
        // user 2 gains item 2, so items 0 and 2 now co-occur
        let q = InteractionMatrix::from_entries(
            4,
            3,
            vec![Entry {
                user: 2,
                item: 2,
                weight: 1.0,
                provenance: Provenance::PseudoD2s,
            }],
        )
        .unwrap();
        let sp = realign_sparse(&r.or_merge(&q).unwrap(), &cfg).unwrap();
        assert!(sp.get(0, 2) > s.get(0, 2));
        assert_eq!(sp.get(2, 2), 0.0);
        assert_eq!(sp.n_items(), 3);
    }

    #[test]
    fn ratio_selection_lands_in_band() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (nu, ni) = (300, 200);
        let mut trip = Vec::new();
        for u in 0..nu {
            for i in 0..ni {
                if rng.random_bool(0.4) {
                    trip.push((u, i, 1.0));
                }
            }
        }
        let r = csr_from_triplets(&trip, nu, ni).unwrap();
        let y = Table((0..nu).map(|_| (0..ni).map(|_| rng.random()).collect()).collect());
        let cands = TopkCandidates::collect(&y, &r, 50);
        for p in [0.05, 0.10, 0.15] {
            let (k, ratio) = pick_k_for_ratio(&cands, r.nnz(), p);
            assert!(k > 0);
            assert!(ratio >= p / 2.0 && ratio <= 2.0 * p, "p={p} k={k} ratio={ratio}");
        }
        let cfg = AlignConfig {
            target_pseudo_ratio: Some(0.1),
            ..AlignConfig::default()
        };
        let (rs, (ku, ki)) = s2d_with_config(&y, &r, &cfg).unwrap();
        assert_eq!(ku, ki);
        let ratio = pseudo_ratio(r.nnz(), rs.nnz());
        assert!((0.05..=0.2).contains(&ratio));
    }
}
