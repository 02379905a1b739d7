//! SLIM: a sparse zero-diagonal item-item matrix fitted by one elastic-net
//! regression per target item.
//!
//! Column `i` minimises
//!
//! ```text
//! 1/2 ||r_i - R s_i||^2 + l1 ||s_i||_1 + l2 ||s_i||^2     subject to s_ii = 0
//! ```
//!
//! by cyclic coordinate descent with soft-thresholding. When the dense Gram
//! matrix `R^T R` fits the memory budget every coordinate is visited; otherwise
//! each column is solved against the interaction matrix directly, restricted
//! to the items that co-occur with the target.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{score_row_into, topk_filtered, InteractionMatrix, ScoreVector, SimilarityMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlimConfig {
    pub l1: f64,
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once a full sweep moves no coefficient by more than this.
    pub tol: f64,
    pub nonnegative: bool,
    /// Keep at most this many largest-magnitude coefficients per column; 0 keeps all.
    pub topk_cap: usize,
    /// Largest dense Gram matrix (in MiB) the solver may allocate.
    pub gram_budget_mb: usize,
}

impl Default for SlimConfig {
    fn default() -> Self {
        SlimConfig {
            l1: 1e-3,
            l2: 1e-3,
            max_iters: 100,
            tol: 1e-4,
            nonnegative: false,
            topk_cap: 100,
            gram_budget_mb: 2048,
        }
    }
}

impl SlimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.l2 >= 0.0) {
            return Err(Error::Config("sparse.l1 and sparse.l2 must be >= 0".into()));
        }
        if self.l1 + self.l2 <= 0.0 {
            return Err(Error::Config("sparse.l1 + sparse.l2 must be > 0".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("sparse.tol must be > 0".into()));
        }
        Ok(())
    }

    /// Solver settings without the validity checks, for exact-solve comparisons
    /// (`l1 = l2 = 0` is rejected by [`SlimConfig::validate`]).
    pub fn unregularized(max_iters: usize, tol: f64) -> Self {
        SlimConfig {
            l1: 0.0,
            l2: 0.0,
            max_iters,
            tol,
            nonnegative: false,
            topk_cap: 0,
            ..Default::default()
        }
    }

    fn update(&self, rho: f64, curvature: f64) -> f64 {
        if curvature <= 0.0 {
            return 0.0;
        }
        let shrunk = if rho > self.l1 {
            rho - self.l1
        } else if rho < -self.l1 && !self.nonnegative {
            rho + self.l1
        } else {
            0.0
        };
        shrunk / curvature
    }
}

/// Dense symmetric `R^T R` (weighted entries contribute `w_a * w_b`).
#[derive(Clone, Debug)]
pub struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn from_interactions(r: &InteractionMatrix) -> Self {
        let n = r.n_items();
        let mut data = vec![0.0; n * n];
        for u in 0..r.n_users() {
            let row = r.row(u);
            for (a_pos, (a, wa)) in row.iter().enumerate() {
                let base = a * n;
                for (b, wb) in row.iter().skip(a_pos) {
                    data[base + b] += wa * wb;
                }
            }
        }
        for a in 0..n {
            for b in (a + 1)..n {
                data[b * n + a] = data[a * n + b];
            }
        }
        Gram { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    #[inline]
    fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn bytes_for(n_items: usize) -> usize {
        n_items.saturating_mul(n_items).saturating_mul(8)
    }
}

/// Coordinate-descent state for one column against a precomputed Gram matrix.
pub struct GramColumnSolver<'a> {
    gram: &'a Gram,
    target: usize,
    cfg: &'a SlimConfig,
    coef: Vec<f64>,
    /// `G s`, kept in sync with `coef`.
    gs: Vec<f64>,
    sweeps: usize,
}

impl<'a> GramColumnSolver<'a> {
    pub fn new(gram: &'a Gram, target: usize, cfg: &'a SlimConfig) -> Self {
        GramColumnSolver {
            gram,
            target,
            cfg,
            coef: vec![0.0; gram.n],
            gs: vec![0.0; gram.n],
            sweeps: 0,
        }
    }

    fn visit(&mut self, j: usize) -> f64 {
        let gjj = self.gram.get(j, j);
        let old = self.coef[j];
        let rho = self.gram.get(j, self.target) - self.gs[j] + gjj * old;
        let new = self.cfg.update(rho, gjj + 2.0 * self.cfg.l2);
        let delta = new - old;
        if delta != 0.0 {
            self.coef[j] = new;
            for (acc, &g) in self.gs.iter_mut().zip(self.gram.column(j)) {
                *acc += delta * g;
            }
        }
        delta.abs()
    }

    /// One cyclic pass; over the current nonzeros only when `active_only`.
    /// Returns the largest coefficient change.
    pub fn sweep(&mut self, active_only: bool) -> f64 {
        self.sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..self.gram.n {
            if j == self.target || (active_only && self.coef[j] == 0.0) {
                continue;
            }
            max_delta = max_delta.max(self.visit(j));
        }
        max_delta
    }

    /// Alternates active-set passes with full verification passes.
    pub fn solve(&mut self) {
        while self.sweeps < self.cfg.max_iters {
            let full = self.sweep(false);
            if full < self.cfg.tol {
                return;
            }
            while self.sweeps < self.cfg.max_iters {
                if self.sweep(true) < self.cfg.tol {
                    break;
                }
            }
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coef
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }
}

/// Column solve by residual updates, restricted to items co-occurring with the target.
struct ResidualColumnSolver<'a> {
    r: &'a InteractionMatrix,
    item_users: &'a [Vec<(u32, f64)>],
    col_sq: &'a [f64],
    cfg: &'a SlimConfig,
}

impl ResidualColumnSolver<'_> {
    fn solve(&self, target: usize, residual: &mut [f64]) -> Vec<(usize, f64)> {
        let mut candidates: Vec<usize> = Vec::new();
        for &(u, _) in &self.item_users[target] {
            candidates.extend(self.r.row(u as usize).items.iter().map(|&j| j as usize));
        }
        candidates.sort_unstable();
        candidates.dedup();
        candidates.retain(|&j| j != target);

        for &(u, w) in &self.item_users[target] {
            residual[u as usize] = w;
        }
        let mut coef = vec![0.0; candidates.len()];
        let visit = |k: usize, coef: &mut [f64], residual: &mut [f64]| -> f64 {
            let j = candidates[k];
            let col = &self.item_users[j];
            let old = coef[k];
            let rho: f64 = col.iter().map(|&(u, w)| w * residual[u as usize]).sum::<f64>()
                + self.col_sq[j] * old;
            let new = self.cfg.update(rho, self.col_sq[j] + 2.0 * self.cfg.l2);
            let delta = new - old;
            if delta != 0.0 {
                coef[k] = new;
                for &(u, w) in col {
                    residual[u as usize] -= delta * w;
                }
            }
            delta.abs()
        };
        let mut sweeps = 0;
        'outer: while sweeps < self.cfg.max_iters {
            sweeps += 1;
            let mut full = 0.0f64;
            for k in 0..candidates.len() {
                full = full.max(visit(k, &mut coef, residual));
            }
            if full < self.cfg.tol {
                break;
            }
            while sweeps < self.cfg.max_iters {
                sweeps += 1;
                let mut d = 0.0f64;
                for k in 0..candidates.len() {
                    if coef[k] != 0.0 {
                        d = d.max(visit(k, &mut coef, residual));
                    }
                }
                if d < self.cfg.tol {
                    continue 'outer;
                }
            }
        }
        // restore the scratch residual to zero on every touched user
        for &(u, _) in &self.item_users[target] {
            residual[u as usize] = 0.0;
        }
        for &j in &candidates {
            for &(u, _) in &self.item_users[j] {
                residual[u as usize] = 0.0;
            }
        }
        candidates
            .into_iter()
            .zip(coef)
            .filter(|&(_, c)| c != 0.0)
            .collect()
    }
}

fn cap_column(mut col: Vec<(usize, f64)>, cap: usize) -> Vec<(usize, f64)> {
    if cap == 0 || col.len() <= cap {
        return col;
    }
    let mags: Vec<f64> = col.iter().map(|&(_, v)| v.abs()).collect();
    // magnitudes tie toward the lower item index; col is sorted by index
    let keep = topk_filtered(&mags, cap, |_| true);
    let mut kept: Vec<(usize, f64)> = keep.into_iter().map(|k| col[k]).collect();
    kept.sort_by_key(|&(j, _)| j);
    col.clear();
    kept
}

/// Fits every column in parallel; output is independent of scheduling.
pub fn fit_slim(r: &InteractionMatrix, cfg: &SlimConfig) -> Result<SimilarityMatrix> {
    if r.is_empty() {
        return Err(Error::EmptyInput("interaction matrix has no entries"));
    }
    fit_slim_unchecked(r, cfg)
}

/// As [`fit_slim`] but without configuration validation.
pub fn fit_slim_unchecked(r: &InteractionMatrix, cfg: &SlimConfig) -> Result<SimilarityMatrix> {
    let n = r.n_items();
    let use_gram = Gram::bytes_for(n) <= cfg.gram_budget_mb.saturating_mul(1 << 20);
    log::info!(
        "fitting SLIM on {} x {} ({} nnz) via {}",
        r.n_users(),
        n,
        r.nnz(),
        if use_gram { "dense Gram" } else { "residual updates" }
    );
    let columns: Vec<Vec<(usize, f64)>> = if use_gram {
        let gram = Gram::from_interactions(r);
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut solver = GramColumnSolver::new(&gram, i, cfg);
                solver.solve();
                let col = solver
                    .coefficients()
                    .iter()
                    .enumerate()
                    .filter(|&(_, &v)| v != 0.0)
                    .map(|(j, &v)| (j, v))
                    .collect();
                cap_column(col, cfg.topk_cap)
            })
            .collect()
    } else {
        let mut item_users: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for u in 0..r.n_users() {
            for (i, w) in r.row(u).iter() {
                item_users[i].push((u as u32, w));
            }
        }
        let col_sq: Vec<f64> = item_users
            .iter()
            .map(|c| c.iter().map(|&(_, w)| w * w).sum())
            .collect();
        let solver = ResidualColumnSolver {
            r,
            item_users: &item_users,
            col_sq: &col_sq,
            cfg,
        };
        (0..n)
            .into_par_iter()
            .map_init(
                || vec![0.0; r.n_users()],
                |residual, i| cap_column(solver.solve(i, residual), cfg.topk_cap),
            )
            .collect()
    };
    if columns.iter().flatten().any(|&(_, v)| !v.is_finite()) {
        return Err(Error::Numeric("non-finite SLIM coefficient".into()));
    }
    SimilarityMatrix::from_columns(n, columns)
}

/// Objective of column `target` evaluated directly from `r`.
pub fn slim_objective(r: &InteractionMatrix, target: usize, coef: &[f64], cfg: &SlimConfig) -> f64 {
    let mut loss = 0.0;
    for u in 0..r.n_users() {
        let row = r.row(u);
        let mut pred = 0.0;
        let mut y = 0.0;
        for (j, w) in row.iter() {
            if j == target {
                y = w;
            } else {
                pred += w * coef[j];
            }
        }
        loss += 0.5 * (y - pred) * (y - pred);
    }
    let l1: f64 = coef.iter().map(|c| c.abs()).sum();
    let l2: f64 = coef.iter().map(|c| c * c).sum();
    loss + cfg.l1 * l1 + cfg.l2 * l2
}

/// Sparse-view scores for `user` with the user's own items masked to `-inf`.
pub fn predict_sparse(r: &InteractionMatrix, s: &SimilarityMatrix, user: usize) -> Result<ScoreVector> {
    if r.n_items() != s.n_items() {
        return Err(Error::Shape(format!(
            "interaction matrix has {} items, similarity matrix {}",
            r.n_items(),
            s.n_items()
        )));
    }
    let mut scores = vec![0.0; r.n_items()];
    score_row_into(r, s, user, &mut scores);
    let mut sv = ScoreVector { user, scores };
    sv.mask(r.row(user).items);
    Ok(sv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::csr_from_triplets;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_binary(rng: &mut ChaCha8Rng, users: usize, items: usize, p: f64) -> InteractionMatrix {
        let mut t = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if rng.random_bool(p) {
                    t.push((u, i, 1.0));
                }
            }
        }
        csr_from_triplets(&t, users, items).unwrap()
    }

    /// Solves `(A_{-i}^T A_{-i} + 2 l2 I) s = A_{-i}^T r_i` by Gaussian elimination.
    fn ridge_oracle(r: &InteractionMatrix, target: usize, l2: f64) -> Vec<f64> {
        let n = r.n_items();
        let mut dense = vec![vec![0.0; n]; r.n_users()];
        for (u, i, w) in r.to_triplets() {
            dense[u][i] = w;
        }
        let idx: Vec<usize> = (0..n).filter(|&j| j != target).collect();
        let m = idx.len();
        let mut a = vec![vec![0.0; m + 1]; m];
        for (p, &jp) in idx.iter().enumerate() {
            for (q, &jq) in idx.iter().enumerate() {
                a[p][q] = dense.iter().map(|row| row[jp] * row[jq]).sum::<f64>();
            }
            a[p][p] += 2.0 * l2;
            a[p][m] = dense.iter().map(|row| row[jp] * row[target]).sum::<f64>();
        }
        for c in 0..m {
            let piv = (c..m).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
            a.swap(c, piv);
            for rr in 0..m {
                if rr != c {
                    let f = a[rr][c] / a[c][c];
                    for k in c..=m {
                        a[rr][k] -= f * a[c][k];
                    }
                }
            }
        }
        let mut s = vec![0.0; n];
        for (p, &j) in idx.iter().enumerate() {
            s[j] = a[p][m] / a[p][p];
        }
        s
    }

    #[test]
    fn orthogonal_columns_with_strong_l1_give_zero_matrix() {
        // each user touches exactly one item: no co-occurrence
        let t: Vec<_> = (0..6).map(|u| (u, u % 3, 1.0)).collect();
        let r = csr_from_triplets(&t, 6, 3).unwrap();
        let cfg = SlimConfig { l1: 10.0, ..Default::default() };
        assert_eq!(fit_slim(&r, &cfg).unwrap().nnz(), 0);
    }

    #[test]
    fn toy_ridge_matches_normal_equations() {
        let r = csr_from_triplets(
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0), (2, 2, 1.0), (3, 0, 1.0), (3, 1, 1.0), (3, 2, 1.0)],
            4,
            3,
        )
        .unwrap();
        let cfg = SlimConfig {
            l1: 0.0,
            l2: 0.1,
            max_iters: 100_000,
            tol: 1e-13,
            topk_cap: 0,
            ..Default::default()
        };
        let s = fit_slim(&r, &cfg).unwrap();
        for i in 0..3 {
            let oracle = ridge_oracle(&r, i, 0.1);
            for j in 0..3 {
                assert!((s.get(j, i) - oracle[j]).abs() < 1e-6, "s[{j},{i}]");
            }
        }
    }

    #[test]
    fn identical_columns_pick_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = random_binary(&mut rng, 30, 5, 0.3);
        // item 5 duplicates item 2
        let mut t = base.to_triplets();
        t.extend(base.to_triplets().into_iter().filter(|e| e.1 == 2).map(|(u, _, w)| (u, 5, w)));
        let r = csr_from_triplets(&t, 30, 6).unwrap();
        let cfg = SlimConfig { l1: 0.01, l2: 0.01, max_iters: 1000, tol: 1e-9, ..Default::default() };
        let s = fit_slim(&r, &cfg).unwrap();
        let col: Vec<f64> = (0..6).map(|j| s.get(j, 5)).collect();
        let best = (0..6).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap();
        assert_eq!(best, 2, "column 5 = {col:?}");
    }

    #[test]
    fn objective_is_non_increasing_per_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let r = random_binary(&mut rng, 25, 8, 0.35);
            let gram = Gram::from_interactions(&r);
            let cfg = SlimConfig {
                l1: rng.random_range(0.0..2.0),
                l2: rng.random_range(0.0..1.0),
                nonnegative: trial % 2 == 0,
                ..Default::default()
            };
            for target in 0..8 {
                let mut solver = GramColumnSolver::new(&gram, target, &cfg);
                let mut prev = slim_objective(&r, target, solver.coefficients(), &cfg);
                for sweep in 0..30 {
                    solver.sweep(sweep % 3 == 1);
                    let obj = slim_objective(&r, target, solver.coefficients(), &cfg);
                    assert!(obj <= prev + 1e-10, "trial {trial} col {target}: {prev} -> {obj}");
                    prev = obj;
                }
                assert_eq!(solver.coefficients()[target], 0.0);
            }
        }
    }

    #[test]
    fn unregularized_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // tall random instance so every column-excluded design has full rank
        let r = random_binary(&mut rng, 60, 5, 0.5);
        let cfg = SlimConfig::unregularized(200_000, 1e-14);
        let s = fit_slim_unchecked(&r, &cfg).unwrap();
        for i in 0..5 {
            let oracle = ridge_oracle(&r, i, 0.0);
            for j in 0..5 {
                assert!((s.get(j, i) - oracle[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nonnegative_mode_has_no_negative_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_binary(&mut rng, 40, 10, 0.3);
        let cfg = SlimConfig { l1: 0.1, nonnegative: true, ..Default::default() };
        let s = fit_slim(&r, &cfg).unwrap();
        assert!(s.triplets().all(|(_, _, v)| v > 0.0));
        let signed = fit_slim(&r, &SlimConfig { l1: 0.1, ..Default::default() }).unwrap();
        assert!(signed.triplets().any(|(_, _, v)| v < 0.0));
    }

    #[test]
    fn topk_cap_bounds_column_nnz() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let r = random_binary(&mut rng, 50, 12, 0.4);
        let cfg = SlimConfig { topk_cap: 3, ..Default::default() };
        let s = fit_slim(&r, &cfg).unwrap();
        assert!(s.max_column_nnz() <= 3);
        let full = fit_slim(&r, &SlimConfig { topk_cap: 0, ..Default::default() }).unwrap();
        for i in 0..12 {
            let (rows, _) = s.column(i);
            let mut mags: Vec<f64> = full.column(i).1.iter().map(|v| v.abs()).collect();
            mags.sort_by(|a, b| b.total_cmp(a));
            for &j in rows {
                assert!(full.get(j as usize, i).abs() >= mags[rows.len() - 1]);
            }
        }
    }

    #[test]
    fn residual_path_agrees_with_gram_path_in_nonnegative_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = random_binary(&mut rng, 40, 15, 0.2);
        let cfg = SlimConfig { l1: 0.2, l2: 0.1, nonnegative: true, tol: 1e-12, max_iters: 10_000, ..Default::default() };
        let gram = fit_slim(&r, &cfg).unwrap();
        let resid = fit_slim(&r, &SlimConfig { gram_budget_mb: 0, ..cfg.clone() }).unwrap();
        assert_eq!(gram.nnz(), resid.nnz());
        for (j, i, v) in gram.triplets() {
            assert!((resid.get(j, i) - v).abs() < 1e-9);
        }
    }

    #[test]
    fn column_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = random_binary(&mut rng, 30, 9, 0.3);
        let cfg = SlimConfig::default();
        let gram = Gram::from_interactions(&r);
        let forward: Vec<Vec<f64>> = (0..9)
            .map(|i| {
                let mut s = GramColumnSolver::new(&gram, i, &cfg);
                s.solve();
                s.coefficients().to_vec()
            })
            .collect();
        let parallel = fit_slim(&r, &SlimConfig { topk_cap: 0, ..cfg.clone() }).unwrap();
        for i in (0..9).rev() {
            for j in 0..9 {
                assert_eq!(parallel.get(j, i), forward[i][j]);
            }
        }
    }

    #[test]
    fn empty_input_and_bad_config() {
        let r = InteractionMatrix::empty(3, 3);
        assert!(matches!(fit_slim(&r, &SlimConfig::default()), Err(Error::EmptyInput(_))));
        let bad = SlimConfig { l1: 0.0, l2: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn predict_sparse_examples() {
        let r = csr_from_triplets(&[(0, 0, 1.0)], 2, 3).unwrap();
        let s = SimilarityMatrix::from_columns(3, vec![vec![], vec![(0, 0.7)], vec![]]).unwrap();
        let sv = predict_sparse(&r, &s, 0).unwrap();
        assert_eq!(sv.scores[1], 0.7);
        assert_eq!(sv.scores[0], f64::NEG_INFINITY);
        let cold = predict_sparse(&r, &s, 1).unwrap();
        assert_eq!(cold.scores, vec![0.0; 3]);
        assert!(predict_sparse(&r, &SimilarityMatrix::zeros(2), 0).is_err());
    }

    #[test]
    fn predict_sparse_matches_dense_oracle_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let r = random_binary(&mut rng, 6, 6, 0.4);
        let s = fit_slim(&random_binary(&mut rng, 20, 6, 0.4), &SlimConfig::default()).unwrap();
        let sd = s.to_dense();
        for u in 0..6 {
            let sv = predict_sparse(&r, &s, u).unwrap();
            for i in 0..6 {
                if r.contains(u, i) {
                    assert_eq!(sv.scores[i], f64::NEG_INFINITY);
                } else {
                    let oracle: f64 = r.row(u).iter().map(|(j, w)| w * sd[j][i]).sum();
                    assert!((sv.scores[i] - oracle).abs() < 1e-12);
                }
            }
        }
    }
}
