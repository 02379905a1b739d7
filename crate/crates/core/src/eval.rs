//! Score fusion, all-items ranking metrics, popularity buckets and margin SNR.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Bucket, PopularityBuckets};
use crate::error::{Error, Result};
use crate::matrix::{topk_excluding_sorted, InteractionMatrix, ScoreVector};
use crate::scoring::{FusedScorer, Scorer};

/// Weights on the sparse score tried by [`beta_search`] unless configured otherwise.
pub const BETA_GRID: [f64; 11] = [1.0, 3.0, 5.0, 10.0, 15.0, 20.0, 50.0, 100.0, 200.0, 1e3, 1e4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Used as is when `beta_search` is empty.
    pub beta: f64,
    pub beta_search: Vec<f64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            beta: 1.0,
            beta_search: BETA_GRID.to_vec(),
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || self.beta_search.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
            return Err(Error::Config("fusion weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// `y_dense + beta * y_sparse`.
pub fn fuse(y_dense: &ScoreVector, y_sparse: &ScoreVector, beta: f64) -> Result<ScoreVector> {
    if y_dense.len() != y_sparse.len() {
        return Err(Error::Shape(format!(
            "score vectors of length {} and {}",
            y_dense.len(),
            y_sparse.len()
        )));
    }
    let scores = y_dense
        .scores
        .iter()
        .zip(&y_sparse.scores)
        .map(|(d, s)| d + beta * s)
        .collect();
    Ok(ScoreVector {
        user: y_dense.user,
        scores,
    })
}

fn hits_in_top(ranked: &[usize], test_items: &[u32], k: usize) -> usize {
    ranked
        .iter()
        .take(k)
        .filter(|&&i| test_items.binary_search(&(i as u32)).is_ok())
        .count()
}

/// `|top-k ∩ test| / |test|`; `None` when the user has no test items.
/// `test_items` must be sorted.
pub fn recall_at_k(ranked: &[usize], test_items: &[u32], k: usize) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    Some(hits_in_top(ranked, test_items, k) as f64 / test_items.len() as f64)
}

fn discount(position: usize) -> f64 {
    1.0 / ((position + 1) as f64).log2()
}

/// Binary-relevance NDCG with `1 / log2(p + 1)` discounts at 1-based positions.
pub fn ndcg_at_k(ranked: &[usize], test_items: &[u32], k: usize) -> Option<f64> {
    if test_items.is_empty() {
        return None;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &i)| test_items.binary_search(&(i as u32)).is_ok())
        .map(|(p, _)| discount(p + 1))
        .sum();
    let idcg: f64 = (1..=k.min(test_items.len())).map(discount).sum();
    Some(dcg / idcg)
}

/// Means over the users with at least one relevant test item.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub users: usize,
    pub test_items: usize,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Total hits in the top-k, per cutoff.
    pub hits: Vec<u64>,
}

impl MetricSet {
    fn zeros(n_k: usize) -> Self {
        MetricSet {
            users: 0,
            test_items: 0,
            recall: vec![0.0; n_k],
            ndcg: vec![0.0; n_k],
            hits: vec![0; n_k],
        }
    }

    fn add(&mut self, other: &MetricSet) {
        self.users += other.users;
        self.test_items += other.test_items;
        for j in 0..self.recall.len() {
            self.recall[j] += other.recall[j];
            self.ndcg[j] += other.ndcg[j];
            self.hits[j] += other.hits[j];
        }
    }

    fn finish(&mut self) {
        if self.users > 0 {
            let n = self.users as f64;
            self.recall.iter_mut().for_each(|v| *v /= n);
            self.ndcg.iter_mut().for_each(|v| *v /= n);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub ks: Vec<usize>,
    pub overall: MetricSet,
    /// Indexed by [`Bucket::index`].
    pub buckets: Vec<MetricSet>,
    /// Wall-clock time; kept out of persisted output so reruns are byte-identical.
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl MetricsReport {
    fn position(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|j| self.overall.recall[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.position(k).map(|j| self.overall.ndcg[j])
    }

    pub fn bucket(&self, b: Bucket) -> &MetricSet {
        &self.buckets[b.index()]
    }

    pub fn bucket_recall_at(&self, b: Bucket, k: usize) -> Option<f64> {
        self.position(k).map(|j| self.bucket(b).recall[j])
    }

    /// `key=value` lines: `recall@K`, `ndcg@K`, `hits@K`, and the same under
    /// `<bucket>.` prefixes, plus `users` and `test_items`.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label={}", self.label);
        let mut section = |prefix: &str, m: &MetricSet| {
            let _ = writeln!(out, "{prefix}users={}", m.users);
            let _ = writeln!(out, "{prefix}test_items={}", m.test_items);
            for (j, k) in self.ks.iter().enumerate() {
                let _ = writeln!(out, "{prefix}recall@{k}={:.6}", m.recall[j]);
                let _ = writeln!(out, "{prefix}ndcg@{k}={:.6}", m.ndcg[j]);
                let _ = writeln!(out, "{prefix}hits@{k}={}", m.hits[j]);
            }
        };
        section("", &self.overall);
        for b in Bucket::ALL {
            section(&format!("{}.", b.name()), &self.buckets[b.index()]);
        }
        out
    }

    /// Tab-separated `bucket metric k value` rows, `all` for the overall scope.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("bucket\tmetric\tk\tvalue\n");
        let scopes = std::iter::once(("all", &self.overall))
            .chain(Bucket::ALL.iter().map(|b| (b.name(), &self.buckets[b.index()])));
        for (name, m) in scopes {
            for (j, k) in self.ks.iter().enumerate() {
                let _ = writeln!(out, "{name}\trecall\t{k}\t{:.6}", m.recall[j]);
                let _ = writeln!(out, "{name}\tndcg\t{k}\t{:.6}", m.ndcg[j]);
            }
        }
        out
    }
}

struct UserEval {
    overall: MetricSet,
    buckets: [MetricSet; 3],
}

fn evaluate_user(ranked: &[usize], test_items: &[u32], buckets: &PopularityBuckets, ks: &[usize]) -> UserEval {
    let scope = |items: &[u32]| {
        let mut m = MetricSet::zeros(ks.len());
        if items.is_empty() {
            return m;
        }
        m.users = 1;
        m.test_items = items.len();
        for (j, &k) in ks.iter().enumerate() {
            let hits = hits_in_top(ranked, items, k);
            m.hits[j] = hits as u64;
            m.recall[j] = hits as f64 / items.len() as f64;
            m.ndcg[j] = ndcg_at_k(ranked, items, k).unwrap_or(0.0);
        }
        m
    };
    let mut split: [Vec<u32>; 3] = Default::default();
    for &i in test_items {
        split[buckets.bucket(i as usize).index()].push(i);
    }
    UserEval {
        overall: scope(test_items),
        buckets: [scope(&split[0]), scope(&split[1]), scope(&split[2])],
    }
}

/// All-items ranking evaluation: every item in `mask` for the user is removed,
/// the rest are ranked by `scorer`, and metrics are computed against `test`.
/// Bucket metrics use only the test items falling in that bucket.
pub fn evaluate(
    label: &str,
    scorer: &impl Scorer,
    mask: &InteractionMatrix,
    test: &InteractionMatrix,
    buckets: &PopularityBuckets,
    ks: &[usize],
) -> Result<MetricsReport> {
    mask.check_same_shape(test)?;
    if scorer.n_items() != test.n_items() {
        return Err(Error::Shape("scorer and test split disagree on the item count".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("eval cutoffs must be a nonempty list of positive integers".into()));
    }
    let start = Instant::now();
    let max_k = *ks.iter().max().unwrap();
    let users: Vec<usize> = (0..test.n_users()).filter(|&u| !test.row(u).is_empty()).collect();
    let per_user: Vec<UserEval> = users
        .par_iter()
        .map_init(
            || vec![0.0; test.n_items()],
            |scores, &u| {
                scorer.score_into(u, scores);
                let ranked = topk_excluding_sorted(scores, max_k, mask.row(u).items);
                evaluate_user(&ranked, test.row(u).items, buckets, ks)
            },
        )
        .collect();
    let mut overall = MetricSet::zeros(ks.len());
    let mut per_bucket = vec![MetricSet::zeros(ks.len()); 3];
    for e in &per_user {
        overall.add(&e.overall);
        for (acc, m) in per_bucket.iter_mut().zip(&e.buckets) {
            acc.add(m);
        }
    }
    overall.finish();
    per_bucket.iter_mut().for_each(MetricSet::finish);
    Ok(MetricsReport {
        label: label.to_string(),
        ks: ks.to_vec(),
        overall,
        buckets: per_bucket,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaSearch {
    pub best_beta: f64,
    /// `(beta, mean Recall@k)` on the tuning split, in search order.
    pub curve: Vec<(f64, f64)>,
}

/// Picks the `beta` maximizing mean Recall@`k` on `tuning`; ties go to the
/// smallest `beta`. Both views are scored once per user.
pub fn beta_search(
    dense: &impl Scorer,
    sparse: &impl Scorer,
    mask: &InteractionMatrix,
    tuning: &InteractionMatrix,
    betas: &[f64],
    k: usize,
) -> Result<BetaSearch> {
    if betas.is_empty() {
        return Err(Error::Config("fusion.beta_search is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("beta search cutoff must be positive".into()));
    }
    mask.check_same_shape(tuning)?;
    let n_items = tuning.n_items();
    let users: Vec<usize> = (0..tuning.n_users()).filter(|&u| !tuning.row(u).is_empty()).collect();
    if users.is_empty() {
        return Err(Error::EmptyInput("tuning split has no users"));
    }
    let per_user: Vec<Vec<f64>> = users
        .par_iter()
        .map_init(
            || (vec![0.0; n_items], vec![0.0; n_items], vec![0.0; n_items]),
            |(yd, ys, fused), &u| {
                dense.score_into(u, yd);
                sparse.score_into(u, ys);
                betas
                    .iter()
                    .map(|&b| {
                        for i in 0..n_items {
                            fused[i] = yd[i] + b * ys[i];
                        }
                        let ranked = topk_excluding_sorted(fused, k, mask.row(u).items);
                        recall_at_k(&ranked, tuning.row(u).items, k).unwrap_or(0.0)
                    })
                    .collect()
            },
        )
        .collect();
    let n = users.len() as f64;
    let curve: Vec<(f64, f64)> = betas
        .iter()
        .enumerate()
        .map(|(j, &b)| (b, per_user.iter().map(|r| r[j]).sum::<f64>() / n))
        .collect();
    let mut best = curve[0];
    for &(b, rec) in &curve[1..] {
        if rec > best.1 || (rec == best.1 && b < best.0) {
            best = (b, rec);
        }
    }
    Ok(BetaSearch {
        best_beta: best.0,
        curve,
    })
}

/// Streaming first and second moments of paired samples `(a, b)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairMoments {
    pub n: u64,
    mean_a: f64,
    mean_b: f64,
    m2_a: f64,
    m2_b: f64,
    c_ab: f64,
}

impl PairMoments {
    pub fn push(&mut self, a: f64, b: f64) {
        self.n += 1;
        let n = self.n as f64;
        let da = a - self.mean_a;
        let db = b - self.mean_b;
        self.mean_a += da / n;
        self.mean_b += db / n;
        self.m2_a += da * (a - self.mean_a);
        self.m2_b += db * (b - self.mean_b);
        self.c_ab += da * (b - self.mean_b);
    }

    /// Combines two disjoint sample sets.
    pub fn merge(&mut self, o: &PairMoments) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (n1, n2) = (self.n as f64, o.n as f64);
        let n = n1 + n2;
        let da = o.mean_a - self.mean_a;
        let db = o.mean_b - self.mean_b;
        self.m2_a += o.m2_a + da * da * n1 * n2 / n;
        self.m2_b += o.m2_b + db * db * n1 * n2 / n;
        self.c_ab += o.c_ab + da * db * n1 * n2 / n;
        self.mean_a += da * n2 / n;
        self.mean_b += db * n2 / n;
        self.n += o.n;
    }

    fn denom(&self) -> f64 {
        (self.n.max(2) - 1) as f64
    }

    /// Mean and sample variance of `wa * a + wb * b`.
    pub fn combination(&self, wa: f64, wb: f64) -> (f64, f64) {
        let mean = wa * self.mean_a + wb * self.mean_b;
        let var = (wa * wa * self.m2_a + wb * wb * self.m2_b + 2.0 * wa * wb * self.c_ab) / self.denom();
        (mean, var.max(0.0))
    }

    /// Pearson correlation; `None` when either series is constant or `n < 3`.
    pub fn correlation(&self) -> Option<f64> {
        if self.n < 3 || self.m2_a <= 0.0 || self.m2_b <= 0.0 {
            return None;
        }
        Some((self.c_ab / (self.m2_a * self.m2_b).sqrt()).clamp(-1.0, 1.0))
    }
}

/// `mean / std` of a margin distribution. A zero-variance sample reports
/// `+inf` with the flag set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snr {
    pub value: f64,
    pub zero_variance: bool,
}

impl Snr {
    pub fn from_moments(mean: f64, var: f64) -> Snr {
        // relative cutoff so rounding noise of a constant series counts as zero
        if var <= 1e-24 * mean.abs().max(1.0).powi(2) {
            Snr {
                value: f64::INFINITY,
                zero_variance: true,
            }
        } else {
            Snr {
                value: mean / var.sqrt(),
                zero_variance: false,
            }
        }
    }
}

/// Paired margin moments for two views over identical `(u, i+, i-)` draws,
/// overall and by the bucket of the positive item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginMoments {
    pub k_neg: usize,
    pub seed: u64,
    pub overall: PairMoments,
    /// Indexed by [`Bucket::index`].
    pub buckets: [PairMoments; 3],
}

fn sample_negative<R: Rng>(rng: &mut R, n_items: u32, a: &[u32], b: &[u32]) -> u32 {
    loop {
        let j = rng.random_range(0..n_items);
        if a.binary_search(&j).is_err() && b.binary_search(&j).is_err() {
            return j;
        }
    }
}

/// For each test positive, `k_neg` negatives are drawn uniformly from items the
/// user has in neither `train` nor `test`; margins `y(u,i+) - y(u,i-)` are
/// accumulated for both views. Random streams are keyed by user so results do
/// not depend on thread scheduling.
#[allow(clippy::too_many_arguments)]
pub fn margin_moments(
    view_a: &impl Scorer,
    view_b: &impl Scorer,
    train: &InteractionMatrix,
    test: &InteractionMatrix,
    buckets: &PopularityBuckets,
    k_neg: usize,
    seed: u64,
) -> Result<MarginMoments> {
    if k_neg < 2 {
        return Err(Error::Precondition("k_neg must be at least 2".into()));
    }
    train.check_same_shape(test)?;
    let n_items = test.n_items();
    let users: Vec<usize> = (0..test.n_users())
        .filter(|&u| !test.row(u).is_empty() && train.row(u).len() + test.row(u).len() < n_items)
        .collect();
    let per_user: Vec<[PairMoments; 3]> = users
        .par_iter()
        .map_init(
            || (vec![0.0; n_items], vec![0.0; n_items]),
            |(ya, yb), &u| {
                view_a.score_into(u, ya);
                view_b.score_into(u, yb);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u as u64);
                let (tr, te) = (train.row(u).items, test.row(u).items);
                let mut acc = [PairMoments::default(); 3];
                for &p in te {
                    let slot = &mut acc[buckets.bucket(p as usize).index()];
                    let (pa, pb) = (ya[p as usize], yb[p as usize]);
                    for _ in 0..k_neg {
                        let j = sample_negative(&mut rng, n_items as u32, tr, te) as usize;
                        slot.push(pa - ya[j], pb - yb[j]);
                    }
                }
                acc
            },
        )
        .collect();
    let mut bucket_acc = [PairMoments::default(); 3];
    for acc in &per_user {
        for (t, s) in bucket_acc.iter_mut().zip(acc) {
            t.merge(s);
        }
    }
    let mut overall = PairMoments::default();
    for b in &bucket_acc {
        overall.merge(b);
    }
    Ok(MarginMoments {
        k_neg,
        seed,
        overall,
        buckets: bucket_acc,
    })
}

/// SNR of a single view, overall and per bucket.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSnr {
    pub overall: Snr,
    pub buckets: [Snr; 3],
}

struct ZeroScorer(usize);

impl Scorer for ZeroScorer {
    fn n_items(&self) -> usize {
        self.0
    }
    fn score_into(&self, _user: usize, out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub fn snr_estimate(
    scorer: &impl Scorer,
    train: &InteractionMatrix,
    test: &InteractionMatrix,
    buckets: &PopularityBuckets,
    k_neg: usize,
    seed: u64,
) -> Result<ViewSnr> {
    let m = margin_moments(scorer, &ZeroScorer(scorer.n_items()), train, test, buckets, k_neg, seed)?;
    let snr = |p: &PairMoments| {
        let (mean, var) = p.combination(1.0, 0.0);
        Snr::from_moments(mean, var)
    };
    Ok(ViewSnr {
        overall: snr(&m.overall),
        buckets: [snr(&m.buckets[0]), snr(&m.buckets[1]), snr(&m.buckets[2])],
    })
}

/// Pearson correlation of paired margins.
pub fn margin_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} versus {} margins", a.len(), b.len())));
    }
    if a.len() < 3 {
        return Err(Error::Precondition("correlation needs at least three pairs".into()));
    }
    let mut m = PairMoments::default();
    for (&x, &y) in a.iter().zip(b) {
        m.push(x, y);
    }
    m.correlation().ok_or(Error::CorrelationUndefined("a margin series has zero variance"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrRow {
    pub scope: String,
    pub margins: u64,
    pub dense: Snr,
    pub sparse: Snr,
    pub fused: Snr,
    pub rho: Option<f64>,
}

/// Per-view and fused SNR with the cross-view margin correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    pub label: String,
    pub k_neg: usize,
    pub beta: f64,
    /// `overall` first, then one row per bucket.
    pub rows: Vec<SnrRow>,
}

impl SnrReport {
    /// `view_a` of the moments is the dense view; the fused margin is
    /// `a + beta * b`, exact because fusion is linear.
    pub fn from_moments(label: &str, m: &MarginMoments, beta: f64) -> SnrReport {
        let row = |scope: &str, p: &PairMoments| {
            let snr = |wa: f64, wb: f64| {
                let (mean, var) = p.combination(wa, wb);
                Snr::from_moments(mean, var)
            };
            SnrRow {
                scope: scope.to_string(),
                margins: p.n,
                dense: snr(1.0, 0.0),
                sparse: snr(0.0, 1.0),
                fused: snr(1.0, beta),
                rho: p.correlation(),
            }
        };
        let mut rows = vec![row("overall", &m.overall)];
        for b in Bucket::ALL {
            rows.push(row(b.name(), &m.buckets[b.index()]));
        }
        SnrReport {
            label: label.to_string(),
            k_neg: m.k_neg,
            beta,
            rows,
        }
    }

    pub fn row(&self, scope: &str) -> Option<&SnrRow> {
        self.rows.iter().find(|r| r.scope == scope)
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "label={}", self.label);
        let _ = writeln!(out, "k_neg={}", self.k_neg);
        let _ = writeln!(out, "beta={}", self.beta);
        for r in &self.rows {
            let s = &r.scope;
            let _ = writeln!(out, "{s}.margins={}", r.margins);
            for (name, v) in [("dense", r.dense), ("sparse", r.sparse), ("fused", r.fused)] {
                let _ = writeln!(out, "{s}.snr_{name}={:.6}", v.value);
                if v.zero_variance {
                    let _ = writeln!(out, "{s}.snr_{name}.zero_variance=true");
                }
            }
            match r.rho {
                Some(rho) => {
                    let _ = writeln!(out, "{s}.rho={rho:.6}");
                }
                None => {
                    let _ = writeln!(out, "{s}.rho=undefined");
                }
            }
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("scope\tmargins\tsnr_dense\tsnr_sparse\tsnr_fused\trho\n");
        for r in &self.rows {
            let rho = r.rho.map_or("nan".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{rho}",
                r.scope, r.margins, r.dense.value, r.sparse.value, r.fused.value
            );
        }
        out
    }
}

/// Fused scorer over two views at a given weight.
pub fn fused<'a, D: Scorer, S: Scorer>(dense: &'a D, sparse: &'a S, beta: f64) -> FusedScorer<&'a D, &'a S> {
    FusedScorer { dense, sparse, beta }
}
