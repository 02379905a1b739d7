//! Closed-form fusion SNR and Monte-Carlo checks of the margin-noise analysis.
//!
//! Every simulator draws Gaussian noise from a seeded ChaCha stream, so results
//! are reproducible. Scaling laws are checked through log-log regression slopes
//! on fixed grids.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::PairMoments;

/// Mean and standard deviation of one view's margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ViewStats {
    pub mu: f64,
    pub sigma: f64,
}

impl ViewStats {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::Precondition(format!("view needs sigma > 0 and finite mu, got ({mu}, {sigma})")));
        }
        Ok(ViewStats { mu, sigma })
    }

    pub fn r(&self) -> f64 {
        self.mu / self.sigma
    }
}

/// Reference noise model: item-embedding noise covariance `c / N I`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NoiseModel {
    pub c: f64,
    /// Interactions of the item.
    pub n_i: usize,
    /// Effective neighbours in the sparse aggregation.
    pub k_i: usize,
    /// Pseudo-interactions added to the item.
    pub eta: usize,
    /// Extra neighbours added to the aggregation.
    pub kappa: usize,
    /// Label noise rate of the pseudo-interactions.
    pub eps: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            c: 1.0,
            n_i: 16,
            k_i: 16,
            eta: 0,
            kappa: 0,
            eps: 0.0,
        }
    }
}

/// SNR of the convex blend `alpha a + (1 - alpha) b`.
pub fn snr_fusion(alpha: f64, v1: ViewStats, v2: ViewStats, rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&alpha) || !(-1.0..=1.0).contains(&rho) {
        return Err(Error::Precondition(format!("alpha {alpha} or rho {rho} out of range")));
    }
    let b = 1.0 - alpha;
    let var = alpha * alpha * v1.sigma * v1.sigma + b * b * v2.sigma * v2.sigma + 2.0 * alpha * b * rho * v1.sigma * v2.sigma;
    if !(var > 0.0) {
        return Err(Error::DegenerateBlend { alpha });
    }
    Ok((alpha * v1.mu + b * v2.mu) / var.sqrt())
}

/// `sqrt((r1^2 + r2^2 - 2 rho r1 r2) / (1 - rho^2))`.
pub fn fusion_envelope(r1: f64, r2: f64, rho: f64) -> Result<f64> {
    if rho.abs() >= 1.0 {
        return Err(Error::SingularCorrelation);
    }
    Ok(((r1 * r1 + r2 * r2 - 2.0 * rho * r1 * r2) / (1.0 - rho * rho)).max(0.0).sqrt())
}

/// Grid maximum of [`snr_fusion`] over `alpha = j / steps`, optionally
/// restricted to the open interval. Returns `(alpha, snr)`.
pub fn best_convex_snr(v1: ViewStats, v2: ViewStats, rho: f64, steps: usize, interior: bool) -> Result<(f64, f64)> {
    let range = if interior { 1..steps } else { 0..steps + 1 };
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for j in range {
        let a = j as f64 / steps as f64;
        let s = snr_fusion(a, v1, v2, rho)?;
        if s > best.1 {
            best = (a, s);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RhoThreshold {
    pub threshold: f64,
    pub verified: bool,
    /// `(rho, best interior SNR - max(r1, r2))` along the tested grid.
    pub grid: Vec<(f64, f64)>,
}

/// Checks that an interior blend beats the stronger view exactly when
/// `rho < r_min / r_max`, on a rho grid straddling the threshold.
pub fn rho_threshold_check(v1: ViewStats, v2: ViewStats) -> Result<RhoThreshold> {
    let (r1, r2) = (v1.r(), v2.r());
    if !(r1 > 0.0 && r2 > 0.0) {
        return Err(Error::Precondition("both views need a positive SNR".into()));
    }
    let (rmin, rmax) = (r1.min(r2), r1.max(r2));
    let threshold = rmin / rmax;
    let mut grid = Vec::new();
    let mut verified = true;
    for j in 0..=40 {
        let rho = -0.2 + 1.18 * j as f64 / 40.0;
        if rho >= 1.0 || (rho - threshold).abs() < 0.02 {
            continue;
        }
        let (_, best) = best_convex_snr(v1, v2, rho, 10_000, true)?;
        let gain = best - rmax;
        grid.push((rho, gain));
        if (gain > 0.0) != (rho < threshold) {
            verified = false;
        }
    }
    Ok(RhoThreshold {
        threshold,
        verified,
        grid,
    })
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, d, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Empirical SNR of `x` from `trials` draws.
fn empirical_snr(trials: usize, mut draw: impl FnMut() -> f64) -> f64 {
    let mut m = PairMoments::default();
    for _ in 0..trials {
        m.push(draw(), 0.0);
    }
    let (mean, var) = m.combination(1.0, 0.0);
    mean / var.sqrt()
}

/// Slope of `ln y` against `ln x` by least squares.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SingleViewRun {
    pub empirical_snr: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Margins `e_u . [(e_i* - e_j*) + (eps_i - eps_j)]` with `eps_i ~ N(0, c/N_i I)`
/// and `eps_j` drawn with `n_j` interactions; compares the empirical SNR to
/// `gap sqrt(N_i / c)`.
pub fn simulate_single_view(noise: &NoiseModel, gap: f64, n_j: usize, dim: usize, user_norm: f64, trials: usize, seed: u64) -> SingleViewRun {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eu: Vec<f64> = unit_vec(&mut rng, dim).into_iter().map(|x| x * user_norm).collect();
    let diff: Vec<f64> = unit_vec(&mut rng, dim).into_iter().map(|x| x * gap).collect();
    let si = (noise.c / noise.n_i as f64).sqrt();
    let sj = (noise.c / n_j as f64).sqrt();
    let empirical_snr = empirical_snr(trials, || {
        let ei = gaussian_vec(&mut rng, dim, si);
        let ej = gaussian_vec(&mut rng, dim, sj);
        let noise: Vec<f64> = ei.iter().zip(&ej).map(|(a, b)| a - b).collect();
        dot(&eu, &diff) + dot(&eu, &noise)
    });
    let bound = gap / noise.c.sqrt() * (noise.n_i as f64).sqrt();
    SingleViewRun {
        empirical_snr,
        bound,
        within_bound: empirical_snr <= bound * (1.0 + 3.0 / (trials as f64).sqrt()),
    }
}

/// Degree-normalized margin `(e_u.e_i / sqrt(d_i) - e_u.e_j / sqrt(d_j)) / sqrt(d_u)`.
/// The negative item has true score zero, so its `d_j` term carries only noise;
/// with `n_j` large the item factor `d_i` cancels.
#[allow(clippy::too_many_arguments)]
pub fn simulate_degree_normalized(
    noise: &NoiseModel,
    degrees: (f64, f64, f64),
    n_j: usize,
    dim: usize,
    trials: usize,
    seed: u64,
) -> f64 {
    let (du, di, dj) = degrees;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eu = unit_vec(&mut rng, dim);
    // true positive score 1 along e_u, negative orthogonal to e_u
    let ei_star = eu.clone();
    let si = (noise.c / noise.n_i as f64).sqrt();
    let sj = (noise.c / n_j as f64).sqrt();
    empirical_snr(trials, || {
        let ei = gaussian_vec(&mut rng, dim, si);
        let ej = gaussian_vec(&mut rng, dim, sj);
        let zi = dot(&eu, &ei_star) + dot(&eu, &ei);
        let zj = dot(&eu, &ej);
        (zi / di.sqrt() - zj / dj.sqrt()) / du.sqrt()
    })
}

/// `r_D' = (1 - 2 eps) r_D sqrt(1 + eta/N)` and `r_S' = r_S sqrt(1 + kappa/K)`,
/// returned as views with the same means scaled accordingly.
pub fn primed_views(noise: &NoiseModel, dense: ViewStats, sparse: ViewStats) -> (ViewStats, ViewStats) {
    let dense_p = ViewStats {
        mu: (1.0 - 2.0 * noise.eps) * dense.mu,
        sigma: dense.sigma * (noise.n_i as f64 / (noise.n_i + noise.eta) as f64).sqrt(),
    };
    let sparse_p = ViewStats {
        mu: sparse.mu,
        sigma: sparse.sigma * (noise.k_i as f64 / (noise.k_i + noise.kappa) as f64).sqrt(),
    };
    (dense_p, sparse_p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FusionRun {
    pub dense_ratio_formula: f64,
    pub dense_ratio_simulated: f64,
    pub sparse_ratio_formula: f64,
    pub sparse_ratio_simulated: f64,
    pub best_before: f64,
    pub best_after: f64,
}

/// Dense view: an item embedding estimated from `n` labelled samples, each
/// flipped with probability `eps`; sparse view: the mean of `K` neighbour
/// signals. Compares simulated SNR ratios after augmentation to the formulas,
/// and the best convex fusion before and after at fixed `rho`.
pub fn simulate_fusion(noise: &NoiseModel, dense: ViewStats, sparse: ViewStats, rho: f64, trials: usize, seed: u64) -> Result<FusionRun> {
    if !(noise.eps >= 0.0 && noise.eps < 0.5) {
        return Err(Error::Precondition("label noise rate must lie in [0, 0.5)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // one-dimensional projection onto e_u keeps the simulation cheap
    let signal = 0.3;
    let dense_snr = |rng: &mut ChaCha8Rng, n: usize, eps: f64| {
        empirical_snr(trials, || {
            let mut acc = 0.0;
            for _ in 0..n {
                let flip = if rng.random_bool(eps) { -1.0 } else { 1.0 };
                let z: f64 = StandardNormal.sample(rng);
                acc += flip * signal + noise.c.sqrt() * z;
            }
            acc / n as f64
        })
    };
    let base_d = dense_snr(&mut rng, noise.n_i, 0.0);
    let aug_d = dense_snr(&mut rng, noise.n_i + noise.eta, noise.eps);
    let sparse_snr = |rng: &mut ChaCha8Rng, k: usize| {
        empirical_snr(trials, || {
            let mut acc = 0.0;
            for _ in 0..k {
                let z: f64 = StandardNormal.sample(rng);
                acc += signal + z;
            }
            acc / k as f64
        })
    };
    let base_s = sparse_snr(&mut rng, noise.k_i);
    let aug_s = sparse_snr(&mut rng, noise.k_i + noise.kappa);
    let (dp, sp) = primed_views(noise, dense, sparse);
    let (_, best_before) = best_convex_snr(dense, sparse, rho, 2_000, false)?;
    let (_, best_after) = best_convex_snr(dp, sp, rho, 2_000, false)?;
    Ok(FusionRun {
        dense_ratio_formula: dp.r() / dense.r(),
        dense_ratio_simulated: aug_d / base_d,
        sparse_ratio_formula: sp.r() / sparse.r(),
        sparse_ratio_simulated: aug_s / base_s,
        best_before,
        best_after,
    })
}

/// Empirical variance of the equal-weight neighbourhood mean of `k` i.i.d.
/// signals with standard deviation `signal_std`.
pub fn sparse_variance(k: usize, signal_std: f64, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = PairMoments::default();
    for _ in 0..trials {
        let mut acc = 0.0;
        for _ in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += 1.0 + signal_std * z;
        }
        m.push(acc / k as f64, 0.0);
    }
    m.combination(1.0, 0.0).1
}

/// First-order sufficient condition for the envelope to grow under a change
/// `(dr1, dr2, drho)`.
pub fn tradeoff_holds(r1: f64, r2: f64, rho: f64, dr1: f64, dr2: f64, drho: f64) -> bool {
    tradeoff_margin(r1, r2, rho, dr1, dr2, drho) >= 0.0
}

fn tradeoff_margin(r1: f64, r2: f64, rho: f64, dr1: f64, dr2: f64, drho: f64) -> f64 {
    let lhs = (r1 - rho * r2) * dr1 + (r2 - rho * r1) * dr2;
    let rhs = (r1 - rho * r2) * (r2 - rho * r1) / (1.0 - rho * rho) * drho;
    lhs - rhs
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TheoryReport {
    pub checks: Vec<Check>,
}

impl TheoryReport {
    fn push(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(Check {
            name: name.to_string(),
            passed,
            detail,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let _ = writeln!(out, "{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        out
    }
}

fn random_view(rng: &mut ChaCha8Rng) -> ViewStats {
    ViewStats {
        mu: rng.random_range(0.2..2.0),
        sigma: rng.random_range(0.3..2.0),
    }
}

/// Runs every check and collects one line per check.
pub fn run_theory_lab(seed: u64) -> Result<TheoryReport> {
    let mut rep = TheoryReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // blend formula: boundaries, symmetric case, Monte-Carlo agreement
    {
        let mut worst_boundary: f64 = 0.0;
        for _ in 0..100 {
            let (v1, v2) = (random_view(&mut rng), random_view(&mut rng));
            let rho = rng.random_range(-0.9..0.9);
            worst_boundary = worst_boundary
                .max((snr_fusion(1.0, v1, v2, rho)? - v1.r()).abs())
                .max((snr_fusion(0.0, v1, v2, rho)? - v2.r()).abs());
        }
        let one = ViewStats { mu: 1.0, sigma: 1.0 };
        let sym = snr_fusion(0.5, one, one, 0.0)?;
        rep.push(
            "fusion_boundaries",
            worst_boundary < 1e-12 && (sym - 2f64.sqrt()).abs() < 1e-12,
            format!("max_boundary_err={worst_boundary:.2e} symmetric={sym:.6}"),
        );

        let (v1, v2) = (random_view(&mut rng), random_view(&mut rng));
        let rho = rng.random_range(0.0..0.8);
        let alpha = 0.3;
        let closed = snr_fusion(alpha, v1, v2, rho)?;
        let mut m = PairMoments::default();
        for _ in 0..1_000_000 {
            let z1: f64 = StandardNormal.sample(&mut rng);
            let z2: f64 = StandardNormal.sample(&mut rng);
            let e2 = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
            m.push(v1.mu + v1.sigma * z1, v2.mu + v2.sigma * e2);
        }
        let (mean, var) = m.combination(alpha, 1.0 - alpha);
        let mc = mean / var.sqrt();
        let rel = (mc - closed).abs() / closed.abs();
        rep.push("fusion_monte_carlo", rel < 0.02, format!("closed={closed:.5} mc={mc:.5} rel_err={rel:.4}"));
    }

    // monotone in rho at interior alpha
    {
        let mut ok = true;
        for _ in 0..50 {
            let (v1, v2) = (random_view(&mut rng), random_view(&mut rng));
            let alpha = rng.random_range(0.05..0.95);
            let mut prev = f64::INFINITY;
            for j in 0..=95 {
                let s = snr_fusion(alpha, v1, v2, j as f64 / 100.0)?;
                ok &= s < prev;
                prev = s;
            }
        }
        rep.push("fusion_decreasing_in_rho", ok, "50 random views, rho grid step 0.01".into());
    }

    // envelope: examples and dominance over the convex grid
    {
        let r = 1.7;
        let e_sym = fusion_envelope(r, r, 0.0)?;
        let e_half = fusion_envelope(1.0, 1.0, 0.5)?;
        let mut ok = (e_sym - 2f64.sqrt() * r).abs() < 1e-12 && (e_half - (1.0f64 / 0.75).sqrt()).abs() < 1e-12;
        ok &= matches!(fusion_envelope(1.0, 1.0, 1.0), Err(Error::SingularCorrelation));
        for _ in 0..100 {
            let (v1, v2) = (random_view(&mut rng), random_view(&mut rng));
            let rho = rng.random_range(-0.9..0.9);
            let (_, best) = best_convex_snr(v1, v2, rho, 2_000, false)?;
            ok &= fusion_envelope(v1.r(), v2.r(), rho)? >= best - 1e-12;
        }
        rep.push("fusion_envelope", ok, format!("G(r,r,0)={e_sym:.6} G(1,1,0.5)={e_half:.6}"));
    }

    // correlation threshold and the weaker-view floor
    {
        let t = rho_threshold_check(ViewStats { mu: 2.0, sigma: 1.0 }, ViewStats { mu: 1.0, sigma: 1.0 })?;
        let (v1, v2) = (ViewStats { mu: 2.0, sigma: 1.0 }, ViewStats { mu: 1.0, sigma: 1.0 });
        let above = best_convex_snr(v1, v2, 0.4, 10_000, true)?.1 > 2.0;
        let none = best_convex_snr(v1, v2, 0.6, 10_000, true)?.1 <= 2.0;
        let equal = rho_threshold_check(v1, v1)?;
        let mut ok = t.verified && (t.threshold - 0.5).abs() < 1e-15 && above && none && equal.threshold == 1.0;
        for _ in 0..30 {
            let (a, b) = (random_view(&mut rng), random_view(&mut rng));
            ok &= rho_threshold_check(a, b)?.verified;
        }
        rep.push("rho_threshold", ok, format!("threshold(2,1)={:.3} straddle_ok={}", t.threshold, t.verified));

        let mut floor_ok = true;
        for _ in 0..30 {
            let (a, b) = (random_view(&mut rng), random_view(&mut rng));
            let rmin = a.r().min(b.r());
            for jr in 0..20 {
                let rho = jr as f64 / 20.0;
                for ja in 1..100 {
                    floor_ok &= snr_fusion(ja as f64 / 100.0, a, b, rho)? >= rmin - 1e-12;
                }
            }
        }
        rep.push("weaker_view_floor", floor_ok, "30 views x 20 rho x 99 alpha".into());
    }

    // single view: bound and sqrt(N) scaling
    {
        let trials = 20_000;
        let mut ok = true;
        let mut worst: f64 = 0.0;
        for c in 0..50 {
            let noise = NoiseModel {
                c: rng.random_range(0.2..3.0),
                n_i: rng.random_range(2..500),
                ..NoiseModel::default()
            };
            let gap = rng.random_range(0.05..1.0);
            let run = simulate_single_view(&noise, gap, 1_000_000, 8, rng.random_range(0.5..2.0), trials, seed ^ c);
            ok &= run.within_bound;
            worst = worst.max(run.empirical_snr / run.bound);
        }
        let base = NoiseModel {
            n_i: 16,
            ..NoiseModel::default()
        };
        let quad = NoiseModel { n_i: 64, ..base };
        let s16 = simulate_single_view(&base, 0.5, 1_000_000, 8, 1.0, trials, seed ^ 101).empirical_snr;
        let s64 = simulate_single_view(&quad, 0.5, 1_000_000, 8, 1.0, trials, seed ^ 101).empirical_snr;
        let ratio = s64 / s16;
        let zero = simulate_single_view(&base, 0.0, 1_000_000, 8, 1.0, trials, seed ^ 102).empirical_snr;
        rep.push("single_view_bound", ok, format!("max empirical/bound={worst:.4} over 50 configs"));
        rep.push(
            "single_view_sqrt_scaling",
            (ratio / 2.0 - 1.0).abs() < 0.15 && zero.abs() < 0.05,
            format!("snr(64)/snr(16)={ratio:.4} zero_gap_snr={zero:.4}"),
        );
    }

    // degree normalization keeps the sqrt(N) factor
    {
        let trials = 20_000;
        let base = NoiseModel::default();
        let s1 = simulate_degree_normalized(&base, (5.0, 4.0, 30.0), 10_000_000, 8, trials, seed ^ 201);
        let s10 = simulate_degree_normalized(&base, (5.0, 40.0, 30.0), 10_000_000, 8, trials, seed ^ 201);
        let change = (s10 / s1 - 1.0).abs();
        let ns = [16usize, 64, 256, 1024];
        let snrs: Vec<f64> = ns
            .iter()
            .map(|&n| simulate_degree_normalized(&NoiseModel { n_i: n, ..base }, (5.0, n as f64, 30.0), 10_000_000, 8, trials, seed ^ 202))
            .collect();
        let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let slope = loglog_slope(&xs, &snrs);
        let du_a = simulate_degree_normalized(&base, (1.0, 4.0, 30.0), 10_000_000, 8, trials, seed ^ 203);
        let du_b = simulate_degree_normalized(&base, (100.0, 4.0, 30.0), 10_000_000, 8, trials, seed ^ 203);
        rep.push(
            "degree_norm_cancels",
            change < 0.10 && (du_a - du_b).abs() < 1e-9 * du_a.abs(),
            format!("snr change for 10x d_i={change:.4}"),
        );
        rep.push("degree_norm_exponent", (0.4..=0.6).contains(&slope), format!("fitted exponent={slope:.4}"));
    }

    // sparse aggregation variance ~ 1/K
    {
        let v1 = sparse_variance(1, 1.0, 40_000, seed ^ 301);
        let v100 = sparse_variance(100, 1.0, 40_000, seed ^ 302);
        let ratio = v1 / v100;
        let ks = [4usize, 16, 64, 256];
        let vars: Vec<f64> = ks.iter().map(|&k| sparse_variance(k, 1.0, 20_000, seed ^ (310 + k as u64))).collect();
        let slope = loglog_slope(&ks.map(|k| k as f64), &vars);
        let zero = sparse_variance(10, 0.0, 1_000, seed);
        rep.push(
            "sparse_variance",
            (ratio / 100.0 - 1.0).abs() < 0.2 && (-1.15..=-0.85).contains(&slope) && zero == 0.0,
            format!("var(1)/var(100)={ratio:.2} fitted exponent={slope:.4}"),
        );
    }

    // fusion: per-view gains and the correlation trade-off
    {
        let dense = ViewStats { mu: 1.0, sigma: 0.8 };
        let sparse = ViewStats { mu: 0.8, sigma: 0.9 };
        let none = NoiseModel {
            n_i: 20,
            k_i: 10,
            ..NoiseModel::default()
        };
        let (dp, sp) = primed_views(&none, dense, sparse);
        let identity = dp == dense && sp == sparse;
        let doubled = NoiseModel { eta: 20, ..none };
        let sqrt2 = (primed_views(&doubled, dense, sparse).0.r() / dense.r() - 2f64.sqrt()).abs() < 1e-12;
        let aug = NoiseModel {
            n_i: 20,
            k_i: 10,
            eta: 20,
            kappa: 10,
            eps: 0.1,
            c: 1.0,
        };
        let run = simulate_fusion(&aug, dense, sparse, 0.3, 20_000, seed ^ 401)?;
        let band = |sim: f64, formula: f64| (sim / formula - 1.0).abs() < 0.10;
        rep.push(
            "fusion_per_view_gains",
            identity
                && sqrt2
                && band(run.dense_ratio_simulated, run.dense_ratio_formula)
                && band(run.sparse_ratio_simulated, run.sparse_ratio_formula),
            format!(
                "dense sim/formula={:.4}/{:.4} sparse sim/formula={:.4}/{:.4}",
                run.dense_ratio_simulated, run.dense_ratio_formula, run.sparse_ratio_simulated, run.sparse_ratio_formula
            ),
        );
        let mut mono = true;
        for _ in 0..50 {
            let (d, s) = (random_view(&mut rng), random_view(&mut rng));
            let rho = rng.random_range(0.0..0.9);
            let noise = NoiseModel {
                n_i: rng.random_range(2..100),
                k_i: rng.random_range(2..100),
                eta: rng.random_range(0..100),
                kappa: rng.random_range(0..100),
                eps: 0.0,
                c: 1.0,
            };
            let (dp, sp) = primed_views(&noise, d, s);
            mono &= best_convex_snr(dp, sp, rho, 1_000, false)?.1 >= best_convex_snr(d, s, rho, 1_000, false)?.1 - 1e-12;
        }
        rep.push(
            "fusion_monotonicity",
            mono && run.best_after >= run.best_before,
            format!("best fused snr {:.4} -> {:.4}", run.best_before, run.best_after),
        );

        let mut accepted = 0;
        let mut increased = 0;
        while accepted < 100 {
            let r1: f64 = rng.random_range(0.3..3.0);
            let r2: f64 = rng.random_range(0.3..3.0);
            let rho: f64 = rng.random_range(0.0..0.85);
            let t: f64 = 1e-5;
            let (dr1, dr2): (f64, f64) = (t * rng.random_range(-1.0..1.0), t * rng.random_range(-1.0..1.0));
            let drho = t * rng.random_range(0.0..1.0);
            let lhs_scale = (r1 - rho * r2).abs() * dr1.abs() + (r2 - rho * r1).abs() * dr2.abs();
            // keep only clear-cut cases so second-order terms cannot flip the sign
            if tradeoff_margin(r1, r2, rho, dr1, dr2, drho) <= 0.05 * lhs_scale {
                continue;
            }
            accepted += 1;
            if fusion_envelope(r1 + dr1, r2 + dr2, rho + drho)? > fusion_envelope(r1, r2, rho)? {
                increased += 1;
            }
        }
        rep.push("fusion_tradeoff", increased == 100, format!("{increased}/100 sampled perturbations increase G"));
    }

    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(mu: f64, sigma: f64) -> ViewStats {
        ViewStats::new(mu, sigma).unwrap()
    }

    #[test]
    fn snr_fusion_examples() {
        let (a, b) = (v(1.3, 0.7), v(0.4, 1.9));
        assert!((snr_fusion(1.0, a, b, 0.3).unwrap() - a.r()).abs() < 1e-15);
        assert!((snr_fusion(0.0, a, b, 0.3).unwrap() - b.r()).abs() < 1e-15);
        assert!((snr_fusion(0.5, v(1.0, 1.0), v(1.0, 1.0), 0.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            snr_fusion(0.5, v(1.0, 1.0), v(1.0, 1.0), -1.0),
            Err(Error::DegenerateBlend { .. })
        ));
        assert!(ViewStats::new(1.0, 0.0).is_err());
    }

    #[test]
    fn envelope_examples() {
        assert!((fusion_envelope(1.5, 1.5, 0.0).unwrap() - 2f64.sqrt() * 1.5).abs() < 1e-15);
        assert!((fusion_envelope(1.0, 1.0, 0.5).unwrap() - 1.1547).abs() < 1e-4);
        assert!(matches!(fusion_envelope(1.0, 2.0, -1.0), Err(Error::SingularCorrelation)));
    }

    #[test]
    fn rho_threshold_examples() {
        let t = rho_threshold_check(v(2.0, 1.0), v(1.0, 1.0)).unwrap();
        assert_eq!(t.threshold, 0.5);
        assert!(t.verified);
        assert!(best_convex_snr(v(2.0, 1.0), v(1.0, 1.0), 0.4, 10_000, true).unwrap().1 > 2.0);
        assert!(best_convex_snr(v(2.0, 1.0), v(1.0, 1.0), 0.6, 10_000, true).unwrap().1 <= 2.0);
        assert_eq!(rho_threshold_check(v(1.0, 2.0), v(0.5, 1.0)).unwrap().threshold, 1.0);
        assert!(rho_threshold_check(v(-1.0, 1.0), v(1.0, 1.0)).is_err());
    }

    #[test]
    fn tradeoff_sign_matches_envelope_gradient() {
        // the first-order change of G^2 is 2 * margin / (1 - rho^2)
        let (r1, r2, rho) = (1.4, 0.9, 0.35);
        let (dr1, dr2, drho) = (2e-4, -1e-4, 3e-4);
        let g0 = fusion_envelope(r1, r2, rho).unwrap().powi(2);
        let g1 = fusion_envelope(r1 + dr1, r2 + dr2, rho + drho).unwrap().powi(2);
        let predicted = 2.0 * tradeoff_margin(r1, r2, rho, dr1, dr2, drho) / (1.0 - rho * rho);
        assert!(((g1 - g0) - predicted).abs() < 1e-6);
        assert_eq!(tradeoff_holds(r1, r2, rho, dr1, dr2, drho), g1 > g0);
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let n = NoiseModel::default();
        assert_eq!(
            simulate_single_view(&n, 0.5, 1000, 4, 1.0, 2000, 3),
            simulate_single_view(&n, 0.5, 1000, 4, 1.0, 2000, 3)
        );
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-0.7)).collect();
        assert!((loglog_slope(&xs, &ys) + 0.7).abs() < 1e-12);
    }

    #[test]
    fn full_lab_passes() {
        let rep = run_theory_lab(7).unwrap();
        assert!(rep.all_passed(), "{}", rep.to_text());
        assert_eq!(rep.to_text().lines().count(), rep.checks.len());
    }
}
