//! Synthetic implicit-feedback workloads for benchmarks and timing runs.

use dualcf::{Dataset, Entry, InteractionMatrix, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Shape of a generated workload.
#[derive(Clone, Copy, Debug)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Mean interactions per user.
    pub per_user: usize,
    /// Latent user/item communities.
    pub clusters: usize,
    /// Probability that an interaction stays inside the user's community.
    pub affinity: f64,
    /// Zipf-like exponent of item popularity inside a community.
    pub skew: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn small() -> Self {
        SynthSpec {
            n_users: 500,
            n_items: 400,
            per_user: 30,
            clusters: 8,
            affinity: 0.8,
            skew: 1.5,
            seed: 7,
        }
    }

    /// Roughly the shape of MovieLens-1M after 10-core filtering.
    pub fn movielens_scale() -> Self {
        SynthSpec {
            n_users: 6022,
            n_items: 3043,
            per_user: 165,
            clusters: 20,
            affinity: 0.7,
            skew: 1.8,
            seed: 7,
        }
    }
}

/// Draws one row of item indices per user, sorted and distinct.
pub fn user_rows(spec: &SynthSpec) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = (spec.n_items / spec.clusters).max(1);
    (0..spec.n_users)
        .map(|u| {
            let home = u % spec.clusters;
            let len = rng.random_range(spec.per_user / 2..=spec.per_user * 3 / 2).clamp(2, spec.n_items);
            let mut row = Vec::with_capacity(len);
            while row.len() < len {
                let c = if rng.random::<f64>() < spec.affinity { home } else { rng.random_range(0..spec.clusters) };
                let x: f64 = rng.random::<f64>().powf(spec.skew);
                let i = (c * span + (x * span as f64) as usize).min(spec.n_items - 1);
                if !row.contains(&i) {
                    row.push(i);
                }
            }
            row.sort_unstable();
            row
        })
        .collect()
}

pub fn interactions(spec: &SynthSpec) -> Result<InteractionMatrix> {
    let entries = user_rows(spec)
        .into_iter()
        .enumerate()
        .flat_map(|(u, row)| row.into_iter().map(move |i| Entry::observed(u, i)))
        .collect();
    InteractionMatrix::from_entries(spec.n_users, spec.n_items, entries)
}

/// Holds out a `test_frac` share of each user's row (at least one item).
pub fn split(spec: &SynthSpec, test_frac: f64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (u, row) in user_rows(spec).into_iter().enumerate() {
        let n_test = ((row.len() as f64 * test_frac).round() as usize).clamp(1, row.len() - 1);
        let mut held = row.clone();
        for k in 0..n_test {
            let j = rng.random_range(k..held.len());
            held.swap(k, j);
        }
        for (k, &i) in held.iter().enumerate() {
            if k < n_test {
                test.push(Entry::observed(u, i));
            } else {
                train.push(Entry::observed(u, i));
            }
        }
    }
    Dataset::new(
        InteractionMatrix::from_entries(spec.n_users, spec.n_items, train)?,
        InteractionMatrix::from_entries(spec.n_users, spec.n_items, test)?,
        None,
    )
}
