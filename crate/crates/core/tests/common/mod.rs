#![allow(dead_code)]

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Clustered implicit feedback: each user draws mostly from its own item
/// cluster, with a popularity skew inside each cluster.
pub fn clustered_interactions(n_users: usize, n_items: usize, per_user: usize, seed: u64) -> Vec<Vec<usize>> {
    let clusters = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_users)
        .map(|u| {
            let home = u % clusters;
            let mut items: Vec<usize> = Vec::new();
            while items.len() < per_user {
                let c = if rng.random::<f64>() < 0.8 { home } else { rng.random_range(0..clusters) };
                let span = n_items / clusters;
                let r: f64 = rng.random();
                let i = c * span + ((r * r) * span as f64) as usize;
                if !items.contains(&i) {
                    items.push(i);
                }
            }
            items
        })
        .collect()
}

/// Writes adjacency-format train/test (and optionally validation) files.
pub fn write_split(dir: &Path, n_users: usize, n_items: usize, per_user: usize, seed: u64, validation: bool) {
    let rows = clustered_interactions(n_users, n_items, per_user, seed);
    let (mut tr, mut te, mut va) = (String::new(), String::new(), String::new());
    for (u, items) in rows.iter().enumerate() {
        let n_test = (items.len() / 5).max(1);
        let n_valid = if validation { n_test } else { 0 };
        let (held, rest) = items.split_at(n_test);
        let (valid, train) = rest.split_at(n_valid);
        let line = |xs: &[usize]| {
            let mut s = u.to_string();
            for x in xs {
                let _ = write!(s, " {x}");
            }
            s + "\n"
        };
        tr.push_str(&line(train));
        te.push_str(&line(held));
        if validation {
            va.push_str(&line(valid));
        }
    }
    fs::write(dir.join("train.txt"), tr).unwrap();
    fs::write(dir.join("test.txt"), te).unwrap();
    if validation {
        fs::write(dir.join("valid.txt"), va).unwrap();
    }
}
