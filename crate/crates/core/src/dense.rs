//! Matrix factorization trained with degree-normalized weighted binary cross-entropy.

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::DegreeVectors;
use crate::error::{Error, Result};
use crate::matrix::{EmbeddingTable, InteractionMatrix, ScoreVector};
use crate::scoring::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub dim: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2_reg: f64,
    pub epochs: usize,
    pub neg_per_pos: usize,
    /// Constant added to every pair's degree normalization.
    pub alpha: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Epochs without validation improvement before stopping; 0 disables early stopping.
    pub patience: usize,
}

impl Default for MfConfig {
    fn default() -> Self {
        MfConfig {
            dim: 64,
            lr: 1e-3,
            batch_size: 1024,
            l2_reg: 1e-4,
            epochs: 100,
            neg_per_pos: 1,
            alpha: 1.0,
            seed: 2024,
            optimizer: Optimizer::Sgd,
            patience: 10,
        }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("dense.dim must be > 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("dense.lr must be > 0".into()));
        }
        if self.neg_per_pos == 0 {
            return Err(Error::Config("dense.neg_per_pos must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("dense.batch_size must be >= 1".into()));
        }
        if !(self.l2_reg >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("dense.l2_reg must be >= 0 and dense.alpha finite".into()));
        }
        Ok(())
    }
}

/// Positives with their confidence weight, and uniformly drawn negatives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub positives: Vec<(u32, u32, f64)>,
    pub negatives: Vec<(u32, u32)>,
}

impl TrainBatch {
    /// Draws `neg_per_pos` negatives per positive, uniformly among the items
    /// absent from the user's row of `r_hat`. Users whose row covers the whole
    /// catalog get no negatives.
    pub fn sample<R: Rng>(
        r_hat: &InteractionMatrix,
        positives: &[(u32, u32, f64)],
        neg_per_pos: usize,
        rng: &mut R,
    ) -> Self {
        let n_items = r_hat.n_items() as u32;
        let mut negatives = Vec::with_capacity(positives.len() * neg_per_pos);
        for &(u, _, _) in positives {
            let row = r_hat.row(u as usize);
            if row.len() >= n_items as usize {
                continue;
            }
            for _ in 0..neg_per_pos {
                loop {
                    let j = rng.random_range(0..n_items);
                    if row.items.binary_search(&j).is_err() {
                        negatives.push((u, j));
                        break;
                    }
                }
            }
        }
        TrainBatch {
            positives: positives.to_vec(),
            negatives,
        }
    }
}

/// Entries i.i.d. normal with standard deviation `0.1 / sqrt(dim)`.
pub fn init_embeddings(n_users: usize, n_items: usize, cfg: &MfConfig) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, init_scale(cfg.dim)).expect("positive scale");
    let users = (0..n_users * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
    let items = (0..n_items * cfg.dim).map(|_| normal.sample(&mut rng)).collect();
    EmbeddingTable::from_parts(cfg.dim, users, items).expect("consistent shapes")
}

pub fn init_scale(dim: usize) -> f64 {
    0.1 / (dim as f64).sqrt()
}

/// `1 / sqrt(D_u D_i) + alpha` for a positive pair.
pub fn degree_weight(u: usize, i: usize, d: &DegreeVectors, alpha: f64) -> Result<f64> {
    let (du, di) = (d.user[u], d.item[i]);
    if du == 0 || di == 0 {
        return Err(Error::Degree { user: u, item: i });
    }
    Ok(1.0 / ((du as f64) * (di as f64)).sqrt() + alpha)
}

/// Same normalization for a sampled negative; a degree of zero counts as one.
pub fn negative_weight(u: usize, i: usize, d: &DegreeVectors, alpha: f64) -> f64 {
    let du = d.user[u].max(1) as f64;
    let di = d.item[i].max(1) as f64;
    1.0 / (du * di).sqrt() + alpha
}

/// `log(sigmoid(z))` without overflow.
#[inline]
fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Gradient accumulator that only touches rows present in the batch.
#[derive(Clone, Debug)]
pub struct Gradients {
    dim: usize,
    user: Vec<f64>,
    item: Vec<f64>,
    user_seen: Vec<bool>,
    item_seen: Vec<bool>,
    touched_users: Vec<u32>,
    touched_items: Vec<u32>,
}

impl Gradients {
    pub fn new(table: &EmbeddingTable) -> Self {
        let dim = table.dim();
        Gradients {
            dim,
            user: vec![0.0; table.n_users() * dim],
            item: vec![0.0; table.n_items() * dim],
            user_seen: vec![false; table.n_users()],
            item_seen: vec![false; table.n_items()],
            touched_users: Vec::new(),
            touched_items: Vec::new(),
        }
    }

    pub fn clear(&mut self) {
        for &u in &self.touched_users {
            let u = u as usize;
            self.user_seen[u] = false;
            self.user[u * self.dim..(u + 1) * self.dim].fill(0.0);
        }
        for &i in &self.touched_items {
            let i = i as usize;
            self.item_seen[i] = false;
            self.item[i * self.dim..(i + 1) * self.dim].fill(0.0);
        }
        self.touched_users.clear();
        self.touched_items.clear();
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.item[i * self.dim..(i + 1) * self.dim]
    }

    pub fn touched_users(&self) -> &[u32] {
        &self.touched_users
    }

    pub fn touched_items(&self) -> &[u32] {
        &self.touched_items
    }

    fn user_mut(&mut self, u: usize) -> &mut [f64] {
        if !self.user_seen[u] {
            self.user_seen[u] = true;
            self.touched_users.push(u as u32);
        }
        &mut self.user[u * self.dim..(u + 1) * self.dim]
    }

    fn item_mut(&mut self, i: usize) -> &mut [f64] {
        if !self.item_seen[i] {
            self.item_seen[i] = true;
            self.touched_items.push(i as u32);
        }
        &mut self.item[i * self.dim..(i + 1) * self.dim]
    }

    fn accumulate(&mut self, table: &EmbeddingTable, u: usize, i: usize, dz: f64, l2: f64) {
        let (eu, ei) = (table.user(u), table.item(i));
        let gu = self.user_mut(u);
        for k in 0..gu.len() {
            gu[k] += dz * ei[k] + 2.0 * l2 * eu[k];
        }
        let gi = self.item_mut(i);
        for k in 0..gi.len() {
            gi[k] += dz * eu[k] + 2.0 * l2 * ei[k];
        }
    }
}

/// Loss of one batch; gradients are written into `grads` (cleared first).
///
/// `loss = -sum_pos w d log s(z) - sum_neg d log(1 - s(z)) + l2 (|e_u|^2 + |e_i|^2)`
/// with the L2 term counted once per pair occurrence.
pub fn loss_and_grads(
    batch: &TrainBatch,
    table: &EmbeddingTable,
    d: &DegreeVectors,
    cfg: &MfConfig,
    grads: &mut Gradients,
) -> Result<f64> {
    grads.clear();
    let l2 = cfg.l2_reg;
    let mut loss = 0.0;
    for &(u, i, w) in &batch.positives {
        let (u, i) = (u as usize, i as usize);
        let (eu, ei) = (table.user(u), table.item(i));
        let z = dot(eu, ei);
        let c = w * degree_weight(u, i, d, cfg.alpha)?;
        loss += -c * log_sigmoid(z) + l2 * (dot(eu, eu) + dot(ei, ei));
        grads.accumulate(table, u, i, -c * sigmoid(-z), l2);
    }
    for &(u, i) in &batch.negatives {
        let (u, i) = (u as usize, i as usize);
        let (eu, ei) = (table.user(u), table.item(i));
        let z = dot(eu, ei);
        let c = negative_weight(u, i, d, cfg.alpha);
        loss += -c * log_sigmoid(-z) + l2 * (dot(eu, eu) + dot(ei, ei));
        grads.accumulate(table, u, i, c * sigmoid(z), l2);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite training loss {loss}; lower dense.lr"
        )));
    }
    Ok(loss)
}

/// Parameter update rule applied to the rows a batch touched.
pub struct Stepper {
    kind: Optimizer,
    lr: f64,
    step: i32,
    m_user: Vec<f64>,
    v_user: Vec<f64>,
    m_item: Vec<f64>,
    v_item: Vec<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Stepper {
    pub fn new(table: &EmbeddingTable, kind: Optimizer, lr: f64) -> Self {
        let (nu, ni) = match kind {
            Optimizer::Sgd => (0, 0),
            Optimizer::Adam => (table.user_matrix().len(), table.item_matrix().len()),
        };
        Stepper {
            kind,
            lr,
            step: 0,
            m_user: vec![0.0; nu],
            v_user: vec![0.0; nu],
            m_item: vec![0.0; ni],
            v_item: vec![0.0; ni],
        }
    }

    pub fn apply(&mut self, table: &mut EmbeddingTable, grads: &Gradients) {
        self.step += 1;
        let dim = table.dim();
        match self.kind {
            Optimizer::Sgd => {
                for &u in grads.touched_users() {
                    let g = grads.user(u as usize);
                    for (p, gk) in table.user_mut(u as usize).iter_mut().zip(g) {
                        *p -= self.lr * gk;
                    }
                }
                for &i in grads.touched_items() {
                    let g = grads.item(i as usize);
                    for (p, gk) in table.item_mut(i as usize).iter_mut().zip(g) {
                        *p -= self.lr * gk;
                    }
                }
            }
            Optimizer::Adam => {
                let bc1 = 1.0 - ADAM_B1.powi(self.step);
                let bc2 = 1.0 - ADAM_B2.powi(self.step);
                let lr = self.lr;
                let adam = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
                    for k in 0..p.len() {
                        m[k] = ADAM_B1 * m[k] + (1.0 - ADAM_B1) * g[k];
                        v[k] = ADAM_B2 * v[k] + (1.0 - ADAM_B2) * g[k] * g[k];
                        p[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + ADAM_EPS);
                    }
                };
                for &u in grads.touched_users() {
                    let r = u as usize * dim..(u as usize + 1) * dim;
                    adam(
                        table.user_mut(u as usize),
                        grads.user(u as usize),
                        &mut self.m_user[r.clone()],
                        &mut self.v_user[r],
                    );
                }
                for &i in grads.touched_items() {
                    let r = i as usize * dim..(i as usize + 1) * dim;
                    adam(
                        table.item_mut(i as usize),
                        grads.item(i as usize),
                        &mut self.m_item[r.clone()],
                        &mut self.v_item[r],
                    );
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub table: EmbeddingTable,
    /// Summed training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    /// Epoch (1-based) whose parameters were returned, when a monitor ran.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

/// Trains for `cfg.epochs` epochs and returns the final table.
pub fn train_mf(r_hat: &InteractionMatrix, cfg: &MfConfig, d: &DegreeVectors) -> Result<EmbeddingTable> {
    Ok(train_mf_monitored(r_hat, cfg, d, |_, _| None)?.table)
}

/// Training loop with an optional per-epoch validation hook.
///
/// When `monitor` returns a metric, the table with the best metric is kept
/// and training stops after `cfg.patience` epochs without improvement.
pub fn train_mf_monitored(
    r_hat: &InteractionMatrix,
    cfg: &MfConfig,
    d: &DegreeVectors,
    mut monitor: impl FnMut(usize, &EmbeddingTable) -> Option<f64>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if r_hat.is_empty() {
        return Err(Error::EmptyInput("dense training matrix has no entries"));
    }
    if d.user.len() != r_hat.n_users() || d.item.len() != r_hat.n_items() {
        return Err(Error::Shape("degree vectors do not match the training matrix".into()));
    }
    let mut positives: Vec<(u32, u32, f64)> = r_hat
        .entries()
        .filter(|e| e.weight > 0.0)
        .map(|e| (e.user as u32, e.item as u32, e.weight))
        .collect();
    let mut table = init_embeddings(r_hat.n_users(), r_hat.n_items(), cfg);
    let mut grads = Gradients::new(&table);
    let mut stepper = Stepper::new(&table, cfg.optimizer, cfg.lr);
    // a separate stream keeps sampling independent of the initialization draw count
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, EmbeddingTable)> = None;
    for epoch in 1..=cfg.epochs {
        positives.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in positives.chunks(cfg.batch_size) {
            let batch = TrainBatch::sample(r_hat, chunk, cfg.neg_per_pos, &mut rng);
            total += loss_and_grads(&batch, &table, d, cfg, &mut grads)?;
            stepper.apply(&mut table, &grads);
        }
        if !table.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite embedding after epoch {epoch}; lower dense.lr"
            )));
        }
        epoch_losses.push(total);
        match monitor(epoch, &table) {
            Some(metric) => {
                debug!("dense epoch {epoch}: loss {total:.4}, validation {metric:.5}");
                let improved = best.as_ref().is_none_or(|(_, m, _)| metric > *m);
                if improved {
                    best = Some((epoch, metric, table.clone()));
                } else if cfg.patience > 0 {
                    let since = epoch - best.as_ref().map_or(0, |b| b.0);
                    if since >= cfg.patience {
                        debug!("dense early stop at epoch {epoch}");
                        break;
                    }
                }
            }
            None => debug!("dense epoch {epoch}: loss {total:.4}"),
        }
    }
    Ok(match best {
        Some((epoch, metric, table)) => TrainOutcome {
            table,
            epoch_losses,
            best_epoch: Some(epoch),
            best_metric: Some(metric),
        },
        None => TrainOutcome {
            table,
            epoch_losses,
            best_epoch: None,
            best_metric: None,
        },
    })
}

/// Raw inner products `e_u . e_i` over the catalog.
pub fn predict_dense(table: &EmbeddingTable, user: usize) -> Result<ScoreVector> {
    if user >= table.n_users() {
        return Err(Error::Index {
            what: "user",
            index: user,
            bound: table.n_users(),
        });
    }
    let eu = table.user(user);
    let scores = (0..table.n_items()).map(|i| dot(eu, table.item(i))).collect();
    Ok(ScoreVector { user, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::degrees;
    use crate::matrix::{csr_from_triplets, row_topk, Entry, Provenance};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg(dim: usize) -> MfConfig {
        MfConfig {
            dim,
            l2_reg: 0.01,
            alpha: 0.5,
            ..MfConfig::default()
        }
    }

    fn random_table(rng: &mut ChaCha8Rng, nu: usize, ni: usize, dim: usize) -> EmbeddingTable {
        let users = (0..nu * dim).map(|_| rng.random_range(-0.8..0.8)).collect();
        let items = (0..ni * dim).map(|_| rng.random_range(-0.8..0.8)).collect();
        EmbeddingTable::from_parts(dim, users, items).unwrap()
    }

    fn loss_only(batch: &TrainBatch, t: &EmbeddingTable, d: &DegreeVectors, c: &MfConfig) -> f64 {
        let mut g = Gradients::new(t);
        loss_and_grads(batch, t, d, c, &mut g).unwrap()
    }

    fn assert_matches_finite_differences(batch: &TrainBatch, t: &EmbeddingTable, d: &DegreeVectors, c: &MfConfig) {
        let mut g = Gradients::new(t);
        loss_and_grads(batch, t, d, c, &mut g).unwrap();
        let h = 1e-5;
        let check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {analytic} vs numeric {numeric}");
        };
        for u in 0..t.n_users() {
            for k in 0..t.dim() {
                let (mut p, mut m) = (t.clone(), t.clone());
                p.user_mut(u)[k] += h;
                m.user_mut(u)[k] -= h;
                let numeric = (loss_only(batch, &p, d, c) - loss_only(batch, &m, d, c)) / (2.0 * h);
                check(g.user(u)[k], numeric);
            }
        }
        for i in 0..t.n_items() {
            for k in 0..t.dim() {
                let (mut p, mut m) = (t.clone(), t.clone());
                p.item_mut(i)[k] += h;
                m.item_mut(i)[k] -= h;
                let numeric = (loss_only(batch, &p, d, c) - loss_only(batch, &m, d, c)) / (2.0 * h);
                check(g.item(i)[k], numeric);
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let c = MfConfig::default();
        let a = init_embeddings(10, 7, &c);
        assert_eq!(a, init_embeddings(10, 7, &c));
        assert_eq!(a.user_matrix().len(), 10 * 64);
        assert_eq!(a.n_users(), 10);
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn init_column_means_vanish() {
        let c = MfConfig {
            dim: 8,
            ..MfConfig::default()
        };
        let n = 20_000;
        let t = init_embeddings(n, 1, &c);
        let sigma = init_scale(8);
        for k in 0..8 {
            let mean: f64 = (0..n).map(|u| t.user(u)[k]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 3.0 * sigma / (n as f64).sqrt(), "column {k} mean {mean}");
        }
    }

    #[test]
    fn degree_weight_examples() {
        let d = DegreeVectors {
            user: vec![1, 4, 0],
            item: vec![1, 9],
        };
        assert_eq!(degree_weight(0, 0, &d, 0.0).unwrap(), 1.0);
        assert!((degree_weight(1, 1, &d, 0.5).unwrap() - (1.0 / 6.0 + 0.5)).abs() < 1e-15);
        for a in [0.0, 0.3, 2.0] {
            let shift = degree_weight(1, 0, &d, a).unwrap() - degree_weight(1, 0, &d, 0.0).unwrap();
            assert!((shift - a).abs() < 1e-15);
        }
        assert!(matches!(degree_weight(2, 0, &d, 1.0), Err(Error::Degree { user: 2, item: 0 })));
    }

    #[test]
    fn loss_at_origin_is_weighted_log_two() {
        let r = csr_from_triplets(&[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)], 2, 3).unwrap();
        let d = degrees(&r);
        let c = cfg(3);
        let t = EmbeddingTable::zeros(2, 3, 3);
        let batch = TrainBatch {
            positives: vec![(0, 0, 1.0), (1, 1, 1.0)],
            negatives: vec![(1, 2)],
        };
        let expected = (degree_weight(0, 0, &d, 0.5).unwrap()
            + degree_weight(1, 1, &d, 0.5).unwrap()
            + negative_weight(1, 2, &d, 0.5))
            * std::f64::consts::LN_2;
        assert!((loss_only(&batch, &t, &d, &c) - expected).abs() < 1e-12);
    }

    #[test]
    fn single_positive_symbolic_gradient() {
        let d = DegreeVectors {
            user: vec![1],
            item: vec![1],
        };
        let c = MfConfig {
            alpha: 0.0,
            l2_reg: 0.05,
            ..cfg(3)
        };
        let t = EmbeddingTable::from_parts(3, vec![0.3, -0.2, 0.5], vec![0.1, 0.4, -0.6]).unwrap();
        let batch = TrainBatch {
            positives: vec![(0, 0, 1.0)],
            negatives: vec![],
        };
        let mut g = Gradients::new(&t);
        loss_and_grads(&batch, &t, &d, &c, &mut g).unwrap();
        let z = dot(t.user(0), t.item(0));
        let s = 1.0 / (1.0 + (-z).exp());
        for k in 0..3 {
            let expected = -(1.0 - s) * t.item(0)[k] + 2.0 * 0.05 * t.user(0)[k];
            assert!((g.user(0)[k] - expected).abs() < 1e-14);
        }
        assert_matches_finite_differences(&batch, &t, &d, &c);
    }

    #[test]
    fn three_pair_batch_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = csr_from_triplets(&[(0, 0, 1.0), (0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)], 3, 4).unwrap();
        let d = degrees(&r);
        let t = random_table(&mut rng, 3, 4, 4);
        let batch = TrainBatch {
            positives: vec![(0, 0, 1.0), (1, 2, 1.0)],
            negatives: vec![(2, 3)],
        };
        assert_matches_finite_differences(&batch, &t, &d, &cfg(4));
    }

    #[test]
    fn sampled_batches_with_pseudo_weights_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (nu, ni) = (5, 7);
            let mut entries = Vec::new();
            for u in 0..nu {
                for i in 0..ni {
                    let x: f64 = rng.random();
                    if x < 0.25 {
                        entries.push(Entry::observed(u, i));
                    } else if x < 0.4 {
                        entries.push(Entry {
                            user: u,
                            item: i,
                            weight: 0.5,
                            provenance: Provenance::PseudoS2d,
                        });
                    }
                }
            }
            let r_hat = InteractionMatrix::from_entries(nu, ni, entries).unwrap();
            if r_hat.is_empty() {
                continue;
            }
            let d = degrees(&r_hat);
            let pos: Vec<(u32, u32, f64)> = r_hat
                .entries()
                .map(|e| (e.user as u32, e.item as u32, e.weight))
                .collect();
            let batch = TrainBatch::sample(&r_hat, &pos, 2, &mut rng);
            for &(u, i) in &batch.negatives {
                assert!(!r_hat.contains(u as usize, i as usize));
            }
            let t = random_table(&mut rng, nu, ni, 3);
            assert_matches_finite_differences(&batch, &t, &d, &cfg(3));
        }
    }

    #[test]
    fn sampler_honours_ratio_and_excludes_observed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = csr_from_triplets(&[(0, 0, 1.0), (0, 2, 1.0), (1, 1, 1.0)], 2, 5).unwrap();
        let pos: Vec<_> = r.entries().map(|e| (e.user as u32, e.item as u32, e.weight)).collect();
        let b = TrainBatch::sample(&r, &pos, 3, &mut rng);
        assert_eq!(b.negatives.len(), 3 * pos.len());
        assert!(b.negatives.iter().all(|&(u, i)| !r.contains(u as usize, i as usize)));
    }

    fn rank_one(nu: usize, ni: usize) -> InteractionMatrix {
        let mut trip = Vec::new();
        for u in 0..nu / 2 {
            for i in 0..ni / 2 {
                trip.push((u, i, 1.0));
            }
        }
        csr_from_triplets(&trip, nu, ni).unwrap()
    }

    #[test]
    fn rank_one_loss_decreases() {
        let r = rank_one(20, 20);
        let c = MfConfig {
            dim: 4,
            lr: 0.05,
            batch_size: 16,
            epochs: 5,
            ..MfConfig::default()
        };
        let out = train_mf_monitored(&r, &c, &degrees(&r), |_, _| None).unwrap();
        let l = &out.epoch_losses;
        assert_eq!(l.len(), 5);
        // smoothed: two-epoch moving average
        let smooth: Vec<f64> = l.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{l:?}");
        assert!(l[4] < l[0]);
    }

    #[test]
    fn training_is_deterministic() {
        let r = rank_one(12, 10);
        let c = MfConfig {
            dim: 4,
            lr: 0.05,
            batch_size: 8,
            epochs: 3,
            optimizer: Optimizer::Adam,
            ..MfConfig::default()
        };
        let d = degrees(&r);
        let a = train_mf_monitored(&r, &c, &d, |_, _| None).unwrap();
        let b = train_mf_monitored(&r, &c, &d, |_, _| None).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.table, b.table);
    }

    #[test]
    fn monitor_keeps_best_epoch_and_stops() {
        let r = rank_one(12, 10);
        let c = MfConfig {
            dim: 4,
            epochs: 50,
            patience: 3,
            ..MfConfig::default()
        };
        let scores = [0.1, 0.5, 0.4, 0.3, 0.2, 0.9];
        let out = train_mf_monitored(&r, &c, &degrees(&r), |e, _| Some(scores[(e - 1).min(5)])).unwrap();
        assert_eq!(out.best_epoch, Some(2));
        assert_eq!(out.epoch_losses.len(), 5);
    }

    #[test]
    fn empty_input_and_bad_config() {
        let r = InteractionMatrix::empty(2, 2);
        let d = degrees(&r);
        assert!(matches!(train_mf(&r, &MfConfig::default(), &d), Err(Error::EmptyInput(_))));
        let r = rank_one(4, 4);
        let bad = MfConfig {
            neg_per_pos: 0,
            ..MfConfig::default()
        };
        assert!(matches!(train_mf(&r, &bad, &degrees(&r)), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_is_numeric_error() {
        let r = rank_one(10, 10);
        let c = MfConfig {
            dim: 4,
            lr: 1e200,
            batch_size: 4,
            epochs: 3,
            ..MfConfig::default()
        };
        assert!(matches!(train_mf(&r, &c, &degrees(&r)), Err(Error::Numeric(_))));
    }

    #[test]
    fn l2_step_shrinks_touched_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = random_table(&mut rng, 2, 3, 4);
        let before = t.clone();
        let d = DegreeVectors {
            user: vec![1, 1],
            item: vec![1, 1, 1],
        };
        let c = cfg(4);
        let batch = TrainBatch {
            positives: vec![(0, 1, 0.0), (1, 2, 0.0)],
            negatives: vec![],
        };
        let mut g = Gradients::new(&t);
        loss_and_grads(&batch, &t, &d, &c, &mut g).unwrap();
        Stepper::new(&t, Optimizer::Sgd, 1e-6).apply(&mut t, &g);
        for (u, i) in [(0usize, 1usize), (1, 2)] {
            for k in 0..4 {
                assert!(t.user(u)[k].abs() < before.user(u)[k].abs());
                assert!(t.item(i)[k].abs() < before.item(i)[k].abs());
            }
        }
        assert_eq!(t.item(0), before.item(0));
    }

    #[test]
    fn predict_dense_examples() {
        let t = EmbeddingTable::from_parts(
            3,
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(predict_dense(&t, 0).unwrap().scores, vec![0.0; 3]);
        assert_eq!(row_topk(&predict_dense(&t, 1).unwrap().scores, 1, &[]), vec![1]);
        assert!(predict_dense(&t, 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = random_table(&mut rng, 5, 3, 4);
        for u in 0..5 {
            let s = predict_dense(&t, u).unwrap();
            for i in 0..3 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += t.user(u)[k] * t.item(i)[k];
                }
                assert!((s.scores[i] - acc).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn sigmoid_preserves_topk(raw in proptest::collection::vec(-80i32..80, 1..40), k in 0usize..10) {
            // a grid of 1/8 steps keeps distinct scores distinct after squashing
            let values: Vec<f64> = raw.iter().map(|&v| v as f64 / 8.0).collect();
            let squashed: Vec<f64> = values.iter().map(|&v| sigmoid(v)).collect();
            prop_assert_eq!(row_topk(&values, k, &[]), row_topk(&squashed, k, &[]));
        }
    }
}
