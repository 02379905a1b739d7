use crate::matrix::{score_row_into, EmbeddingTable, InteractionMatrix, SimilarityMatrix};

/// Produces one user's raw scores over every item.
pub trait Scorer: Sync {
    fn n_items(&self) -> usize;
    fn score_into(&self, user: usize, out: &mut [f64]);
}

impl<T: Scorer + ?Sized> Scorer for &T {
    fn n_items(&self) -> usize {
        (**self).n_items()
    }
    fn score_into(&self, user: usize, out: &mut [f64]) {
        (**self).score_into(user, out)
    }
}

impl<T: Scorer + ?Sized> Scorer for Box<T> {
    fn n_items(&self) -> usize {
        (**self).n_items()
    }
    fn score_into(&self, user: usize, out: &mut [f64]) {
        (**self).score_into(user, out)
    }
}

/// `y = R S` restricted to one row; `input` is the matrix whose rows feed the
/// aggregation (the original or the dense-augmented interactions).
#[derive(Clone, Copy)]
pub struct SparseScorer<'a> {
    pub input: &'a InteractionMatrix,
    pub sim: &'a SimilarityMatrix,
}

impl Scorer for SparseScorer<'_> {
    fn n_items(&self) -> usize {
        self.sim.n_items()
    }
    fn score_into(&self, user: usize, out: &mut [f64]) {
        score_row_into(self.input, self.sim, user, out);
    }
}

/// `y_ui = e_u . e_i`.
#[derive(Clone, Copy)]
pub struct DenseScorer<'a> {
    pub table: &'a EmbeddingTable,
}

impl Scorer for DenseScorer<'_> {
    fn n_items(&self) -> usize {
        self.table.n_items()
    }
    fn score_into(&self, user: usize, out: &mut [f64]) {
        let eu = self.table.user(user);
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(eu, self.table.item(i));
        }
    }
}

/// `y = y_dense + beta * y_sparse`.
pub struct FusedScorer<D, S> {
    pub dense: D,
    pub sparse: S,
    pub beta: f64,
}

impl<D: Scorer, S: Scorer> Scorer for FusedScorer<D, S> {
    fn n_items(&self) -> usize {
        self.dense.n_items()
    }
    fn score_into(&self, user: usize, out: &mut [f64]) {
        self.dense.score_into(user, out);
        if self.beta != 0.0 {
            let mut s = vec![0.0; out.len()];
            self.sparse.score_into(user, &mut s);
            for (o, v) in out.iter_mut().zip(&s) {
                *o += self.beta * v;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
