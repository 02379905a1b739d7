use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where an entry of an interaction matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Observed,
    /// Pseudo-positive proposed by the sparse view for the dense view.
    PseudoS2d,
    /// Pseudo-positive proposed by the dense view for the sparse view.
    PseudoD2s,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Observed => "observed",
            Provenance::PseudoS2d => "pseudo_s2d",
            Provenance::PseudoD2s => "pseudo_d2s",
        })
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "observed" => Ok(Provenance::Observed),
            "pseudo_s2d" => Ok(Provenance::PseudoS2d),
            "pseudo_d2s" => Ok(Provenance::PseudoD2s),
            other => Err(format!("unknown provenance `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Entry {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
    pub provenance: Provenance,
}

impl Entry {
    pub fn observed(user: usize, item: usize) -> Self {
        Entry {
            user,
            item,
            weight: 1.0,
            provenance: Provenance::Observed,
        }
    }
}

/// One user's row of an [`InteractionMatrix`].
#[derive(Clone, Copy, Debug)]
pub struct Row<'a> {
    pub items: &'a [u32],
    pub weights: &'a [f64],
    pub provenance: &'a [Provenance],
}

impl<'a> Row<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&(item as u32)).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + 'a {
        let items = self.items;
        let weights = self.weights;
        items.iter().zip(weights).map(|(&i, &w)| (i as usize, w))
    }
}

/// Implicit-feedback user-item matrix in compressed sparse row form.
///
/// Rows hold strictly increasing item indices. Each entry carries a weight in
/// `[0, 1]` and a [`Provenance`] tag so augmented matrices can be split back
/// into their observed and pseudo parts.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
    provenance: Vec<Provenance>,
}

/// Builds an observed-provenance matrix from `(user, item, weight)` triplets.
pub fn csr_from_triplets(
    triplets: &[(usize, usize, f64)],
    n_users: usize,
    n_items: usize,
) -> Result<InteractionMatrix> {
    let entries = triplets
        .iter()
        .map(|&(user, item, weight)| Entry {
            user,
            item,
            weight,
            provenance: Provenance::Observed,
        })
        .collect();
    InteractionMatrix::from_entries(n_users, n_items, entries)
}

impl InteractionMatrix {
    pub fn empty(n_users: usize, n_items: usize) -> Self {
        InteractionMatrix {
            n_users,
            n_items,
            indptr: vec![0; n_users + 1],
            indices: Vec::new(),
            weights: Vec::new(),
            provenance: Vec::new(),
        }
    }

    pub fn from_entries(n_users: usize, n_items: usize, mut entries: Vec<Entry>) -> Result<Self> {
        if n_users > u32::MAX as usize || n_items > u32::MAX as usize {
            return Err(Error::Shape(format!(
                "{n_users} x {n_items} exceeds 32-bit index space"
            )));
        }
        for e in &entries {
            if e.user >= n_users {
                return Err(Error::Index {
                    what: "user",
                    index: e.user,
                    bound: n_users,
                });
            }
            if e.item >= n_items {
                return Err(Error::Index {
                    what: "item",
                    index: e.item,
                    bound: n_items,
                });
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(Error::InvalidWeight {
                    user: e.user,
                    item: e.item,
                    weight: e.weight,
                });
            }
        }
        entries.sort_by_key(|e| (e.user, e.item));
        if let Some(w) = entries
            .windows(2)
            .find(|w| w[0].user == w[1].user && w[0].item == w[1].item)
        {
            return Err(Error::DuplicateEntry {
                user: w[0].user,
                item: w[0].item,
            });
        }

        let mut indptr = vec![0usize; n_users + 1];
        for e in &entries {
            indptr[e.user + 1] += 1;
        }
        for u in 0..n_users {
            indptr[u + 1] += indptr[u];
        }
        Ok(InteractionMatrix {
            n_users,
            n_items,
            indptr,
            indices: entries.iter().map(|e| e.item as u32).collect(),
            weights: entries.iter().map(|e| e.weight).collect(),
            provenance: entries.iter().map(|e| e.provenance).collect(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, user: usize) -> Row<'_> {
        let span = self.indptr[user]..self.indptr[user + 1];
        Row {
            items: &self.indices[span.clone()],
            weights: &self.weights[span.clone()],
            provenance: &self.provenance[span],
        }
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        user < self.n_users && self.row(user).contains(item)
    }

    pub fn entries(&self) -> impl Iterator<Item = Entry> + '_ {
        (0..self.n_users).flat_map(move |u| {
            let row = self.row(u);
            (0..row.len()).map(move |k| Entry {
                user: u,
                item: row.items[k] as usize,
                weight: row.weights[k],
                provenance: row.provenance[k],
            })
        })
    }

    pub fn to_triplets(&self) -> Vec<(usize, usize, f64)> {
        self.entries().map(|e| (e.user, e.item, e.weight)).collect()
    }

    pub fn count_provenance(&self, provenance: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == provenance).count()
    }

    /// Keeps only entries whose provenance satisfies `keep`.
    pub fn filter_provenance(&self, keep: impl Fn(Provenance) -> bool) -> InteractionMatrix {
        let entries = self.entries().filter(|e| keep(e.provenance)).collect();
        InteractionMatrix::from_entries(self.n_users, self.n_items, entries)
            .expect("subset of a valid matrix is valid")
    }

    /// Per-item user lists (the transpose), each sorted by user index.
    pub fn item_users(&self) -> Vec<Vec<u32>> {
        let mut cols = vec![Vec::new(); self.n_items];
        for u in 0..self.n_users {
            for &i in self.row(u).items {
                cols[i as usize].push(u as u32);
            }
        }
        cols
    }

    /// Union with a matrix that must share no `(user, item)` pair with `self`.
    pub fn union_disjoint(&self, other: &InteractionMatrix) -> Result<InteractionMatrix> {
        self.check_same_shape(other)?;
        for e in other.entries() {
            if self.contains(e.user, e.item) {
                return Err(Error::Disjointness {
                    user: e.user,
                    item: e.item,
                });
            }
        }
        let entries = self.entries().chain(other.entries()).collect();
        InteractionMatrix::from_entries(self.n_users, self.n_items, entries)
    }

    /// Element-wise OR: entries of `other` already present in `self` are dropped.
    pub fn or_merge(&self, other: &InteractionMatrix) -> Result<InteractionMatrix> {
        self.check_same_shape(other)?;
        let extra: Vec<Entry> = other
            .entries()
            .filter(|e| !self.contains(e.user, e.item))
            .collect();
        let entries = self.entries().chain(extra).collect();
        InteractionMatrix::from_entries(self.n_users, self.n_items, entries)
    }

    pub fn check_same_shape(&self, other: &InteractionMatrix) -> Result<()> {
        if self.n_users != other.n_users || self.n_items != other.n_items {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.n_users, self.n_items, other.n_users, other.n_items
            )));
        }
        Ok(())
    }

    /// Writes `# n_users n_items nnz` followed by one `user item weight provenance` line per entry.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# {} {} {}", self.n_users, self.n_items, self.nnz())?;
        for e in self.entries() {
            writeln!(out, "{}\t{}\t{}\t{}", e.user, e.item, e.weight, e.provenance)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_triplets<R: BufRead>(input: R, origin: &std::path::Path) -> Result<InteractionMatrix> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = input.lines().enumerate();
        let (n_users, n_items, nnz) = match lines.next() {
            Some((_, header)) => {
                let header = header?;
                let fields: Vec<&str> = header
                    .trim_start_matches('#')
                    .split_whitespace()
                    .collect();
                let parsed: std::result::Result<Vec<usize>, _> =
                    fields.iter().map(|f| f.parse::<usize>()).collect();
                match parsed {
                    Ok(v) if v.len() == 3 && header.starts_with('#') => (v[0], v[1], v[2]),
                    _ => return Err(parse_err(1, format!("bad header `{header}`"))),
                }
            }
            None => return Err(parse_err(1, "missing header".into())),
        };
        let mut entries = Vec::with_capacity(nnz);
        for (lineno, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(parse_err(lineno + 1, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|e| parse_err(lineno + 1, e.to_string()));
            entries.push(Entry {
                user: num(f[0])?,
                item: num(f[1])?,
                weight: f[2]
                    .parse::<f64>()
                    .map_err(|e| parse_err(lineno + 1, e.to_string()))?,
                provenance: f[3].parse().map_err(|e| parse_err(lineno + 1, e))?,
            });
        }
        if entries.len() != nnz {
            return Err(parse_err(
                1,
                format!("header declares {nnz} entries, found {}", entries.len()),
            ));
        }
        InteractionMatrix::from_entries(n_users, n_items, entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_triplets_give_empty_matrix() {
        let m = csr_from_triplets(&[], 2, 2).unwrap();
        assert_eq!(m.nnz(), 0);
        assert!(m.row(0).is_empty() && m.row(1).is_empty());
    }

    #[test]
    fn rows_are_canonical() {
        let m = csr_from_triplets(&[(0, 1, 1.0), (1, 0, 1.0)], 2, 2).unwrap();
        assert_eq!(m.row(0).items, &[1]);
        assert_eq!(m.row(1).items, &[0]);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        assert!(matches!(
            csr_from_triplets(&[(2, 0, 1.0)], 2, 2),
            Err(Error::Index { what: "user", .. })
        ));
        assert!(matches!(
            csr_from_triplets(&[(0, 5, 1.0)], 2, 2),
            Err(Error::Index { what: "item", .. })
        ));
        assert!(matches!(
            csr_from_triplets(&[(0, 1, 1.0), (0, 1, 1.0)], 2, 2),
            Err(Error::DuplicateEntry { user: 0, item: 1 })
        ));
        assert!(matches!(
            csr_from_triplets(&[(0, 1, 1.5)], 2, 2),
            Err(Error::InvalidWeight { .. })
        ));
    }

    #[test]
    fn union_rejects_overlap_and_or_merge_is_idempotent() {
        let r = csr_from_triplets(&[(0, 0, 1.0), (1, 1, 1.0)], 2, 2).unwrap();
        assert!(matches!(r.union_disjoint(&r), Err(Error::Disjointness { .. })));
        let merged = r.or_merge(&r).unwrap();
        assert_eq!(merged, r);
    }

    #[test]
    fn text_round_trip_keeps_provenance() {
        let entries = vec![
            Entry::observed(0, 2),
            Entry {
                user: 1,
                item: 0,
                weight: 0.3,
                provenance: Provenance::PseudoS2d,
            },
        ];
        let m = InteractionMatrix::from_entries(2, 3, entries).unwrap();
        let mut buf = Vec::new();
        m.write_triplets(&mut buf).unwrap();
        let back = InteractionMatrix::read_triplets(&buf[..], std::path::Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn triplet_round_trip_is_lossless(
            pairs in proptest::collection::btree_set((0usize..6, 0usize..7), 0..30)
        ) {
            let mut triplets: Vec<_> = pairs.iter().map(|&(u, i)| (u, i, 1.0)).collect();
            // present them out of order
            triplets.reverse();
            let m = csr_from_triplets(&triplets, 6, 7).unwrap();
            let mut back = m.to_triplets();
            back.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            prop_assert_eq!(back, triplets);
            for u in 0..6 {
                prop_assert!(m.row(u).items.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
