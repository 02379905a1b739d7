//! Dataset ingestion, degree vectors and item popularity buckets.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Entry, InteractionMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// `user item item ...` per line.
    #[default]
    Adjacency,
    /// `user item [rating [timestamp]]` per line; fields split on whitespace, `,` or `::`.
    Triplet,
}

impl FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adjacency" => Ok(Format::Adjacency),
            "triplet" => Ok(Format::Triplet),
            o => Err(format!("unknown format `{o}` (expected adjacency|triplet)")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default)]
    pub format: Format,
    /// Triplet files only: keep interactions with `rating >= threshold`.
    #[serde(default)]
    pub rating_threshold: Option<f64>,
}

/// Dense index <-> external id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    external: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    /// Numeric ids are ordered numerically, anything else lexically.
    fn from_ids(ids: HashSet<String>) -> Self {
        let mut external: Vec<String> = ids.into_iter().collect();
        if external.iter().all(|s| s.parse::<u64>().is_ok()) {
            external.sort_by_key(|s| s.parse::<u64>().unwrap());
        } else {
            external.sort();
        }
        let index = external
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        IdMap { external, index }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_ids((0..n).map(|i| i.to_string()).collect())
    }

    pub fn len(&self) -> usize {
        self.external.len()
    }

    pub fn is_empty(&self) -> bool {
        self.external.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn external(&self, index: usize) -> &str {
        &self.external[index]
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, id) in self.external.iter().enumerate() {
            writeln!(out, "{i}\t{id}")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub train: usize,
    pub test: usize,
    pub sparsity: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} users, {} items, {} interactions ({} train / {} test), sparsity {:.2}%",
            self.users,
            self.items,
            self.interactions,
            self.train,
            self.test,
            100.0 * self.sparsity
        )
    }
}

/// Pre-split train/test (and optional validation) interactions sharing one index space.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: InteractionMatrix,
    pub test: InteractionMatrix,
    pub validation: Option<InteractionMatrix>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Dataset {
    pub fn new(
        train: InteractionMatrix,
        test: InteractionMatrix,
        validation: Option<InteractionMatrix>,
    ) -> Result<Self> {
        let users = IdMap::identity(train.n_users());
        let items = IdMap::identity(train.n_items());
        Self::with_maps(train, test, validation, users, items)
    }

    fn with_maps(
        train: InteractionMatrix,
        test: InteractionMatrix,
        validation: Option<InteractionMatrix>,
        users: IdMap,
        items: IdMap,
    ) -> Result<Self> {
        train.check_same_shape(&test)?;
        if test.is_empty() {
            return Err(Error::Split("test split is empty".into()));
        }
        check_disjoint(&train, &test, "train", "test")?;
        if let Some(v) = &validation {
            train.check_same_shape(v)?;
            check_disjoint(&train, v, "train", "validation")?;
            check_disjoint(v, &test, "validation", "test")?;
        }
        Ok(Dataset {
            train,
            test,
            validation,
            users,
            items,
        })
    }

    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    pub fn stats(&self) -> DatasetStats {
        let train = self.train.nnz();
        let test = self.test.nnz();
        let valid = self.validation.as_ref().map_or(0, |v| v.nnz());
        let interactions = train + test + valid;
        let cells = (self.n_users() * self.n_items()).max(1) as f64;
        DatasetStats {
            users: self.n_users(),
            items: self.n_items(),
            interactions,
            train,
            test,
            sparsity: 1.0 - interactions as f64 / cells,
        }
    }

    /// Users with at least one held-out item in `split` and one training item.
    pub fn eval_users(&self, split: &InteractionMatrix) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&u| !split.row(u).is_empty() && !self.train.row(u).is_empty())
            .collect()
    }

    /// The split used for hyperparameter selection and whether it is blind.
    /// Without a validation split this falls back to the test split.
    pub fn tuning_split(&self) -> (&InteractionMatrix, bool) {
        match &self.validation {
            Some(v) => (v, true),
            None => (&self.test, false),
        }
    }

    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        self.users
            .write(BufWriter::new(File::create(dir.join("user_ids.tsv"))?))?;
        self.items
            .write(BufWriter::new(File::create(dir.join("item_ids.tsv"))?))?;
        Ok(())
    }
}

fn check_disjoint(a: &InteractionMatrix, b: &InteractionMatrix, an: &str, bn: &str) -> Result<()> {
    for e in b.entries() {
        if a.contains(e.user, e.item) {
            return Err(Error::Split(format!(
                "pair ({}, {}) appears in both {an} and {bn}",
                e.user, e.item
            )));
        }
    }
    Ok(())
}

type RawPairs = Vec<(String, String)>;

fn read_raw(path: &Path, opts: &LoadOptions) -> Result<RawPairs> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut pairs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let lineno = n + 1;
        let line = line?;
        let line = match opts.format {
            Format::Triplet => line.replace("::", " ").replace(',', " "),
            Format::Adjacency => line,
        };
        let mut tokens = line.split_whitespace();
        let Some(user) = tokens.next() else { continue };
        match opts.format {
            Format::Adjacency => {
                for tok in std::iter::once(user).chain(tokens.clone()) {
                    if tok.parse::<u64>().is_err() {
                        return Err(err(lineno, format!("`{tok}` is not a non-negative integer id")));
                    }
                }
                pairs.extend(tokens.map(|i| (user.to_string(), i.to_string())));
            }
            Format::Triplet => {
                let item = tokens
                    .next()
                    .ok_or_else(|| err(lineno, "expected `user item [rating]`".into()))?;
                let rating = tokens
                    .next()
                    .map(|r| r.parse::<f64>().map_err(|e| err(lineno, format!("rating `{r}`: {e}"))))
                    .transpose()?;
                let keep = match (opts.rating_threshold, rating) {
                    (Some(t), Some(r)) => r >= t,
                    _ => true,
                };
                if keep {
                    pairs.push((user.to_string(), item.to_string()));
                }
            }
        }
    }
    Ok(pairs)
}

fn to_matrix(
    pairs: &RawPairs,
    users: &IdMap,
    items: &IdMap,
    name: &str,
) -> Result<InteractionMatrix> {
    let mut seen = HashSet::with_capacity(pairs.len());
    let mut entries = Vec::with_capacity(pairs.len());
    for (u, i) in pairs {
        let (u, i) = (users.index_of(u).unwrap(), items.index_of(i).unwrap());
        if seen.insert((u, i)) {
            entries.push(Entry::observed(u, i));
        }
    }
    let dropped = pairs.len() - entries.len();
    if dropped > 0 {
        log::warn!("{name}: dropped {dropped} duplicate interactions");
    }
    InteractionMatrix::from_entries(users.len(), items.len(), entries)
}

/// Loads pre-split files; ids of all splits are mapped into one dense index space.
pub fn load_dataset(
    train_path: &Path,
    test_path: &Path,
    validation_path: Option<&Path>,
    opts: &LoadOptions,
) -> Result<Dataset> {
    let train = read_raw(train_path, opts)?;
    let test = read_raw(test_path, opts)?;
    let valid = validation_path.map(|p| read_raw(p, opts)).transpose()?;
    if train.is_empty() {
        return Err(Error::Split(format!("{} has no interactions", train_path.display())));
    }
    if test.is_empty() {
        return Err(Error::Split(format!("{} has no interactions", test_path.display())));
    }

    let all = || train.iter().chain(&test).chain(valid.iter().flatten());
    let users = IdMap::from_ids(all().map(|(u, _)| u.clone()).collect());
    let items = IdMap::from_ids(all().map(|(_, i)| i.clone()).collect());

    let ds = Dataset::with_maps(
        to_matrix(&train, &users, &items, "train")?,
        to_matrix(&test, &users, &items, "test")?,
        valid
            .as_ref()
            .map(|v| to_matrix(v, &users, &items, "validation"))
            .transpose()?,
        users,
        items,
    )?;
    log::info!("loaded {}", ds.stats());
    if ds.validation.is_none() {
        log::warn!("no validation split: hyperparameter selection will read the test split (non-blind)");
    }
    Ok(ds)
}

/// Per-user random holdout: each user with at least two interactions moves
/// `round(test_frac * len)` of them (at least one, never all) to the test side.
pub fn holdout_split(r: &InteractionMatrix, test_frac: f64, seed: u64) -> Result<(InteractionMatrix, InteractionMatrix)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Config(format!("holdout fraction {test_frac} outside (0, 1)")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for u in 0..r.n_users() {
        let mut row: Vec<usize> = r.row(u).items.iter().map(|&i| i as usize).collect();
        row.shuffle(&mut rng);
        let n_test = if row.len() < 2 {
            0
        } else {
            ((row.len() as f64 * test_frac).round() as usize).clamp(1, row.len() - 1)
        };
        for (k, i) in row.into_iter().enumerate() {
            let e = Entry::observed(u, i);
            if k < n_test {
                test.push(e);
            } else {
                train.push(e);
            }
        }
    }
    Ok((
        InteractionMatrix::from_entries(r.n_users(), r.n_items(), train)?,
        InteractionMatrix::from_entries(r.n_users(), r.n_items(), test)?,
    ))
}

/// Loads one interaction file and splits it with [`holdout_split`].
pub fn load_with_holdout(path: &Path, opts: &LoadOptions, test_frac: f64, seed: u64) -> Result<Dataset> {
    let pairs = read_raw(path, opts)?;
    if pairs.is_empty() {
        return Err(Error::Split(format!("{} has no interactions", path.display())));
    }
    let users = IdMap::from_ids(pairs.iter().map(|(u, _)| u.clone()).collect());
    let items = IdMap::from_ids(pairs.iter().map(|(_, i)| i.clone()).collect());
    let full = to_matrix(&pairs, &users, &items, path.to_string_lossy().as_ref())?;
    let (train, test) = holdout_split(&full, test_frac, seed)?;
    let ds = Dataset::with_maps(train, test, None, users, items)?;
    log::info!("loaded {} (holdout {test_frac})", ds.stats());
    Ok(ds)
}

/// Interaction counts per user and per item; every entry counts once regardless of weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeVectors {
    pub user: Vec<u32>,
    pub item: Vec<u32>,
}

pub fn degrees(r: &InteractionMatrix) -> DegreeVectors {
    let mut user = vec![0u32; r.n_users()];
    let mut item = vec![0u32; r.n_items()];
    for (u, deg) in user.iter_mut().enumerate() {
        let row = r.row(u);
        *deg = row.len() as u32;
        for &i in row.items {
            item[i as usize] += 1;
        }
    }
    DegreeVectors { user, item }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    Unpopular,
    Normal,
    Popular,
}

impl Bucket {
    pub const ALL: [Bucket; 3] = [Bucket::Unpopular, Bucket::Normal, Bucket::Popular];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Unpopular => "unpopular",
            Bucket::Normal => "normal",
            Bucket::Popular => "popular",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Items split by training degree: lowest 80% unpopular, top 5% popular, the rest normal.
#[derive(Clone, Debug, PartialEq)]
pub struct PopularityBuckets {
    pub assignment: Vec<Bucket>,
    pub thresholds: (f64, f64),
}

impl PopularityBuckets {
    pub fn bucket(&self, item: usize) -> Bucket {
        self.assignment[item]
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut s = [0; 3];
        for b in &self.assignment {
            s[b.index()] += 1;
        }
        s
    }
}

/// Items sorted by `(degree, index)`; the first `floor(0.80 n)` are unpopular,
/// the last `ceil(0.05 n)` popular.
pub fn popularity_buckets(train: &InteractionMatrix) -> PopularityBuckets {
    let deg = degrees(train).item;
    let n = deg.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (deg[i], i));
    let n_unpopular = n * 80 / 100;
    let n_popular = (n * 5).div_ceil(100);
    let mut assignment = vec![Bucket::Normal; n];
    for (rank, &i) in order.iter().enumerate() {
        assignment[i] = if rank < n_unpopular {
            Bucket::Unpopular
        } else if rank >= n - n_popular {
            Bucket::Popular
        } else {
            Bucket::Normal
        };
    }
    PopularityBuckets {
        assignment,
        thresholds: (0.80, 0.95),
    }
}

/// Writes a matrix as LightGCN-style adjacency lines, one per user with at least one item.
pub fn write_adjacency<W: Write>(r: &InteractionMatrix, mut out: W) -> Result<()> {
    for u in 0..r.n_users() {
        let row = r.row(u);
        if row.is_empty() {
            continue;
        }
        write!(out, "{u}")?;
        for &i in row.items {
            write!(out, " {i}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

pub fn default_split_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("train.txt"), dir.join("test.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::{csr_from_triplets, Provenance};

    fn write_tmp(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn holdout_keeps_every_user_on_both_sides() {
        let t: Vec<_> = (0..20).flat_map(|u| (0..(u % 7 + 1)).map(move |i| (u, i * 2, 1.0))).collect();
        let r = csr_from_triplets(&t, 20, 14).unwrap();
        let (train, test) = holdout_split(&r, 0.2, 9).unwrap();
        assert_eq!(train.nnz() + test.nnz(), r.nnz());
        for u in 0..20 {
            let n = r.row(u).len();
            assert_eq!(train.row(u).len() + test.row(u).len(), n);
            assert!(!train.row(u).is_empty());
            assert_eq!(test.row(u).is_empty(), n < 2);
        }
        assert_eq!(holdout_split(&r, 0.2, 9).unwrap(), (train, test));
        assert!(holdout_split(&r, 1.0, 9).is_err());
    }

    #[test]
    fn raw_rating_files_with_double_colon_separators() {
        let dir = tempfile::tempdir().unwrap();
        let body = "1::10::5::978300760\n1::11::2::978300761\n1::12::4::1\n2::10::4::1\n2::12::3::1\n2::13::5::1\n";
        let p = write_tmp(dir.path(), "ratings.dat", body);
        let opts = LoadOptions {
            format: Format::Triplet,
            rating_threshold: Some(4.0),
        };
        let ds = load_with_holdout(&p, &opts, 0.5, 1).unwrap();
        assert_eq!(ds.train.nnz() + ds.test.nnz(), 4);
        assert_eq!(ds.n_items(), 3);
        assert_eq!(ds.items.index_of("11"), None);
    }

    #[test]
    fn adjacency_hand_parse() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_tmp(dir.path(), "train.txt", "0 1 2\n1 0\n");
        let test = write_tmp(dir.path(), "test.txt", "0 0\n");
        let ds = load_dataset(&train, &test, None, &LoadOptions::default()).unwrap();
        assert_eq!(ds.train.nnz(), 3);
        assert_eq!(ds.train.row(0).items, &[1, 2]);
        assert_eq!(ds.n_users(), 2);
        assert_eq!(ds.n_items(), 3);
    }

    #[test]
    fn empty_test_is_a_split_error() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_tmp(dir.path(), "train.txt", "0 1 2\n");
        let test = write_tmp(dir.path(), "test.txt", "");
        assert!(matches!(
            load_dataset(&train, &test, None, &LoadOptions::default()),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn overlap_is_a_split_error() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_tmp(dir.path(), "train.txt", "0 1 2\n");
        let test = write_tmp(dir.path(), "test.txt", "0 2\n");
        assert!(matches!(
            load_dataset(&train, &test, None, &LoadOptions::default()),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_tmp(dir.path(), "train.txt", "0 1\n1 x\n");
        let test = write_tmp(dir.path(), "test.txt", "0 2\n");
        match load_dataset(&train, &test, None, &LoadOptions::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn triplets_with_threshold_and_string_ids() {
        let dir = tempfile::tempdir().unwrap();
        let train = write_tmp(dir.path(), "train.tsv", "alice\tx\t5\nalice\ty\t2\nbob\ty\t4\n");
        let test = write_tmp(dir.path(), "test.tsv", "bob\tx\t4\n");
        let opts = LoadOptions {
            format: Format::Triplet,
            rating_threshold: Some(4.0),
        };
        let ds = load_dataset(&train, &test, None, &opts).unwrap();
        assert_eq!(ds.train.nnz(), 2);
        let alice = ds.users.index_of("alice").unwrap();
        let x = ds.items.index_of("x").unwrap();
        assert!(ds.train.contains(alice, x));
        assert!(!ds.train.contains(alice, ds.items.index_of("y").unwrap()));
    }

    #[test]
    fn degrees_hand_count() {
        let empty = InteractionMatrix::empty(2, 2);
        assert_eq!(degrees(&empty).user, vec![0, 0]);

        let r = csr_from_triplets(&[(0, 0, 1.0), (0, 1, 1.0), (1, 1, 1.0)], 2, 2).unwrap();
        let d = degrees(&r);
        assert_eq!(d.user, vec![2, 1]);
        assert_eq!(d.item, vec![1, 2]);

        let pseudo = InteractionMatrix::from_entries(
            2,
            2,
            vec![Entry {
                user: 1,
                item: 0,
                weight: 0.5,
                provenance: Provenance::PseudoS2d,
            }],
        )
        .unwrap();
        let augmented = r.union_disjoint(&pseudo).unwrap();
        let d = degrees(&augmented);
        assert_eq!(d.user, vec![2, 2]);
        assert_eq!(d.item, vec![2, 2]);
        let total: u32 = d.user.iter().sum();
        assert_eq!(total as usize, r.nnz() + 1);
    }

    fn matrix_with_item_degrees(degs: &[usize]) -> InteractionMatrix {
        let n_users = degs.iter().copied().max().unwrap_or(0).max(1);
        let mut trip = Vec::new();
        for (i, &d) in degs.iter().enumerate() {
            for u in 0..d {
                trip.push((u, i, 1.0));
            }
        }
        csr_from_triplets(&trip, n_users, degs.len()).unwrap()
    }

    #[test]
    fn buckets_by_direct_quantiles() {
        let degs: Vec<usize> = (1..=100).collect();
        let b = popularity_buckets(&matrix_with_item_degrees(&degs));
        for (i, bucket) in b.assignment.iter().enumerate() {
            let expected = match i + 1 {
                1..=80 => Bucket::Unpopular,
                81..=95 => Bucket::Normal,
                _ => Bucket::Popular,
            };
            assert_eq!(*bucket, expected, "item with degree {}", i + 1);
        }
    }

    #[test]
    fn equal_degrees_partition_by_index() {
        let b = popularity_buckets(&matrix_with_item_degrees(&[3; 20]));
        assert_eq!(b.sizes(), [16, 3, 1]);
        assert!(b.assignment[..16].iter().all(|&x| x == Bucket::Unpopular));
        assert_eq!(b.assignment[19], Bucket::Popular);
    }

    #[test]
    fn single_item_is_popular() {
        let b = popularity_buckets(&matrix_with_item_degrees(&[4]));
        assert_eq!(b.assignment, vec![Bucket::Popular]);
    }

    #[test]
    fn bucket_sizes_stay_within_one_of_target() {
        for n in 1..200 {
            let degs: Vec<usize> = (0..n).map(|i| (i * 7919) % 13).collect();
            let s = popularity_buckets(&matrix_with_item_degrees(&degs)).sizes();
            assert_eq!(s.iter().sum::<usize>(), n);
            assert!((s[0] as f64 - 0.80 * n as f64).abs() <= 1.0);
            assert!((s[2] as f64 - 0.05 * n as f64).abs() <= 1.0);
        }
    }
}
