use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const BINARY_MAGIC: &[u8; 8] = b"DCFSIM01";

/// Sparse item-item weight matrix with a structurally empty diagonal.
///
/// Entry `(j, i)` is the contribution of an interaction with item `j` to the
/// score of item `i`. Both the column view (what SLIM fits, one regression
/// per target item) and the row view (what scoring walks) are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n_items: usize,
    col_ptr: Vec<usize>,
    col_rows: Vec<u32>,
    col_vals: Vec<f64>,
    row_ptr: Vec<usize>,
    row_cols: Vec<u32>,
    row_vals: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn zeros(n_items: usize) -> Self {
        Self::from_columns(n_items, vec![Vec::new(); n_items]).expect("empty columns are valid")
    }

    /// `columns[i]` lists `(j, s_ji)`; indices need not be sorted but must be unique.
    /// Explicit zeros are dropped.
    pub fn from_columns(n_items: usize, columns: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        if columns.len() != n_items {
            return Err(Error::Shape(format!(
                "{} columns for {} items",
                columns.len(),
                n_items
            )));
        }
        let mut col_ptr = Vec::with_capacity(n_items + 1);
        col_ptr.push(0);
        let mut col_rows = Vec::new();
        let mut col_vals = Vec::new();
        let mut row_counts = vec![0usize; n_items + 1];
        for (i, mut col) in columns.into_iter().enumerate() {
            col.retain(|&(_, v)| v != 0.0);
            col.sort_by_key(|&(j, _)| j);
            for w in col.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::DuplicateEntry {
                        user: w[0].0,
                        item: i,
                    });
                }
            }
            for &(j, v) in &col {
                if j >= n_items {
                    return Err(Error::Index {
                        what: "item",
                        index: j,
                        bound: n_items,
                    });
                }
                if j == i {
                    return Err(Error::Shape(format!("diagonal entry at item {i}")));
                }
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("non-finite coefficient s[{j},{i}]")));
                }
                col_rows.push(j as u32);
                col_vals.push(v);
                row_counts[j + 1] += 1;
            }
            col_ptr.push(col_rows.len());
        }

        for j in 0..n_items {
            row_counts[j + 1] += row_counts[j];
        }
        let row_ptr = row_counts;
        let mut fill = row_ptr.clone();
        let mut row_cols = vec![0u32; col_rows.len()];
        let mut row_vals = vec![0f64; col_rows.len()];
        for i in 0..n_items {
            for k in col_ptr[i]..col_ptr[i + 1] {
                let j = col_rows[k] as usize;
                row_cols[fill[j]] = i as u32;
                row_vals[fill[j]] = col_vals[k];
                fill[j] += 1;
            }
        }
        Ok(SimilarityMatrix {
            n_items,
            col_ptr,
            col_rows,
            col_vals,
            row_ptr,
            row_cols,
            row_vals,
        })
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.col_rows.len()
    }

    /// Coefficients `(j, s_ji)` feeding target item `i`.
    pub fn column(&self, i: usize) -> (&[u32], &[f64]) {
        let span = self.col_ptr[i]..self.col_ptr[i + 1];
        (&self.col_rows[span.clone()], &self.col_vals[span])
    }

    /// Targets `(i, s_ji)` that source item `j` contributes to.
    pub fn row(&self, j: usize) -> (&[u32], &[f64]) {
        let span = self.row_ptr[j]..self.row_ptr[j + 1];
        (&self.row_cols[span.clone()], &self.row_vals[span])
    }

    pub fn get(&self, j: usize, i: usize) -> f64 {
        let (rows, vals) = self.column(i);
        rows.binary_search(&(j as u32)).map_or(0.0, |k| vals[k])
    }

    pub fn max_column_nnz(&self) -> usize {
        self.col_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// `(row, col, value)` records ordered by column then row.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_items).flat_map(move |i| {
            let (rows, vals) = self.column(i);
            rows.iter().zip(vals).map(move |(&j, &v)| (j as usize, i, v))
        })
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n_items]; self.n_items];
        for (j, i, v) in self.triplets() {
            d[j][i] = v;
        }
        d
    }

    fn from_triplet_records(n_items: usize, records: Vec<(usize, usize, f64)>) -> Result<Self> {
        let mut columns = vec![Vec::new(); n_items];
        for (j, i, v) in records {
            if i >= n_items {
                return Err(Error::Index {
                    what: "item",
                    index: i,
                    bound: n_items,
                });
            }
            columns[i].push((j, v));
        }
        Self::from_columns(n_items, columns)
    }

    /// Header line `n_items nnz`, then `row col value` per line.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{} {}", self.n_items, self.nnz())?;
        for (j, i, v) in self.triplets() {
            writeln!(out, "{j} {i} {v}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| err(1, "missing header".into()))??;
        let h: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| err(1, format!("{e}")))?;
        if h.len() != 2 {
            return Err(err(1, format!("bad header `{header}`")));
        }
        let mut records = Vec::with_capacity(h[1]);
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(err(n + 2, format!("expected 3 fields, got {}", f.len())));
            }
            let j = f[0].parse().map_err(|e| err(n + 2, format!("{e}")))?;
            let i = f[1].parse().map_err(|e| err(n + 2, format!("{e}")))?;
            let v = f[2].parse().map_err(|e| err(n + 2, format!("{e}")))?;
            records.push((j, i, v));
        }
        if records.len() != h[1] {
            return Err(err(1, format!("header declares {} records, found {}", h[1], records.len())));
        }
        Self::from_triplet_records(h[0], records)
    }

    /// Little-endian: magic, u64 n_items, u64 nnz, then `(u32 row, u32 col, f64 value)` records.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&(self.n_items as u64).to_le_bytes())?;
        out.write_all(&(self.nnz() as u64).to_le_bytes())?;
        for (j, i, v) in self.triplets() {
            out.write_all(&(j as u32).to_le_bytes())?;
            out.write_all(&(i as u32).to_le_bytes())?;
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R, origin: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::Artifact {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("not a similarity matrix file"));
        }
        let mut u64buf = [0u8; 8];
        input.read_exact(&mut u64buf)?;
        let n_items = u64::from_le_bytes(u64buf) as usize;
        input.read_exact(&mut u64buf)?;
        let nnz = u64::from_le_bytes(u64buf) as usize;
        let mut records = Vec::with_capacity(nnz);
        let mut rec = [0u8; 16];
        for _ in 0..nnz {
            input.read_exact(&mut rec).map_err(|_| bad("truncated records"))?;
            let j = u32::from_le_bytes(rec[0..4].try_into().unwrap()) as usize;
            let i = u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize;
            let v = f64::from_le_bytes(rec[8..16].try_into().unwrap());
            records.push((j, i, v));
        }
        Self::from_triplet_records(n_items, records)
    }
}
