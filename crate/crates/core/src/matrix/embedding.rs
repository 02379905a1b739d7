use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DCFE";
const VERSION: u32 = 1;

/// User and item embedding matrices, row-major, `dim` columns each.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    n_users: usize,
    n_items: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl EmbeddingTable {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize) -> Self {
        EmbeddingTable {
            dim,
            n_users,
            n_items,
            users: vec![0.0; n_users * dim],
            items: vec![0.0; n_items * dim],
        }
    }

    pub fn from_parts(dim: usize, users: Vec<f64>, items: Vec<f64>) -> Result<Self> {
        if dim == 0 || users.len() % dim != 0 || items.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "buffers of {} and {} values do not split into rows of {dim}",
                users.len(),
                items.len()
            )));
        }
        Ok(EmbeddingTable {
            dim,
            n_users: users.len() / dim,
            n_items: items.len() / dim,
            users,
            items,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_mut(&mut self, u: usize) -> &mut [f64] {
        &mut self.users[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.items[i * self.dim..(i + 1) * self.dim]
    }

    pub fn user_matrix(&self) -> &[f64] {
        &self.users
    }

    pub fn item_matrix(&self) -> &[f64] {
        &self.items
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|v| v.is_finite())
    }

    /// Rounds every parameter to the nearest `f32`, the precision of the on-disk form.
    pub fn round_to_f32(&mut self) {
        for v in self.users.iter_mut().chain(self.items.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }

    /// Header (magic, version, U, I, d) then user rows and item rows as little-endian `f32`.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        for n in [self.n_users, self.n_items, self.dim] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        for &v in self.users.iter().chain(&self.items) {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R, origin: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Artifact {
            path: origin.to_path_buf(),
            msg,
        };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not an embedding table".into()));
        }
        let mut b4 = [0u8; 4];
        input.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b8 = [0u8; 8];
            input.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        let [n_users, n_items, dim] = dims;
        if dim == 0 {
            return Err(bad("zero embedding dimension".into()));
        }
        let mut read_block = |n: usize| -> Result<Vec<f64>> {
            let mut raw = vec![0u8; n * 4];
            input
                .read_exact(&mut raw)
                .map_err(|_| bad("truncated parameter block".into()))?;
            Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let users = read_block(n_users * dim)?;
        let items = read_block(n_items * dim)?;
        Ok(EmbeddingTable {
            dim,
            n_users,
            n_items,
            users,
            items,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_round_trip_is_bit_exact(
            users in proptest::collection::vec(-10f32..10f32, 6),
            items in proptest::collection::vec(-10f32..10f32, 9),
        ) {
            let table = EmbeddingTable::from_parts(
                3,
                users.iter().map(|&v| v as f64).collect(),
                items.iter().map(|&v| v as f64).collect(),
            ).unwrap();
            let mut bytes = Vec::new();
            table.write_binary(&mut bytes).unwrap();
            let back = EmbeddingTable::read_binary(&bytes[..], Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &table);
            let mut again = Vec::new();
            back.write_binary(&mut again).unwrap();
            prop_assert_eq!(bytes, again);
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(EmbeddingTable::read_binary(&b"nope0000"[..], Path::new("x")).is_err());
    }
}
