//! Rating-log ingestion, binarization, sparse interaction vectors and
//! strong-generalization splits.
//!
//! Users in a split are disjoint across train/validation/test. Heldout
//! (validation and test) users keep their history partitioned into a
//! fold-in part, used to infer their latent representation, and a heldout
//! part that is predicted.

mod ingest;
mod io;
mod split;
pub mod synthetic;

pub use ingest::{ingest, ingest_reader, parse_records, RatingRecord, UserHistory};
pub use io::{read_split, vocab_fingerprint, write_split, IngestParams, SplitMeta, SPLIT_FILES};
pub use split::{split, SplitDiagnostics, SplitParams};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// A user's binarized consumption history as sorted item indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionVector {
    pub user: usize,
    items: Vec<usize>,
}

impl InteractionVector {
    /// Sorts and deduplicates `items`.
    pub fn new(user: usize, mut items: Vec<usize>) -> Self {
        items.sort_unstable();
        items.dedup();
        InteractionVector { user, items }
    }

    pub fn items(&self) -> &[usize] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn contains(&self, item: usize) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    /// Dense 1xM 0/1 row.
    pub fn to_dense(&self, n_items: usize) -> Result<Matrix> {
        to_dense(&self.items, n_items)
    }

    /// Inverse of [`to_dense`]: indices of the non-zero entries of a row.
    pub fn from_dense(user: usize, row: &[f64]) -> Self {
        let items = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        InteractionVector { user, items }
    }
}

/// A validation or test user's partitioned history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeldoutUser {
    pub fold_in: InteractionVector,
    pub heldout: InteractionVector,
}

/// Train users with full histories plus heldout users with fold-in/heldout
/// partitions. All item indices refer to `vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub vocab: Vec<String>,
    /// Total number of ingested users; user indices are below this.
    pub n_users: usize,
    pub train: Vec<InteractionVector>,
    pub validation: Vec<HeldoutUser>,
    pub test: Vec<HeldoutUser>,
    pub params: SplitParams,
    pub diagnostics: SplitDiagnostics,
}

impl DatasetSplit {
    pub fn n_items(&self) -> usize {
        self.vocab.len()
    }

    pub fn fingerprint(&self) -> String {
        vocab_fingerprint(&self.vocab)
    }

    pub fn heldout(&self, which: HeldoutSet) -> &[HeldoutUser] {
        match which {
            HeldoutSet::Validation => &self.validation,
            HeldoutSet::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeldoutSet {
    Validation,
    Test,
}

/// Dense 0/1 row with ones at `items`.
pub fn to_dense(items: &[usize], n_items: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(1, n_items);
    for &i in items {
        if i >= n_items {
            return Err(Error::Bounds {
                index: i,
                len: n_items,
            });
        }
        out.data_mut()[i] = 1.0;
    }
    Ok(out)
}

/// Stacks users into a BxM dense 0/1 matrix.
pub fn dense_batch<'a, I>(users: I, n_items: usize) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a InteractionVector>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    for user in users {
        let start = data.len();
        data.resize(start + n_items, 0.0);
        for &i in user.items() {
            if i >= n_items {
                return Err(Error::Bounds {
                    index: i,
                    len: n_items,
                });
            }
            data[start + i] = 1.0;
        }
        rows += 1;
    }
    Matrix::new(rows, n_items, data)
}
