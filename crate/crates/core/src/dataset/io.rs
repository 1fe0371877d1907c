//! On-disk split artifact: a directory of two-column CSV files plus
//! `meta.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetSplit, HeldoutUser, InteractionVector, SplitDiagnostics, SplitParams};
use crate::error::{Error, Result};

/// Files written by [`write_split`], in write order.
pub const SPLIT_FILES: [&str; 7] = [
    "vocab.csv",
    "train.csv",
    "validation_tr.csv",
    "validation_te.csv",
    "test_tr.csv",
    "test_te.csv",
    "meta.json",
];

/// Filtering applied before splitting, recorded for provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestParams {
    pub min_rating: f64,
    pub min_items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    #[serde(rename = "N")]
    pub n_users: usize,
    #[serde(rename = "M")]
    pub n_items: usize,
    pub seed: u64,
    pub n_heldout_users: usize,
    pub fold_in_fraction: f64,
    pub ingest: Option<IngestParams>,
    pub n_train_users: usize,
    pub n_validation_users: usize,
    pub n_test_users: usize,
    pub n_train_interactions: usize,
    pub diagnostics: SplitDiagnostics,
    pub vocab_fingerprint: String,
}

impl SplitMeta {
    pub fn of(split: &DatasetSplit, ingest: Option<IngestParams>) -> Self {
        SplitMeta {
            n_users: split.n_users,
            n_items: split.n_items(),
            seed: split.params.seed,
            n_heldout_users: split.params.n_heldout_users,
            fold_in_fraction: split.params.fold_in_fraction,
            ingest,
            n_train_users: split.train.len(),
            n_validation_users: split.validation.len(),
            n_test_users: split.test.len(),
            n_train_interactions: split.train.iter().map(InteractionVector::len).sum(),
            diagnostics: split.diagnostics.clone(),
            vocab_fingerprint: split.fingerprint(),
        }
    }
}

/// SHA-256 over the newline-joined vocabulary, hex encoded.
pub fn vocab_fingerprint(vocab: &[String]) -> String {
    let mut hasher = Sha256::new();
    for item in vocab {
        hasher.update(item.as_bytes());
        hasher.update(b"\n");
    }
    hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_pairs<'a>(path: &Path, users: impl Iterator<Item = &'a InteractionVector>) -> Result<()> {
    let mut out = String::from("user_index,item_index\n");
    for u in users {
        for i in u.items() {
            let _ = writeln!(out, "{},{i}", u.user);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the seven split files into `dir`, creating it if needed.
pub fn write_split(dir: &Path, split: &DatasetSplit, ingest: Option<IngestParams>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut vocab = String::from("index,item_id\n");
    for (i, id) in split.vocab.iter().enumerate() {
        let _ = writeln!(vocab, "{i},{id}");
    }
    let path = dir.join("vocab.csv");
    fs::write(&path, vocab).map_err(|e| Error::io(&path, e))?;
    write_pairs(&dir.join("train.csv"), split.train.iter())?;
    write_pairs(&dir.join("validation_tr.csv"), split.validation.iter().map(|h| &h.fold_in))?;
    write_pairs(&dir.join("validation_te.csv"), split.validation.iter().map(|h| &h.heldout))?;
    write_pairs(&dir.join("test_tr.csv"), split.test.iter().map(|h| &h.fold_in))?;
    write_pairs(&dir.join("test_te.csv"), split.test.iter().map(|h| &h.heldout))?;
    let meta = serde_json::to_string_pretty(&SplitMeta::of(split, ingest))? + "\n";
    let path = dir.join("meta.json");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_pairs(path: &Path, n_items: usize) -> Result<BTreeMap<usize, Vec<usize>>> {
    let text = read_text(path)?;
    let mut users: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (u, i) = line
            .split_once(',')
            .ok_or_else(|| parse_err(path, idx + 1, "expected user_index,item_index"))?;
        let u: usize = u
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad user index"))?;
        let i: usize = i
            .trim()
            .parse()
            .map_err(|_| parse_err(path, idx + 1, "bad item index"))?;
        if i >= n_items {
            return Err(parse_err(
                path,
                idx + 1,
                format!("item index {i} outside vocabulary of {n_items}"),
            ));
        }
        users.entry(u).or_default().push(i);
    }
    Ok(users)
}

fn read_heldout(dir: &Path, prefix: &str, n_items: usize) -> Result<Vec<HeldoutUser>> {
    let tr_path = dir.join(format!("{prefix}_tr.csv"));
    let te_path = dir.join(format!("{prefix}_te.csv"));
    let mut tr = read_pairs(&tr_path, n_items)?;
    let mut te = read_pairs(&te_path, n_items)?;
    if !tr.keys().eq(te.keys()) {
        return Err(parse_err(&te_path, 0, format!("users differ from {prefix}_tr.csv")));
    }
    let users: Vec<usize> = tr.keys().copied().collect();
    Ok(users
        .into_iter()
        .map(|u| HeldoutUser {
            fold_in: InteractionVector::new(u, tr.remove(&u).unwrap_or_default()),
            heldout: InteractionVector::new(u, te.remove(&u).unwrap_or_default()),
        })
        .collect())
}

/// Loads a split written by [`write_split`].
pub fn read_split(dir: &Path) -> Result<DatasetSplit> {
    let meta_path = dir.join("meta.json");
    let meta: SplitMeta = serde_json::from_str(&read_text(&meta_path)?)?;

    let vocab_path = dir.join("vocab.csv");
    let mut vocab = Vec::with_capacity(meta.n_items);
    for (idx, line) in read_text(&vocab_path)?.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (i, id) = line
            .split_once(',')
            .ok_or_else(|| parse_err(&vocab_path, idx + 1, "expected index,item_id"))?;
        if i.trim().parse::<usize>().ok() != Some(vocab.len()) {
            return Err(parse_err(&vocab_path, idx + 1, "indices must be 0..M in order"));
        }
        vocab.push(id.to_string());
    }
    if vocab.len() != meta.n_items || vocab_fingerprint(&vocab) != meta.vocab_fingerprint {
        return Err(Error::VocabMismatch {
            model: meta.vocab_fingerprint,
            data: vocab_fingerprint(&vocab),
        });
    }

    let train = read_pairs(&dir.join("train.csv"), vocab.len())?
        .into_iter()
        .map(|(u, items)| InteractionVector::new(u, items))
        .collect();
    let validation = read_heldout(dir, "validation", vocab.len())?;
    let test = read_heldout(dir, "test", vocab.len())?;

    Ok(DatasetSplit {
        vocab,
        n_users: meta.n_users,
        train,
        validation,
        test,
        params: SplitParams {
            n_heldout_users: meta.n_heldout_users,
            fold_in_fraction: meta.fold_in_fraction,
            seed: meta.seed,
        },
        diagnostics: meta.diagnostics,
    })
}
