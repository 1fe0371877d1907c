use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One line of an explicit-feedback log.
#[derive(Clone, Debug, PartialEq)]
pub struct RatingRecord {
    pub user_id: String,
    pub item_id: String,
    pub rating: f64,
    /// Parsed for validation only; the models are not sequential.
    pub timestamp: Option<i64>,
}

/// A user's binarized history: sorted, deduplicated item ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    pub items: Vec<String>,
}

/// Parses `user_id,item_id,rating[,timestamp]` lines. A first line whose
/// rating field is not numeric is treated as a header.
pub fn parse_records(reader: impl Read, source: &Path) -> Result<Vec<RatingRecord>> {
    let mut records = Vec::new();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(parse_err(
                lineno,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let rating = match fields[2].parse::<f64>() {
            Ok(r) => r,
            Err(_) if lineno == 1 => continue,
            Err(_) => return Err(parse_err(lineno, format!("bad rating {:?}", fields[2]))),
        };
        if !rating.is_finite() {
            return Err(parse_err(lineno, format!("non-finite rating {rating}")));
        }
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err(lineno, "empty user or item id".into()));
        }
        let timestamp = match fields.get(3) {
            Some(ts) => Some(
                ts.parse::<i64>()
                    .map_err(|_| parse_err(lineno, format!("bad timestamp {ts:?}")))?,
            ),
            None => None,
        };
        records.push(RatingRecord {
            user_id: fields[0].to_string(),
            item_id: fields[1].to_string(),
            rating,
            timestamp,
        });
    }
    Ok(records)
}

/// Reads a rating log, keeps ratings `>= min_rating`, deduplicates
/// (user, item) and drops users left with fewer than `min_items` items.
/// Output is sorted by user id, then item id.
pub fn ingest(path: &Path, min_rating: f64, min_items: usize) -> Result<Vec<UserHistory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, path, min_rating, min_items)
}

pub fn ingest_reader(
    reader: impl Read,
    source: &Path,
    min_rating: f64,
    min_items: usize,
) -> Result<Vec<UserHistory>> {
    let records = parse_records(reader, source)?;
    let mut by_user: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for r in records {
        if r.rating >= min_rating {
            by_user.entry(r.user_id).or_default().insert(r.item_id);
        }
    }
    let users: Vec<UserHistory> = by_user
        .into_iter()
        .filter(|(_, items)| items.len() >= min_items.max(1))
        .map(|(user_id, items)| UserHistory {
            user_id,
            items: items.into_iter().collect(),
        })
        .collect();
    if users.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no user in {} has at least {min_items} items rated >= {min_rating}",
            PathBuf::from(source).display()
        )));
    }
    Ok(users)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(text: &str, min_rating: f64, min_items: usize) -> Result<Vec<UserHistory>> {
        ingest_reader(text.as_bytes(), Path::new("mem.csv"), min_rating, min_items)
    }

    #[test]
    fn keeps_ratings_at_threshold() {
        let out = run("u,a,4.0\nu,b,3.5\n", 4.0, 1).unwrap();
        assert_eq!(out[0].items, vec!["a"]);
    }

    #[test]
    fn drops_users_below_min_items() {
        let text = "u,a,5\nu,b,5\nu,c,5\nu,d,5\nu,e,1\nv,a,5\nv,b,5\nv,c,5\nv,d,5\nv,e,4\n";
        let out = run(text, 4.0, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].user_id, "v");
    }

    #[test]
    fn duplicates_collapse() {
        let out = run("u,a,4\nu,a,5\n", 4.0, 1).unwrap();
        assert_eq!(out[0].items, vec!["a"]);
    }

    #[test]
    fn header_and_timestamps() {
        let text = "userId,movieId,rating,timestamp\nb,x,4,100\na,y,5,200\na,x,4.5,300\n";
        let out = run(text, 4.0, 1).unwrap();
        assert_eq!(out[0].user_id, "a");
        assert_eq!(out[0].items, vec!["x", "y"]);
        assert_eq!(out[1].user_id, "b");
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = run("u,a,4\nu,b\n", 4.0, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = run("u,a,4\nu,b,high\n", 4.0, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = run("u,a,4,noon\n", 4.0, 1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn empty_result_is_an_error() {
        let err = run("u,a,5\nu,b,5\nu,c,5\n", 4.0, 5).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }
}
