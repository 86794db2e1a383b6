//! Ratings CSV ingestion and preprocessing into per-user branches.
//!
//! Expected layout: a header row, then `user_id,item_id,rating,f_1,…,f_k`
//! with integer ids and real-valued rating and features.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::{BranchData, BranchDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RatingRow {
    pub user: u64,
    pub item: u64,
    pub rating: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RatingsTable {
    pub feature_names: Vec<String>,
    pub rows: Vec<RatingRow>,
}

impl RatingsTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_names.len()
    }
}

pub fn load_ratings(path: &Path) -> Result<RatingsTable> {
    let file = std::fs::File::open(path)?;
    parse_ratings(file, path)
}

/// Parses ratings from any reader; `origin` is only used in error messages.
pub fn parse_ratings<R: Read>(reader: R, origin: &Path) -> Result<RatingsTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Ok(RatingsTable::default());
    }
    let err = |line: u64, msg: String| Error::Parse {
        path: PathBuf::from(origin),
        line,
        msg,
    };
    if headers.len() < 3 {
        return Err(err(
            1,
            format!(
                "expected at least 3 columns (user, item, rating), found {}",
                headers.len()
            ),
        ));
    }
    let feature_names: Vec<String> = headers.iter().skip(3).map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(err(
                line,
                format!("expected {} columns, found {}", headers.len(), rec.len()),
            ));
        }
        let user = rec[0]
            .parse::<u64>()
            .map_err(|_| err(line, format!("non-numeric user id `{}`", &rec[0])))?;
        let item = rec[1]
            .parse::<u64>()
            .map_err(|_| err(line, format!("non-numeric item id `{}`", &rec[1])))?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| {
                err(
                    line,
                    format!("non-numeric value `{}` in column {}", &rec[i], &headers[i]),
                )
            })
        };
        let rating = num(2)?;
        let features = (3..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        rows.push(RatingRow {
            user,
            item,
            rating,
            features,
        });
    }
    Ok(RatingsTable {
        feature_names,
        rows,
    })
}

/// Groups ratings into one branch per user (ascending user id, file order
/// within a user), drops users with more than `max_ratings_per_user`
/// ratings, and binarizes: `rating > threshold` ↦ 1, otherwise 0.
pub fn preprocess(
    table: &RatingsTable,
    max_ratings_per_user: usize,
    threshold: f64,
) -> Result<BranchDataset> {
    let mut by_user: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows.iter().enumerate() {
        by_user.entry(r.user).or_default().push(i);
    }
    let dim = table.feature_dim();
    let branches = by_user
        .into_values()
        .filter(|rows| rows.len() <= max_ratings_per_user)
        .map(|rows| {
            let x =
                Array2::from_shape_fn((rows.len(), dim), |(j, c)| table.rows[rows[j]].features[c]);
            let y = Array1::from_iter(rows.iter().map(|&r| {
                if table.rows[r].rating > threshold {
                    1.0
                } else {
                    0.0
                }
            }));
            BranchData::new(x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    BranchDataset::new(branches, dim)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<RatingsTable> {
        parse_ratings(s.as_bytes(), Path::new("inline.csv"))
    }

    #[test]
    fn parses_well_formed_rows() {
        let t = parse("user,item,rating,f1,f2\n1,10,3.5,0.1,0.2\n1,11,2,0.3,0.4\n2,10,5,0.1,0.2\n")
            .unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.feature_dim(), 2);
        assert_eq!(
            t.rows[1],
            RatingRow {
                user: 1,
                item: 11,
                rating: 2.0,
                features: vec![0.3, 0.4]
            }
        );
    }

    #[test]
    fn missing_feature_names_the_line() {
        let e = parse("user,item,rating,f1,f2\n1,10,3.5,0.1,0.2\n1,11,2,0.3\n").unwrap_err();
        match e {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_an_error() {
        let e = parse("user,item,rating\n1,10,good\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e:?}");
    }

    #[test]
    fn empty_file_is_empty_table() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn binarizes_at_threshold() {
        let t = parse("u,i,r,f\n1,1,3.0,0\n1,2,3.5,0\n1,3,5.0,0\n").unwrap();
        let ds = preprocess(&t, 1000, 3.0).unwrap();
        assert_eq!(ds.branches[0].y.to_vec(), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn drops_heavy_users() {
        let mut csv = String::from("u,i,r,f\n");
        for k in 0..4 {
            csv.push_str(&format!("7,{k},4,0\n"));
        }
        csv.push_str("8,1,4,0\n8,2,1,0\n");
        let t = parse(&csv).unwrap();
        assert_eq!(preprocess(&t, 4, 3.0).unwrap().len(), 2);
        let ds = preprocess(&t, 3, 3.0).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.branches[0].n(), 2);
    }

    #[test]
    fn idempotent_on_binary_data() {
        let t = parse("u,i,r,f\n1,1,0,0.5\n1,2,1,0.1\n2,1,1,0.5\n").unwrap();
        let once = preprocess(&t, 10, 0.5).unwrap();
        let mut t2 = t.clone();
        let mut k = 0;
        for b in &once.branches {
            for &y in b.y.iter() {
                t2.rows[k].rating = y;
                k += 1;
            }
        }
        assert_eq!(preprocess(&t2, 10, 0.5).unwrap(), once);
    }
}
