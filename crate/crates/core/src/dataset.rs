//! Binary benchmark datasets: comma-separated 0/1 rows, one sample per line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Row-major matrix of discrete states.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    n_vars: usize,
    values: Vec<u8>,
}

impl Dataset {
    pub fn new(n_vars: usize, values: Vec<u8>) -> Result<Self> {
        if n_vars == 0 || !values.len().is_multiple_of(n_vars) {
            return Err(Error::invalid(format!(
                "{} values do not form rows of width {n_vars}",
                values.len()
            )));
        }
        Ok(Dataset { n_vars, values })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_vars = rows.first().map_or(0, Vec::len);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_vars {
                return Err(Error::Arity {
                    row: i,
                    expected: n_vars,
                    found: r.len(),
                });
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Dataset::new(n_vars, rows.concat())
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.n_vars
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_vars..(i + 1) * self.n_vars]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        self.values.chunks_exact(self.n_vars)
    }

    /// Parses the text form; `source` is used in error messages.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let mut values = Vec::new();
        let mut n_vars = None;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let lineno = idx + 1;
            let mut count = 0;
            for tok in line.split(',') {
                let v = match tok.trim() {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::parse(
                            lineno,
                            format!("non-binary token `{other}` in column {}", count + 1),
                        )
                        .with_path(source))
                    }
                };
                values.push(v);
                count += 1;
            }
            match n_vars {
                None => n_vars = Some(count),
                Some(n) if n != count => {
                    return Err(Error::parse(
                        lineno,
                        format!("ragged row: {count} values, expected {n}"),
                    )
                    .with_path(source))
                }
                _ => {}
            }
        }
        let n_vars = n_vars.ok_or(Error::EmptyDataset)?;
        Dataset::new(n_vars, values)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Dataset::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 2);
        for row in self.rows() {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push(char::from(b'0' + v));
            }
            out.push('\n');
        }
        out
    }

    /// Unit-weight view.
    pub fn weighted(&self, alpha: f64) -> WeightedDataset {
        WeightedDataset {
            n_vars: self.n_vars,
            values: self.values.clone(),
            weights: vec![1.0; self.len()],
            alpha,
        }
    }

    /// Distinct rows in first-occurrence order with multiplicities.
    pub fn compress(&self) -> CompressedDataset {
        let mut index: HashMap<&[u8], usize> = HashMap::new();
        let mut values = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        let mut first = Vec::new();
        let mut of_row = Vec::with_capacity(self.len());
        for (i, row) in self.rows().enumerate() {
            let id = *index.entry(row).or_insert_with(|| {
                values.extend_from_slice(row);
                counts.push(0.0);
                first.push(i);
                counts.len() - 1
            });
            counts[id] += 1.0;
            of_row.push(id);
        }
        CompressedDataset {
            unique: Dataset {
                n_vars: self.n_vars,
                values,
            },
            counts,
            first_index: first,
            of_row,
        }
    }
}

/// Distinct rows of a dataset together with how often each occurs.
#[derive(Clone, Debug)]
pub struct CompressedDataset {
    pub unique: Dataset,
    pub counts: Vec<f64>,
    /// Index of the first original row equal to each unique row.
    pub first_index: Vec<usize>,
    /// Unique-row id of every original row.
    pub of_row: Vec<usize>,
}

/// Rows with non-negative sample weights and an add-alpha smoothing constant.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDataset {
    n_vars: usize,
    values: Vec<u8>,
    weights: Vec<f64>,
    pub alpha: f64,
}

impl WeightedDataset {
    pub fn new(data: &Dataset, weights: Vec<f64>, alpha: f64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if weights.len() != data.len() {
            return Err(Error::invalid(format!(
                "{} weights for {} rows",
                weights.len(),
                data.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("sample weights must be finite and non-negative"));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("sample weights sum to zero"));
        }
        if !(alpha.is_finite() && alpha >= 0.0) {
            return Err(Error::invalid("alpha must be finite and non-negative"));
        }
        Ok(WeightedDataset {
            n_vars: data.n_vars,
            values: data.values.clone(),
            weights,
            alpha,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.values[i * self.n_vars..(i + 1) * self.n_vars]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[u8]> + '_ {
        self.values.chunks_exact(self.n_vars)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            n_vars: self.n_vars,
            values: self.values.clone(),
        }
    }

    /// Same rows with different weights.
    pub fn reweighted(&self, weights: Vec<f64>) -> Result<Self> {
        WeightedDataset::new(&self.dataset(), weights, self.alpha)
    }
}

/// Train, validation and test splits of one benchmark dataset.
#[derive(Clone, Debug)]
pub struct DatasetTriple {
    pub name: String,
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl DatasetTriple {
    pub fn n_vars(&self) -> usize {
        self.train.n_vars()
    }
}

pub fn split_path(dir: &Path, name: &str, split: &str) -> PathBuf {
    dir.join(format!("{name}.{split}.data"))
}

/// Loads `<name>.ts.data`, `<name>.valid.data` and `<name>.test.data`.
pub fn load_dataset(dir: &Path, name: &str) -> Result<DatasetTriple> {
    let train = Dataset::load(&split_path(dir, name, "ts"))?;
    let valid = Dataset::load(&split_path(dir, name, "valid"))?;
    let test = Dataset::load(&split_path(dir, name, "test"))?;
    for (split, d) in [("valid", &valid), ("test", &test)] {
        if d.n_vars() != train.n_vars() {
            return Err(Error::invalid(format!(
                "{name}.{split}.data has {} columns, training split has {}",
                d.n_vars(),
                train.n_vars()
            )));
        }
    }
    Ok(DatasetTriple {
        name: name.to_string(),
        train,
        valid,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_reports_bad_tokens() {
        let d = Dataset::parse("0,1,1\n1,0,0\n\n", Path::new("x")).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.row(1), &[1, 0, 0]);
        let err = Dataset::parse("0,1\n1,2\n", Path::new("bad.data")).unwrap_err();
        assert_eq!(err.to_string(), "bad.data:2: non-binary token `2` in column 2");
        let err = Dataset::parse("0,1\n1\n", Path::new("r.data")).unwrap_err();
        assert!(err.to_string().starts_with("r.data:2: ragged row"));
    }

    #[test]
    fn compress_counts_duplicates() {
        let d = Dataset::from_rows(&[vec![0, 1], vec![1, 1], vec![0, 1]]).unwrap();
        let c = d.compress();
        assert_eq!(c.unique.len(), 2);
        assert_eq!(c.counts, vec![2.0, 1.0]);
        assert_eq!(c.first_index, vec![0, 1]);
        assert_eq!(c.of_row, vec![0, 1, 0]);
    }

    #[test]
    fn text_round_trip() {
        let d = Dataset::from_rows(&[vec![0, 1, 1], vec![1, 0, 0]]).unwrap();
        assert_eq!(Dataset::parse(&d.to_text(), Path::new("t")).unwrap(), d);
    }

    #[test]
    fn load_triple_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        for split in ["ts", "valid", "test"] {
            fs::write(split_path(dir.path(), "toy", split), "0,1\n1,1\n").unwrap();
        }
        let t = load_dataset(dir.path(), "toy").unwrap();
        assert_eq!(t.n_vars(), 2);
        assert_eq!(t.train.len(), 2);
        assert!(load_dataset(dir.path(), "missing").is_err());
    }
}
