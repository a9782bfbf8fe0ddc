use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tensor};

/// Supervision attached to each example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::Targets(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, indices: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(indices.iter().map(|&i| c[i]).collect()),
            Labels::Targets(t) => Labels::Targets(t.select_rows(indices)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Labels,
    /// Where the data came from: a synthetic-task tag or a file path.
    pub provenance: String,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Labels, provenance: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::Domain("dataset must hold at least one example".into()));
        }
        if labels.len() != features.rows() {
            return Err(Error::Dimension {
                op: "dataset",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        Ok(Dataset {
            features,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Rows picked by index, in order. Panics on an empty selection.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        assert!(!indices.is_empty(), "empty subset");
        Dataset {
            features: self.features.select_rows(indices),
            labels: self.labels.select(indices),
            provenance: self.provenance.clone(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.width() != other.width() {
            return Err(Error::Dimension {
                op: "concat",
                left: self.features.shape(),
                right: other.features.shape(),
            });
        }
        let mut data = self.features.data().to_vec();
        data.extend_from_slice(other.features.data());
        let features = Tensor::new(self.len() + other.len(), self.width(), data)?;
        let labels = match (&self.labels, &other.labels) {
            (Labels::Classes(a), Labels::Classes(b)) => {
                Labels::Classes(a.iter().chain(b).copied().collect())
            }
            (Labels::Targets(a), Labels::Targets(b)) if a.cols() == b.cols() => {
                let mut d = a.data().to_vec();
                d.extend_from_slice(b.data());
                Labels::Targets(Tensor::new(a.rows() + b.rows(), a.cols(), d)?)
            }
            _ => return Err(Error::Domain("cannot concatenate mismatched label kinds".into())),
        };
        Dataset::new(features, labels, self.provenance.clone())
    }

    /// Index batches of at most `batch_size`, in a seeded shuffled order.
    pub fn shuffled_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = seeded_rng(seed, 0xba7c4 + epoch);
        idx.shuffle(&mut rng);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}

/// Seeded disjoint split of `0..n`; the first part holds `round(ratio * n)` indices.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Domain(format!("cannot split {n} example(s)")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let first = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, 0x5b1));
    let second = idx.split_off(first);
    Ok((idx, second))
}

/// Splits a dataset into `(train, validation)`.
pub fn split(d: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(d.len(), ratio, seed)?;
    Ok((d.subset(&a), d.subset(&b)))
}

/// Column layout of a CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub features: Vec<String>,
    pub label: String,
    /// Integer class labels when true, a real-valued target otherwise.
    pub classification: bool,
}

/// Reads a UTF-8, comma-separated file with a header row.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let position = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))
    };
    let feature_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|f| position(f))
        .collect::<Result<_>>()?;
    let label_col = position(&schema.label)?;

    let mut data = Vec::new();
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        // Data rows are numbered from 1, after the header.
        let row = r + 1;
        for (&c, name) in feature_cols.iter().zip(&schema.features) {
            data.push(parse_real(&record, c, row, name)?);
        }
        if schema.classification {
            classes.push(parse_cell::<usize>(&record, label_col, row, &schema.label)?);
        } else {
            targets.push(parse_real(&record, label_col, row, &schema.label)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Domain(format!("{}: no data rows", path.display())));
    }
    let features = Tensor::new(rows, feature_cols.len(), data)?;
    let labels = if schema.classification {
        Labels::Classes(classes)
    } else {
        Labels::Targets(Tensor::new(rows, 1, targets)?)
    };
    Dataset::new(features, labels, path.display().to_string())
}

fn parse_cell<T: std::str::FromStr>(
    record: &csv::StringRecord,
    col: usize,
    row: usize,
    name: &str,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let cell = record.get(col).ok_or_else(|| Error::Parse {
        row,
        column: name.to_string(),
        message: "missing cell".into(),
    })?;
    cell.parse::<T>().map_err(|e| Error::Parse {
        row,
        column: name.to_string(),
        message: format!("`{cell}`: {e}"),
    })
}

fn parse_real(record: &csv::StringRecord, col: usize, row: usize, name: &str) -> Result<f64> {
    let v = parse_cell::<f64>(record, col, row, name)?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: name.to_string(),
            message: format!("`{}`: not a finite decimal", &record[col]),
        });
    }
    Ok(v)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Writes a dataset so that [`load_csv`] reproduces it exactly.
pub fn write_csv(path: impl AsRef<Path>, d: &Dataset, schema: &CsvSchema) -> Result<()> {
    let path = path.as_ref();
    if schema.features.len() != d.width() {
        return Err(Error::Domain("schema feature count differs from dataset width".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<&str> = schema.features.iter().map(String::as_str).collect();
    header.push(&schema.label);
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in 0..d.len() {
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        let mut rec: Vec<String> = d.features.row(r).iter().map(|v| v.to_string()).collect();
        rec.push(match &d.labels {
            Labels::Classes(c) => c[r].to_string(),
            Labels::Targets(t) => t.get(r, 0).to_string(),
        });
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
