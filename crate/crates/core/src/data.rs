//! Samples of (response, covariates) and CSV ingestion.

use std::io::Read;

use crate::error::{QspecError, Result};

/// A response vector plus a row-major covariate matrix with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    response_name: String,
    covariate_names: Vec<String>,
    y: Vec<f64>,
    x: Vec<f64>,
}

impl Dataset {
    /// `x` is row-major with `covariate_names.len()` entries per row.
    pub fn new(
        response_name: impl Into<String>,
        covariate_names: Vec<String>,
        y: Vec<f64>,
        x: Vec<f64>,
    ) -> Result<Self> {
        let k = covariate_names.len();
        if x.len() != y.len() * k {
            return Err(QspecError::Shape(format!(
                "{} covariate values for {} rows of {} columns",
                x.len(),
                y.len(),
                k
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(QspecError::Domain("dataset contains non-finite values".into()));
        }
        Ok(Dataset {
            response_name: response_name.into(),
            covariate_names,
            y,
            x,
        })
    }

    pub fn from_columns(
        response_name: impl Into<String>,
        y: Vec<f64>,
        columns: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        let n = y.len();
        let mut x = vec![0.0; n * columns.len()];
        let k = columns.len();
        for (j, (name, col)) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(QspecError::Shape(format!(
                    "column {name} has {} rows, response has {n}",
                    col.len()
                )));
            }
            for (i, v) in col.iter().enumerate() {
                x[i * k + j] = *v;
            }
        }
        let names = columns.into_iter().map(|(name, _)| name).collect();
        Dataset::new(response_name, names, y, x)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.x[i * k..(i + 1) * k]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.n()).map(move |i| self.row(i))
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.x[i * self.k() + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.value(i, j)).collect()
    }

    /// Rows `indices` (repetitions allowed), in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Dataset {
        let k = self.k();
        let mut x = Vec::with_capacity(indices.len() * k);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            response_name: self.response_name.clone(),
            covariate_names: self.covariate_names.clone(),
            y,
            x,
        }
    }

    /// Same covariates, new response.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Dataset> {
        if y.len() != self.n() {
            return Err(QspecError::Shape(format!(
                "new response has {} rows, dataset has {}",
                y.len(),
                self.n()
            )));
        }
        Dataset::new(
            self.response_name.clone(),
            self.covariate_names.clone(),
            y,
            self.x.clone(),
        )
    }

    /// Builds a dataset from a header and row-major covariate rows.
    pub fn from_rows(
        response_name: impl Into<String>,
        covariate_names: Vec<String>,
        y: Vec<f64>,
        rows: &[Vec<f64>],
    ) -> Result<Self> {
        let x = rows.iter().flatten().copied().collect();
        Dataset::new(response_name, covariate_names, y, x)
    }
}

/// All numeric columns of a CSV file, by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl Table {
    /// Reads comma-separated values with a mandatory header row. Every field
    /// must parse as a decimal-point number.
    pub fn read_csv<R: Read>(reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| QspecError::Data {
                line: 1,
                message: e.to_string(),
            })?
            .iter()
            .map(str::to_string)
            .collect();
        if names.is_empty() || names.iter().any(String::is_empty) {
            return Err(QspecError::Data {
                line: 1,
                message: "header row is missing or has empty column names".into(),
            });
        }
        let mut columns = vec![Vec::new(); names.len()];
        for (idx, record) in rdr.records().enumerate() {
            let line = idx + 2;
            let record = record.map_err(|e| QspecError::Data {
                line,
                message: e.to_string(),
            })?;
            if record.len() != names.len() {
                return Err(QspecError::Data {
                    line,
                    message: format!("expected {} fields, found {}", names.len(), record.len()),
                });
            }
            for (j, field) in record.iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| QspecError::Data {
                    line,
                    message: format!("field {} ({field:?}) is not a number", names[j]),
                })?;
                if !v.is_finite() {
                    return Err(QspecError::Data {
                        line,
                        message: format!("field {} is not finite", names[j]),
                    });
                }
                columns[j].push(v);
            }
        }
        Ok(Table { names, columns })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    /// Dataset with the named response and covariates (in the given order).
    pub fn dataset(&self, response: &str, covariates: &[String]) -> Result<Dataset> {
        let missing = |name: &str| QspecError::config("data header", format!("no column named {name:?}"));
        let y = self.column(response).ok_or_else(|| missing(response))?.to_vec();
        let mut cols = Vec::with_capacity(covariates.len());
        for c in covariates {
            cols.push((c.clone(), self.column(c).ok_or_else(|| missing(c))?.to_vec()));
        }
        Dataset::from_columns(response, y, cols)
    }

    /// Replaces the values of an existing column.
    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Result<Table> {
        let j = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| QspecError::config("data header", format!("no column named {name:?}")))?;
        if values.len() != self.n_rows() {
            return Err(QspecError::Shape(format!("{} values for {} rows", values.len(), self.n_rows())));
        }
        self.columns[j] = values;
        Ok(self)
    }

    /// Splits rows by the value of `column`, keeping only rows where `keep`.
    pub fn filter_rows(&self, column: &str, keep: impl Fn(f64) -> bool) -> Result<Table> {
        let key = self
            .column(column)
            .ok_or_else(|| QspecError::config("data header", format!("no column named {column:?}")))?;
        let rows: Vec<usize> = (0..self.n_rows()).filter(|&i| keep(key[i])).collect();
        Ok(Table {
            names: self.names.clone(),
            columns: self
                .columns
                .iter()
                .map(|col| rows.iter().map(|&i| col[i]).collect())
                .collect(),
        })
    }
}

/// Writes a dataset as CSV (response first).
pub fn write_csv<W: std::io::Write>(data: &Dataset, mut out: W) -> std::io::Result<()> {
    let mut header = vec![data.response_name().to_string()];
    header.extend(data.covariate_names().iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for i in 0..data.n() {
        let mut fields = vec![format!("{}", data.y()[i])];
        fields.extend(data.row(i).iter().map(|v| format!("{v}")));
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}
