//! Observational samples of (W, Z, X, Y) and their CSV representation.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub instrument: String,
    pub treatment: String,
    pub outcomes: Vec<String>,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl ColumnRoles {
    pub fn new(instrument: &str, treatment: &str, outcomes: &[&str], covariates: &[&str]) -> Self {
        Self {
            instrument: instrument.to_string(),
            treatment: treatment.to_string(),
            outcomes: outcomes.iter().map(|s| s.to_string()).collect(),
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outcomes.is_empty() {
            return Err(Error::Role("at least one outcome column is required".into()));
        }
        let mut seen = HashSet::new();
        let all = std::iter::once(&self.instrument)
            .chain(std::iter::once(&self.treatment))
            .chain(&self.outcomes)
            .chain(&self.covariates);
        for name in all {
            if name.is_empty() {
                return Err(Error::Role("empty column name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Role(format!("column '{name}' is assigned to more than one role")));
            }
        }
        Ok(())
    }
}

/// An immutable observational sample. `w` is n×p (p may be 0), `y` is n×K.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    w: DMatrix<f64>,
    z: Vec<f64>,
    x: Vec<f64>,
    y: DMatrix<f64>,
    roles: ColumnRoles,
}

fn default_roles(p: usize, k: usize) -> ColumnRoles {
    let covariates = (1..=p).map(|j| format!("w{j}")).collect();
    let outcomes = if k == 1 {
        vec!["y".to_string()]
    } else {
        (1..=k).map(|j| format!("y{j}")).collect()
    };
    ColumnRoles {
        instrument: "z".into(),
        treatment: "x".into(),
        outcomes,
        covariates,
    }
}

impl Dataset {
    /// Builds a dataset with default column names (`w1.., z, x, y` or `y1..`).
    pub fn new(w: DMatrix<f64>, z: Vec<f64>, x: Vec<f64>, y: DMatrix<f64>) -> Result<Self> {
        let roles = default_roles(w.ncols(), y.ncols());
        Self::with_roles(w, z, x, y, roles)
    }

    pub fn with_roles(
        w: DMatrix<f64>,
        z: Vec<f64>,
        x: Vec<f64>,
        y: DMatrix<f64>,
        roles: ColumnRoles,
    ) -> Result<Self> {
        let n = x.len();
        if n == 0 {
            return Err(Error::EmptyData("dataset has no rows".into()));
        }
        if z.len() != n || y.nrows() != n || w.nrows() != n {
            return Err(Error::Shape(format!(
                "column lengths differ: z={}, x={}, y={}, w={}",
                z.len(),
                n,
                y.nrows(),
                w.nrows()
            )));
        }
        if y.ncols() == 0 {
            return Err(Error::Shape("at least one outcome column is required".into()));
        }
        if roles.outcomes.len() != y.ncols() || roles.covariates.len() != w.ncols() {
            return Err(Error::Role("role names do not match column counts".into()));
        }
        roles.validate()?;
        let finite = z.iter().chain(&x).chain(y.iter()).chain(w.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidData("non-finite entry".into()));
        }
        Ok(Self { w, z, x, y, roles })
    }

    /// Single-outcome dataset without covariates.
    pub fn from_columns(z: Vec<f64>, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(DMatrix::zeros(x.len(), 0), z, x, DMatrix::from_vec(n, 1, y))
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn k(&self) -> usize {
        self.y.ncols()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn roles(&self) -> &ColumnRoles {
        &self.roles
    }

    pub fn outcome(&self, k: usize) -> Vec<f64> {
        self.y.column(k).iter().copied().collect()
    }

    pub fn covariate_row(&self, i: usize) -> Vec<f64> {
        self.w.row(i).iter().copied().collect()
    }

    /// Replaces outcome column `k`. Used by tests and diagnostics that inject
    /// perturbations into otherwise valid data.
    pub fn with_outcome(&self, k: usize, values: &[f64]) -> Result<Self> {
        if values.len() != self.n() || k >= self.k() {
            return Err(Error::Shape("replacement outcome has wrong shape".into()));
        }
        let mut y = self.y.clone();
        for (i, v) in values.iter().enumerate() {
            y[(i, k)] = *v;
        }
        Self::with_roles(self.w.clone(), self.z.clone(), self.x.clone(), y, self.roles.clone())
    }

    pub fn with_instrument(&self, z: Vec<f64>) -> Result<Self> {
        Self::with_roles(self.w.clone(), z, self.x.clone(), self.y.clone(), self.roles.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let w = self.w.select_rows(rows.iter());
        let y = self.y.select_rows(rows.iter());
        let z = rows.iter().map(|&i| self.z[i]).collect();
        let x = rows.iter().map(|&i| self.x[i]).collect();
        Self::with_roles(w, z, x, y, self.roles.clone())
    }

    /// Random disjoint partition into (train, eval). Each part keeps the
    /// original relative row order.
    pub fn split_train_eval(&self, eval_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.n();
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::Config(format!("eval fraction {eval_fraction} not in (0, 1)")));
        }
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        let n_eval = (n as f64 * eval_fraction).round() as usize;
        if n_eval == 0 || n_eval == n {
            return Err(Error::Config(format!(
                "eval fraction {eval_fraction} leaves an empty part for n = {n}"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut eval_idx = idx[..n_eval].to_vec();
        let mut train_idx = idx[n_eval..].to_vec();
        eval_idx.sort_unstable();
        train_idx.sort_unstable();
        Ok((self.select_rows(&train_idx)?, self.select_rows(&eval_idx)?))
    }

    pub fn load_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, roles)
    }

    pub fn read_csv<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Self> {
        roles.validate()?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.is_empty() {
            return Err(Error::EmptyData("file has no header".into()));
        }
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Role(format!("missing column '{name}'")))
        };
        let zi = find(&roles.instrument)?;
        let xi = find(&roles.treatment)?;
        let yi = roles.outcomes.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
        let wi = roles.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

        let (mut z, mut x) = (Vec::new(), Vec::new());
        let mut yv: Vec<f64> = Vec::new();
        let mut wv: Vec<f64> = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record?;
            let row = r + 1;
            let cell = |col: usize| -> Result<f64> {
                let raw = record.get(col).unwrap_or("");
                let value: f64 = raw.parse().map_err(|_| Error::Parse {
                    row,
                    column: headers[col].to_string(),
                    message: format!("'{raw}' is not a number"),
                })?;
                if !value.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: headers[col].to_string(),
                        message: "non-finite value".into(),
                    });
                }
                Ok(value)
            };
            z.push(cell(zi)?);
            x.push(cell(xi)?);
            for &c in &yi {
                yv.push(cell(c)?);
            }
            for &c in &wi {
                wv.push(cell(c)?);
            }
        }
        let n = x.len();
        if n == 0 {
            return Err(Error::EmptyData("file has no data rows".into()));
        }
        let y = DMatrix::from_row_slice(n, yi.len(), &yv);
        let w = DMatrix::from_row_slice(n, wi.len(), &wv);
        Self::with_roles(w, z, x, y, roles.clone())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    /// Writes columns in the order covariates, instrument, treatment, outcomes.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.roles.covariates.iter().map(String::as_str).collect();
        header.push(&self.roles.instrument);
        header.push(&self.roles.treatment);
        header.extend(self.roles.outcomes.iter().map(String::as_str));
        wtr.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec: Vec<String> = self.w.row(i).iter().map(|v| fmt_f64(*v)).collect();
            rec.push(fmt_f64(self.z[i]));
            rec.push(fmt_f64(self.x[i]));
            rec.extend(self.y.row(i).iter().map(|v| fmt_f64(*v)));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest decimal representation that parses back to the same `f64`
/// (never more than 17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}
