use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::points::{check_dim, Points};

/// Inputs, noisy responses and, for simulated data, the latent values.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Points,
    pub y: Vec<f64>,
    pub f_true: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Points, y: Vec<f64>, f_true: Option<Vec<f64>>) -> Result<Self> {
        check_dim(x.len(), y.len())?;
        if let Some(f) = &f_true {
            check_dim(x.len(), f.len())?;
        }
        Ok(Self { x, y, f_true })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            f_true: self.f_true.as_ref().map(|f| indices.iter().map(|&i| f[i]).collect()),
        }
    }

    /// Seeded random split; the first part holds `round(fraction * n)` rows.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::InvalidInput(format!("split fraction {fraction} must lie in (0, 1)")));
        }
        let n_train = (fraction * self.len() as f64).round() as usize;
        if n_train == 0 || n_train == self.len() {
            return Err(Error::InvalidInput(format!(
                "split {fraction} of {} rows leaves one side empty",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (train, test) = order.split_at(n_train);
        Ok((self.select(train), self.select(test)))
    }

    /// Reads a CSV with a header row. `y` is required, `f_true` optional,
    /// every other column is a feature.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let table = read_table(reader, true)?;
        Dataset::new(table.x, table.y.unwrap_or_default(), table.f_true)
    }

    pub fn read_csv<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// Writes columns `x1..xd, y` and `f_true` when present.
    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.dim()).map(|j| format!("x{j}")).collect();
        header.push("y".into());
        if self.f_true.is_some() {
            header.push("f_true".into());
        }
        w.write_record(&header)?;
        for (i, row) in self.x.rows().enumerate() {
            let mut fields: Vec<String> = row.iter().map(f64::to_string).collect();
            fields.push(self.y[i].to_string());
            if let Some(f) = &self.f_true {
                fields.push(f[i].to_string());
            }
            w.write_record(&fields)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.to_writer(file)
    }
}

/// Reads only the feature columns of a CSV; `y` and `f_true` are ignored if present.
pub fn read_inputs<R: Read>(reader: R) -> Result<Points> {
    Ok(read_table(reader, false)?.x)
}

pub fn read_inputs_csv<P: AsRef<Path>>(path: P) -> Result<Points> {
    read_inputs(std::fs::File::open(path)?)
}

struct Table {
    x: Points,
    y: Option<Vec<f64>>,
    f_true: Option<Vec<f64>>,
}

fn read_table<R: Read>(reader: R, require_y: bool) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_col = find("y");
    if require_y && y_col.is_none() {
        return Err(Error::Csv {
            line: Some(1),
            message: "missing required column `y`".into(),
        });
    }
    let f_col = find("f_true");
    let features: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != y_col && Some(c) != f_col).collect();
    if features.is_empty() {
        return Err(Error::Csv {
            line: Some(1),
            message: "no feature columns".into(),
        });
    }

    let mut flat = Vec::new();
    let mut y = y_col.map(|_| Vec::new());
    let mut f_true = f_col.map(|_| Vec::new());
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line());
        let parse = |c: usize| -> Result<f64> {
            let field = record.get(c).unwrap_or("");
            field.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Csv {
                line,
                message: format!("column `{}`: cannot parse {field:?} as a finite number", &headers[c]),
            })
        };
        for &c in &features {
            flat.push(parse(c)?);
        }
        if let (Some(c), Some(v)) = (y_col, y.as_mut()) {
            v.push(parse(c)?);
        }
        if let (Some(c), Some(f)) = (f_col, f_true.as_mut()) {
            f.push(parse(c)?);
        }
    }
    Ok(Table {
        x: Points::new(features.len(), flat)?,
        y,
        f_true,
    })
}
