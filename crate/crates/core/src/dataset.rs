//! In-memory datasets and the plain CSV layout shared by every tool:
//! header `f0..f{N-1},y[,z]`, one row per example.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which kind of unbalance the dataset carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Mode {
    /// Class imbalance: `d = 1` for the minority class.
    #[serde(rename = "CI")]
    Ci,
    /// Confounding bias / unfair classification: `d = u = |z - y|`.
    #[serde(rename = "CBUC")]
    Cbuc,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ci => "CI",
            Mode::Cbuc => "CBUC",
        })
    }
}

/// Under-representation flag of a confounded example.
pub fn u_value(y: u8, z: u8) -> u8 {
    y.abs_diff(z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub y: Vec<u8>,
    pub z: Option<Vec<u8>>,
    pub d: Vec<u8>,
    pub mode: Mode,
    /// CI only: the class flagged with `d = 1`.
    pub minority: Option<u8>,
}

fn check_binary(values: &[u8], what: &str) -> Result<()> {
    match values.iter().position(|&v| v > 1) {
        Some(i) => Err(Error::InvalidConfig(format!(
            "{what}[{i}] = {} is not binary",
            values[i]
        ))),
        None => Ok(()),
    }
}

impl Dataset {
    /// Class-imbalance dataset whose `minority` class gets `d = 1`.
    pub fn ci(features: Array2<f64>, y: Vec<u8>, minority: u8) -> Result<Self> {
        if features.nrows() != y.len() {
            return Err(Error::ShapeMismatch {
                what: "label count",
                expected: features.nrows(),
                actual: y.len(),
            });
        }
        check_binary(&y, "y")?;
        check_binary(&[minority], "minority")?;
        let d = y.iter().map(|&y| u8::from(y == minority)).collect();
        Ok(Self {
            features,
            y,
            z: None,
            d,
            mode: Mode::Ci,
            minority: Some(minority),
        })
    }

    /// Confounded dataset with `d = |z - y|`.
    pub fn cbuc(features: Array2<f64>, y: Vec<u8>, z: Vec<u8>) -> Result<Self> {
        if features.nrows() != y.len() || y.len() != z.len() {
            return Err(Error::ShapeMismatch {
                what: "label/confounder count",
                expected: features.nrows(),
                actual: y.len().min(z.len()),
            });
        }
        check_binary(&y, "y")?;
        check_binary(&z, "z")?;
        let d = y.iter().zip(&z).map(|(&y, &z)| u_value(y, z)).collect();
        Ok(Self {
            features,
            y,
            z: Some(z),
            d,
            mode: Mode::Cbuc,
            minority: None,
        })
    }

    /// Mode follows the presence of `z`; in CI the less frequent class is the
    /// minority (class 1 on a tie).
    pub fn infer(features: Array2<f64>, y: Vec<u8>, z: Option<Vec<u8>>) -> Result<Self> {
        match z {
            Some(z) => Self::cbuc(features, y, z),
            None => {
                let minority = minority_of(&y);
                Self::ci(features, y, minority)
            }
        }
    }

    /// Reassigns the CI minority, e.g. to the training set's minority when
    /// this is a balanced validation split.
    pub fn with_minority(self, minority: u8) -> Result<Self> {
        match self.mode {
            Mode::Ci => Self::ci(self.features, self.y, minority),
            Mode::Cbuc => Err(Error::InvalidConfig(
                "minority class only applies to CI datasets".into(),
            )),
        }
    }

    /// Drops the confounder and treats the set as class imbalance.
    pub fn into_ci(self, minority: u8) -> Result<Self> {
        Self::ci(self.features, self.y, minority)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn z_or_err(&self) -> Result<&[u8]> {
        self.z
            .as_deref()
            .ok_or_else(|| Error::MissingColumn("z".into()))
    }

    /// Rows `indices`, in that order.
    pub fn gather_features(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &[u8]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Dataset {
            features: self.gather_features(indices),
            y: pick(&self.y),
            z: self.z.as_deref().map(pick),
            d: pick(&self.d),
            mode: self.mode,
            minority: self.minority,
        }
    }

    pub fn count_y(&self, class: u8) -> usize {
        self.y.iter().filter(|&&y| y == class).count()
    }

    pub fn count_d(&self, flag: u8) -> usize {
        self.d.iter().filter(|&&d| d == flag).count()
    }

    /// Fraction of over-represented (`d = 0`) examples.
    pub fn unbalance(&self) -> f64 {
        self.count_d(0) as f64 / self.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.n_features()).map(|i| format!("f{i}")).collect();
        header.push("y".into());
        if self.z.is_some() {
            header.push("z".into());
        }
        writer.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            record.clear();
            record.extend(self.features.row(i).iter().map(|v| v.to_string()));
            record.push(self.y[i].to_string());
            if let Some(z) = &self.z {
                record.push(z[i].to_string());
            }
            writer.write_record(&record)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(input);
        let header = reader.headers()?.clone();
        let y_col = header
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| Error::MissingColumn("y".into()))?;
        let z_col = header.iter().position(|h| h == "z");
        let feature_cols: Vec<usize> = (0..header.len())
            .filter(|&c| c != y_col && Some(c) != z_col)
            .collect();
        for (k, &c) in feature_cols.iter().enumerate() {
            if header[c] != format!("f{k}") {
                return Err(Error::MissingColumn(format!("f{k}")));
            }
        }

        let mut values = Vec::new();
        let mut y = Vec::new();
        let mut z = z_col.map(|_| Vec::new());
        for (row, record) in reader.records().enumerate() {
            let record = record?;
            let cell = |c: usize| -> Result<&str> {
                record.get(c).ok_or_else(|| Error::Parse {
                    row,
                    column: header[c].to_string(),
                    message: "missing cell".into(),
                })
            };
            for &c in &feature_cols {
                let v: f64 = cell(c)?.trim().parse().map_err(|e| Error::Parse {
                    row,
                    column: header[c].to_string(),
                    message: format!("{e}"),
                })?;
                values.push(v);
            }
            let parse_flag = |c: usize| -> Result<u8> {
                match cell(c)?.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Parse {
                        row,
                        column: header[c].to_string(),
                        message: format!("expected 0 or 1, got `{other}`"),
                    }),
                }
            };
            y.push(parse_flag(y_col)?);
            if let (Some(zc), Some(z)) = (z_col, z.as_mut()) {
                z.push(parse_flag(zc)?);
            }
        }
        if y.is_empty() {
            return Err(Error::Degenerate("dataset file has no rows".into()));
        }
        let features = Array2::from_shape_vec((y.len(), feature_cols.len()), values)
            .expect("row-major buffer matches shape");
        Self::infer(features, y, z)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Less frequent label; ties resolve to 1.
pub fn minority_of(y: &[u8]) -> u8 {
    let ones = y.iter().filter(|&&v| v == 1).count();
    u8::from(ones * 2 <= y.len())
}
