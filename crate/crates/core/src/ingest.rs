//! Real-world tabular data: schema-driven loading, one-hot encoding,
//! standardization and sub-sampling to a controlled unbalance.
//!
//! Feature layout: schema column order; a numeric column contributes one
//! feature, a categorical column one indicator per category in ascending
//! byte order of the category strings. Missing categorical cells are their
//! own category, spelled [`MISSING`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{minority_of, Dataset, Mode};
use crate::error::{Error, Result};
use crate::rng;

pub const MISSING: &str = "<missing>";

/// Share of the source set a validation carve-out may take at most.
pub const VALIDATION_SHARE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Target,
    Protected,
    /// Present in the file but not used.
    Ignore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularSchema {
    /// In file order.
    pub columns: Vec<Column>,
    /// Target values mapped to `y = 1` (compared after trimming).
    pub positive: Vec<String>,
    /// Protected values mapped to `z = 1`.
    #[serde(default)]
    pub protected_positive: Vec<String>,
    /// Without a header row, cells are matched to `columns` by position.
    #[serde(default = "yes")]
    pub has_header: bool,
    /// Cells treated as missing (compared after trimming).
    #[serde(default = "default_missing")]
    pub missing_values: Vec<String>,
}

fn yes() -> bool {
    true
}

fn default_missing() -> Vec<String> {
    vec![String::new(), "?".into()]
}

impl TabularSchema {
    pub fn validate(&self) -> Result<()> {
        let count = |k: ColumnKind| self.columns.iter().filter(|c| c.kind == k).count();
        if count(ColumnKind::Target) != 1 {
            return Err(Error::InvalidConfig(format!(
                "schema needs exactly one target column, found {}",
                count(ColumnKind::Target)
            )));
        }
        if count(ColumnKind::Protected) > 1 {
            return Err(Error::InvalidConfig("schema allows at most one protected column".into()));
        }
        if count(ColumnKind::Protected) == 1 && self.protected_positive.is_empty() {
            return Err(Error::InvalidConfig(
                "a protected column needs `protected_positive` values".into(),
            ));
        }
        if self.positive.is_empty() {
            return Err(Error::InvalidConfig("`positive` lists no target values".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.columns {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn has_protected(&self) -> bool {
        self.columns.iter().any(|c| c.kind == ColumnKind::Protected)
    }
}

/// Encoded but unstandardized table.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub features: Array2<f64>,
    pub feature_names: Vec<String>,
    /// Feature indices holding numeric (standardizable) columns.
    pub numeric: Vec<usize>,
    pub y: Vec<u8>,
    pub z: Option<Vec<u8>>,
}

impl Table {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn dataset(&self, rows: &[usize], stats: &Standardizer, mode: Mode, minority: Option<u8>) -> Result<Dataset> {
        let mut x = self.features.select(Axis(0), rows);
        stats.apply(&mut x);
        let y: Vec<u8> = rows.iter().map(|&i| self.y[i]).collect();
        match mode {
            Mode::Ci => {
                let minority = minority.unwrap_or_else(|| minority_of(&y));
                Dataset::ci(x, y, minority)
            }
            Mode::Cbuc => {
                let z = self.z.as_ref().ok_or_else(|| Error::MissingColumn("protected".into()))?;
                Dataset::cbuc(x, y, rows.iter().map(|&i| z[i]).collect())
            }
        }
    }
}

/// Per-feature shift and scale for the numeric features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub columns: Vec<usize>,
    pub mean: Vec<f64>,
    /// Population standard deviation; 0 maps the column to all zeros.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(features: &Array2<f64>, rows: &[usize], columns: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for &c in columns {
            let m = rows.iter().map(|&r| features[[r, c]]).sum::<f64>() / n;
            let v = rows.iter().map(|&r| (features[[r, c]] - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push(v.sqrt());
        }
        Self {
            columns: columns.to_vec(),
            mean,
            std,
        }
    }

    pub fn apply(&self, x: &mut Array2<f64>) {
        for (k, &c) in self.columns.iter().enumerate() {
            let (m, s) = (self.mean[k], self.std[k]);
            x.column_mut(c).mapv_inplace(|v| if s > 0.0 { (v - m) / s } else { 0.0 });
        }
    }
}

/// Reads and encodes a table without standardizing.
pub fn read_table<R: Read>(input: R, schema: &TabularSchema) -> Result<Table> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .flexible(true)
        .from_reader(input);

    // File position of every schema column.
    let positions: Vec<usize> = if schema.has_header {
        let header = reader.headers()?.clone();
        schema
            .columns
            .iter()
            .map(|c| {
                header
                    .iter()
                    .position(|h| h.trim() == c.name)
                    .ok_or_else(|| Error::MissingColumn(c.name.clone()))
            })
            .collect::<Result<_>>()?
    } else {
        (0..schema.columns.len()).collect()
    };

    let is_missing = |s: &str| schema.missing_values.iter().any(|m| m == s);
    let mut raw: Vec<Vec<String>> = vec![Vec::new(); schema.columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // Blank trailing lines are common in the public dumps.
        if record.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        for (k, &pos) in positions.iter().enumerate() {
            let cell = record.get(pos).ok_or_else(|| Error::Parse {
                row,
                column: schema.columns[k].name.clone(),
                message: "missing cell".into(),
            })?;
            raw[k].push(cell.trim().to_string());
        }
    }
    let n = raw.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Degenerate("table has no rows".into()));
    }

    let mut blocks: Vec<Vec<f64>> = Vec::new();
    let mut feature_names = Vec::new();
    let mut numeric = Vec::new();
    let mut y = Vec::new();
    let mut z = None;
    for (column, cells) in schema.columns.iter().zip(&raw) {
        let parse_error = |row: usize, message: String| Error::Parse {
            row,
            column: column.name.clone(),
            message,
        };
        match column.kind {
            ColumnKind::Ignore => {}
            ColumnKind::Numeric => {
                let values = cells
                    .iter()
                    .enumerate()
                    .map(|(row, s)| {
                        s.parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| parse_error(row, format!("`{s}` is not a finite number")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                numeric.push(blocks.len());
                feature_names.push(column.name.clone());
                blocks.push(values);
            }
            ColumnKind::Categorical => {
                let label = |s: &String| if is_missing(s) { MISSING.to_string() } else { s.clone() };
                let categories: BTreeSet<String> = cells.iter().map(label).collect();
                for cat in &categories {
                    feature_names.push(format!("{}={cat}", column.name));
                    blocks.push(cells.iter().map(|s| f64::from(u8::from(&label(s) == cat))).collect());
                }
            }
            ColumnKind::Target => {
                y = encode_flag(cells, &schema.positive, &is_missing, &parse_error)?;
            }
            ColumnKind::Protected => {
                z = Some(encode_flag(cells, &schema.protected_positive, &is_missing, &parse_error)?);
            }
        }
    }

    let width = blocks.len();
    let mut features = Array2::zeros((n, width));
    for (c, block) in blocks.iter().enumerate() {
        for (r, &v) in block.iter().enumerate() {
            features[[r, c]] = v;
        }
    }
    Ok(Table {
        features,
        feature_names,
        numeric,
        y,
        z,
    })
}

fn encode_flag(
    cells: &[String],
    positive: &[String],
    is_missing: &dyn Fn(&str) -> bool,
    parse_error: &dyn Fn(usize, String) -> Error,
) -> Result<Vec<u8>> {
    cells
        .iter()
        .enumerate()
        .map(|(row, s)| {
            if is_missing(s) {
                Err(parse_error(row, "missing label".into()))
            } else {
                Ok(u8::from(positive.iter().any(|p| p == s)))
            }
        })
        .collect()
}

pub fn load_table(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Table> {
    let file = std::fs::File::open(path)?;
    read_table(std::io::BufReader::new(file), schema)
}

/// Loads a whole file as one training set, standardized on itself.
/// CBUC when the schema has a protected column, CI otherwise.
pub fn load_csv(path: impl AsRef<Path>, schema: &TabularSchema) -> Result<Dataset> {
    let table = load_table(path, schema)?;
    let rows: Vec<usize> = (0..table.len()).collect();
    let stats = Standardizer::fit(&table.features, &rows, &table.numeric);
    let mode = if table.z.is_some() { Mode::Cbuc } else { Mode::Ci };
    table.dataset(&rows, &stats, mode, None)
}

/// Indices of the balanced groups: the two classes in CI, the four
/// `(y, z)` cells in CBUC (ordered `(0,0), (0,1), (1,0), (1,1)`).
fn strata(table: &Table, mode: Mode) -> Result<Vec<Vec<usize>>> {
    match mode {
        Mode::Ci => {
            let mut s = vec![Vec::new(), Vec::new()];
            for (i, &y) in table.y.iter().enumerate() {
                s[y as usize].push(i);
            }
            Ok(s)
        }
        Mode::Cbuc => {
            let z = table.z.as_ref().ok_or_else(|| Error::MissingColumn("protected".into()))?;
            let mut s = vec![Vec::new(); 4];
            for (i, (&y, &z)) in table.y.iter().zip(z).enumerate() {
                s[(2 * y + z) as usize].push(i);
            }
            Ok(s)
        }
    }
}

/// Sub-sampled training set plus balanced held-out sets.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    /// Model-selection set; empty unless requested.
    pub selection: Option<Dataset>,
    pub validation: Dataset,
    /// Source row of every training example, in training order.
    pub train_rows: Vec<usize>,
    pub validation_rows: Vec<usize>,
    pub selection_rows: Vec<usize>,
}

/// Validation carved out first, then training drawn without replacement at
/// `target_ratio` over-represented examples. See [`split`].
pub fn subsample_to_unbalance(table: &Table, target_ratio: f64, mode: Mode, seed: u64) -> Result<(Dataset, Dataset)> {
    let s = split(table, target_ratio, mode, seed, false)?;
    Ok((s.train, s.validation))
}

/// Each held-out set takes per stratum `min(floor(0.2·n / strata),
/// floor(smallest stratum / 2))` rows, so a held-out set never exhausts a
/// stratum. In CI the over-represented class is the source majority; in
/// CBUC both classes keep equal size and `z = y` marks the over-represented
/// examples. Standardization uses training statistics only.
pub fn split(table: &Table, target_ratio: f64, mode: Mode, seed: u64, with_selection: bool) -> Result<Split> {
    if !(0.5..1.0).contains(&target_ratio) {
        return Err(Error::InvalidConfig(format!(
            "target ratio must lie in [0.5, 1), got {target_ratio}"
        )));
    }
    let mut stream = rng::stream(seed);
    let mut pools = strata(table, mode)?;
    for pool in &mut pools {
        rng::shuffle(&mut stream, pool);
    }
    let smallest = pools.iter().map(Vec::len).min().unwrap_or(0);
    let held_sets = if with_selection { 2 } else { 1 };
    let per_stratum = ((VALIDATION_SHARE * table.len() as f64 / pools.len() as f64).floor() as usize)
        .min(smallest / (2 * held_sets));
    if per_stratum == 0 {
        return Err(Error::InsufficientData {
            requested: target_ratio,
            max_achievable: 0.0,
        });
    }
    let carve = |pools: &mut Vec<Vec<usize>>| -> Vec<usize> {
        let mut rows = Vec::new();
        for pool in pools.iter_mut() {
            let at = pool.len() - per_stratum;
            rows.extend(pool.drain(at..));
        }
        rows
    };
    let validation_rows = carve(&mut pools);
    let selection_rows = if with_selection { carve(&mut pools) } else { Vec::new() };

    let mut train_rows = match mode {
        Mode::Ci => {
            let (major, minor) = if pools[0].len() >= pools[1].len() { (0, 1) } else { (1, 0) };
            let (n_over, n_under) = ratio_counts(pools[major].len(), pools[minor].len(), target_ratio)?;
            let mut rows: Vec<usize> = pools[major][..n_over].to_vec();
            rows.extend_from_slice(&pools[minor][..n_under]);
            rows
        }
        Mode::Cbuc => {
            // Cell index 2y + z: over-represented cells are (0,0) and (1,1).
            let per_class: Vec<(usize, usize)> = [(0, 1), (3, 2)]
                .iter()
                .map(|&(over, under)| ratio_counts(pools[over].len(), pools[under].len(), target_ratio))
                .collect::<Result<_>>()?;
            let n = per_class.iter().map(|&(o, u)| o + u).min().unwrap_or(0);
            let (n_over, n_under) = class_counts(n, target_ratio);
            let mut rows = Vec::new();
            for (over, under) in [(0, 1), (3, 2)] {
                rows.extend_from_slice(&pools[over][..n_over]);
                rows.extend_from_slice(&pools[under][..n_under]);
            }
            rows
        }
    };
    rng::shuffle(&mut stream, &mut train_rows);

    let stats = Standardizer::fit(&table.features, &train_rows, &table.numeric);
    let train = table.dataset(&train_rows, &stats, mode, None)?;
    let minority = train.minority;
    let validation = table.dataset(&validation_rows, &stats, mode, minority)?;
    let selection = if with_selection {
        Some(table.dataset(&selection_rows, &stats, mode, minority)?)
    } else {
        None
    };
    Ok(Split {
        train,
        selection,
        validation,
        train_rows,
        validation_rows,
        selection_rows,
    })
}

/// Largest `(over, under)` with `over / (over + under)` at `ratio` (within
/// rounding) drawn from pools of the given sizes.
fn ratio_counts(over_pool: usize, under_pool: usize, ratio: f64) -> Result<(usize, usize)> {
    let insufficient = || Error::InsufficientData {
        requested: ratio,
        max_achievable: if under_pool == 0 {
            0.0
        } else {
            over_pool as f64 / (over_pool + 1) as f64
        },
    };
    if under_pool == 0 || over_pool == 0 {
        return Err(insufficient());
    }
    // Total limited by either pool; shrink until both fit.
    let mut n = ((over_pool as f64 / ratio).floor() as usize).min((under_pool as f64 / (1.0 - ratio)).floor() as usize);
    loop {
        let (o, u) = class_counts(n, ratio);
        if o <= over_pool && u <= under_pool {
            if u == 0 || o == 0 {
                return Err(insufficient());
            }
            return Ok((o, u));
        }
        if n == 0 {
            return Err(insufficient());
        }
        n -= 1;
    }
}

fn class_counts(n: usize, ratio: f64) -> (usize, usize) {
    let over = (ratio * n as f64).round() as usize;
    (over, n - over)
}

/// Category counts per categorical column, for summaries.
pub fn category_counts(table: &Table) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (c, name) in table.feature_names.iter().enumerate() {
        if !table.numeric.contains(&c) {
            let n = table.features.column(c).iter().filter(|&&v| v == 1.0).count();
            out.insert(name.clone(), n);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(json: &str) -> TabularSchema {
        TabularSchema::from_json(json).unwrap()
    }

    const SMALL: &str = r#"{
        "columns": [
            {"name": "age", "kind": "numeric"},
            {"name": "job", "kind": "categorical"},
            {"name": "sex", "kind": "protected"},
            {"name": "income", "kind": "target"}
        ],
        "positive": [">50K", ">50K."],
        "protected_positive": ["Male"]
    }"#;

    #[test]
    fn one_hot_layout_is_alphabetical() {
        let data = "age,job,sex,income\n30, tech ,Male, >50K\n40,admin,Female,<=50K\n50,?,Male,>50K.\n";
        let t = read_table(data.as_bytes(), &schema(SMALL)).unwrap();
        assert_eq!(t.feature_names, ["age", "job=<missing>", "job=admin", "job=tech"]);
        assert_eq!(t.features.row(0).to_vec(), [30.0, 0.0, 0.0, 1.0]);
        assert_eq!(t.features.row(1).to_vec(), [40.0, 0.0, 1.0, 0.0]);
        assert_eq!(t.features.row(2).to_vec(), [50.0, 1.0, 0.0, 0.0]);
        assert_eq!(t.y, [1, 0, 1]);
        assert_eq!(t.z, Some(vec![1, 0, 1]));
        assert_eq!(t.numeric, [0]);
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let s = schema(r#"{"columns": [{"name": "a", "kind": "numeric"}, {"name": "b", "kind": "numeric"},
            {"name": "t", "kind": "target"}], "positive": ["1"]}"#);
        let path = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(path.path(), "a,b,t\n7,1,0\n7,2,1\n7,3,1\n").unwrap();
        let ds = load_csv(path.path(), &s).unwrap();
        assert!(ds.features.column(0).iter().all(|&v| v == 0.0));
        let b = ds.features.column(1);
        assert!((b.sum()).abs() < 1e-12);
        assert!((b[2] - 1.224_744_871_391_589).abs() < 1e-12);
        assert_eq!(ds.mode, Mode::Ci);
    }

    #[test]
    fn reports_bad_cells_and_columns() {
        let err = read_table("age,job,sex,income\nx,a,Male,>50K\n".as_bytes(), &schema(SMALL)).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 0, ref column, .. } if column == "age"));
        let err = read_table("age,job,income\n1,a,>50K\n".as_bytes(), &schema(SMALL)).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "sex"));
        let err = read_table("age,job,sex,income\n".as_bytes(), &schema(SMALL)).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn headerless_files_match_by_position() {
        let mut s = schema(SMALL);
        s.has_header = false;
        let t = read_table("30,tech,Male,>50K\n".as_bytes(), &s).unwrap();
        assert_eq!(t.y, [1]);
    }

    #[test]
    fn schema_rules() {
        let two_targets = r#"{"columns": [{"name": "a", "kind": "target"}, {"name": "b", "kind": "target"}], "positive": ["1"]}"#;
        assert!(TabularSchema::from_json(two_targets).is_err());
        let two_protected = r#"{"columns": [{"name": "a", "kind": "target"}, {"name": "b", "kind": "protected"},
            {"name": "c", "kind": "protected"}], "positive": ["1"], "protected_positive": ["1"]}"#;
        assert!(TabularSchema::from_json(two_protected).is_err());
    }

    fn synthetic_table(n0: usize, n1: usize, with_z: bool) -> Table {
        let n = n0 + n1;
        let features = Array2::from_shape_fn((n, 2), |(r, c)| (r * 7 + c * 3) as f64 % 11.0);
        let y: Vec<u8> = (0..n).map(|i| u8::from(i >= n0)).collect();
        let z = with_z.then(|| (0..n).map(|i| u8::from(i % 3 != 0) ^ y[i] ^ 1).collect());
        Table {
            features,
            feature_names: vec!["a".into(), "b".into()],
            numeric: vec![0, 1],
            y,
            z,
        }
    }

    #[test]
    fn ci_split_hits_ratio() {
        let t = synthetic_table(9000, 600, false);
        let (train, val) = subsample_to_unbalance(&t, 0.9, Mode::Ci, 5).unwrap();
        assert_eq!(train.count_y(1) * 9, train.count_y(0));
        assert_eq!(train.minority, Some(1));
        assert_eq!(val.count_y(0), val.count_y(1));
        assert_eq!(val.count_y(1), 300);
        assert_eq!(val.minority, Some(1));
    }

    #[test]
    fn balanced_target_on_balanced_source() {
        let t = synthetic_table(500, 500, false);
        let (train, _) = subsample_to_unbalance(&t, 0.5, Mode::Ci, 1).unwrap();
        assert!(train.count_y(0).abs_diff(train.count_y(1)) <= 1);
    }

    #[test]
    fn cbuc_split_hits_ratio_per_class() {
        let t = synthetic_table(3000, 3000, true);
        let s = split(&t, 0.8, Mode::Cbuc, 9, true).unwrap();
        let tr = &s.train;
        let expected = tr.len() as f64 * 0.8;
        assert!((tr.count_d(0) as f64 - expected).abs() <= 1.0);
        assert_eq!(tr.count_y(0), tr.count_y(1));
        let sel = s.selection.unwrap();
        assert_eq!(sel.len(), s.validation.len());
        let mut all: Vec<usize> = s.train_rows.iter().chain(&s.validation_rows).chain(&s.selection_rows).copied().collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), before);
    }

    #[test]
    fn infeasible_ratio_reports_maximum() {
        let t = synthetic_table(100, 40, false);
        match subsample_to_unbalance(&t, 0.995, Mode::Ci, 1).unwrap_err() {
            Error::InsufficientData { max_achievable, .. } => {
                assert!(max_achievable > 0.5 && max_achievable < 0.995)
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn same_seed_same_split() {
        let t = synthetic_table(800, 200, true);
        let a = split(&t, 0.7, Mode::Cbuc, 3, false).unwrap();
        let b = split(&t, 0.7, Mode::Cbuc, 3, false).unwrap();
        assert_eq!(a.train_rows, b.train_rows);
        assert_eq!(a.validation_rows, b.validation_rows);
        assert_eq!(a.train, b.train);
    }
}
