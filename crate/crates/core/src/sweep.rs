//! Experimental grid: methods × unbalances × complexities × hyperparameters
//! × repeated runs, with per-cell model selection and result matrices.
//!
//! Every `(cell, run)` pair derives its data and initialization seeds from
//! `(base_seed, θ_Y, unbalance, run_index)`, so all methods of a cell see
//! identical training, selection and validation sets. Hyperparameters are
//! chosen on the selection set; matrices report the validation set.
//! Records are appended to `records.jsonl` as they complete, which is what
//! `resume` reads back.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::eval::{self, GroupReport};
use crate::ingest::{self, TabularSchema};
use crate::losses::{k_factor, LossSpec};
use crate::net::{LayerSpec, OptimizerConfig};
use crate::report::{self, fmt_opt, MatrixRow};
use crate::rng::{derive_seed, Purpose};
use crate::synthdata::{self, SynthConfig, DEFAULT_N_VAL};
use crate::train::{self, BrnnSpec, LfoConfig, TrainConfig, DEFAULT_BATCH_SIZE};

pub const RECORDS_FILE: &str = "records.jsonl";
pub const PLAN_FILE: &str = "plan.json";
pub const METADATA_FILE: &str = "metadata.json";
pub const KXI_FILE: &str = "kxi_trend.csv";
pub const STD_FILE: &str = "std_summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Problem {
    CI,
    CB,
    UC,
}

impl Problem {
    pub fn mode(self) -> Mode {
        match self {
            Problem::CI => Mode::Ci,
            Problem::CB | Problem::UC => Mode::Cbuc,
        }
    }

    fn metric(self) -> &'static str {
        match self {
            Problem::CI => "accuracy",
            Problem::CB | Problem::UC => "auc",
        }
    }
}

/// Fixed synthetic parameters; θ_Y, unbalance, mode and seed come from the
/// cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthTemplate {
    #[serde(default = "d::n_features")]
    pub n_features: usize,
    #[serde(default = "d::noise_bound")]
    pub noise_bound: f64,
    #[serde(default = "d::theta_z")]
    pub theta_z: f64,
    #[serde(default = "d::set_size")]
    pub set_size: usize,
    #[serde(default = "d::n_train")]
    pub n_train: usize,
    #[serde(default = "d::n_val")]
    pub n_val: usize,
    #[serde(default = "d::n_val")]
    pub n_selection: usize,
}

impl Default for SynthTemplate {
    fn default() -> Self {
        Self {
            n_features: d::n_features(),
            noise_bound: d::noise_bound(),
            theta_z: d::theta_z(),
            set_size: d::set_size(),
            n_train: d::n_train(),
            n_val: d::n_val(),
            n_selection: d::n_val(),
        }
    }
}

impl SynthTemplate {
    pub fn config(&self, mode: Mode, theta_y: f64, unbalance: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            n_features: self.n_features,
            noise_bound: self.noise_bound,
            theta_y,
            theta_z: self.theta_z,
            set_size: self.set_size,
            n_train: self.n_train,
            unbalance,
            mode,
            seed,
        }
    }
}

mod d {
    pub fn n_features() -> usize {
        100
    }
    pub fn noise_bound() -> f64 {
        5.0
    }
    pub fn theta_z() -> f64 {
        3.0
    }
    pub fn set_size() -> usize {
        4
    }
    pub fn n_train() -> usize {
        100_000
    }
    pub fn n_val() -> usize {
        super::DEFAULT_N_VAL
    }
    pub fn runs() -> usize {
        10
    }
    pub fn batch() -> usize {
        super::DEFAULT_BATCH_SIZE
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn threshold() -> f64 {
        super::eval::DEFAULT_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SynthTemplate),
    /// A CSV file and its schema; relative paths resolve against the plan
    /// file's directory.
    Real { schema: PathBuf, data: PathBuf },
}

/// A method and the values explored for each of its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodGrid {
    HStar,
    Cc {
        #[serde(rename = "C")]
        class_weight: Vec<f64>,
    },
    Focal {
        alpha: Vec<f64>,
    },
    Fbi {
        xi: Vec<f64>,
    },
    Brnn {
        delta: Vec<f64>,
    },
    Peo {
        lambda: Vec<f64>,
        epsilon: Vec<f64>,
    },
    Lfo {
        epsilon: Vec<f64>,
        lr_model: Vec<f64>,
        lr_lambda: Vec<f64>,
    },
}

impl MethodGrid {
    pub fn id(&self) -> &'static str {
        match self {
            MethodGrid::HStar => "h_star",
            MethodGrid::Cc { .. } => "cc",
            MethodGrid::Focal { .. } => "focal",
            MethodGrid::Fbi { .. } => "fbi",
            MethodGrid::Brnn { .. } => "brnn",
            MethodGrid::Peo { .. } => "peo",
            MethodGrid::Lfo { .. } => "lfo",
        }
    }

    fn needs_z(&self) -> bool {
        matches!(self, MethodGrid::Brnn { .. } | MethodGrid::Peo { .. } | MethodGrid::Lfo { .. })
    }

    fn axes(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            MethodGrid::HStar => vec![],
            MethodGrid::Cc { class_weight } => vec![("C", class_weight)],
            MethodGrid::Focal { alpha } => vec![("alpha", alpha)],
            MethodGrid::Fbi { xi } => vec![("xi", xi)],
            MethodGrid::Brnn { delta } => vec![("delta", delta)],
            MethodGrid::Peo { lambda, epsilon } => vec![("lambda", lambda), ("epsilon", epsilon)],
            MethodGrid::Lfo {
                epsilon,
                lr_model,
                lr_lambda,
            } => vec![("epsilon", epsilon), ("lr_model", lr_model), ("lr_lambda", lr_lambda)],
        }
    }

    /// Cartesian product of the axes, first axis slowest.
    pub fn candidates(&self) -> Vec<Hyper> {
        let mut out = vec![Hyper::default()];
        for (name, values) in self.axes() {
            out = out
                .iter()
                .flat_map(|h| {
                    values.iter().map(move |&v| {
                        let mut h = h.clone();
                        h.0.push((name.to_string(), v));
                        h
                    })
                })
                .collect();
        }
        out
    }

    /// Defaults inside the published ranges (CC: C ∈ [1, 1000]; focal:
    /// α ∈ [0, 5]; FBI: ξ ∈ [0, 5]; BR-NN: δ ∈ [0, 2]; PEO: λ ∈ [0, 2],
    /// ε ∈ [0, 0.1]; LFO: ε ∈ [0, 0.1], both learning rates in
    /// [1e-6, 1e-3]).
    pub fn full_defaults(problem: Problem) -> Vec<MethodGrid> {
        let xi = vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0];
        let mut methods = vec![MethodGrid::HStar];
        match problem {
            Problem::CI => {
                methods.push(MethodGrid::Cc {
                    class_weight: vec![1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0],
                });
                methods.push(MethodGrid::Focal {
                    alpha: vec![0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
                });
            }
            Problem::CB => methods.push(MethodGrid::Brnn {
                delta: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0],
            }),
            Problem::UC => {
                methods.push(MethodGrid::Peo {
                    lambda: vec![0.0, 0.25, 0.5, 1.0, 1.5, 2.0],
                    epsilon: vec![0.0, 0.02, 0.05, 0.1],
                });
                methods.push(MethodGrid::Lfo {
                    epsilon: vec![0.0, 0.05, 0.1],
                    lr_model: vec![1e-5, 1e-4, 1e-3],
                    lr_lambda: vec![1e-6, 1e-5, 1e-4, 1e-3],
                });
            }
        }
        methods.push(MethodGrid::Fbi { xi });
        methods
    }

    /// Coarser grids for the desk plan.
    pub fn desk_defaults(problem: Problem) -> Vec<MethodGrid> {
        let mut methods = vec![MethodGrid::HStar];
        match problem {
            Problem::CI => {
                methods.push(MethodGrid::Cc {
                    class_weight: vec![1.0, 10.0, 100.0, 1000.0],
                });
                methods.push(MethodGrid::Focal {
                    alpha: vec![0.0, 1.0, 2.5, 5.0],
                });
            }
            Problem::CB => methods.push(MethodGrid::Brnn {
                delta: vec![0.0, 0.5, 1.0, 2.0],
            }),
            Problem::UC => {
                methods.push(MethodGrid::Peo {
                    lambda: vec![0.5, 2.0],
                    epsilon: vec![0.0, 0.1],
                });
                methods.push(MethodGrid::Lfo {
                    epsilon: vec![0.0, 0.1],
                    lr_model: vec![1e-4, 1e-3],
                    lr_lambda: vec![1e-4, 1e-3],
                });
            }
        }
        methods.push(MethodGrid::Fbi {
            xi: vec![0.0, 0.5, 1.0, 2.0, 3.0, 5.0],
        });
        methods
    }
}

/// Ordered `(name, value)` hyperparameter assignment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyper(pub Vec<(String, f64)>);

impl Hyper {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    fn need(&self, name: &str) -> Result<f64> {
        self.get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("hyperparameter `{name}` missing")))
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(|&(_, v)| v).collect()
    }
}

impl std::fmt::Display for Hyper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(n, v)| format!("{n}={v}")).collect();
        f.write_str(&parts.join(";"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    pub problem: Problem,
    pub source: DataSource,
    pub unbalance_grid: Vec<f64>,
    /// θ_Y values; synthetic data only.
    #[serde(default)]
    pub complexity_grid: Vec<f64>,
    pub methods: Vec<MethodGrid>,
    #[serde(default = "d::runs")]
    pub runs_per_cell: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Hidden widths; defaults to [50, 10] (synthetic), [16] (real CI) or
    /// [8] (real CB/UC).
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    /// Defaults to 30 (synthetic) or 100 (real).
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "d::batch")]
    pub batch_size: usize,
    #[serde(default = "d::lr")]
    pub learning_rate: f64,
    #[serde(default = "d::threshold")]
    pub threshold: f64,
}

/// A point of the (complexity, unbalance) grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub theta_y: Option<f64>,
    pub unbalance: f64,
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.theta_y {
            Some(t) => write!(f, "theta_y={t}, unbalance={}", self.unbalance),
            None => write!(f, "unbalance={}", self.unbalance),
        }
    }
}

impl SweepPlan {
    /// Reduced desk-scale plan: N_T = 20000, 3 runs, coarse grids.
    pub fn desk(problem: Problem) -> Self {
        Self {
            problem,
            source: DataSource::Synthetic(SynthTemplate {
                n_train: 20_000,
                n_val: 4_000,
                n_selection: 4_000,
                ..SynthTemplate::default()
            }),
            unbalance_grid: vec![0.5, 0.8, 0.95],
            complexity_grid: vec![0.5, 1.0, 2.0, 4.0],
            methods: MethodGrid::desk_defaults(problem),
            runs_per_cell: 3,
            base_seed: 2020,
            hidden: None,
            epochs: Some(10),
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: d::lr(),
            threshold: d::threshold(),
        }
    }

    /// Full synthetic plan.
    pub fn full(problem: Problem) -> Self {
        Self {
            problem,
            source: DataSource::Synthetic(SynthTemplate::default()),
            unbalance_grid: vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99],
            complexity_grid: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0],
            methods: MethodGrid::full_defaults(problem),
            runs_per_cell: d::runs(),
            base_seed: 2020,
            hidden: None,
            epochs: None,
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: d::lr(),
            threshold: d::threshold(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    /// Loads a plan; relative data paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut plan = Self::from_json(&std::fs::read_to_string(path)?)?;
        if let DataSource::Real { schema, data } = &mut plan.source {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [schema, data] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.unbalance_grid.is_empty() {
            return bad("unbalance grid is empty".into());
        }
        if let Some(u) = self.unbalance_grid.iter().find(|u| !(0.5..1.0).contains(*u)) {
            return bad(format!("unbalance {u} outside [0.5, 1)"));
        }
        match &self.source {
            DataSource::Synthetic(t) => {
                if self.complexity_grid.is_empty() {
                    return bad("synthetic plans need a nonempty complexity grid".into());
                }
                if let Some(t) = self.complexity_grid.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
                    return bad(format!("theta_y {t} must be a nonnegative number"));
                }
                let divisor = if self.problem == Problem::CI { 2 } else { 4 };
                if t.n_val % divisor != 0 || t.n_selection % divisor != 0 || t.n_val == 0 || t.n_selection == 0 {
                    return bad(format!("n_val and n_selection must be positive multiples of {divisor}"));
                }
            }
            DataSource::Real { .. } => {
                if !self.complexity_grid.is_empty() {
                    return bad("real-data plans have no complexity grid".into());
                }
            }
        }
        if self.methods.is_empty() {
            return bad("no methods listed".into());
        }
        let mut ids = HashSet::new();
        for m in &self.methods {
            if !ids.insert(m.id()) {
                return bad(format!("method `{}` listed twice", m.id()));
            }
            if m.needs_z() && self.problem == Problem::CI {
                return bad(format!("method `{}` needs a confounder; not available for CI", m.id()));
            }
            for (name, values) in m.axes() {
                if values.is_empty() {
                    return bad(format!("{}: empty grid for `{name}`", m.id()));
                }
                if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                    return bad(format!("{}: `{name}` values must be finite and nonnegative", m.id()));
                }
            }
        }
        if self.runs_per_cell == 0 {
            return bad("runs_per_cell must be positive".into());
        }
        if self.batch_size < 8 {
            return bad(format!("batch size must be at least 8, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive".into());
        }
        if self.hidden.as_ref().is_some_and(|h| h.contains(&0)) {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn is_synthetic(&self) -> bool {
        matches!(self.source, DataSource::Synthetic(_))
    }

    /// Complexity-major, then unbalance, in plan order.
    pub fn cells(&self) -> Vec<Cell> {
        let thetas: Vec<Option<f64>> = if self.is_synthetic() {
            self.complexity_grid.iter().map(|&t| Some(t)).collect()
        } else {
            vec![None]
        };
        thetas
            .iter()
            .flat_map(|&theta_y| self.unbalance_grid.iter().map(move |&unbalance| Cell { theta_y, unbalance }))
            .collect()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| match (&self.source, self.problem) {
            (DataSource::Synthetic(_), _) => vec![50, 10],
            (DataSource::Real { .. }, Problem::CI) => vec![16],
            (DataSource::Real { .. }, _) => vec![8],
        })
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(if self.is_synthetic() {
            train::DEFAULT_EPOCHS_SYNTHETIC
        } else {
            train::DEFAULT_EPOCHS_TABULAR
        })
    }

    /// Training runs the plan performs.
    pub fn task_count(&self) -> usize {
        let per_run: usize = self.methods.iter().map(|m| m.candidates().len()).sum();
        self.cells().len() * self.runs_per_cell * per_run
    }
}

/// Group metrics of one model on one evaluation set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub underg: f64,
    pub overg: f64,
    pub fpr_gap: Option<f64>,
    pub fnr_gap: Option<f64>,
}

impl From<&GroupReport> for Metrics {
    fn from(r: &GroupReport) -> Self {
        Self {
            underg: r.underg_metric,
            overg: r.overg_metric,
            fpr_gap: r.fpr_gap,
            fnr_gap: r.fnr_gap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub hyper: Hyper,
    pub theta_y: Option<f64>,
    pub unbalance: f64,
    pub run: usize,
    /// `k_factor` of the run's training set.
    pub k: f64,
    pub selection: Metrics,
    pub validation: Metrics,
}

impl RunRecord {
    pub fn key(&self) -> String {
        record_key(self.method.as_str(), &self.hyper, self.cell(), self.run)
    }

    pub fn cell(&self) -> Cell {
        Cell {
            theta_y: self.theta_y,
            unbalance: self.unbalance,
        }
    }
}

fn record_key(method: &str, hyper: &Hyper, cell: Cell, run: usize) -> String {
    format!(
        "{method}|{hyper}|{}|{}|{run}",
        fmt_opt(cell.theta_y),
        cell.unbalance
    )
}

/// Data of one `(cell, run)`.
pub struct CellData {
    pub train: Dataset,
    pub selection: Dataset,
    pub validation: Dataset,
    /// Initialization and shuffling seed shared by every method.
    pub train_seed: u64,
}

/// Real-world table, loaded once per sweep.
pub enum Source {
    Synthetic(SynthTemplate),
    Real(ingest::Table),
}

impl Source {
    pub fn open(plan: &SweepPlan) -> Result<Self> {
        Ok(match &plan.source {
            DataSource::Synthetic(t) => Source::Synthetic(t.clone()),
            DataSource::Real { schema, data } => {
                let schema = TabularSchema::load(schema)?;
                Source::Real(ingest::load_table(data, &schema)?)
            }
        })
    }
}

pub fn cell_data(plan: &SweepPlan, source: &Source, cell: Cell, run: usize) -> Result<CellData> {
    let seed = |p: Purpose| derive_seed(plan.base_seed, cell.theta_y, cell.unbalance, run as u64, p);
    let mode = plan.problem.mode();
    let (train, selection, validation) = match source {
        Source::Synthetic(t) => {
            let theta_y = cell
                .theta_y
                .ok_or_else(|| Error::InvalidConfig("synthetic cell without theta_y".into()))?;
            let config = t.config(mode, theta_y, cell.unbalance, seed(Purpose::Train));
            let train = synthdata::generate_train(&config)?;
            let mut selection = synthdata::generate_selection(&config, t.n_selection)?;
            let mut validation = synthdata::generate_validation(&config, t.n_val)?;
            if let Some(m) = train.minority {
                selection = selection.with_minority(m)?;
                validation = validation.with_minority(m)?;
            }
            (train, selection, validation)
        }
        Source::Real(table) => {
            let s = ingest::split(table, cell.unbalance, mode, seed(Purpose::Train), true)?;
            (s.train, s.selection.expect("requested"), s.validation)
        }
    };
    Ok(CellData {
        train,
        selection,
        validation,
        train_seed: seed(Purpose::Init),
    })
}

/// Trains one candidate on `data` and evaluates it on both held-out sets.
pub fn run_candidate(plan: &SweepPlan, method: &MethodGrid, hyper: &Hyper, data: &CellData) -> Result<(f64, Metrics, Metrics)> {
    let ds = &data.train;
    let k = k_factor(ds)?;
    let hidden = plan.hidden_widths();
    let spec = LayerSpec::classifier(ds.n_features(), &hidden);
    let config = |loss: LossSpec| TrainConfig {
        epochs: plan.epochs(),
        batch_size: plan.batch_size,
        optimizer: OptimizerConfig::adam(plan.learning_rate),
        loss,
        seed: data.train_seed,
        early_stop: None,
    };
    let standard = |loss: LossSpec| -> Result<crate::train::Model> {
        let (p, _) = train::train_standard(&spec, ds, &config(loss), None)?;
        Ok(crate::train::Model::Classifier(p))
    };
    let model = match method {
        MethodGrid::HStar => standard(LossSpec::StandardCe)?,
        MethodGrid::Cc { .. } => standard(LossSpec::Cc {
            class_weight: hyper.need("C")?,
        })?,
        MethodGrid::Focal { .. } => standard(LossSpec::Focal {
            k,
            alpha: hyper.need("alpha")?,
        })?,
        MethodGrid::Fbi { .. } => standard(LossSpec::Fbi {
            k,
            xi: hyper.need("xi")?,
        })?,
        MethodGrid::Peo { .. } => standard(LossSpec::Peo {
            lambda: hyper.need("lambda")?,
            epsilon: hyper.need("epsilon")?,
        })?,
        MethodGrid::Lfo { .. } => {
            let lfo = LfoConfig {
                lr_model: hyper.need("lr_model")?,
                lr_lambda: hyper.need("lr_lambda")?,
                epsilon: hyper.need("epsilon")?,
                lambda_init: 0.0,
            };
            let out = train::train_lfo(&spec, ds, &config(LossSpec::StandardCe), &lfo, None)?;
            crate::train::Model::Classifier(out.params)
        }
        MethodGrid::Brnn { .. } => {
            let (features, trunk) = hidden.split_last().expect("nonempty hidden widths");
            let brnn = BrnnSpec::new(ds.n_features(), trunk, *features, hyper.need("delta")?);
            let (m, _) = train::train_brnn(&brnn, ds, &config(LossSpec::StandardCe), None)?;
            crate::train::Model::Brnn(m)
        }
    };
    let score = |set: &Dataset| -> Result<Metrics> {
        let p = model.predict(set.view())?;
        Ok(Metrics::from(&eval::evaluate(set, p.view(), plan.threshold)?))
    };
    Ok((k, score(&data.selection)?, score(&data.validation)?))
}

/// All records of one `(cell, run)`, skipping keys in `done`. Each record
/// is handed to `sink` as soon as it exists.
pub fn run_cell(
    plan: &SweepPlan,
    source: &Source,
    cell: Cell,
    run: usize,
    done: &HashSet<String>,
    sink: &(dyn Fn(&RunRecord) -> Result<()> + Sync),
) -> Result<Vec<RunRecord>> {
    let tag = |e: Error| e.in_cell(format!("{cell}, run {run}"));
    let mut data = None;
    let mut out = Vec::new();
    for method in &plan.methods {
        for hyper in method.candidates() {
            if done.contains(&record_key(method.id(), &hyper, cell, run)) {
                continue;
            }
            if data.is_none() {
                data = Some(cell_data(plan, source, cell, run).map_err(tag)?);
            }
            let data = data.as_ref().expect("generated above");
            let (k, selection, validation) = run_candidate(plan, method, &hyper, data)
                .map_err(|e| tag(e).in_cell(format!("{} {hyper}", method.id())))?;
            let record = RunRecord {
                method: method.id().to_string(),
                hyper,
                theta_y: cell.theta_y,
                unbalance: cell.unbalance,
                run,
                k,
                selection,
                validation,
            };
            sink(&record)?;
            out.push(record);
        }
    }
    Ok(out)
}

/// Mean selection metrics of one candidate in one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateScore {
    pub hyper: Hyper,
    pub underg: f64,
    pub overg: f64,
}

/// Index of the candidate maximizing min(UnderG, OverG); ties go to the
/// higher mean of the two, then to the lexicographically smaller
/// hyperparameter vector.
pub fn select_best(candidates: &[CandidateScore]) -> Option<usize> {
    let better = |a: &CandidateScore, b: &CandidateScore| {
        let (amin, bmin) = (a.underg.min(a.overg), b.underg.min(b.overg));
        let (amean, bmean) = ((a.underg + a.overg) / 2.0, (b.underg + b.overg) / 2.0);
        bmin.total_cmp(&amin)
            .then(bmean.total_cmp(&amean))
            .then_with(|| {
                let (av, bv) = (a.hyper.values(), b.hyper.values());
                av.iter()
                    .zip(&bv)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(av.len().cmp(&bv.len()))
            })
    };
    (0..candidates.len()).min_by(|&i, &j| better(&candidates[i], &candidates[j]))
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

/// One method in one cell after selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub theta_y: Option<f64>,
    pub unbalance: f64,
    pub method: String,
    pub chosen: Hyper,
    pub underg: Stat,
    pub overg: Stat,
    pub fpr_gap: Option<f64>,
    pub fnr_gap: Option<f64>,
    /// Mean `k_factor` over the runs.
    pub k: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    pub thetas: Vec<Option<f64>>,
    pub unbalances: Vec<f64>,
    pub methods: Vec<String>,
    /// Method-major, then plan cell order.
    pub cells: Vec<CellResult>,
}

impl ResultMatrix {
    pub fn get(&self, method: &str, cell: Cell) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.theta_y == cell.theta_y && c.unbalance == cell.unbalance)
    }

    /// Average over unbalances of the per-cell std, per complexity level.
    pub fn avg_std(&self, method: &str, underg: bool) -> Vec<(Option<f64>, f64)> {
        self.thetas
            .iter()
            .map(|&t| {
                let stds: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.method == method && c.theta_y == t)
                    .map(|c| if underg { c.underg.std } else { c.overg.std })
                    .collect();
                (t, mean_std(&stds).0)
            })
            .collect()
    }
}

/// Groups records per cell and method, selects hyperparameters and reduces
/// the runs. Record order does not matter.
pub fn assemble_matrix(plan: &SweepPlan, records: &[RunRecord]) -> Result<ResultMatrix> {
    let mut by_key: BTreeMap<String, &RunRecord> = BTreeMap::new();
    for r in records {
        by_key.entry(r.key()).or_insert(r);
    }
    let mut missing = Vec::new();
    let mut cells = Vec::new();
    for method in &plan.methods {
        for cell in plan.cells() {
            let mut scores = Vec::new();
            let mut per_candidate = Vec::new();
            for hyper in method.candidates() {
                let runs: Vec<&RunRecord> = (0..plan.runs_per_cell)
                    .filter_map(|run| {
                        let key = record_key(method.id(), &hyper, cell, run);
                        let found = by_key.get(&key).copied();
                        if found.is_none() {
                            missing.push(format!("{} [{hyper}] at {cell}, run {run}", method.id()));
                        }
                        found
                    })
                    .collect();
                let sel_u: Vec<f64> = runs.iter().map(|r| r.selection.underg).collect();
                let sel_o: Vec<f64> = runs.iter().map(|r| r.selection.overg).collect();
                scores.push(CandidateScore {
                    hyper: hyper.clone(),
                    underg: mean_std(&sel_u).0,
                    overg: mean_std(&sel_o).0,
                });
                per_candidate.push(runs);
            }
            if !missing.is_empty() {
                continue;
            }
            let best = select_best(&scores).expect("at least one candidate");
            let runs = &per_candidate[best];
            let pick = |f: &dyn Fn(&RunRecord) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let gap = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<f64> {
                let v: Option<Vec<f64>> = runs.iter().map(|r| f(r)).collect();
                v.map(|v| mean_std(&v).0)
            };
            cells.push(CellResult {
                theta_y: cell.theta_y,
                unbalance: cell.unbalance,
                method: method.id().to_string(),
                chosen: scores[best].hyper.clone(),
                underg: Stat::of(&pick(&|r| r.validation.underg)),
                overg: Stat::of(&pick(&|r| r.validation.overg)),
                fpr_gap: gap(&|r| r.validation.fpr_gap),
                fnr_gap: gap(&|r| r.validation.fnr_gap),
                k: mean_std(&pick(&|r| r.k)).0,
                runs: runs.len(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteSweep(missing));
    }
    let thetas = if plan.is_synthetic() {
        plan.complexity_grid.iter().map(|&t| Some(t)).collect()
    } else {
        vec![None]
    };
    Ok(ResultMatrix {
        thetas,
        unbalances: plan.unbalance_grid.clone(),
        methods: plan.methods.iter().map(|m| m.id().to_string()).collect(),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KxiRow {
    pub theta_y: Option<f64>,
    pub unbalance: f64,
    pub k: f64,
    pub xi: f64,
    pub k_pow_xi: f64,
}

/// `K^ξ` of the selected FBI configuration per cell.
pub fn kxi_trend(matrix: &ResultMatrix) -> Vec<KxiRow> {
    matrix
        .cells
        .iter()
        .filter(|c| c.method == "fbi")
        .filter_map(|c| {
            let xi = c.chosen.get("xi")?;
            Some(KxiRow {
                theta_y: c.theta_y,
                unbalance: c.unbalance,
                k: c.k,
                xi,
                k_pow_xi: c.k.powf(xi),
            })
        })
        .collect()
}

/// Every output file for a result matrix, as `(file name, contents)`.
pub fn render_outputs(plan: &SweepPlan, matrix: &ResultMatrix) -> Vec<(String, String)> {
    let mut files = Vec::new();
    let mut std_summary = String::from("method,group,theta_y,avg_std\n");
    for method in &matrix.methods {
        for (group, underg) in [("underg", true), ("overg", false)] {
            let rows: Vec<MatrixRow> = matrix
                .cells
                .iter()
                .filter(|c| &c.method == method)
                .map(|c| {
                    let s = if underg { c.underg } else { c.overg };
                    MatrixRow {
                        theta_y: c.theta_y,
                        unbalance: c.unbalance,
                        mean: s.mean,
                        std: s.std,
                        runs: c.runs,
                        chosen: c.chosen.to_string(),
                    }
                })
                .collect();
            files.push((format!("matrix_{method}_{group}.csv"), report::matrix_csv(&rows)));
            files.push((
                format!("heatmap_{method}_{group}.svg"),
                report::heatmap_svg(&format!("{method} {group}"), &rows),
            ));
            for (t, s) in matrix.avg_std(method, underg) {
                let _ = writeln!(std_summary, "{method},{group},{},{s}", fmt_opt(t));
            }
        }
        if plan.problem == Problem::UC {
            let mut gaps = String::from("theta_y,unbalance,fpr_gap,fnr_gap\n");
            for c in matrix.cells.iter().filter(|c| &c.method == method) {
                let _ = writeln!(
                    gaps,
                    "{},{},{},{}",
                    fmt_opt(c.theta_y),
                    c.unbalance,
                    fmt_opt(c.fpr_gap),
                    fmt_opt(c.fnr_gap)
                );
            }
            files.push((format!("gaps_{method}.csv"), gaps));
        }
    }
    files.push((STD_FILE.to_string(), std_summary));
    let trend = kxi_trend(matrix);
    if !trend.is_empty() {
        let mut text = String::from("theta_y,unbalance,k,xi,k_pow_xi\n");
        for r in &trend {
            let _ = writeln!(text, "{},{},{},{},{}", fmt_opt(r.theta_y), r.unbalance, r.k, r.xi, r.k_pow_xi);
        }
        files.push((KXI_FILE.to_string(), text));
    }
    let metadata = serde_json::json!({
        "tool": "unbalance-lab",
        "version": env!("CARGO_PKG_VERSION"),
        "problem": plan.problem,
        "metric": plan.problem.metric(),
        "std_convention": "population (divide by n)",
        "selection": "max min(mean UnderG, mean OverG) on a held-out balanced selection set; ties: higher mean, then smaller hyperparameters",
        "threshold": plan.threshold,
        "runs_per_cell": plan.runs_per_cell,
        "epochs": plan.epochs(),
        "hidden": plan.hidden_widths(),
        "heatmap_scale": "metric 0 dark (#181040) to 1 light (#faf0b4), channels monotone",
    });
    files.push((
        METADATA_FILE.to_string(),
        serde_json::to_string_pretty(&metadata).expect("json") + "\n",
    ));
    files
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    pub resume: bool,
    pub force: bool,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub matrix: ResultMatrix,
    /// Records trained in this invocation.
    pub computed: usize,
    /// Records read back from a previous invocation.
    pub reused: usize,
    pub written: Vec<PathBuf>,
}

/// Reads `records.jsonl`, ignoring a torn final line.
pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path)?;
    let lines: Vec<String> = std::io::BufReader::new(file).lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if i + 1 == lines.len() => {}
            Err(e) => {
                return Err(Error::Parse {
                    row: i,
                    column: RECORDS_FILE.into(),
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Runs (or resumes) a sweep into `out`, then writes every output file.
pub fn run_sweep(plan: &SweepPlan, out: &Path, options: &SweepOptions) -> Result<SweepOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out)?;
    let records_path = out.join(RECORDS_FILE);
    let plan_path = out.join(PLAN_FILE);
    let plan_json = plan.to_json();

    let mut previous = Vec::new();
    let has_prior = records_path.exists() || plan_path.exists();
    if has_prior {
        if options.force {
            clear_outputs(out)?;
        } else if options.resume {
            if plan_path.exists() && std::fs::read_to_string(&plan_path)? != plan_json {
                return Err(Error::Refused {
                    path: plan_path,
                    reason: "existing results come from a different plan".into(),
                });
            }
            if records_path.exists() {
                previous = read_records(&records_path)?;
            }
        } else {
            return Err(Error::Refused {
                path: out.to_path_buf(),
                reason: "directory holds earlier sweep output (pass --resume to continue or --force to start over)".into(),
            });
        }
    }
    std::fs::write(&plan_path, &plan_json)?;

    let done: HashSet<String> = previous.iter().map(RunRecord::key).collect();
    let source = Source::open(plan)?;
    let tasks: Vec<(Cell, usize)> = plan
        .cells()
        .into_iter()
        .flat_map(|c| (0..plan.runs_per_cell).map(move |r| (c, r)))
        .collect();

    let log = std::fs::OpenOptions::new().create(true).append(true).open(&records_path)?;
    let log = Mutex::new(std::io::BufWriter::new(log));
    let total = plan.task_count();
    let progress = Mutex::new(done.len());
    let sink = |r: &RunRecord| -> Result<()> {
        let line = serde_json::to_string(r)?;
        let mut w = log.lock().expect("record log poisoned");
        writeln!(w, "{line}")?;
        w.flush()?;
        drop(w);
        if options.verbose {
            let mut n = progress.lock().expect("progress poisoned");
            *n += 1;
            eprintln!("[{}/{total}] {} {} {}", *n, r.method, r.hyper, r.cell());
        }
        Ok(())
    };

    let workers = options
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let fresh: Vec<Vec<RunRecord>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(cell, run)| run_cell(plan, &source, cell, run, &done, &sink))
            .collect::<Result<_>>()
    })?;
    let computed = fresh.iter().map(Vec::len).sum();
    let mut records = previous;
    let reused = records.len();
    records.extend(fresh.into_iter().flatten());

    let matrix = assemble_matrix(plan, &records)?;
    let mut written = Vec::new();
    for (name, text) in render_outputs(plan, &matrix) {
        let path = out.join(name);
        std::fs::write(&path, text)?;
        written.push(path);
    }
    Ok(SweepOutcome {
        matrix,
        computed,
        reused,
        written,
    })
}

fn clear_outputs(out: &Path) -> Result<()> {
    for entry in std::fs::read_dir(out)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        let ours = [RECORDS_FILE, PLAN_FILE, METADATA_FILE, KXI_FILE, STD_FILE].contains(&name)
            || (name.starts_with("matrix_") && name.ends_with(".csv"))
            || (name.starts_with("heatmap_") && name.ends_with(".svg"))
            || (name.starts_with("gaps_") && name.ends_with(".csv"));
        if ours {
            std::fs::remove_file(path)?;
        }
    }
    Ok(())
}
