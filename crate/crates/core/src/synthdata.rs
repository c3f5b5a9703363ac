//! Synthetic class-imbalance and confounded datasets.
//!
//! Every instance is `N` features of Uniform(-θn, θn) noise. A label value
//! adds θY to its own block of `N_vi` features; in CBUC mode the confounder
//! value adds θZ to another block. Blocks are contiguous and disjoint:
//! `y=0 → [0, N_vi)`, `y=1 → [N_vi, 2N_vi)`, `z=0 → [2N_vi, 3N_vi)`,
//! `z=1 → [3N_vi, 4N_vi)`.

use std::ops::Range;

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::{u_value, Dataset, Mode};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const DEFAULT_N_VAL: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "defaults::n_features")]
    pub n_features: usize,
    #[serde(default = "defaults::noise_bound")]
    pub noise_bound: f64,
    pub theta_y: f64,
    #[serde(default = "defaults::theta_z")]
    pub theta_z: f64,
    #[serde(default = "defaults::set_size")]
    pub set_size: usize,
    #[serde(default = "defaults::n_train")]
    pub n_train: usize,
    pub unbalance: f64,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
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
}

impl SynthConfig {
    /// Fixed simulation defaults with the given complexity and unbalance.
    pub fn new(mode: Mode, theta_y: f64, unbalance: f64, seed: u64) -> Self {
        Self {
            n_features: defaults::n_features(),
            noise_bound: defaults::noise_bound(),
            theta_y,
            theta_z: defaults::theta_z(),
            set_size: defaults::set_size(),
            n_train: defaults::n_train(),
            unbalance,
            mode,
            seed,
        }
    }

    pub fn with_n_train(mut self, n_train: usize) -> Self {
        self.n_train = n_train;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.set_size == 0 || 4 * self.set_size > self.n_features {
            return bad(format!(
                "four disjoint feature sets of size {} do not fit in {} features",
                self.set_size, self.n_features
            ));
        }
        if !(0.5..1.0).contains(&self.unbalance) {
            return bad(format!("unbalance must lie in [0.5, 1), got {}", self.unbalance));
        }
        if !(self.noise_bound > 0.0 && self.noise_bound.is_finite()) {
            return bad(format!("noise bound must be positive, got {}", self.noise_bound));
        }
        if !(self.theta_y >= 0.0 && self.theta_y.is_finite()) {
            return bad(format!("theta_y must be nonnegative, got {}", self.theta_y));
        }
        if !(self.theta_z >= 0.0 && self.theta_z.is_finite()) {
            return bad(format!("theta_z must be nonnegative, got {}", self.theta_z));
        }
        if self.n_train == 0 {
            return bad("n_train must be positive".into());
        }
        Ok(())
    }
}

/// Feature blocks receiving the label and confounder offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureAssignment {
    pub y0_set: Range<usize>,
    pub y1_set: Range<usize>,
    pub z0_set: Range<usize>,
    pub z1_set: Range<usize>,
}

impl FeatureAssignment {
    pub fn y_set(&self, y: u8) -> Range<usize> {
        if y == 0 {
            self.y0_set.clone()
        } else {
            self.y1_set.clone()
        }
    }

    pub fn z_set(&self, z: u8) -> Range<usize> {
        if z == 0 {
            self.z0_set.clone()
        } else {
            self.z1_set.clone()
        }
    }
}

pub fn assign_feature_sets(config: &SynthConfig) -> Result<FeatureAssignment> {
    let n = config.set_size;
    if n == 0 || 4 * n > config.n_features {
        return Err(Error::InvalidConfig(format!(
            "four disjoint feature sets of size {n} do not fit in {} features",
            config.n_features
        )));
    }
    Ok(FeatureAssignment {
        y0_set: 0..n,
        y1_set: n..2 * n,
        z0_set: 2 * n..3 * n,
        z1_set: 3 * n..4 * n,
    })
}

/// One generated example.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: u8,
    pub z: Option<u8>,
    pub d: u8,
}

/// Draws one instance. In CI mode the minority is class 1, so `d = y`.
pub fn generate_instance(
    config: &SynthConfig,
    assignment: &FeatureAssignment,
    y: u8,
    z: Option<u8>,
    rng: &mut impl RngCore,
) -> Result<Example> {
    let mut x = vec![0.0; config.n_features];
    let d = fill_instance(config, assignment, y, z, rng, &mut x)?;
    Ok(Example { x, y, z, d })
}

fn fill_instance(
    config: &SynthConfig,
    assignment: &FeatureAssignment,
    y: u8,
    z: Option<u8>,
    rng: &mut impl RngCore,
    x: &mut [f64],
) -> Result<u8> {
    let theta_n = config.noise_bound;
    for v in x.iter_mut() {
        *v = rng::uniform(rng, -theta_n, theta_n);
    }
    for i in assignment.y_set(y) {
        x[i] += config.theta_y;
    }
    match (config.mode, z) {
        (Mode::Ci, None) => Ok(y),
        (Mode::Cbuc, Some(z)) => {
            for i in assignment.z_set(z) {
                x[i] += config.theta_z;
            }
            Ok(u_value(y, z))
        }
        (Mode::Ci, Some(_)) => Err(Error::InvalidConfig(
            "CI instances carry no confounder".into(),
        )),
        (Mode::Cbuc, None) => Err(Error::InvalidConfig(
            "CBUC instances need a confounder value".into(),
        )),
    }
}

/// Builds a dataset from an ordered list of `(y, z)` labels, shuffling the
/// order first with the same stream that then draws the features.
fn build(config: &SynthConfig, mut labels: Vec<(u8, Option<u8>)>, seed: u64) -> Result<Dataset> {
    let assignment = assign_feature_sets(config)?;
    let mut stream = rng::stream(seed);
    rng::shuffle(&mut stream, &mut labels);
    let n = labels.len();
    let mut features = Array2::zeros((n, config.n_features));
    for (i, &(y, z)) in labels.iter().enumerate() {
        let row = features
            .row_mut(i)
            .into_slice()
            .expect("standard layout rows are contiguous");
        fill_instance(config, &assignment, y, z, &mut stream, row)?;
    }
    let y: Vec<u8> = labels.iter().map(|l| l.0).collect();
    match config.mode {
        Mode::Ci => Dataset::ci(features, y, 1),
        Mode::Cbuc => {
            let z = labels.iter().map(|l| l.1.expect("cbuc label")).collect();
            Dataset::cbuc(features, y, z)
        }
    }
}

fn repeat(label: (u8, Option<u8>), n: usize) -> impl Iterator<Item = (u8, Option<u8>)> {
    std::iter::repeat_n(label, n)
}

/// Training set at the configured unbalance, from the stream `config.seed`.
///
/// CI: `round(unbalance·N_T)` examples of class 0, the rest class 1.
/// CBUC: classes balanced; within each class `round(unbalance·n_y)` examples
/// have `z = y`, the rest `z ≠ y`.
pub fn generate_train(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_train;
    let labels: Vec<(u8, Option<u8>)> = match config.mode {
        Mode::Ci => {
            let n0 = (config.unbalance * n as f64).round() as usize;
            let n1 = n - n0;
            if n1 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "unbalance {} leaves the minority class empty with {n} examples",
                    config.unbalance
                )));
            }
            repeat((0, None), n0).chain(repeat((1, None), n1)).collect()
        }
        Mode::Cbuc => {
            let per_class = [n / 2, n - n / 2];
            let mut labels = Vec::with_capacity(n);
            for y in 0..2u8 {
                let ny = per_class[y as usize];
                let over = (config.unbalance * ny as f64).round() as usize;
                let under = ny - over;
                if under == 0 || over == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "unbalance {} leaves a (y={y}, u) group empty with {ny} examples",
                        config.unbalance
                    )));
                }
                labels.extend(repeat((y, Some(y)), over));
                labels.extend(repeat((y, Some(1 - y)), under));
            }
            labels
        }
    };
    build(config, labels, config.seed)
}

fn balanced(config: &SynthConfig, n_val: usize, purpose: Purpose) -> Result<Dataset> {
    config.validate()?;
    let labels: Vec<(u8, Option<u8>)> = match config.mode {
        Mode::Ci => {
            if n_val == 0 || n_val % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "CI validation size must be a positive multiple of 2, got {n_val}"
                )));
            }
            repeat((0, None), n_val / 2)
                .chain(repeat((1, None), n_val / 2))
                .collect()
        }
        Mode::Cbuc => {
            if n_val == 0 || n_val % 4 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "CBUC validation size must be a positive multiple of 4, got {n_val}"
                )));
            }
            [(0, 0), (0, 1), (1, 0), (1, 1)]
                .into_iter()
                .flat_map(|(y, z)| repeat((y, Some(z)), n_val / 4))
                .collect()
        }
    };
    build(config, labels, rng::stable_hash(config.seed, &[purpose as u64]))
}

/// Balanced evaluation set on a stream disjoint from the training one.
pub fn generate_validation(config: &SynthConfig, n_val: usize) -> Result<Dataset> {
    balanced(config, n_val, Purpose::Validation)
}

/// Balanced model-selection set, disjoint from both training and validation.
pub fn generate_selection(config: &SynthConfig, n_val: usize) -> Result<Dataset> {
    balanced(config, n_val, Purpose::Selection)
}
