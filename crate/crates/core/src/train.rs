//! Training loops: plain loss minimization, the Lagrangian fairness game
//! (LFO) and the adversarial bias-resilient network (BR-NN).
//!
//! All three shuffle with the stream `stable_hash(seed, [Shuffle])` and
//! initialize from `stable_hash(seed, [Init])`, so identical seeds give
//! identical trajectories and the specialised loops reduce exactly to the
//! plain one when their extra terms vanish.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{self, GroupReport};
use crate::losses::{self, eo_proxy, LossSpec};
use crate::net::{self, init_params, init_with_head, Gradients, Head, LayerSpec, NetworkParams, OptimizerConfig, OptimizerState};
use crate::rng::{self, Purpose};

pub const DEFAULT_EPOCHS_SYNTHETIC: usize = 30;
pub const DEFAULT_EPOCHS_TABULAR: usize = 100;
pub const DEFAULT_BATCH_SIZE: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Epochs without improvement of min(UnderG, OverG) before stopping.
    pub patience: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub loss: LossSpec,
    pub seed: u64,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    pub fn new(loss: LossSpec, seed: u64) -> Self {
        Self {
            epochs: DEFAULT_EPOCHS_SYNTHETIC,
            batch_size: DEFAULT_BATCH_SIZE,
            optimizer: OptimizerConfig::default(),
            loss,
            seed,
            early_stop: None,
        }
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn init_seed(&self) -> u64 {
        rng::stable_hash(self.seed, &[Purpose::Init as u64])
    }

    fn shuffle_stream(&self) -> rng::Stream {
        rng::stream(rng::stable_hash(self.seed, &[Purpose::Shuffle as u64]))
    }

    fn validate(&self, min_batch: usize) -> Result<()> {
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < min_batch.max(1) {
            return Err(Error::InvalidConfig(format!(
                "batch size must be at least {}, got {}",
                min_batch.max(1),
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfoConfig {
    pub lr_model: f64,
    pub lr_lambda: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub lambda_init: f64,
}

impl LfoConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr_model > 0.0) || !(self.lr_lambda >= 0.0) || !(self.epsilon >= 0.0) || !(self.lambda_init >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "LFO needs lr_model > 0 and lr_lambda, epsilon, lambda_init >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrnnSpec {
    /// Feature extractor; its output layer is activated like a hidden layer.
    pub trunk: LayerSpec,
    pub classifier_head: LayerSpec,
    pub confounder_head: LayerSpec,
    pub delta: f64,
}

impl BrnnSpec {
    /// Trunk `input → hidden... → features` with single-layer heads.
    pub fn new(input_width: usize, trunk_hidden: &[usize], features: usize, delta: f64) -> Self {
        Self {
            trunk: LayerSpec {
                input_width,
                hidden_widths: trunk_hidden.to_vec(),
                output_width: features,
                hidden_activation: Default::default(),
            },
            classifier_head: LayerSpec::classifier(features, &[]),
            confounder_head: LayerSpec::classifier(features, &[]),
            delta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        self.classifier_head.validate()?;
        self.confounder_head.validate()?;
        for head in [&self.classifier_head, &self.confounder_head] {
            if head.input_width != self.trunk.output_width {
                return Err(Error::ShapeMismatch {
                    what: "head input width vs trunk output",
                    expected: self.trunk.output_width,
                    actual: head.input_width,
                });
            }
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BrnnModel {
    pub trunk: NetworkParams,
    pub classifier: NetworkParams,
    pub confounder: NetworkParams,
}

impl BrnnModel {
    pub fn init(spec: &BrnnSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            trunk: init_with_head(&spec.trunk, Head::Features, rng::stable_hash(seed, &[0]))?,
            classifier: init_params(&spec.classifier_head, rng::stable_hash(seed, &[1]))?,
            confounder: init_params(&spec.confounder_head, rng::stable_hash(seed, &[2]))?,
        })
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let features = self.trunk.forward(x)?;
        self.classifier.predict(features.output().view())
    }

    /// Trunk and classifier merged into one plain classifier.
    pub fn composed_classifier(&self) -> NetworkParams {
        let mut hidden = self.trunk.spec.hidden_widths.clone();
        hidden.push(self.trunk.spec.output_width);
        hidden.extend_from_slice(&self.classifier.spec.hidden_widths);
        let spec = LayerSpec {
            input_width: self.trunk.spec.input_width,
            hidden_widths: hidden,
            output_width: 1,
            hidden_activation: self.trunk.spec.hidden_activation,
        };
        NetworkParams {
            spec,
            head: Head::Sigmoid,
            layers: self
                .trunk
                .layers
                .iter()
                .chain(&self.classifier.layers)
                .cloned()
                .collect(),
        }
    }
}

/// A trained model of either shape.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Classifier(NetworkParams),
    Brnn(BrnnModel),
}

impl Model {
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            Model::Classifier(p) => p.predict(x),
            Model::Brnn(m) => m.predict(x),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Model::Classifier(p) => p.spec.input_width,
            Model::Brnn(m) => m.trunk.spec.input_width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lambda: Option<f64>,
    pub r2: Option<f64>,
    pub underg: Option<f64>,
    pub overg: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Batches where an empty `(y, z)` cell forced the fairness term out.
    pub skipped_constraint_batches: usize,
    /// LFO multiplier after every update.
    pub lambda_steps: Vec<f64>,
}

impl History {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,lambda,r2,underg,overg";

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        writeln!(out, "{}", Self::CSV_HEADER)?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                opt(r.lambda),
                opt(r.r2),
                opt(r.underg),
                opt(r.overg)
            )?;
        }
        Ok(())
    }
}

/// Result of the LFO loop.
#[derive(Clone, Debug)]
pub struct LfoOutcome {
    pub params: NetworkParams,
    pub lambda: f64,
    pub history: History,
}

fn check_requirements(loss: &LossSpec, dataset: &Dataset, input_width: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Degenerate("training set is empty".into()));
    }
    if dataset.n_features() != input_width {
        return Err(Error::ShapeMismatch {
            what: "dataset width vs network input",
            expected: input_width,
            actual: dataset.n_features(),
        });
    }
    if loss.needs_z() && dataset.z.is_none() {
        return Err(Error::MissingColumn("z".into()));
    }
    Ok(())
}

/// Mini-batch index lists for one epoch.
struct Batches<'a> {
    order: &'a [usize],
    size: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = &'a [usize];
    fn next(&mut self) -> Option<&'a [usize]> {
        if self.order.is_empty() {
            return None;
        }
        let take = self.size.min(self.order.len());
        let (head, tail) = self.order.split_at(take);
        self.order = tail;
        Some(head)
    }
}

struct EpochDriver {
    order: Vec<usize>,
    stream: rng::Stream,
    batch_size: usize,
}

impl EpochDriver {
    fn new(n: usize, config: &TrainConfig) -> Self {
        Self {
            order: (0..n).collect(),
            stream: config.shuffle_stream(),
            batch_size: config.batch_size,
        }
    }

    fn shuffle(&mut self) -> Batches<'_> {
        rng::shuffle(&mut self.stream, &mut self.order);
        Batches {
            order: &self.order,
            size: self.batch_size,
        }
    }
}

fn pick(values: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| values[i]).collect()
}

fn validation_metrics(
    validation: Option<&Dataset>,
    predict: impl Fn(ArrayView2<'_, f64>) -> Result<Array1<f64>>,
) -> Result<Option<GroupReport>> {
    match validation {
        None => Ok(None),
        Some(v) => {
            let p = predict(v.view())?;
            eval::evaluate(v, p.view(), eval::DEFAULT_THRESHOLD).map(Some)
        }
    }
}

/// Tracks min(UnderG, OverG) across epochs for early stopping.
struct Stopper {
    patience: Option<usize>,
    best: f64,
    stale: usize,
}

impl Stopper {
    fn new(early_stop: Option<EarlyStop>, has_validation: bool) -> Self {
        Self {
            patience: early_stop.filter(|_| has_validation).map(|e| e.patience),
            best: f64::NEG_INFINITY,
            stale: 0,
        }
    }

    fn should_stop(&mut self, report: Option<&GroupReport>) -> bool {
        let (Some(patience), Some(r)) = (self.patience, report) else {
            return false;
        };
        let score = r.underg_metric.min(r.overg_metric);
        if score > self.best {
            self.best = score;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale > patience
    }
}

fn non_finite(epoch: usize, batch: usize) -> Error {
    Error::NonFinite(format!("training loss at epoch {epoch}, batch {batch}"))
}

/// Minimizes `config.loss` over `dataset` from a fresh initialization.
pub fn train_standard(
    spec: &LayerSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(NetworkParams, History)> {
    let params = init_params(spec, config.init_seed())?;
    train_standard_from(params, dataset, config, validation)
}

/// As [`train_standard`], starting from `params`.
pub fn train_standard_from(
    mut params: NetworkParams,
    dataset: &Dataset,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(NetworkParams, History)> {
    let min_batch = if config.loss.needs_z() { 2 } else { 1 };
    config.validate(min_batch)?;
    check_requirements(&config.loss, dataset, params.spec.input_width)?;
    let mut optimizer = OptimizerState::new(config.optimizer)?;
    let mut driver = EpochDriver::new(dataset.len(), config);
    let mut history = History::default();
    let mut stopper = Stopper::new(config.early_stop, validation.is_some());

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (b, idx) in driver.shuffle().enumerate() {
            let x = dataset.gather_features(idx);
            let trace = params.forward(x.view())?;
            let y = pick(&dataset.y, idx);
            let d = pick(&dataset.d, idx);
            let z = dataset.z.as_deref().map(|z| pick(z, idx));
            let batch = config.loss.batch(&y, &d, z.as_deref(), trace.p())?;
            if !batch.loss.is_finite() {
                return Err(non_finite(epoch, b));
            }
            if batch.constraint_skipped && config.loss.needs_z() {
                history.skipped_constraint_batches += 1;
            }
            total += batch.loss * idx.len() as f64;
            let grads = params.backward(&trace, batch.dl_dp.view())?;
            net::step(&mut params, &grads, &mut optimizer)?;
        }
        let report = validation_metrics(validation, |x| params.predict(x))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / dataset.len() as f64,
            lambda: None,
            r2: None,
            underg: report.as_ref().map(|r| r.underg_metric),
            overg: report.as_ref().map(|r| r.overg_metric),
        });
        if stopper.should_stop(report.as_ref()) {
            break;
        }
    }
    Ok((params, history))
}

/// Lagrangian two-player game: descend `mean H* + λ(C_PEO − ε)` in the
/// model parameters, then ascend `λ ← max(0, λ + lr_λ(C_PEO − ε))` on the
/// same batch. `config.loss` is ignored; the model step uses Adam-family
/// settings from `config.optimizer` at `lfo.lr_model`.
pub fn train_lfo(
    spec: &LayerSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    lfo: &LfoConfig,
    validation: Option<&Dataset>,
) -> Result<LfoOutcome> {
    let params = init_params(spec, config.init_seed())?;
    train_lfo_from(params, dataset, config, lfo, validation)
}

pub fn train_lfo_from(
    mut params: NetworkParams,
    dataset: &Dataset,
    config: &TrainConfig,
    lfo: &LfoConfig,
    validation: Option<&Dataset>,
) -> Result<LfoOutcome> {
    lfo.validate()?;
    let config = TrainConfig {
        loss: LossSpec::StandardCe,
        optimizer: OptimizerConfig {
            learning_rate: lfo.lr_model,
            ..config.optimizer
        },
        ..config.clone()
    };
    config.validate(2)?;
    check_requirements(&LossSpec::Peo { lambda: 0.0, epsilon: 0.0 }, dataset, params.spec.input_width)?;
    let z_all = dataset.z_or_err()?;
    let mut optimizer = OptimizerState::new(config.optimizer)?;
    let mut driver = EpochDriver::new(dataset.len(), &config);
    let mut history = History::default();
    let mut stopper = Stopper::new(config.early_stop, validation.is_some());
    let mut lambda = lfo.lambda_init;

    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for (b, idx) in driver.shuffle().enumerate() {
            let x = dataset.gather_features(idx);
            let trace = params.forward(x.view())?;
            let y = pick(&dataset.y, idx);
            let z = pick(z_all, idx);
            let p = trace.p();
            let n = idx.len();

            let mut dl_dp = Array1::zeros(n);
            let mut loss = 0.0;
            for i in 0..n {
                let lg = losses::h_star(y[i], p[i]);
                loss += lg.loss;
                dl_dp[i] = lg.dloss_dp;
            }
            loss /= n as f64;
            let proxy = eo_proxy(&y, &z, p);
            match &proxy {
                Some(proxy) => {
                    loss += lambda * (proxy.value - lfo.epsilon);
                    if lambda != 0.0 {
                        dl_dp.scaled_add(lambda * n as f64, &proxy.grad);
                    }
                }
                None => history.skipped_constraint_batches += 1,
            }
            if !loss.is_finite() {
                return Err(non_finite(epoch, b));
            }
            total += loss * n as f64;
            let grads = params.backward(&trace, dl_dp.view())?;
            net::step(&mut params, &grads, &mut optimizer)?;

            if let Some(proxy) = proxy {
                lambda = (lambda + lfo.lr_lambda * (proxy.value - lfo.epsilon)).max(0.0);
            }
            history.lambda_steps.push(lambda);
        }
        let report = validation_metrics(validation, |x| params.predict(x))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / dataset.len() as f64,
            lambda: Some(lambda),
            r2: None,
            underg: report.as_ref().map(|r| r.underg_metric),
            overg: report.as_ref().map(|r| r.overg_metric),
        });
        if stopper.should_stop(report.as_ref()) {
            break;
        }
    }
    Ok(LfoOutcome {
        params,
        lambda,
        history,
    })
}

/// Squared Pearson correlation between `z` and `z_hat` and its gradient in
/// `z_hat`. Zero (with zero gradient) when either side has no variance.
pub fn pearson_r2(z: ArrayView1<'_, f64>, z_hat: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let n = z.len();
    let zero = (0.0, Array1::zeros(n));
    if n < 2 {
        return zero;
    }
    let a = &z - z.mean().unwrap_or(0.0);
    let b = &z_hat - z_hat.mean().unwrap_or(0.0);
    let s_aa = a.dot(&a);
    let s_bb = b.dot(&b);
    if s_aa <= 1e-12 * n as f64 || s_bb <= 1e-24 * n as f64 {
        return zero;
    }
    let s_ab = a.dot(&b);
    let r2 = s_ab * s_ab / (s_aa * s_bb);
    // d(S_ab)/dẑ_i = a_i, d(S_bb)/dẑ_i = 2 b_i (centering terms vanish)
    let grad = (&a * (2.0 * s_ab / (s_aa * s_bb))) - (&b * (2.0 * r2 / s_bb));
    (r2, grad)
}

/// Objective `mean H* − δ·r²` seen by the trunk on one batch, with its
/// gradient in the trunk parameters. `r²` flows through `model.confounder`
/// without updating it.
pub fn brnn_trunk_objective(
    model: &BrnnModel,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    z: &[u8],
    delta: f64,
) -> Result<(f64, Gradients)> {
    let trunk_trace = model.trunk.forward(x)?;
    let h = trunk_trace.output();
    let (ce, _, d_h) = classifier_step_terms(&model.classifier, h.view(), y)?;
    let mut objective = ce;
    let mut d_h = d_h;
    if delta != 0.0 {
        let (r2, d_h_r2) = confounder_terms(&model.confounder, h.view(), z)?;
        objective -= delta * r2;
        d_h.scaled_add(-delta, &d_h_r2);
    }
    let (grads, _) = model.trunk.backward_features(&trunk_trace, d_h.view(), false)?;
    Ok((objective, grads))
}

/// Mean cross-entropy of the classifier head on features `h`, its parameter
/// gradients and the gradient with respect to `h`.
fn classifier_step_terms(head: &NetworkParams, h: ArrayView2<'_, f64>, y: &[u8]) -> Result<(f64, Gradients, Array2<f64>)> {
    let trace = head.forward(h)?;
    let p = trace.p();
    let n = y.len();
    let mut loss = 0.0;
    let mut dl_dp = Array1::zeros(n);
    for i in 0..n {
        let lg = losses::h_star(y[i], p[i]);
        loss += lg.loss;
        dl_dp[i] = lg.dloss_dp;
    }
    let (grads, d_h) = head.backward_with_input(&trace, dl_dp.view(), true)?;
    Ok((loss / n as f64, grads, d_h.expect("input gradient requested")))
}

/// Batch `r²` through the confounder head and `∂r²/∂h`.
fn confounder_terms(head: &NetworkParams, h: ArrayView2<'_, f64>, z: &[u8]) -> Result<(f64, Array2<f64>)> {
    let trace = head.forward(h)?;
    let zf: Array1<f64> = z.iter().map(|&v| f64::from(v)).collect();
    let (r2, grad) = pearson_r2(zf.view(), trace.p());
    let n = z.len() as f64;
    let (_, d_h) = head.backward_with_input(&trace, (grad * n).view(), true)?;
    Ok((r2, d_h.expect("input gradient requested")))
}

/// Adversarial training. Per batch: (1) the confounder head ascends `r²`,
/// (2) the classifier head descends `H*`, (3) the trunk descends
/// `H* − δ·r²` with `r²` taken through the just-updated confounder head.
/// `config.loss` is ignored.
pub fn train_brnn(
    spec: &BrnnSpec,
    dataset: &Dataset,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(BrnnModel, History)> {
    let model = BrnnModel::init(spec, config.init_seed())?;
    train_brnn_from(model, spec.delta, dataset, config, validation)
}

pub fn train_brnn_from(
    mut model: BrnnModel,
    delta: f64,
    dataset: &Dataset,
    config: &TrainConfig,
    validation: Option<&Dataset>,
) -> Result<(BrnnModel, History)> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidConfig(format!("delta must be >= 0, got {delta}")));
    }
    let config = TrainConfig {
        loss: LossSpec::StandardCe,
        ..config.clone()
    };
    config.validate(8)?;
    check_requirements(&LossSpec::StandardCe, dataset, model.trunk.spec.input_width)?;
    let z_all = dataset.z_or_err()?;
    let mut opt_trunk = OptimizerState::new(config.optimizer)?;
    let mut opt_cls = OptimizerState::new(config.optimizer)?;
    let mut opt_conf = OptimizerState::new(config.optimizer)?;
    let mut driver = EpochDriver::new(dataset.len(), &config);
    let mut history = History::default();
    let mut stopper = Stopper::new(config.early_stop, validation.is_some());

    for epoch in 0..config.epochs {
        let (mut total, mut r2_total, mut batches) = (0.0, 0.0, 0usize);
        for (b, idx) in driver.shuffle().enumerate() {
            let x = dataset.gather_features(idx);
            let y = pick(&dataset.y, idx);
            let z = pick(z_all, idx);
            let zf: Array1<f64> = z.iter().map(|&v| f64::from(v)).collect();
            let n = idx.len() as f64;

            let trunk_trace = model.trunk.forward(x.view())?;
            let h = trunk_trace.output().view();

            // (1) confounder head: ascend r² through its own parameters
            let conf_trace = model.confounder.forward(h)?;
            let (_, r2_grad) = pearson_r2(zf.view(), conf_trace.p());
            let conf_grads = model.confounder.backward(&conf_trace, (r2_grad * -n).view())?;
            net::step(&mut model.confounder, &conf_grads, &mut opt_conf)?;

            // (2) classifier head: descend H*
            let (ce, cls_grads, mut d_h) = classifier_step_terms(&model.classifier, h, &y)?;
            if !ce.is_finite() {
                return Err(non_finite(epoch, b));
            }
            net::step(&mut model.classifier, &cls_grads, &mut opt_cls)?;

            // (3) trunk: descend H* − δ r² with the confounder head frozen
            let (r2, d_h_r2) = confounder_terms(&model.confounder, h, &z)?;
            if delta != 0.0 {
                d_h.scaled_add(-delta, &d_h_r2);
            }
            let (trunk_grads, _) = model.trunk.backward_features(&trunk_trace, d_h.view(), false)?;
            net::step(&mut model.trunk, &trunk_grads, &mut opt_trunk)?;

            total += (ce - delta * r2) * n;
            r2_total += r2;
            batches += 1;
        }
        let report = validation_metrics(validation, |x| model.predict(x))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / dataset.len() as f64,
            lambda: None,
            r2: Some(r2_total / batches.max(1) as f64),
            underg: report.as_ref().map(|r| r.underg_metric),
            overg: report.as_ref().map(|r| r.overg_metric),
        });
        if stopper.should_stop(report.as_ref()) {
            break;
        }
    }
    Ok((model, history))
}
