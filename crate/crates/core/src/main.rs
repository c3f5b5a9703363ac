use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unbalance_lab::ingest::{self, TabularSchema};
use unbalance_lab::losses::{k_factor, LossSpec};
use unbalance_lab::net::{Activation, LayerSpec, OptimizerConfig};
use unbalance_lab::sweep::{self, SweepOptions, SweepPlan};
use unbalance_lab::synthdata::{self, SynthConfig};
use unbalance_lab::train::{self, BrnnSpec, EarlyStop, LfoConfig, Model, TrainConfig};
use unbalance_lab::{eval, model_io, report, Dataset, Error, Mode, Result};

#[derive(Parser)]
#[command(name = "unbalance-lab", version, about = "Loss corrections for unbalanced training sets")]
struct Cli {
    /// Global seed; overrides any seed in config files.
    #[arg(long, global = true, env = "UNBALANCE_LAB_SEED")]
    seed: Option<u64>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic training set (and optionally a balanced validation set).
    Generate(GenerateArgs),
    /// Train one model on a CSV dataset.
    Train(TrainArgs),
    /// Evaluate a saved model on a validation CSV.
    Eval(EvalArgs),
    /// Run a sweep plan.
    Sweep(SweepArgs),
    /// Render heatmaps and a text summary from sweep results.
    Report(ReportArgs),
    /// Encode a real-world CSV and split it at a target unbalance.
    Ingest(IngestArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic config (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write a balanced validation set here.
    #[arg(long)]
    validation_out: Option<PathBuf>,
    #[arg(long, default_value_t = synthdata::DEFAULT_N_VAL)]
    n_val: usize,
    /// Overrides theta_y from the config.
    #[arg(long = "theta-y")]
    theta_y: Option<f64>,
    /// Overrides unbalance from the config.
    #[arg(long)]
    unbalance: Option<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    #[value(name = "h_star", alias = "standard_ce")]
    HStar,
    #[value(name = "weighted_ce")]
    WeightedCe,
    Cc,
    Focal,
    Fbi,
    Peo,
    Lfo,
    Brnn,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Args)]
struct TrainArgs {
    /// Training CSV (`f0..,y[,z]`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, alias = "method")]
    loss: Method,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// History CSV to write.
    #[arg(long)]
    history: PathBuf,
    /// Validation CSV for per-epoch group metrics.
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Hidden widths, comma separated; empty for a single linear layer.
    #[arg(long, value_delimiter = ',', default_value = "50,10")]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
    #[arg(long, default_value_t = train::DEFAULT_EPOCHS_SYNTHETIC)]
    epochs: usize,
    #[arg(long, default_value_t = train::DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    /// Adam learning rate (the model learning rate for LFO).
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    /// weighted_ce cost threshold.
    #[arg(long)]
    c: Option<f64>,
    /// cc class weight.
    #[arg(long = "class-weight")]
    class_weight: Option<f64>,
    /// Unbalance factor for focal/fbi; defaults to the dataset's d-ratio.
    #[arg(long = "k")]
    k: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    /// LFO multiplier learning rate.
    #[arg(long = "lr-lambda")]
    lr_lambda: Option<f64>,
    /// Minority class for CI data; defaults to the less frequent class.
    #[arg(long)]
    minority: Option<u8>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Validation CSV (`f0..,y[,z]`).
    #[arg(long)]
    data: PathBuf,
    /// CI: the training minority class (UnderG).
    #[arg(long, default_value_t = 1)]
    minority: u8,
    #[arg(long, default_value_t = eval::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Write the report row here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Plan (JSON). Use `--desk CI|CB|UC` to run a built-in desk plan.
    #[arg(long, required_unless_present = "desk")]
    plan: Option<PathBuf>,
    #[arg(long, value_parser = ["CI", "CB", "UC"], conflicts_with = "plan")]
    desk: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    workers: Option<usize>,
    /// Continue from records already in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Sweep output directory.
    #[arg(long)]
    results: PathBuf,
    /// Where to write the report; defaults to the results directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fraction of over-represented training examples.
    #[arg(long)]
    unbalance: f64,
    #[arg(long, value_parser = ["CI", "CBUC"])]
    mode: String,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    validation_out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    let force = cli.force;
    match cli.command {
        Command::Generate(a) => generate(a, seed, force),
        Command::Train(a) => train_cmd(a, seed, force),
        Command::Eval(a) => eval_cmd(a, force),
        Command::Sweep(a) => sweep_cmd(a, seed, force),
        Command::Report(a) => {
            let out = a.out.unwrap_or_else(|| a.results.clone());
            for path in report::write_report(&a.results, &out, force)? {
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Ingest(a) => ingest_cmd(a, seed, force),
    }
}

fn writable(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Refused {
            path: path.to_path_buf(),
            reason: "file exists (pass --force to overwrite)".into(),
        });
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn summarize(ds: &Dataset) {
    println!("rows: {}", ds.len());
    println!("class 0: {}  class 1: {}", ds.count_y(0), ds.count_y(1));
    println!("d=0 (over): {}  d=1 (under): {}", ds.count_d(0), ds.count_d(1));
    match k_factor(ds) {
        Ok(k) => println!("K: {k}"),
        Err(_) => println!("K: undefined"),
    }
}

fn generate(a: GenerateArgs, seed: Option<u64>, force: bool) -> Result<()> {
    let mut config: SynthConfig = serde_json::from_str(&std::fs::read_to_string(&a.config)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(t) = a.theta_y {
        config.theta_y = t;
    }
    if let Some(u) = a.unbalance {
        config.unbalance = u;
    }
    config.validate()?;
    writable(&a.out, force)?;
    if let Some(v) = &a.validation_out {
        writable(v, force)?;
    }
    let train = synthdata::generate_train(&config)?;
    let validation = match &a.validation_out {
        Some(_) => Some(synthdata::generate_validation(&config, a.n_val)?),
        None => None,
    };
    train.save_csv(&a.out)?;
    summarize(&train);
    if let (Some(path), Some(v)) = (&a.validation_out, validation) {
        v.save_csv(path)?;
        println!("validation rows: {}", v.len());
    }
    Ok(())
}

fn required(value: Option<f64>, flag: &str, method: &str) -> Result<f64> {
    value.ok_or_else(|| Error::InvalidConfig(format!("--{flag} is required for {method}")))
}

fn train_cmd(a: TrainArgs, seed: Option<u64>, force: bool) -> Result<()> {
    let mut data = Dataset::load_csv(&a.data)?;
    if let (Some(m), Mode::Ci) = (a.minority, data.mode) {
        data = data.with_minority(m)?;
    }
    let needs_z = matches!(a.loss, Method::Peo | Method::Lfo | Method::Brnn);
    if needs_z && data.z.is_none() {
        eprintln!("note: {} needs a z column, which {} lacks", method_name(a.loss), a.data.display());
        return Err(Error::MissingColumn("z".into()));
    }
    // CI groups follow the training minority, whatever the file holds.
    let validation = match &a.validation {
        Some(p) => {
            let v = Dataset::load_csv(p)?;
            Some(match data.minority {
                Some(m) => v.into_ci(m)?,
                None => v,
            })
        }
        None => None,
    };
    writable(&a.out, force)?;
    writable(&a.history, force)?;

    let k = || -> Result<f64> { a.k.map_or_else(|| k_factor(&data), Ok) };
    let activation = match a.activation {
        ActivationArg::Relu => Activation::Relu,
        ActivationArg::Tanh => Activation::Tanh,
    };
    let spec = LayerSpec::classifier(data.n_features(), &a.hidden).with_activation(activation);
    let name = method_name(a.loss);
    let loss = match a.loss {
        Method::HStar | Method::Lfo | Method::Brnn => LossSpec::StandardCe,
        Method::WeightedCe => LossSpec::WeightedCe {
            c: required(a.c, "c", name)?,
        },
        Method::Cc => LossSpec::Cc {
            class_weight: required(a.class_weight, "class-weight", name)?,
        },
        Method::Focal => LossSpec::Focal {
            k: k()?,
            alpha: required(a.alpha, "alpha", name)?,
        },
        Method::Fbi => LossSpec::Fbi {
            k: k()?,
            xi: required(a.xi, "xi", name)?,
        },
        Method::Peo => LossSpec::Peo {
            lambda: required(a.lambda, "lambda", name)?,
            epsilon: required(a.epsilon, "epsilon", name)?,
        },
    };
    let config = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer: OptimizerConfig::adam(a.lr),
        loss,
        seed: seed.unwrap_or(0),
        early_stop: a.patience.map(|patience| EarlyStop { patience }),
    };
    let (model, history) = match a.loss {
        Method::Lfo => {
            let lfo = LfoConfig {
                lr_model: a.lr,
                lr_lambda: required(a.lr_lambda, "lr-lambda", name)?,
                epsilon: required(a.epsilon, "epsilon", name)?,
                lambda_init: a.lambda.unwrap_or(0.0),
            };
            let out = train::train_lfo(&spec, &data, &config, &lfo, validation.as_ref())?;
            println!("final lambda: {}", out.lambda);
            (Model::Classifier(out.params), out.history)
        }
        Method::Brnn => {
            let (features, trunk) = a
                .hidden
                .split_last()
                .ok_or_else(|| Error::InvalidConfig("brnn needs at least one hidden width".into()))?;
            let mut brnn = BrnnSpec::new(data.n_features(), trunk, *features, required(a.delta, "delta", name)?);
            brnn.trunk.hidden_activation = activation;
            let (m, h) = train::train_brnn(&brnn, &data, &config, validation.as_ref())?;
            (Model::Brnn(m), h)
        }
        _ => {
            let (p, h) = train::train_standard(&spec, &data, &config, validation.as_ref())?;
            (Model::Classifier(p), h)
        }
    };
    model_io::save(&model, &a.out)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(&a.history)?);
    history.write_csv(&mut file)?;
    if let Some(last) = history.epochs.last() {
        println!("epochs: {}  final train loss: {}", history.epochs.len(), last.train_loss);
        if let (Some(u), Some(o)) = (last.underg, last.overg) {
            println!("UnderG: {u}  OverG: {o}");
        }
    }
    if history.skipped_constraint_batches > 0 {
        println!(
            "warning: {} batches lacked a (y, z) cell; their fairness term was skipped",
            history.skipped_constraint_batches
        );
    }
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::HStar => "h_star",
        Method::WeightedCe => "weighted_ce",
        Method::Cc => "cc",
        Method::Focal => "focal",
        Method::Fbi => "fbi",
        Method::Peo => "peo",
        Method::Lfo => "lfo",
        Method::Brnn => "brnn",
    }
}

fn eval_cmd(a: EvalArgs, force: bool) -> Result<()> {
    let model = model_io::load(&a.model)?;
    let mut data = Dataset::load_csv(&a.data)?;
    if data.mode == Mode::Ci {
        data = data.with_minority(a.minority)?;
    }
    if model.input_width() != data.n_features() {
        return Err(Error::ShapeMismatch {
            what: "model input vs dataset width",
            expected: model.input_width(),
            actual: data.n_features(),
        });
    }
    let p = model.predict(data.view())?;
    let r = eval::evaluate(&data, p.view(), a.threshold)?;
    let text = format!("{}\n{}\n", eval::GroupReport::CSV_HEADER, r.csv_row());
    match a.out {
        Some(path) => {
            writable(&path, force)?;
            std::fs::write(path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, seed: Option<u64>, force: bool) -> Result<()> {
    let mut plan = match (&a.plan, a.desk.as_deref()) {
        (Some(p), _) => SweepPlan::load(p)?,
        (None, Some("CI")) => SweepPlan::desk(sweep::Problem::CI),
        (None, Some("CB")) => SweepPlan::desk(sweep::Problem::CB),
        (None, _) => SweepPlan::desk(sweep::Problem::UC),
    };
    if let Some(s) = seed {
        plan.base_seed = s;
    }
    let options = SweepOptions {
        workers: a.workers,
        resume: a.resume,
        force,
        verbose: !a.quiet,
    };
    let out = sweep::run_sweep(&plan, &a.out, &options)?;
    println!("trained: {}  reused: {}", out.computed, out.reused);
    for path in &out.written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn ingest_cmd(a: IngestArgs, seed: Option<u64>, force: bool) -> Result<()> {
    let schema = TabularSchema::load(&a.schema)?;
    let table = ingest::load_table(&a.data, &schema)?;
    let mode = if a.mode == "CI" { Mode::Ci } else { Mode::Cbuc };
    writable(&a.train_out, force)?;
    writable(&a.validation_out, force)?;
    let (train, validation) = ingest::subsample_to_unbalance(&table, a.unbalance, mode, seed.unwrap_or(0))?;
    train.save_csv(&a.train_out)?;
    validation.save_csv(&a.validation_out)?;
    summarize(&train);
    println!("validation rows: {}", validation.len());
    Ok(())
}
