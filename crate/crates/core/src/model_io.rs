//! Portable text format for trained models.
//!
//! ```text
//! unbalance-lab-model 1
//! model classifier            # or: model brnn
//! network main                # brnn: trunk, classifier, confounder
//! input 100
//! activation relu
//! head sigmoid                # or: features
//! layers 3
//! dense 100 50                # fan_in fan_out
//! <fan_in lines of fan_out weights>
//! <one line of fan_out biases>
//! ...
//! ```
//!
//! Values are whitespace separated and written in shortest round-trip
//! decimal form, so a save/load cycle is bit exact. Blank lines and text
//! after `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::net::{Activation, Dense, Head, LayerSpec, NetworkParams};
use crate::train::{BrnnModel, Model};

const MAGIC: &str = "unbalance-lab-model 1";

pub fn to_text(model: &Model) -> String {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    match model {
        Model::Classifier(p) => {
            out.push_str("model classifier\n");
            write_network(&mut out, "main", p);
        }
        Model::Brnn(m) => {
            out.push_str("model brnn\n");
            write_network(&mut out, "trunk", &m.trunk);
            write_network(&mut out, "classifier", &m.classifier);
            write_network(&mut out, "confounder", &m.confounder);
        }
    }
    out
}

fn write_network(out: &mut String, name: &str, p: &NetworkParams) {
    let activation = match p.spec.hidden_activation {
        Activation::Relu => "relu",
        Activation::Tanh => "tanh",
    };
    let head = match p.head {
        Head::Sigmoid => "sigmoid",
        Head::Features => "features",
    };
    let _ = writeln!(out, "network {name}");
    let _ = writeln!(out, "input {}", p.spec.input_width);
    let _ = writeln!(out, "activation {activation}");
    let _ = writeln!(out, "head {head}");
    let _ = writeln!(out, "layers {}", p.layers.len());
    for layer in &p.layers {
        let (fan_in, fan_out) = layer.weights.dim();
        let _ = writeln!(out, "dense {fan_in} {fan_out}");
        for row in layer.weights.rows() {
            write_values(out, row.iter());
        }
        write_values(out, layer.bias.iter());
    }
}

fn write_values<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_text(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_text(&std::fs::read_to_string(path)?)
}

/// Line reader that skips comments and blank lines and remembers the line
/// number for error messages.
struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str> {
        for (i, raw) in self.inner.by_ref() {
            let text = raw.split('#').next().unwrap_or("").trim();
            if !text.is_empty() {
                self.line = i;
                return Ok(text);
            }
        }
        Err(self.error("unexpected end of model file"))
    }

    fn error(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            row: self.line,
            column: "model".into(),
            message: message.into(),
        }
    }

    fn keyword(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next()?;
        match line.split_once(char::is_whitespace) {
            Some((k, rest)) if k == key => Ok(rest.trim()),
            _ => Err(self.error(format!("expected `{key} ...`, found `{line}`"))),
        }
    }

    fn number<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse().map_err(|_| self.error(format!("`{s}` is not a valid number")))
    }

    fn values(&mut self, expected: usize) -> Result<Vec<f64>> {
        let line = self.next()?;
        let values: Vec<f64> = line.split_whitespace().map(|s| self.number(s)).collect::<Result<_>>()?;
        if values.len() != expected {
            return Err(self.error(format!("expected {expected} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(self.error("non-finite parameter"));
        }
        Ok(values)
    }
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    if lines.next()? != MAGIC {
        return Err(lines.error(format!("missing `{MAGIC}` header")));
    }
    match lines.keyword("model")? {
        "classifier" => Ok(Model::Classifier(read_network(&mut lines, "main")?)),
        "brnn" => Ok(Model::Brnn(BrnnModel {
            trunk: read_network(&mut lines, "trunk")?,
            classifier: read_network(&mut lines, "classifier")?,
            confounder: read_network(&mut lines, "confounder")?,
        })),
        other => Err(lines.error(format!("unknown model kind `{other}`"))),
    }
}

fn read_network(lines: &mut Lines<'_>, name: &str) -> Result<NetworkParams> {
    let found = lines.keyword("network")?;
    if found != name {
        return Err(lines.error(format!("expected network `{name}`, found `{found}`")));
    }
    let input = lines.keyword("input")?;
    let input: usize = lines.number(input)?;
    let hidden_activation = match lines.keyword("activation")? {
        "relu" => Activation::Relu,
        "tanh" => Activation::Tanh,
        other => return Err(lines.error(format!("unknown activation `{other}`"))),
    };
    let head = match lines.keyword("head")? {
        "sigmoid" => Head::Sigmoid,
        "features" => Head::Features,
        other => return Err(lines.error(format!("unknown head `{other}`"))),
    };
    let n_layers = lines.keyword("layers")?;
    let n_layers: usize = lines.number(n_layers)?;
    if n_layers == 0 {
        return Err(lines.error("a network needs at least one layer"));
    }
    let mut layers = Vec::with_capacity(n_layers);
    let mut widths = vec![input];
    for _ in 0..n_layers {
        let dims = lines.keyword("dense")?;
        let (a, b) = dims
            .split_once(char::is_whitespace)
            .ok_or_else(|| lines.error("`dense` needs fan_in and fan_out"))?;
        let fan_in: usize = lines.number(a.trim())?;
        let fan_out: usize = lines.number(b.trim())?;
        if fan_in != *widths.last().expect("nonempty") {
            return Err(lines.error(format!(
                "layer fan_in {fan_in} does not match previous width {}",
                widths.last().expect("nonempty")
            )));
        }
        let mut weights = Vec::with_capacity(fan_in * fan_out);
        for _ in 0..fan_in {
            weights.extend(lines.values(fan_out)?);
        }
        let bias = lines.values(fan_out)?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((fan_in, fan_out), weights).expect("sized above"),
            bias: Array1::from(bias),
        });
        widths.push(fan_out);
    }
    let output_width = widths.pop().expect("nonempty");
    let spec = LayerSpec {
        input_width: input,
        hidden_widths: widths[1..].to_vec(),
        output_width,
        hidden_activation,
    };
    spec.validate()?;
    if head == Head::Sigmoid && output_width != 1 {
        return Err(lines.error("a sigmoid head needs output width 1"));
    }
    Ok(NetworkParams { spec, head, layers })
}
