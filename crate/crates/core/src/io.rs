//! File formats: network checkpoints, matrix CSV dumps and JSON reports.
//!
//! Every real is written with 17 significant digits so values round-trip exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{ActivationKind, TwoLayerNet};

/// JSON formatter that prints every float in `{:.16e}` form.
#[derive(Default)]
pub struct PreciseFormatter;

impl serde_json::ser::Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        if value.is_finite() {
            write!(writer, "{value:.16e}")
        } else {
            // JSON has no non-finite numbers
            writer.write_all(b"null")
        }
    }
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PreciseFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes `value` as JSON, creating parent directories.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let value = serde_json::to_value(value)?;
    let mut text = to_json_string(&value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(parent) if !parent.as_os_str().is_empty() => {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))
        }
        _ => Ok(()),
    }
}

/// Writes a text file, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub width: usize,
    pub dim: usize,
    pub activation: ActivationKind,
    pub weight_scale: Option<f64>,
    /// Row-major `m × d`.
    pub hidden_weights: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub seed: Option<u64>,
}

impl Checkpoint {
    pub fn from_network(net: &TwoLayerNet) -> Self {
        Checkpoint {
            width: net.width(),
            dim: net.dim(),
            activation: net.activation,
            weight_scale: net.weight_scale.is_finite().then_some(net.weight_scale),
            hidden_weights: net.hidden.transpose().iter().copied().collect(),
            output_weights: net.output.iter().copied().collect(),
            seed: net.seed,
        }
    }

    pub fn into_network(self) -> Result<TwoLayerNet> {
        ensure!(
            self.hidden_weights.len() == self.width * self.dim,
            Shape,
            "checkpoint has {} hidden weights, expected {}×{}",
            self.hidden_weights.len(),
            self.width,
            self.dim
        );
        let net = TwoLayerNet {
            hidden: DMatrix::from_row_slice(self.width, self.dim, &self.hidden_weights),
            output: DVector::from_vec(self.output_weights),
            activation: self.activation,
            weight_scale: self.weight_scale.unwrap_or(f64::NAN),
            seed: self.seed,
        };
        net.validate()?;
        Ok(net)
    }
}

pub fn save_checkpoint(net: &TwoLayerNet, path: impl AsRef<Path>) -> Result<()> {
    write_json(path, &Checkpoint::from_network(net))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TwoLayerNet> {
    read_json::<Checkpoint>(path)?.into_network()
}

/// Row-major CSV without a header.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    fs::write(path, matrix_to_csv(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let bad = |message: String| Error::Csv {
            path: path.to_path_buf(),
            row: r + 1,
            message,
        };
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row = record
            .iter()
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("bad entry {c:?}: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    ensure!(
        rows.iter().all(|r| r.len() == ncols),
        Shape,
        "ragged matrix CSV"
    );
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(
        flat.len() / ncols.max(1),
        ncols,
        &flat,
    ))
}
