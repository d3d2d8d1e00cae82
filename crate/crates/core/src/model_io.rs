//! Text model file.
//!
//! ```text
//! donut-model 1
//! window 120
//! latent 3
//! hidden 100
//! epsilon 1e-4
//! mean 1.2e1
//! std 3.4e0
//! tensor encoder.hidden1.weight 120 100
//! <one line per row, space-separated>
//! tensor encoder.hidden1.bias 100
//! <one line>
//! ...
//! checksum sha256 <hex digest of every preceding byte>
//! ```
//!
//! Numbers use Rust's shortest round-trip exponent formatting, so saving a
//! loaded model reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{ModelParams, NetShape, Tensors, LAYER_NAMES};
use crate::series::Standardization;

pub const MAGIC: &str = "donut-model";
pub const FORMAT_VERSION: u32 = 1;

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:e}");
    }
    out.push('\n');
}

pub fn to_string(params: &ModelParams) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "window {}", params.shape.window);
    let _ = writeln!(out, "latent {}", params.shape.latent);
    let _ = writeln!(out, "hidden {}", params.shape.hidden);
    let _ = writeln!(out, "epsilon {:e}", params.epsilon);
    let _ = writeln!(out, "mean {:e}", params.stats.mean);
    let _ = writeln!(out, "std {:e}", params.stats.std);
    for (name, layer) in LAYER_NAMES.iter().zip(params.tensors.layers()) {
        let (rows, cols) = layer.weight.dim();
        let _ = writeln!(out, "tensor {name}.weight {rows} {cols}");
        for row in layer.weight.rows() {
            push_row(&mut out, row.iter());
        }
        let _ = writeln!(out, "tensor {name}.bias {}", layer.bias.len());
        push_row(&mut out, layer.bias.iter());
    }
    let digest = hex_digest(out.as_bytes());
    let _ = writeln!(out, "checksum sha256 {digest}");
    out
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::ModelFormat(format!("unexpected end of file, expected {what}")))
    }

    fn field<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (line, text) = self.next(key)?;
        let value = text
            .strip_prefix(key)
            .and_then(|rest| rest.strip_prefix(' '))
            .ok_or_else(|| Error::ModelFormat(format!("line {line}: expected `{key} <value>`")))?;
        value
            .parse()
            .map_err(|_| Error::ModelFormat(format!("line {line}: bad value for `{key}`")))
    }
}

fn parse_values(text: &str, expected: usize, tensor: &str, line: usize) -> Result<Vec<f64>> {
    let values: Vec<f64> = text
        .split_ascii_whitespace()
        .map(|v| {
            v.parse::<f64>().map_err(|_| {
                Error::ModelFormat(format!("tensor {tensor}: bad number `{v}` on line {line}"))
            })
        })
        .collect::<Result<_>>()?;
    if values.len() != expected {
        return Err(Error::ModelFormat(format!(
            "tensor {tensor}: expected {expected} values on line {line}, found {}",
            values.len()
        )));
    }
    Ok(values)
}

fn tensor_header(lines: &mut Lines<'_>, name: &str, dims: &[usize]) -> Result<()> {
    let (line, text) = lines.next(name)?;
    let mut parts = text.split_ascii_whitespace();
    if parts.next() != Some("tensor") || parts.next() != Some(name) {
        return Err(Error::ModelFormat(format!(
            "line {line}: expected tensor {name}, found `{text}`"
        )));
    }
    let got: Vec<usize> = parts
        .map(|p| p.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ModelFormat(format!("tensor {name}: bad dimensions on line {line}")))?;
    if got != dims {
        return Err(Error::ModelFormat(format!(
            "tensor {name}: dimensions {got:?} do not match the declared model shape {dims:?}"
        )));
    }
    Ok(())
}

pub fn from_str(text: &str) -> Result<ModelParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, header) = lines.next("header")?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().parse::<u32>().ok())
        .ok_or_else(|| Error::ModelFormat(format!("not a model file (header `{header}`)")))?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported format version {version} (this build reads {FORMAT_VERSION})"
        )));
    }
    let shape = NetShape {
        window: lines.field("window")?,
        latent: lines.field("latent")?,
        hidden: lines.field("hidden")?,
    };
    shape.validate()?;
    let epsilon: f64 = lines.field("epsilon")?;
    let stats = Standardization {
        mean: lines.field("mean")?,
        std: lines.field("std")?,
    };

    let mut tensors = Tensors::zeros(shape);
    for (name, layer) in LAYER_NAMES.iter().zip(tensors.layers_mut()) {
        let weight_name = format!("{name}.weight");
        let (rows, cols) = layer.weight.dim();
        tensor_header(&mut lines, &weight_name, &[rows, cols])?;
        let mut flat = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (line, row) = lines.next(&weight_name)?;
            flat.extend(parse_values(row, cols, &weight_name, line)?);
        }
        layer.weight = Array2::from_shape_vec((rows, cols), flat).expect("sizes checked");

        let bias_name = format!("{name}.bias");
        let n = layer.bias.len();
        tensor_header(&mut lines, &bias_name, &[n])?;
        let (line, row) = lines.next(&bias_name)?;
        layer.bias = Array1::from(parse_values(row, n, &bias_name, line)?);
    }

    let (line, checksum) = lines.next("checksum")?;
    let digest = checksum
        .strip_prefix("checksum sha256 ")
        .ok_or_else(|| Error::ModelFormat(format!("line {line}: expected checksum")))?;
    let body_len = text
        .find("\nchecksum sha256 ")
        .map(|i| i + 1)
        .expect("checksum line was found");
    if hex_digest(&text.as_bytes()[..body_len]) != digest.trim() {
        return Err(Error::ModelFormat("checksum mismatch".into()));
    }
    if let Ok((line, extra)) = lines.next("end") {
        if !extra.trim().is_empty() {
            return Err(Error::ModelFormat(format!(
                "line {line}: unexpected content after checksum"
            )));
        }
    }
    Ok(ModelParams {
        shape,
        epsilon,
        stats,
        tensors,
    })
}
