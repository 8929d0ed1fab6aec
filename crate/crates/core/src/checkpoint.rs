//! Text checkpoints.
//!
//! Line 1 is a JSON header:
//! `{"format":"certilev-model","version":1,"shape":{..},"mode":"plain","p":"2","alphabet":"alphabet.txt"}`.
//! It is followed by one block per tensor, `tensor <name> <dims..>`, then the
//! values in row-major order, one innermost row per line, written with the
//! shortest representation that round-trips exactly. The file ends with `end`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::erp::NormOrder;
use crate::model::{ConvTextClassifier, Mode, ModelError, ModelShape};

pub const FORMAT: &str = "certilev-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported checkpoint {format:?} version {version}")]
    Version { format: String, version: u32 },
    #[error("alphabet size mismatch: checkpoint has {checkpoint}, alphabet has {alphabet}")]
    AlphabetSize { checkpoint: usize, alphabet: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub shape: ModelShape,
    pub mode: Mode,
    pub p: NormOrder,
    /// File name of the alphabet the token ids refer to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<String>,
    /// File name of the label map, if labels were mapped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<String>,
}

/// A model plus the names of its companion files.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ConvTextClassifier,
    pub alphabet: Option<String>,
    pub labels: Option<String>,
}

fn write_rows<'a, I: Iterator<Item = &'a f64>>(out: &mut String, values: I, row_len: usize) {
    for (i, v) in values.enumerate() {
        if i > 0 {
            out.push(if i % row_len == 0 { '\n' } else { ' ' });
        }
        // `{:?}` on f64 is the shortest round-trip form and keeps `-0.0`
        let _ = write!(out, "{v:?}");
    }
    out.push('\n');
}

pub fn to_string(ckpt: &Checkpoint) -> String {
    let m = &ckpt.model;
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        shape: m.shape,
        mode: m.mode,
        p: m.shape.norm,
        alphabet: ckpt.alphabet.clone(),
        labels: ckpt.labels.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    let (v, d) = m.embedding.dim();
    let _ = writeln!(out, "tensor embedding {v} {d}");
    write_rows(&mut out, m.embedding.iter(), d);
    for (i, k) in m.kernels.iter().enumerate() {
        let (q, h, r) = k.dim();
        let _ = writeln!(out, "tensor kernel{} {q} {h} {r}", i + 1);
        write_rows(&mut out, k.iter(), r);
    }
    let (h, o) = m.head.dim();
    let _ = writeln!(out, "tensor head {h} {o}");
    write_rows(&mut out, m.head.iter(), o);
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, CheckpointError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok(l)
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    fn err(&self, msg: impl Into<String>) -> CheckpointError {
        CheckpointError::Parse {
            line: self.last + usize::from(self.last == 0),
            msg: msg.into(),
        }
    }

    fn tensor(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>, CheckpointError> {
        let head = self.next()?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some("tensor") || parts.next() != Some(name) {
            return Err(self.err(format!("expected tensor {name}, found {head:?}")));
        }
        let got: Vec<usize> = parts
            .map(|t| t.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| self.err(format!("bad dimension: {e}")))?;
        if got != dims {
            return Err(self.err(format!(
                "tensor {name} has dims {got:?}, header shape implies {dims:?}"
            )));
        }
        let total: usize = dims.iter().product();
        let row_len = *dims.last().unwrap_or(&1);
        let mut values = Vec::with_capacity(total);
        while values.len() < total {
            let line = self.next()?;
            let before = values.len();
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(format!("bad number {tok:?}")))?;
                if !v.is_finite() {
                    return Err(self.err(format!("non-finite weight {tok:?} in {name}")));
                }
                values.push(v);
            }
            if values.len() - before != row_len {
                return Err(self.err(format!(
                    "row of {name} has {} values, expected {row_len}",
                    values.len() - before
                )));
            }
        }
        Ok(values)
    }
}

pub fn from_str(text: &str) -> Result<Checkpoint, CheckpointError> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let first = lines.next()?;
    let value: serde_json::Value =
        serde_json::from_str(first).map_err(|e| lines.err(format!("header is not JSON: {e}")))?;
    let format = value
        .get("format")
        .and_then(|f| f.as_str())
        .unwrap_or_default()
        .to_string();
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if format != FORMAT || version != VERSION {
        return Err(CheckpointError::Version { format, version });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| lines.err(format!("bad header: {e}")))?;
    let sh = header.shape;
    sh.validate()?;
    if header.p != sh.norm {
        return Err(lines.err(format!(
            "header p {} disagrees with shape norm {}",
            header.p, sh.norm
        )));
    }

    let e = lines.tensor("embedding", &[sh.vocab, sh.embed_dim])?;
    let embedding = Array2::from_shape_vec((sh.vocab, sh.embed_dim), e).expect("dims checked");
    let mut kernels = Vec::with_capacity(sh.layers);
    for i in 0..sh.layers {
        let dims = [sh.kernel, sh.hidden, sh.layer_input_dim(i)];
        let k = lines.tensor(&format!("kernel{}", i + 1), &dims)?;
        kernels.push(Array3::from_shape_vec((dims[0], dims[1], dims[2]), k).expect("dims checked"));
    }
    let w = lines.tensor("head", &[sh.hidden, sh.classes])?;
    let head = Array2::from_shape_vec((sh.hidden, sh.classes), w).expect("dims checked");
    if lines.next()?.trim() != "end" {
        return Err(lines.err("expected end marker"));
    }

    let model = ConvTextClassifier {
        shape: sh,
        mode: header.mode,
        embedding,
        kernels,
        head,
    };
    model.validate()?;
    Ok(Checkpoint {
        model,
        alphabet: header.alphabet,
        labels: header.labels,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_string(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_str(&std::fs::read_to_string(path)?)
}

/// Checks that a loaded model matches the alphabet it will be fed.
pub fn check_alphabet(
    model: &ConvTextClassifier,
    alphabet_size: usize,
) -> Result<(), CheckpointError> {
    if model.shape.vocab != alphabet_size {
        return Err(CheckpointError::AlphabetSize {
            checkpoint: model.shape.vocab,
            alphabet: alphabet_size,
        });
    }
    Ok(())
}
