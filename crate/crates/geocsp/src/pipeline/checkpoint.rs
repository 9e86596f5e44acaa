//! Versioned text checkpoints. Floats are written in shortest round-trip
//! decimal form, so save -> load -> save reproduces the bytes exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::encoder::{Activation, LocationEncoderParams, PositionalEncoding};
use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::pipeline::config::EncoderKind;
use crate::supervised::{ClassEmbedding, ClassifierHead};
use crate::tensor::Matrix;

const FORMAT_VERSION: u32 = 1;
const HEADER_MAGIC: &str = "GEOCSP-CKPT";

/// Trained state persisted between pipeline stages. The encoder is always
/// present; the other sections depend on which stage produced the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: LocationEncoderParams,
    /// Image projection W() from pre-training with a contrastive loss.
    pub projection: Option<LinearLayer>,
    /// Feature regressor from pre-training with the MSE baseline.
    pub regressor: Option<LinearLayer>,
    /// Class embedding matrix T from fine-tuning.
    pub class_embedding: Option<ClassEmbedding>,
    /// Classification head g() from fine-tuning.
    pub head: Option<ClassifierHead>,
}

impl Checkpoint {
    pub fn encoder_only(encoder: LocationEncoderParams) -> Self {
        Checkpoint {
            encoder,
            projection: None,
            regressor: None,
            class_embedding: None,
            head: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{HEADER_MAGIC} v{FORMAT_VERSION}").unwrap();
        let (kind, scales, r_min, r_max) = match self.encoder.positional {
            PositionalEncoding::Wrap => (EncoderKind::Wrap, 1, 0.0, 0.0),
            PositionalEncoding::Grid {
                scales,
                r_min,
                r_max,
            } => (EncoderKind::Grid, scales, r_min, r_max),
        };
        writeln!(out, "encoder.kind = {}", kind.name()).unwrap();
        if kind == EncoderKind::Grid {
            writeln!(out, "encoder.scales = {scales}").unwrap();
            writeln!(out, "encoder.r_min = {r_min}").unwrap();
            writeln!(out, "encoder.r_max = {r_max}").unwrap();
        }
        writeln!(out, "encoder.activation = {}", self.encoder.activation.name()).unwrap();
        writeln!(out, "encoder.dropout = {}", self.encoder.dropout).unwrap();
        for (i, (w, b)) in self
            .encoder
            .weights()
            .iter()
            .zip(self.encoder.biases())
            .enumerate()
        {
            write_matrix(&mut out, &format!("encoder.w{i}"), w);
            write_matrix(&mut out, &format!("encoder.b{i}"), b);
        }
        if let Some(p) = &self.projection {
            write_matrix(&mut out, "projection.weight", p.weight());
            write_matrix(&mut out, "projection.bias", p.bias());
        }
        if let Some(r) = &self.regressor {
            write_matrix(&mut out, "regressor.weight", r.weight());
            write_matrix(&mut out, "regressor.bias", r.bias());
        }
        if let Some(t) = &self.class_embedding {
            write_matrix(&mut out, "class_embedding", t.matrix());
        }
        if let Some(h) = &self.head {
            write_matrix(&mut out, "head.weight", h.weight());
            write_matrix(&mut out, "head.bias", h.bias());
        }
        out.push_str("END\n");
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Checkpoint::from_text(&text, &path.display().to_string())
    }

    pub fn from_text(text: &str, path: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        let (_, header) = lines.next().ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            msg: "empty file".into(),
        })?;
        let tokens: Vec<&str> = header.split_ascii_whitespace().collect();
        if tokens.len() != 2 || tokens[0] != HEADER_MAGIC {
            return Err(Error::MalformedHeader {
                path: path.into(),
                msg: format!("expected '{HEADER_MAGIC} v<N>', got '{header}'"),
            });
        }
        let version: u32 = tokens[1]
            .strip_prefix('v')
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::MalformedHeader {
                path: path.into(),
                msg: format!("bad version '{}'", tokens[1]),
            })?;
        if version > FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                found: version,
                supported: FORMAT_VERSION,
            });
        }

        let mut kind = None;
        let mut scales = 1usize;
        let mut r_min = 0.01;
        let mut r_max = 1.0;
        let mut activation = Activation::LeakyRelu;
        let mut dropout = 0.0;
        let mut matrices: Vec<(String, Matrix)> = Vec::new();
        let mut saw_end = false;

        while let Some((line_no, line)) = lines.next() {
            let line_no = line_no + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line == "END" {
                saw_end = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("matrix ") {
                let parts: Vec<&str> = rest.split_ascii_whitespace().collect();
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line: line_no,
                        msg: format!("expected 'matrix <name> <rows> <cols>', got '{line}'"),
                    });
                }
                let name = parts[0].to_string();
                let rows: usize = parts[1].parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: line_no,
                    msg: format!("bad row count '{}'", parts[1]),
                })?;
                let cols: usize = parts[2].parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line: line_no,
                    msg: format!("bad col count '{}'", parts[2]),
                })?;
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    let (row_no, row_line) = lines.next().ok_or(Error::Truncated {
                        path: path.into(),
                        expected: rows,
                        found: r,
                    })?;
                    let fields: Vec<&str> = row_line.split_ascii_whitespace().collect();
                    if fields.len() != cols {
                        return Err(Error::DimensionMismatch {
                            path: path.into(),
                            line: row_no + 1,
                            expected: cols,
                            found: fields.len(),
                        });
                    }
                    for f in fields {
                        data.push(f.parse::<f64>().map_err(|_| Error::Parse {
                            path: path.into(),
                            line: row_no + 1,
                            msg: format!("bad float '{f}'"),
                        })?);
                    }
                }
                matrices.push((name, Matrix::from_vec(rows, cols, data)?));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.into(),
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| Error::Parse {
                path: path.into(),
                line: line_no,
                msg,
            };
            match key {
                "encoder.kind" => kind = Some(EncoderKind::parse(value)?),
                "encoder.scales" => {
                    scales = value.parse().map_err(|_| bad(format!("bad scales '{value}'")))?
                }
                "encoder.r_min" => {
                    r_min = value.parse().map_err(|_| bad(format!("bad r_min '{value}'")))?
                }
                "encoder.r_max" => {
                    r_max = value.parse().map_err(|_| bad(format!("bad r_max '{value}'")))?
                }
                "encoder.activation" => activation = Activation::parse(value)?,
                "encoder.dropout" => {
                    dropout = value
                        .parse()
                        .map_err(|_| bad(format!("bad dropout '{value}'")))?
                }
                other => return Err(bad(format!("unknown checkpoint key '{other}'"))),
            }
        }
        if !saw_end {
            return Err(Error::Truncated {
                path: path.into(),
                expected: 1,
                found: 0,
            });
        }

        let kind = kind.ok_or_else(|| Error::MalformedHeader {
            path: path.into(),
            msg: "missing encoder.kind".into(),
        })?;
        let positional = match kind {
            EncoderKind::Wrap => PositionalEncoding::Wrap,
            EncoderKind::Grid => PositionalEncoding::Grid {
                scales,
                r_min,
                r_max,
            },
        };

        let take = |name: &str, matrices: &mut Vec<(String, Matrix)>| -> Option<Matrix> {
            let pos = matrices.iter().position(|(n, _)| n == name)?;
            Some(matrices.remove(pos).1)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut layer = 0usize;
        while let Some(w) = take(&format!("encoder.w{layer}"), &mut matrices) {
            let b = take(&format!("encoder.b{layer}"), &mut matrices).ok_or_else(|| {
                Error::MalformedHeader {
                    path: path.into(),
                    msg: format!("encoder.w{layer} present without encoder.b{layer}"),
                }
            })?;
            weights.push(w);
            biases.push(b);
            layer += 1;
        }
        if weights.is_empty() {
            return Err(Error::MalformedHeader {
                path: path.into(),
                msg: "checkpoint holds no encoder layers".into(),
            });
        }
        let encoder =
            LocationEncoderParams::from_parts(positional, activation, dropout, weights, biases)?;

        let linear = |w: Option<Matrix>, b: Option<Matrix>, what: &str| -> Result<Option<LinearLayer>> {
            match (w, b) {
                (Some(w), Some(b)) => Ok(Some(LinearLayer::from_parts(w, b)?)),
                (None, None) => Ok(None),
                _ => Err(Error::MalformedHeader {
                    path: path.into(),
                    msg: format!("{what} needs both weight and bias"),
                }),
            }
        };
        let projection = linear(
            take("projection.weight", &mut matrices),
            take("projection.bias", &mut matrices),
            "projection",
        )?;
        let regressor = linear(
            take("regressor.weight", &mut matrices),
            take("regressor.bias", &mut matrices),
            "regressor",
        )?;
        let class_embedding = take("class_embedding", &mut matrices).map(ClassEmbedding::from_matrix);
        let head = linear(
            take("head.weight", &mut matrices),
            take("head.bias", &mut matrices),
            "head",
        )?;
        if let Some((name, _)) = matrices.first() {
            return Err(Error::MalformedHeader {
                path: path.into(),
                msg: format!("unknown matrix section '{name}'"),
            });
        }
        Ok(Checkpoint {
            encoder,
            projection,
            regressor,
            class_embedding,
            head,
        })
    }
}

fn write_matrix(out: &mut String, name: &str, m: &Matrix) {
    writeln!(out, "matrix {name} {} {}", m.rows(), m.cols()).unwrap();
    for r in 0..m.rows() {
        let mut first = true;
        for v in m.row(r) {
            if !first {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
            first = false;
        }
        out.push('\n');
    }
}
