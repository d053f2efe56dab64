//! JSON model files.
//!
//! Layout (all tensors row-major):
//!
//! ```text
//! { "format": "pscbm-model", "version": 1, "mode": "cbm"|"scbm"|"pscbm",
//!   "covariance_enabled": bool,
//!   "dims": { "input_dim", "feature_dim", "concepts", "classes" },
//!   "encoder" | "concept_head" | "target_head":
//!       { "weight": { "rows", "cols", "data": [..] }, "bias": [..] },
//!   "covariance": null | { "kind": "global", "raw": [..] }
//!                      | { "kind": "amortized", "map": <layer> },
//!   "percentiles": null | { "low": [..], "high": [..] } }
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CovarianceHead, Mode, ModelBundle, PercentileTable};
use crate::error::{Error, Result};
use crate::nn::Linear;

pub const FORMAT_NAME: &str = "pscbm-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorFile {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerFile {
    weight: TensorFile,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum CovarianceFile {
    Global { raw: Vec<f64> },
    Amortized { map: LayerFile },
}

#[derive(Debug, Serialize, Deserialize)]
struct Dims {
    input_dim: usize,
    feature_dim: usize,
    concepts: usize,
    classes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PercentileFile {
    low: Vec<f64>,
    high: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    mode: String,
    covariance_enabled: bool,
    dims: Dims,
    encoder: LayerFile,
    concept_head: LayerFile,
    target_head: LayerFile,
    covariance: Option<CovarianceFile>,
    percentiles: Option<PercentileFile>,
}

fn layer_to_file(l: &Linear) -> LayerFile {
    let (rows, cols) = (l.output_dim(), l.input_dim());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            data.push(l.weight[(r, c)]);
        }
    }
    LayerFile {
        weight: TensorFile { rows, cols, data },
        bias: l.bias.as_slice().to_vec(),
    }
}

fn layer_from_file(f: LayerFile, name: &str) -> Result<Linear> {
    let TensorFile { rows, cols, data } = f.weight;
    if data.len() != rows * cols {
        return Err(Error::Format(format!(
            "{name}: weight has {} values, expected {rows}x{cols}",
            data.len()
        )));
    }
    if f.bias.len() != rows {
        return Err(Error::Format(format!("{name}: bias length {} != {rows}", f.bias.len())));
    }
    Ok(Linear {
        weight: DMatrix::from_row_slice(rows, cols, &data),
        bias: DVector::from_vec(f.bias),
    })
}

/// Serializes a bundle to the JSON model format.
pub fn to_json(bundle: &ModelBundle) -> String {
    let file = ModelFile {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        mode: bundle.mode.name().into(),
        covariance_enabled: bundle.covariance_enabled,
        dims: Dims {
            input_dim: bundle.input_dim(),
            feature_dim: bundle.feature_dim(),
            concepts: bundle.concepts(),
            classes: bundle.classes(),
        },
        encoder: layer_to_file(&bundle.encoder),
        concept_head: layer_to_file(&bundle.concept_head),
        target_head: layer_to_file(&bundle.target_head),
        covariance: bundle.covariance.as_ref().map(|h| match h {
            CovarianceHead::Global { raw } => CovarianceFile::Global {
                raw: raw.as_slice().to_vec(),
            },
            CovarianceHead::Amortized { map } => CovarianceFile::Amortized {
                map: layer_to_file(map),
            },
        }),
        percentiles: bundle.percentiles.as_ref().map(|p| PercentileFile {
            low: p.low.clone(),
            high: p.high.clone(),
        }),
    };
    serde_json::to_string_pretty(&file).expect("model file serializes")
}

pub fn from_json(text: &str) -> Result<ModelBundle> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if file.format != FORMAT_NAME {
        return Err(Error::Format(format!("unexpected format tag {:?}", file.format)));
    }
    if file.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported version {}", file.version)));
    }
    let mode = match file.mode.as_str() {
        "cbm" => Mode::Cbm,
        "scbm" => Mode::Scbm,
        "pscbm" => Mode::Pscbm,
        other => return Err(Error::Format(format!("unknown mode {other:?}"))),
    };
    let covariance = match file.covariance {
        None => None,
        Some(CovarianceFile::Global { raw }) => Some(CovarianceHead::Global {
            raw: DVector::from_vec(raw),
        }),
        Some(CovarianceFile::Amortized { map }) => Some(CovarianceHead::Amortized {
            map: layer_from_file(map, "covariance.map")?,
        }),
    };
    let mut bundle = ModelBundle::new(
        layer_from_file(file.encoder, "encoder")?,
        layer_from_file(file.concept_head, "concept_head")?,
        layer_from_file(file.target_head, "target_head")?,
        covariance,
        mode,
    )?;
    let dims_ok = bundle.input_dim() == file.dims.input_dim
        && bundle.feature_dim() == file.dims.feature_dim
        && bundle.concepts() == file.dims.concepts
        && bundle.classes() == file.dims.classes;
    if !dims_ok {
        return Err(Error::Format("declared dims disagree with tensors".into()));
    }
    if mode == Mode::Cbm && file.covariance_enabled {
        return Err(Error::Format("a CBM cannot have its covariance enabled".into()));
    }
    bundle.covariance_enabled = file.covariance_enabled;
    if let Some(p) = file.percentiles {
        bundle.set_percentiles(PercentileTable { low: p.low, high: p.high })?;
    }
    Ok(bundle)
}

pub fn save(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_json(bundle))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
    from_json(&std::fs::read_to_string(path)?)
}

/// Short content hash of the serialized model.
pub fn fingerprint(bundle: &ModelBundle) -> String {
    let digest = Sha256::digest(to_json(bundle).as_bytes());
    hex::encode(digest)[..16].to_string()
}
