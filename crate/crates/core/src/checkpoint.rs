//! Versioned text checkpoints.
//!
//! ```text
//! #glat-checkpoint v1
//! <name> <ndims> <dim0> ... <dim{n-1}>
//! <v0> <v1> ...
//! ```
//!
//! One record per trainable tensor in [`PARAM_NAMES`] order. Values use
//! shortest round-trip formatting, so save → load is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{GlatError, Result};
use crate::model::{ModelConfig, ModelParams, PARAM_NAMES};

pub const CHECKPOINT_HEADER: &str = "#glat-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn format_checkpoint(params: &ModelParams) -> String {
    let mut out = String::from(CHECKPOINT_HEADER);
    out.push('\n');
    for ((name, values), dims) in params.tensors().iter().zip(params.shapes()) {
        let _ = write!(out, "{name} {}", dims.len());
        for d in &dims {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        let row: Vec<String> = values.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Vec<TensorRecord>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        _ => return Err(GlatError::parse(1, "not a v1 checkpoint")),
    }
    let mut records = Vec::new();
    while let Some((line_no, head)) = lines.next() {
        if head.is_empty() {
            continue;
        }
        let mut fields = head.split(' ');
        let name = fields.next().unwrap_or_default().to_string();
        let ints: Vec<usize> = fields
            .map(|f| f.parse().map_err(|_| GlatError::parse(line_no, "malformed tensor header")))
            .collect::<Result<_>>()?;
        let (ndims, dims) = ints
            .split_first()
            .ok_or_else(|| GlatError::parse(line_no, "malformed tensor header"))?;
        if *ndims != dims.len() {
            return Err(GlatError::parse(line_no, "dimension count disagrees with header"));
        }
        let (value_line, body) = lines
            .next()
            .ok_or_else(|| GlatError::parse(line_no + 1, format!("missing values for {name}")))?;
        let values: Vec<f64> = if body.is_empty() {
            Vec::new()
        } else {
            body.split(' ')
                .map(|v| v.parse().map_err(|_| GlatError::parse(value_line, "malformed value")))
                .collect::<Result<_>>()?
        };
        if values.len() != dims.iter().product::<usize>() {
            return Err(GlatError::parse(value_line, format!("{name}: value count disagrees with shape")));
        }
        records.push(TensorRecord {
            name,
            dims: dims.to_vec(),
            values,
        });
    }
    Ok(records)
}

/// Rebuilds parameters for `config`; every tensor must be present with the
/// shape `config` implies.
pub fn params_from_records(records: &[TensorRecord], config: &ModelConfig) -> Result<ModelParams> {
    let mut params = ModelParams::init(config, 0)?;
    let shapes = params.shapes();
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let rec = records
            .iter()
            .find(|r| r.name == *name)
            .ok_or_else(|| GlatError::invalid(format!("checkpoint lacks {name}")))?;
        if rec.dims != shapes[k] {
            return Err(GlatError::dims(format!(
                "{name}: checkpoint shape {:?}, config expects {:?}",
                rec.dims, shapes[k]
            )));
        }
        params.tensors_mut()[k].1.copy_from_slice(&rec.values);
    }
    if let Some(extra) = records.iter().find(|r| !PARAM_NAMES.contains(&r.name.as_str())) {
        return Err(GlatError::invalid(format!("unknown tensor {} in checkpoint", extra.name)));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_checkpoint(params)).map_err(|e| GlatError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GlatError::io(path, e))?;
    params_from_records(&parse_checkpoint(&text)?, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn config() -> ModelConfig {
        ModelConfig { d: 5, d_k: 3, d_v: 2, m_max: 4, filter_order: 1, ..Default::default() }
    }

    fn random_params() -> ModelParams {
        let mut p = ModelParams::init(&config(), 1).unwrap();
        let mut rng = SplitMix64::new(2);
        for (_, v) in p.tensors_mut() {
            v.iter_mut().for_each(|x| *x = rng.next_normal() * 1e3);
        }
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = random_params();
        let text = format_checkpoint(&p);
        assert!(text.starts_with("#glat-checkpoint v1\nglat.wq 2 5 3\n"));
        assert_eq!(params_from_records(&parse_checkpoint(&text).unwrap(), &config()).unwrap(), p);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let text = format_checkpoint(&random_params());
        let other = ModelConfig { d_v: 3, ..config() };
        let err = params_from_records(&parse_checkpoint(&text).unwrap(), &other).unwrap_err();
        assert!(matches!(err, GlatError::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn malformed_files() {
        assert!(parse_checkpoint("#glat-checkpoint v2\n").is_err());
        let err = parse_checkpoint("#glat-checkpoint v1\ncls_b 1 4\n1 2 3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(parse_checkpoint("#glat-checkpoint v1\ncls_b 2 4\n1 2 3 4\n").is_err());
        let partial = parse_checkpoint("#glat-checkpoint v1\ncls_b 1 4\n1 2 3 4\n").unwrap();
        assert!(matches!(params_from_records(&partial, &config()), Err(GlatError::Invalid(_))));
    }
}
