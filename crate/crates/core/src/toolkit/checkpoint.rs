use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::Value;

use super::config::Method;
use crate::error::{ensure_finite, Error, Result};
use crate::nets::{Model, ModelSpec};
use crate::TOOLKIT_VERSION;

pub const CHECKPOINT_VERSION: u64 = 1;

/// Models read back from a checkpoint, with the method they were trained by.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub method: Method,
    pub models: Vec<Model>,
}

#[derive(Serialize)]
struct ModelOut<'a> {
    seed: u64,
    spec: &'a ModelSpec,
    params: Vec<Box<RawValue>>,
}

#[derive(Serialize)]
struct FileOut<'a> {
    format_version: u64,
    toolkit_version: &'a str,
    method: Method,
    models: Vec<ModelOut<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelIn {
    seed: u64,
    spec: ModelSpec,
    params: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    #[allow(dead_code)]
    format_version: u64,
    #[allow(dead_code)]
    toolkit_version: String,
    method: Method,
    models: Vec<ModelIn>,
}

/// Writes each value with 17 significant digits, enough to round-trip any f64.
fn decimal_array(values: &[f64]) -> Result<Box<RawValue>> {
    let body: Vec<String> = values.iter().map(|v| format!("{v:.16e}")).collect();
    RawValue::from_string(format!("[{}]", body.join(",")))
        .map_err(|e| Error::InvalidInput(format!("parameter array: {e}")))
}

pub fn save_checkpoint(models: &[Model], method: Method, path: &Path) -> Result<()> {
    if models.is_empty() {
        return Err(Error::InvalidInput("checkpoint needs at least one model".into()));
    }
    let mut out = Vec::with_capacity(models.len());
    for (i, m) in models.iter().enumerate() {
        let params = m
            .params()
            .iter()
            .enumerate()
            .map(|(l, p)| {
                ensure_finite(p, &format!("model {i} layer {l} parameters"))?;
                decimal_array(p)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ModelOut {
            seed: m.seed,
            spec: &m.spec,
            params,
        });
    }
    let file = FileOut {
        format_version: CHECKPOINT_VERSION,
        toolkit_version: TOOLKIT_VERSION,
        method,
        models: out,
    };
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::InvalidInput(format!("serializing checkpoint: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let version = value
        .get("format_version")
        .ok_or_else(|| malformed("missing format_version".into()))?
        .as_u64()
        .ok_or_else(|| malformed("format_version is not an unsigned integer".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: FileIn = serde_json::from_value(value).map_err(|e| malformed(e.to_string()))?;
    if file.models.is_empty() {
        return Err(malformed("no models".into()));
    }
    let mut models = Vec::with_capacity(file.models.len());
    for (i, entry) in file.models.into_iter().enumerate() {
        let mut model = Model::init(entry.spec, entry.seed)
            .map_err(|e| Error::SpecMismatch(format!("model {i}: {e}")))?;
        if entry.params.len() != model.layers.len() {
            return Err(Error::SpecMismatch(format!(
                "model {i}: spec has {} layers, file has {} parameter arrays",
                model.layers.len(),
                entry.params.len()
            )));
        }
        for (l, (layer, p)) in model.layers.iter_mut().zip(&entry.params).enumerate() {
            if p.len() != layer.param_count() {
                return Err(Error::SpecMismatch(format!(
                    "model {i} layer {l}: expected {} parameters, found {}",
                    layer.param_count(),
                    p.len()
                )));
            }
            ensure_finite(p, &format!("model {i} layer {l} parameters"))?;
            layer.set_params(p)?;
        }
        models.push(model);
    }
    Ok(Checkpoint {
        method: file.method,
        models,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelSpec;

    fn models() -> Vec<Model> {
        (0..2).map(|s| Model::init(ModelSpec::mlp(3, &[4], 2), s).unwrap()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut ms = models();
        ms[0].layers[0].set_params(&vec![f64::MIN_POSITIVE, 0.1 + 0.2, -1e300, 5e-324, 1.0 / 3.0, 0.0, -0.0, 7.0, 1e-17, 2.5, 3.0, 4.0, 5.0, 6.0, 7.5, 8.0]).unwrap();
        save_checkpoint(&ms, Method::Lotos, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.method, Method::Lotos);
        for (a, b) in ms.iter().zip(&ck.models) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.spec, b.spec);
            for (pa, pb) in a.params().iter().zip(b.params()) {
                let bits_a: Vec<u64> = pa.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = pb.iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn non_finite_parameters_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut ms = models();
        let mut p = ms[1].layers[1].params();
        p[0] = f64::NAN;
        ms[1].layers[1].set_params(&p).unwrap();
        let err = save_checkpoint(&ms, Method::Clip, &dir.path().join("x.json")).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
