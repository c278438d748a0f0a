//! Model files.
//!
//! Layout: the line `DSEBM-MODEL`, one line of JSON describing the model,
//! then a binary payload of little-endian `f64`: every parameter tensor in
//! [`Parameters::tensors`] order, followed by the normalizer means and
//! standard deviations when present. The header records the payload length
//! and its SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::energy_conv::ConvEnergyParams;
use crate::energy_dense::DenseEnergyParams;
use crate::energy_recurrent::RecurrentEnergyParams;
use crate::error::{DsebmError, Result};
use crate::model::{Architecture, Detector, Model, ModelSpec, Normalizer, Parameters};
use crate::training::TrainConfig;

pub const MAGIC_LINE: &str = "DSEBM-MODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub architecture: Architecture,
    pub layout: ModelSpec,
    /// `[d]` for vector and sequence models, `[C, H, W]` for conv models.
    pub input_shape: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
    /// Width of the stored normalizer, absent when inputs are used raw.
    pub normalizer_dim: Option<usize>,
    pub config: Option<TrainConfig>,
    pub payload_bytes: usize,
    pub checksum: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    format!("sha256:{hex}")
}

fn push_f64s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// SHA-256 over the little-endian bytes of every parameter.
pub fn param_checksum<P: Parameters>(params: &P) -> String {
    let mut buf = Vec::with_capacity(params.num_params() * 8);
    for t in params.tensors() {
        push_f64s(&mut buf, t.data());
    }
    sha256_hex(&buf)
}

fn input_shape(model: &Model) -> Vec<usize> {
    match model {
        Model::Dense(p) => vec![p.input_dim()],
        Model::Recurrent(p) => vec![p.input_dim()],
        Model::Conv(p) => p.input_shape().to_vec(),
    }
}

fn zeros_for(spec: &ModelSpec, input: &[usize]) -> Result<Model> {
    match (spec, input) {
        (ModelSpec::Dense { hidden }, &[d]) => Ok(Model::Dense(DenseEnergyParams::zeros(d, hidden)?)),
        (ModelSpec::Recurrent { rnn_hidden, ebm_hidden }, &[d]) => Ok(Model::Recurrent(
            RecurrentEnergyParams::zeros(d, *rnn_hidden, *ebm_hidden)?,
        )),
        (ModelSpec::Conv { layers }, &[c, h, w]) => Ok(Model::Conv(ConvEnergyParams::zeros([c, h, w], layers)?)),
        _ => Err(DsebmError::Format(format!("input shape {input:?} does not fit the layout"))),
    }
}

/// Serializes a detector into the container format.
pub fn to_bytes(detector: &Detector) -> Result<Vec<u8>> {
    let model = &detector.model;
    let mut payload = Vec::with_capacity(model.num_params() * 8);
    for t in model.tensors() {
        push_f64s(&mut payload, t.data());
    }
    if let Some(n) = &detector.normalizer {
        push_f64s(&mut payload, &n.mean);
        push_f64s(&mut payload, &n.std);
    }
    let header = Header {
        version: FORMAT_VERSION,
        architecture: model.architecture(),
        layout: model.spec(),
        input_shape: input_shape(model),
        tensors: model
            .tensor_names()
            .into_iter()
            .zip(model.tensors())
            .map(|(name, t)| TensorEntry {
                name,
                shape: t.shape().to_vec(),
            })
            .collect(),
        normalizer_dim: detector.normalizer.as_ref().map(Normalizer::dim),
        config: detector.config.clone(),
        payload_bytes: payload.len(),
        checksum: sha256_hex(&payload),
    };
    let json = serde_json::to_string(&header).map_err(|e| DsebmError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC_LINE.len() + json.len() + payload.len() + 2);
    out.extend_from_slice(MAGIC_LINE.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses just the header line.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let rest = bytes
        .strip_prefix(MAGIC_LINE.as_bytes())
        .and_then(|r| r.strip_prefix(b"\n"))
        .ok_or_else(|| DsebmError::Format("not a model file".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DsebmError::Format("truncated header".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..nl]).map_err(|e| DsebmError::Format(format!("header: {e}")))?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != FORMAT_VERSION {
        return Err(DsebmError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(value).map_err(|e| DsebmError::Format(format!("header: {e}")))?;
    Ok((header, &rest[nl + 1..]))
}

/// Inverse of [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<Detector> {
    let (header, payload) = read_header(bytes)?;
    if payload.len() != header.payload_bytes {
        return Err(DsebmError::Format(format!(
            "truncated payload: header declares {} bytes, found {}",
            header.payload_bytes,
            payload.len()
        )));
    }
    let actual = sha256_hex(payload);
    if actual != header.checksum {
        return Err(DsebmError::Checksum {
            expected: header.checksum,
            actual,
        });
    }
    if header.layout.architecture() != header.architecture {
        return Err(DsebmError::Format("architecture tag disagrees with layout".into()));
    }
    let mut model = zeros_for(&header.layout, &header.input_shape)?;
    let names = model.tensor_names();
    if names.len() != header.tensors.len() {
        return Err(DsebmError::Format("tensor list does not match layout".into()));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(DsebmError::Format("payload shorter than declared tensors".into()));
        }
        Ok(v)
    };
    for ((t, name), entry) in model.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
        if entry.name != *name || entry.shape != t.shape() {
            return Err(DsebmError::Format(format!(
                "tensor {:?} {:?} does not match layout {name:?} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let v = take(t.len())?;
        t.data_mut().copy_from_slice(&v);
    }
    let normalizer = match header.normalizer_dim {
        Some(d) => Some(Normalizer {
            mean: take(d)?,
            std: take(d)?,
        }),
        None => None,
    };
    if values.next().is_some() {
        return Err(DsebmError::Format("payload longer than declared tensors".into()));
    }
    if model.tensors().iter().any(|t| !t.is_finite()) {
        return Err(DsebmError::NonFinite("stored parameters".into()));
    }
    Ok(Detector {
        model,
        normalizer,
        config: header.config,
    })
}

pub fn save_model(detector: &Detector, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(detector)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Detector> {
    from_bytes(&fs::read(path)?)
}

/// Loads a model and checks its architecture.
pub fn load_model_as(path: &Path, expected: Architecture) -> Result<Detector> {
    let d = load_model(path)?;
    d.model.expect(expected)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_conv::LayerSpec;
    use crate::numerics::RngStream;

    fn detectors() -> Vec<Detector> {
        let mut rng = RngStream::new(11);
        let dense = Model::Dense(DenseEnergyParams::init(&[4, 3], &[0.5, -0.5, 0.0], &mut rng).unwrap());
        let mut rec = RecurrentEnergyParams::init(3, 2, &[0.1, 0.2], &mut rng).unwrap();
        for t in rec.tensors_mut() {
            for v in t.data_mut() {
                *v += rng.normal(0.1);
            }
        }
        let conv = Model::Conv(
            ConvEnergyParams::init(
                [2, 6, 6],
                &[
                    LayerSpec::Conv { filters: 2, size: 3 },
                    LayerSpec::Pool { window: 2 },
                    LayerSpec::Dense { units: 3 },
                ],
                &[0.0; 72],
                &mut rng,
            )
            .unwrap(),
        );
        let mut with_norm = Detector::new(dense.clone());
        with_norm.normalizer = Some(Normalizer {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![0.5, 1.0, 1.0 / 3.0],
        });
        with_norm.config = Some(TrainConfig::default());
        vec![
            Detector::new(dense),
            with_norm,
            Detector::new(Model::Recurrent(rec)),
            Detector::new(conv),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for d in detectors() {
            let bytes = to_bytes(&d).unwrap();
            let back = from_bytes(&bytes).unwrap();
            assert_eq!(back, d);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
            assert_eq!(param_checksum(&back.model), param_checksum(&d.model));
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let d = &detectors()[0];
        let mut bytes = to_bytes(d).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(DsebmError::Checksum { .. })));
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let d = &detectors()[2];
        let bytes = to_bytes(d).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        assert!(from_bytes(&bytes[..20]).is_err());

        let text = String::from_utf8_lossy(&bytes).replacen("\"version\":1", "\"version\":9", 1);
        let (head, _) = text.split_once("\"version\":9").unwrap();
        let mut patched = head.as_bytes().to_vec();
        patched.extend_from_slice(b"\"version\":9");
        patched.extend_from_slice(&bytes[patched.len()..]);
        assert!(matches!(
            from_bytes(&patched),
            Err(DsebmError::Version { found: 9, expected: 1 })
        ));
    }

    #[test]
    fn architecture_is_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.dsebm");
        save_model(&detectors()[2], &p).unwrap();
        assert!(matches!(
            load_model_as(&p, Architecture::Dense),
            Err(DsebmError::ArchitectureMismatch { .. })
        ));
        assert!(load_model_as(&p, Architecture::Recurrent).is_ok());
    }

    #[test]
    fn header_is_one_line_of_json() {
        let bytes = to_bytes(&detectors()[3]).unwrap();
        let (h, payload) = read_header(&bytes).unwrap();
        assert_eq!(h.architecture, Architecture::Conv);
        assert_eq!(h.input_shape, vec![2, 6, 6]);
        assert_eq!(payload.len(), h.payload_bytes);
        assert!(h.checksum.starts_with("sha256:"));
    }
}
