//! Named parameter export/import and the on-disk weight format.
//!
//! A weight file is a concatenation of records. Each record is a single-line
//! UTF-8 JSON header `{"name": ..., "shape": [...], "seed": ...}` terminated by
//! `\n`, followed by `product(shape)` little-endian `f64` values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d};
use crate::tensor::{LinearLayer, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct ParamSink {
    records: Vec<(String, Tensor)>,
}

impl ParamSink {
    pub fn push(&mut self, name: String, tensor: &Tensor) {
        self.records.push((name, tensor.clone()));
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn into_records(self) -> Vec<(String, Tensor)> {
        self.records
    }
}

#[derive(Debug, Default)]
pub struct ParamSource {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSource {
    pub fn new(records: Vec<(String, Tensor)>) -> Self {
        ParamSource {
            tensors: records.into_iter().collect(),
        }
    }

    /// Move the named tensor into `slot`, which must have the same shape.
    pub fn take_into(&mut self, name: &str, slot: &mut Tensor) -> Result<()> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Argument(format!("weights are missing {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::dim("weight import", t.shape(), slot.shape()));
        }
        *slot = t;
        Ok(())
    }

    /// Names that were never consumed.
    pub fn leftover(&self) -> Vec<&str> {
        self.tensors.keys().map(String::as_str).collect()
    }
}

pub trait Params {
    fn export(&self, prefix: &str, sink: &mut ParamSink);
    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()>;
}

impl Params for Tensor {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        sink.push(prefix.to_string(), self);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        source.take_into(prefix, self)
    }
}

impl Params for LinearLayer {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        sink.push(format!("{prefix}.weight"), &self.weight);
        sink.push(format!("{prefix}.bias"), &self.bias);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        source.take_into(&format!("{prefix}.weight"), &mut self.weight)?;
        source.take_into(&format!("{prefix}.bias"), &mut self.bias)
    }
}

impl Params for Conv2d {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        sink.push(format!("{prefix}.weight"), &self.weight);
        if let Some(b) = &self.bias {
            sink.push(format!("{prefix}.bias"), b);
        }
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        source.take_into(&format!("{prefix}.weight"), &mut self.weight)?;
        if let Some(b) = &mut self.bias {
            source.take_into(&format!("{prefix}.bias"), b)?;
        }
        Ok(())
    }
}

impl Params for ChannelNorm {
    fn export(&self, prefix: &str, sink: &mut ParamSink) {
        sink.push(format!("{prefix}.running_mean"), &self.running_mean);
        sink.push(format!("{prefix}.running_var"), &self.running_var);
        sink.push(format!("{prefix}.scale"), &self.scale);
        sink.push(format!("{prefix}.shift"), &self.shift);
    }

    fn import(&mut self, prefix: &str, source: &mut ParamSource) -> Result<()> {
        source.take_into(&format!("{prefix}.running_mean"), &mut self.running_mean)?;
        source.take_into(&format!("{prefix}.running_var"), &mut self.running_var)?;
        source.take_into(&format!("{prefix}.scale"), &mut self.scale)?;
        source.take_into(&format!("{prefix}.shift"), &mut self.shift)
    }
}

pub fn encode_records(records: &[(String, Tensor)], seed: u64) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in records {
        let header = RecordHeader {
            name: name.clone(),
            shape: t.shape().to_vec(),
            seed,
        };
        out.extend_from_slice(serde_json::to_string(&header).unwrap().as_bytes());
        out.push(b'\n');
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<(RecordHeader, Tensor)>> {
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < bytes.len() {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse {
                offset: pos,
                message: "unterminated record header".into(),
            })?;
        let header: RecordHeader =
            serde_json::from_slice(&bytes[pos..pos + nl]).map_err(|e| Error::Parse {
                offset: pos,
                message: format!("bad record header: {e}"),
            })?;
        pos += nl + 1;
        let n: usize = header.shape.iter().product();
        let end = pos + n * 8;
        if end > bytes.len() {
            return Err(Error::Parse {
                offset: pos,
                message: format!("record {} truncated", header.name),
            });
        }
        let data = bytes[pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos = end;
        let t = Tensor::new(header.shape.clone(), data)?;
        out.push((header, t));
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, records: &[(String, Tensor)], seed: u64) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_records(records, seed)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<(RecordHeader, Tensor)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn record_layout() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_records(&[("w".into(), t.clone())], 3);
        let header = br#"{"name":"w","shape":[2],"seed":3}"#;
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes[header.len()], b'\n');
        assert_eq!(&bytes[header.len() + 1..header.len() + 9], &1.0f64.to_le_bytes());
        let back = decode_records(&bytes).unwrap();
        assert_eq!(back[0].1, t);
        assert_eq!(back[0].0.seed, 3);
    }

    #[test]
    fn layer_round_trip_through_source() {
        let layer = LinearLayer::seeded(3, 2, &mut Rng::new(1));
        let mut sink = ParamSink::default();
        layer.export("fc", &mut sink);
        let bytes = encode_records(sink.records(), 1);
        let records = decode_records(&bytes)
            .unwrap()
            .into_iter()
            .map(|(h, t)| (h.name, t))
            .collect();
        let mut other = LinearLayer::zeros(3, 2);
        let mut src = ParamSource::new(records);
        other.import("fc", &mut src).unwrap();
        assert_eq!(other, layer);
        assert!(src.leftover().is_empty());
    }

    #[test]
    fn truncated_and_mismatched() {
        let t = Tensor::zeros(&[4]);
        let bytes = encode_records(&[("w".into(), t)], 0);
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        let mut src = ParamSource::new(vec![("w".into(), Tensor::zeros(&[3]))]);
        let mut slot = Tensor::zeros(&[4]);
        assert!(src.take_into("w", &mut slot).is_err());
    }
}
