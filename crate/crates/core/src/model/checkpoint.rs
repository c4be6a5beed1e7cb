//! Checkpoint layout: the line `LSCK01`, a line `header_len: <bytes>`, a
//! TOML header with the model config and the ordered parameter list, then
//! each parameter as little-endian `f32` values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const MAGIC: &str = "LSCK01";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_checkpoint<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config().clone(),
        params: model
            .params()
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
            })
            .collect(),
    };
    let text = toml::to_string(&header).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut out = format!("{MAGIC}\nheader_len: {}\n{text}", text.len()).into_bytes();
    for p in model.params().params() {
        for &v in p.value().data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("truncated checkpoint preamble"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| Error::format("checkpoint preamble is not UTF-8"))
}

/// Rebuilds a model from checkpoint bytes. The architecture comes from the
/// stored config; every stored tensor must match it by name and shape.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let len: usize = take_line(bytes, &mut pos)?
        .strip_prefix("header_len: ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("malformed header_len line"))?;
    let text = bytes
        .get(pos..pos + len)
        .and_then(|b| std::str::from_utf8(b).ok())
        .ok_or_else(|| Error::format("truncated or non-UTF-8 checkpoint header"))?;
    pos += len;
    let header: Header = toml::from_str(text).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    let mut model = Model::<T>::build(&header.config, 0)?;
    if header.params.len() != model.params().len() {
        return Err(Error::format(format!(
            "checkpoint lists {} parameters, config implies {}",
            header.params.len(),
            model.params().len()
        )));
    }
    for (entry, param) in header.params.iter().zip(model.params_mut().params_mut()) {
        if entry.name != param.name() || entry.shape != param.value().shape() {
            return Err(Error::format(format!(
                "checkpoint parameter {} {:?} does not match expected {} {:?}",
                entry.name,
                entry.shape,
                param.name(),
                param.value().shape()
            )));
        }
        let n = param.value().numel();
        let blob = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::format(format!("truncated data for {}", entry.name)))?;
        pos += 4 * n;
        let data = blob
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *param.value_mut() = Tensor::new(entry.shape.clone(), data)?;
    }
    if pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint data", bytes.len() - pos)));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}
