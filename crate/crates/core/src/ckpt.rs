//! Checkpoint container.
//!
//! A single file: a text header followed by raw little-endian row-major
//! tensor payloads.
//!
//! ```text
//! CONDA-CKPT-1
//! dtype f64
//! config_hash <hex>
//! config_lines <n>
//! <n raw config lines>
//! tensor <name> <d0,d1,...> <byte offset into payload>
//! ...
//! end
//! <payload bytes>
//! ```
//!
//! The embedded config text makes a checkpoint self-describing: evaluation
//! and inference can rebuild the exact model without a separate config
//! file. The loader validates every name and shape against the model's
//! parameter registry; a mismatch in either direction is an error.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::pipeline::Model;
use crate::tensor::{DType, Tensor};

pub const FORMAT_TAG: &str = "CONDA-CKPT-1";

pub struct Checkpoint {
    pub dtype: DType,
    pub config_hash: String,
    /// The run-config TOML captured at save time, when present.
    pub config_text: Option<String>,
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

/// Write named tensors with the given config hash and optional embedded
/// config text.
pub fn save(
    path: &Path,
    named: &[(String, Tensor)],
    dtype: DType,
    config_hash: &str,
    config_text: Option<&str>,
) -> Result<()> {
    let mut header = String::new();
    header.push_str(FORMAT_TAG);
    header.push('\n');
    header.push_str(&format!("dtype {}\n", dtype.name()));
    header.push_str(&format!("config_hash {config_hash}\n"));
    if let Some(text) = config_text {
        let lines: Vec<&str> = text.lines().collect();
        header.push_str(&format!("config_lines {}\n", lines.len()));
        for l in &lines {
            header.push_str(l);
            header.push('\n');
        }
    }
    let mut offset = 0usize;
    for (name, t) in named {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("tensor {name} {} {offset}\n", dims.join(",")));
        offset += t.numel() * dtype.size_bytes();
    }
    header.push_str("end\n");

    let mut file = std::fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    for (_, t) in named {
        let data = t.data();
        match dtype {
            DType::F64 => {
                for v in data.iter() {
                    file.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in data.iter() {
                    file.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos] != b'\n' {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let line = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    *pos += 1;
    Ok(line)
}

/// Read the whole container.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    if read_line(&bytes, &mut pos)? != FORMAT_TAG {
        return Err(Error::Checkpoint(format!("not a {FORMAT_TAG} file")));
    }
    let dtype = match read_line(&bytes, &mut pos)?.strip_prefix("dtype ") {
        Some("f64") => DType::F64,
        Some("f32") => DType::F32,
        other => return Err(Error::Checkpoint(format!("bad dtype line: {other:?}"))),
    };
    let config_hash = read_line(&bytes, &mut pos)?
        .strip_prefix("config_hash ")
        .ok_or_else(|| Error::Checkpoint("bad config_hash line".into()))?
        .to_string();

    let mut config_text = None;
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    loop {
        let line = read_line(&bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        if let Some(count) = line.strip_prefix("config_lines ") {
            let count: usize = count
                .parse()
                .map_err(|_| Error::Checkpoint("bad config_lines count".into()))?;
            let mut text = String::new();
            for _ in 0..count {
                text.push_str(read_line(&bytes, &mut pos)?);
                text.push('\n');
            }
            config_text = Some(text);
            continue;
        }
        let line = line.to_string();
        let mut parts = line.split(' ');
        let (Some("tensor"), Some(name), Some(dims), Some(off)) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Checkpoint(format!("bad header line: {line}")));
        };
        let shape: Vec<usize> = dims
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad dims in line: {line}")))?;
        let offset: usize = off
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad offset in line: {line}")))?;
        entries.push((name.to_string(), shape, offset));
    }

    let payload = &bytes[pos..];
    let mut tensors = BTreeMap::new();
    for (name, shape, offset) in entries {
        let count: usize = shape.iter().product();
        let bytes_needed = count * dtype.size_bytes();
        if offset + bytes_needed > payload.len() {
            return Err(Error::Checkpoint(format!("tensor {name} extends past payload end")));
        }
        let mut values = Vec::with_capacity(count);
        match dtype {
            DType::F64 => {
                for ch in payload[offset..offset + bytes_needed].chunks_exact(8) {
                    values.push(f64::from_le_bytes(ch.try_into().unwrap()));
                }
            }
            DType::F32 => {
                for ch in payload[offset..offset + bytes_needed].chunks_exact(4) {
                    values.push(f32::from_le_bytes(ch.try_into().unwrap()) as f64);
                }
            }
        }
        tensors.insert(name, (shape, values));
    }
    Ok(Checkpoint { dtype, config_hash, config_text, tensors })
}

/// Load a checkpoint into a model, validating names and shapes both ways.
pub fn load_into_model(path: &Path, model: &Model) -> Result<Checkpoint> {
    let ckpt = load(path)?;
    let named = model.named_params();
    if named.len() != ckpt.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            ckpt.tensors.len(),
            named.len()
        )));
    }
    for (name, tensor) in &named {
        let (shape, values) = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} vs model {:?}",
                shape,
                tensor.shape()
            )));
        }
        tensor.set_data(values.clone())?;
    }
    Ok(ckpt)
}
