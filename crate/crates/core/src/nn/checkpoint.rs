//! Binary parameter checkpoints.
//!
//! A short text header lists every tensor as `name dims offset`, then the
//! raw values follow as little-endian f64.
//!
//! ```text
//! vistafuse-ckpt-1
//! params 2
//! dense.weight 3x4 0
//! dense.bias 4 96
//! end
//! <bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "vistafuse-ckpt-1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut header = format!("{MAGIC}\nparams {}\n", store.len());
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
        header.push_str(&format!("{name} {dims} {offset}\n"));
        offset += t.numel() * 8;
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bad = |pos: usize, msg: &str| Error::parse(path.display(), format!("line {pos}"), msg);
    let mut cursor = 0usize;
    let mut line_no = 0usize;
    let mut next_line = || -> Result<&str> {
        line_no += 1;
        let rest = &bytes[cursor..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(line_no, "truncated header"))?;
        cursor += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad(line_no, "header is not UTF-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad(1, "not a vistafuse checkpoint"));
    }
    let count: usize = next_line()?
        .strip_prefix("params ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad(2, "expected `params <count>`"))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let line = next_line()?;
        let fields: Vec<&str> = line.split(' ').collect();
        let lineno = i + 3;
        let [name, dims, offset] = fields[..] else {
            return Err(bad(lineno, "expected `name dims offset`"));
        };
        let shape: Vec<usize> = if dims == "scalar" {
            Vec::new()
        } else {
            dims.split('x')
                .map(|d| d.parse().map_err(|_| bad(lineno, "bad dimension")))
                .collect::<Result<_>>()?
        };
        let offset: usize = offset.parse().map_err(|_| bad(lineno, "bad offset"))?;
        entries.push((name.to_string(), shape, offset));
    }
    if next_line()? != "end" {
        return Err(bad(count + 3, "expected `end`"));
    }
    let data = &bytes[cursor..];
    entries
        .into_iter()
        .map(|(name, shape, offset)| {
            let n: usize = shape.iter().product();
            let raw = data
                .get(offset..offset + n * 8)
                .ok_or_else(|| Error::parse(path.display(), format!("byte {}", cursor + offset), "data section truncated"))?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = if shape.is_empty() {
                Tensor::scalar(f64::from_le_bytes(raw.try_into().expect("scalar")))
            } else {
                Tensor::new(&shape, values)?
            };
            Ok((name, t))
        })
        .collect()
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Copies checkpoint values into `store`. Names and shapes must match exactly;
/// the error names the first parameter that differs.
pub fn restore(store: &mut ParamStore, entries: Vec<(String, Tensor)>) -> Result<()> {
    for (name, t) in store.iter() {
        match entries.iter().find(|(n, _)| n == name) {
            None => return Err(Error::CheckpointMismatch(format!("parameter {name} missing from checkpoint"))),
            Some((_, c)) if c.shape() != t.shape() => {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    c.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some((extra, _)) = entries.iter().find(|(n, _)| store.find(n).is_none()) {
        return Err(Error::CheckpointMismatch(format!("checkpoint parameter {extra} not in model")));
    }
    for (name, t) in entries {
        let id = store.find(&name).expect("checked above");
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    Ok(())
}
