use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::transformer::Transformer;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TNMTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| bad(format!("truncated header: {e}")))?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// Layout: magic, version, config JSON, then `(name, rows, cols, f32 LE data)` per tensor.
pub fn write_checkpoint<T: Scalar, W: Write>(model: &Transformer<T>, w: &mut W) -> Result<()> {
    let io = |e: std::io::Error| bad(e.to_string());
    let config = serde_json::to_vec(model.config())?;
    w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    put_u32(w, config.len()).map_err(io)?;
    w.write_all(&config).map_err(io)?;
    put_u32(w, model.params().len()).map_err(io)?;
    for (name, t) in model.params().iter() {
        put_u32(w, name.len()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        put_u32(w, t.rows).map_err(io)?;
        put_u32(w, t.cols).map_err(io)?;
        let mut buf = Vec::with_capacity(t.data.len() * 4);
        for v in &t.data {
            buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: &mut R) -> Result<Transformer<T>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| bad("file too short for a checkpoint"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = get_u32(r)? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = get_u32(r)?;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config).map_err(|_| bad("truncated config"))?;
    let config: ModelConfig = serde_json::from_slice(&config)?;
    let mut model = Transformer::<T>::new(config)?;
    let count = get_u32(r)?;
    if count != model.params().len() {
        return Err(bad(format!("expected {} tensors, found {count}", model.params().len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = get_u32(r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let (rows, cols) = (get_u32(r)?, get_u32(r)?);
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| bad(format!("unknown tensor {name}")))?;
        let target = model.params_mut().get_mut(id);
        if (target.rows, target.cols) != (rows, cols) {
            return Err(bad(format!(
                "tensor {name} has shape {rows}x{cols}, expected {}x{}",
                target.rows, target.cols
            )));
        }
        let mut buf = vec![0u8; rows * cols * 4];
        r.read_exact(&mut buf)
            .map_err(|_| bad(format!("truncated data for {name}")))?;
        for (v, b) in target.data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = T::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
        seen[id.0] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(bad("checkpoint repeats a tensor and misses another"));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Transformer<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, &mut BufWriter::new(file))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Transformer<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
