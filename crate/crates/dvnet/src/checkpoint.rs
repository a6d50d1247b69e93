//! Checkpoint format: a single binary file with a version tag, the network
//! config as key=value text, a manifest of named tensors with byte offsets,
//! and one raw little-endian f32 blob. Round-trips bit-exactly.
//!
//! Batch-norm running statistics are stored as extra `*.running_mean` /
//! `*.running_var` tensors when initialized, so a loaded checkpoint can run
//! eval-mode inference immediately.

use std::io::{Read, Write};
use std::path::Path;

use crate::arch::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

const MAGIC: &[u8; 8] = b"DVNETCK1";
const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8".to_string()))
}

struct ManifestEntry {
    name: String,
    dims: Vec<usize>,
    offset: u64,
    bytes: u64,
}

/// Save the network: every parameter tensor plus running statistics when
/// initialized.
pub fn save<T: Element>(net: &Network<T>, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for p in net.params() {
        tensors.push((
            p.name.clone(),
            p.tensor.shape().dims.clone(),
            p.tensor.data().iter().map(|&v| v.to_f64() as f32).collect(),
        ));
    }
    if net.bn_states().iter().all(|s| s.initialized) {
        for s in net.bn_states() {
            tensors.push((
                format!("{}.running_mean", s.name),
                vec![s.mean.len()],
                s.mean.iter().map(|&v| v.to_f64() as f32).collect(),
            ));
            tensors.push((
                format!("{}.running_var", s.name),
                vec![s.var.len()],
                s.var.iter().map(|&v| v.to_f64() as f32).collect(),
            ));
        }
    }

    let tmp = path.with_extension("tmp");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_str(&mut w, &net.config().to_key_values())?;
    write_u32(&mut w, tensors.len() as u32)?;
    let mut offset = 0u64;
    for (name, dims, data) in &tensors {
        write_str(&mut w, name)?;
        write_u32(&mut w, dims.len() as u32)?;
        for &d in dims {
            write_u64(&mut w, d as u64)?;
        }
        let bytes = (data.len() * 4) as u64;
        write_u64(&mut w, offset)?;
        write_u64(&mut w, bytes)?;
        offset += bytes;
    }
    for (_, _, data) in &tensors {
        for &v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    drop(w);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a checkpoint into a freshly built network of the stored config.
pub fn load<T: Element>(path: &Path) -> Result<Network<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config = NetworkConfig::from_key_values(&read_str(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(&mut r)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let offset = read_u64(&mut r)?;
        let bytes = read_u64(&mut r)?;
        manifest.push(ManifestEntry { name, dims, offset, bytes });
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;

    let mut net = Network::<T>::build(&config, 0)?;
    let mut extras: Vec<(String, Vec<f32>)> = Vec::new();
    for entry in &manifest {
        let numel: usize = entry.dims.iter().product();
        if entry.bytes as usize != numel * 4 {
            return Err(Error::Checkpoint(format!(
                "tensor {}: manifest bytes {} disagree with shape ({} values)",
                entry.name, entry.bytes, numel
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {}: data range {}..{} exceeds blob of {} bytes",
                entry.name,
                start,
                end,
                blob.len()
            )));
        }
        let vals: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(p) = net.params_mut().iter_mut().find(|p| p.name == entry.name) {
            if p.tensor.shape().dims != entry.dims {
                return Err(Error::Checkpoint(format!(
                    "tensor {}: stored shape {:?} does not match built {:?}",
                    entry.name,
                    entry.dims,
                    p.tensor.shape().dims
                )));
            }
            let shape = Shape::new(entry.dims.clone());
            p.tensor = Tensor::new(shape, vals.iter().map(|&v| T::from_f64(v as f64)).collect())?;
        } else {
            extras.push((entry.name.clone(), vals));
        }
    }
    for (name, vals) in extras {
        let (base, kind) = if let Some(b) = name.strip_suffix(".running_mean") {
            (b.to_string(), 0)
        } else if let Some(b) = name.strip_suffix(".running_var") {
            (b.to_string(), 1)
        } else {
            return Err(Error::Checkpoint(format!("unknown tensor {name}")));
        };
        let state = net
            .bn_states_mut()
            .iter_mut()
            .find(|s| s.name == base)
            .ok_or_else(|| Error::Checkpoint(format!("no batch-norm layer named {base}")))?;
        let conv: Vec<T> = vals.iter().map(|&v| T::from_f64(v as f64)).collect();
        if kind == 0 {
            state.mean = conv;
        } else {
            state.var = conv;
        }
        state.initialized = true;
    }
    Ok(net)
}
