//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "GDTCKPT\0"
//! version    u32      (= 1)
//! count      u32      number of parameters
//! repeated count times:
//!   name_len u32, name (utf-8), rows u64, cols u64, rows·cols × f64
//! has_opt    u8
//! if has_opt = 1:
//!   step u64, lr f64, beta1 f64, beta2 f64, eps f64, weight_decay f64,
//!   first moments then second moments, each in parameter order as f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GDTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(w: &mut impl Write, params: &ParamStore, opt: Option<&AdamW>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rows() as u64).to_le_bytes())?;
        w.write_all(&(t.cols() as u64).to_le_bytes())?;
        write_values(w, t.data())?;
    }
    match opt {
        None => w.write_all(&[0])?,
        Some(o) => {
            w.write_all(&[1])?;
            w.write_all(&o.step.to_le_bytes())?;
            let c = o.config;
            write_values(w, &[c.lr, c.beta1, c.beta2, c.eps, c.weight_decay])?;
            for t in o.m.iter().chain(&o.v) {
                write_values(w, t.data())?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<(ParamStore, Option<AdamW>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(TensorError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::Checkpoint("parameter name is not utf-8".into()))?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let values = read_values(r, rows * cols)?;
        params.insert(name, Tensor::from_vec(rows, cols, values)?);
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let opt = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(r)?;
            let h = read_values(r, 5)?;
            let config = AdamWConfig {
                lr: h[0],
                beta1: h[1],
                beta2: h[2],
                eps: h[3],
                weight_decay: h[4],
            };
            let mut read_moments = || -> Result<Vec<Tensor>> {
                params
                    .values()
                    .iter()
                    .map(|t| Tensor::from_vec(t.rows(), t.cols(), read_values(r, t.len())?))
                    .collect()
            };
            let m = read_moments()?;
            let v = read_moments()?;
            Some(AdamW { config, step, m, v })
        }
        other => return Err(TensorError::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    Ok((params, opt))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, opt: Option<&AdamW>) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, params, opt)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Option<AdamW>)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_values(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer_state() {
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 1e-300]]).unwrap());
        p.insert("a.b", Tensor::row(&[f64::MIN_POSITIVE, 3.0]));
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let grads = vec![Tensor::filled(2, 2, 0.5), Tensor::row(&[1.0, -1.0])];
        opt.step(&mut p, &grads, 1e-3).unwrap();

        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, Some(&opt)).unwrap();
        let (p2, opt2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(p, p2);
        assert_eq!(Some(opt), opt2);
    }

    #[test]
    fn header_is_little_endian() {
        let p = ParamStore::new();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, None).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(&buf[8..12], &[1, 0, 0, 0]);
        assert_eq!(buf.len(), 8 + 4 + 4 + 1);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&mut &b"not a checkpoint"[..]).is_err());
    }
}
