//! Dataset container: a directory holding `layout.json`, `skeleton.json` and
//! `data.bin`.
//!
//! `data.bin` is little-endian: magic `GDK1`, then `u32` version, count,
//! `l_max` and `n`, then per sample a `u32` valid length followed by
//! `l_max * n` `f32` values.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{MotionSample, Skeleton};
use crate::error::{Error, Result};
use crate::layout::FeatureLayout;

pub const DATA_MAGIC: &[u8; 4] = b"GDK1";
pub const DATA_VERSION: u32 = 1;

pub fn encode_samples(samples: &[MotionSample], l_max: usize, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(20 + samples.len() * (4 + l_max * n * 4));
    buf.write_all(DATA_MAGIC)?;
    buf.write_u32::<LittleEndian>(DATA_VERSION)?;
    buf.write_u32::<LittleEndian>(samples.len() as u32)?;
    buf.write_u32::<LittleEndian>(l_max as u32)?;
    buf.write_u32::<LittleEndian>(n as u32)?;
    for s in samples {
        if s.n != n || s.l_max() != l_max {
            return Err(Error::DimensionMismatch { expected: l_max * n, got: s.frames.len() });
        }
        buf.write_u32::<LittleEndian>(s.valid_len as u32)?;
        for v in &s.frames {
            buf.write_f32::<LittleEndian>(*v as f32)?;
        }
    }
    Ok(buf)
}

pub fn decode_samples(bytes: &[u8]) -> Result<(Vec<MotionSample>, usize, usize)> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
    if &magic != DATA_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let l_max = r.read_u32::<LittleEndian>()? as usize;
    let n = r.read_u32::<LittleEndian>()? as usize;
    let expected = 20 + count * (4 + l_max * n * 4);
    if bytes.len() != expected {
        return Err(Error::Format(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let valid = r.read_u32::<LittleEndian>()? as usize;
        let mut frames = vec![0.0; l_max * n];
        for v in frames.iter_mut() {
            *v = r.read_f32::<LittleEndian>()? as f64;
        }
        samples.push(MotionSample::new(frames, valid, n)?);
    }
    Ok((samples, l_max, n))
}

pub fn write_dataset(dir: &Path, layout: &FeatureLayout, skeleton: &Skeleton, samples: &[MotionSample]) -> Result<[u8; 32]> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("layout.json"), serde_json::to_vec_pretty(layout)?)?;
    fs::write(dir.join("skeleton.json"), serde_json::to_vec_pretty(skeleton)?)?;
    let bytes = encode_samples(samples, layout.l_max, layout.n())?;
    let mut f = fs::File::create(dir.join("data.bin"))?;
    f.write_all(&bytes)?;
    Ok(Sha256::digest(&bytes).into())
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub layout: FeatureLayout,
    pub skeleton: Skeleton,
    pub samples: Vec<MotionSample>,
    pub hash: [u8; 32],
}

pub fn read_dataset(dir: &Path) -> Result<LoadedDataset> {
    let layout: FeatureLayout = serde_json::from_slice(&fs::read(dir.join("layout.json"))?)?;
    layout.validate()?;
    let skeleton: Skeleton = serde_json::from_slice(&fs::read(dir.join("skeleton.json"))?)?;
    skeleton.validate()?;
    let bytes = fs::read(dir.join("data.bin"))?;
    let (samples, l_max, n) = decode_samples(&bytes)?;
    if l_max != layout.l_max || n != layout.n() {
        return Err(Error::Format("data.bin header disagrees with layout.json".into()));
    }
    Ok(LoadedDataset { layout, skeleton, samples, hash: Sha256::digest(&bytes).into() })
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
