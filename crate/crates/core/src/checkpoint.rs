//! Model checkpoints.
//!
//! Layout (little-endian): magic `GDKW`, `u32` version, `u32` header length,
//! a JSON header, then `f32` arrays in header order: denoiser parameters,
//! denoiser Fourier frequencies and phases, and for every head its
//! parameters, frequencies and phases. A trailing `u8` flags optional Adam
//! moments (`u64` step, then `m` and `v` for the denoiser and each head).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::Preconditioner;
use crate::error::{Error, Result};
use crate::layout::{FeatureLayout, NormStats};
use crate::losses::LossMode;
use crate::model::Model;
use crate::motion::io::hex;
use crate::net::{DenoiserNet, FourierBank, HeadConfig, NetConfig, UncertaintyHead};
use crate::optim::AdamState;

pub const CKPT_MAGIC: &[u8; 4] = b"GDKW";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSnapshot {
    pub net: AdamState,
    pub heads: Vec<AdamState>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub layout: FeatureLayout,
    pub stats: NormStats,
    pub mode: LossMode,
    pub epoch: usize,
    pub optimizer: Option<OptimizerSnapshot>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layout_hash: String,
    layout: FeatureLayout,
    stats: serde_json::Value,
    mode: LossMode,
    epoch: usize,
    net: NetConfig,
    n: usize,
    net_params: usize,
    head: HeadConfig,
    head_params: Vec<usize>,
    precond: Preconditioner,
    input_weights: Vec<f64>,
}

fn put(buf: &mut Vec<u8>, xs: &[f64]) -> Result<()> {
    for x in xs {
        buf.write_f32::<LittleEndian>(*x as f32)?;
    }
    Ok(())
}

fn take(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.read_f32::<LittleEndian>().map_err(|_| Error::Format("truncated checkpoint".into()))? as f64);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let head_cfg = m.heads.first().map(|h| h.config.clone()).unwrap_or_default();
        let header = Header {
            layout_hash: hex(&self.layout.hash()),
            layout: self.layout.clone(),
            stats: self.stats.to_json(),
            mode: self.mode,
            epoch: self.epoch,
            net: m.net.config.clone(),
            n: m.net.n,
            net_params: m.net.num_params(),
            head: head_cfg,
            head_params: m.heads.iter().map(|h| h.num_params()).collect(),
            precond: m.precond,
            input_weights: m.input_weights.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::new();
        buf.write_all(CKPT_MAGIC)?;
        buf.write_u32::<LittleEndian>(CKPT_VERSION)?;
        buf.write_u32::<LittleEndian>(json.len() as u32)?;
        buf.write_all(&json)?;
        put(&mut buf, &m.net.params)?;
        put(&mut buf, &m.net.fourier.freqs)?;
        put(&mut buf, &m.net.fourier.phases)?;
        for h in &m.heads {
            put(&mut buf, &h.params)?;
            put(&mut buf, &h.fourier.freqs)?;
            put(&mut buf, &h.fourier.phases)?;
        }
        match &self.optimizer {
            None => buf.write_u8(0)?,
            Some(o) => {
                buf.write_u8(1)?;
                buf.write_u64::<LittleEndian>(o.net.step)?;
                for s in std::iter::once(&o.net).chain(&o.heads) {
                    put(&mut buf, &s.m)?;
                    put(&mut buf, &s.v)?;
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let h: Header = serde_json::from_slice(&json)?;
        h.layout.validate()?;
        if hex(&h.layout.hash()) != h.layout_hash {
            return Err(Error::Format("layout hash mismatch".into()));
        }
        let stats = NormStats::from_json(&h.stats, &h.layout)?;
        let params = take(&mut r, h.net_params)?;
        let freqs = take(&mut r, h.net.channels)?;
        let phases = take(&mut r, h.net.channels)?;
        let net = DenoiserNet::from_parts(h.net.clone(), h.n, params, FourierBank { freqs, phases })?;
        let mut heads = Vec::new();
        for &np in &h.head_params {
            let params = take(&mut r, np)?;
            let freqs = take(&mut r, h.head.fourier)?;
            let phases = take(&mut r, h.head.fourier)?;
            heads.push(UncertaintyHead::from_parts(h.head.clone(), params, FourierBank { freqs, phases })?);
        }
        let optimizer = match r.read_u8().map_err(|_| Error::Format("truncated checkpoint".into()))? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let mut read_state = |len: usize| -> Result<AdamState> {
                    Ok(AdamState { step, m: take(&mut r, len)?, v: take(&mut r, len)? })
                };
                let net_state = read_state(h.net_params)?;
                let heads_state = h.head_params.iter().map(|&np| read_state(np)).collect::<Result<_>>()?;
                Some(OptimizerSnapshot { net: net_state, heads: heads_state })
            }
            f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
        };
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let model = Model::new(net, heads, h.precond, h.input_weights)?;
        Ok(Self { model, layout: h.layout, stats, mode: h.mode, epoch: h.epoch, optimizer })
    }

    /// Writes the checkpoint and returns the SHA-256 of its bytes.
    pub fn save(&self, path: &Path) -> Result<[u8; 32]> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(Sha256::digest(&bytes).into())
    }

    pub fn load(path: &Path) -> Result<(Self, [u8; 32])> {
        let bytes = fs::read(path)?;
        let hash = Sha256::digest(&bytes).into();
        Ok((Self::from_bytes(&bytes)?, hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{fit_stats, NormScheme};
    use crate::motion::{generate_dataset, SynthConfig};

    fn checkpoint(with_opt: bool) -> Checkpoint {
        let cfg = SynthConfig { n_train: 8, n_val: 2, n_test: 2, ..Default::default() };
        let ds = generate_dataset(&cfg, 0).unwrap();
        let stats = fit_stats(&ds.train.batch.samples, &ds.layout, NormScheme::Structured).unwrap();
        let n = ds.layout.n();
        let net = DenoiserNet::new(NetConfig { channels: 8, blocks_per_level: 1, ..Default::default() }, n, 1).unwrap();
        let heads = (0..4).map(|i| UncertaintyHead::new(HeadConfig::default(), 1, i).unwrap()).collect::<Vec<_>>();
        let optimizer = with_opt.then(|| OptimizerSnapshot {
            net: AdamState { step: 3, m: vec![0.5; net.num_params()], v: vec![0.25; net.num_params()] },
            heads: heads.iter().map(|h| AdamState { step: 3, m: vec![0.0; h.num_params()], v: vec![1.0; h.num_params()] }).collect(),
        });
        let model = Model::new(net, heads, Preconditioner::default(), vec![1.0; n]).unwrap();
        Checkpoint { model, layout: ds.layout, stats, mode: LossMode::Final, epoch: 7, optimizer }
    }

    #[test]
    fn round_trip_preserves_f32_rounded_weights() {
        for with_opt in [false, true] {
            let c = checkpoint(with_opt);
            let bytes = c.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"GDKW");
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back.epoch, 7);
            assert_eq!(back.mode, LossMode::Final);
            assert_eq!(back.stats, c.stats);
            assert_eq!(back.model.net.fourier, c.model.net.fourier);
            for (a, b) in back.model.net.params.iter().zip(&c.model.net.params) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert_eq!(back.optimizer.is_some(), with_opt);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let bytes = checkpoint(false).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
