//! Binary weight / checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "DWBE" | version u16
//! levels u32 | base_channels u32 | conv_kernel u32 | architecture u8
//! n_decoders u32 | { len u32, utf8 id }*
//! n_params u32 | { len u32, utf8 name, dims 4 x u32, f32 data }*
//! has_state u8 | [ iteration u64, epoch u64, { step u64, f32 m, f32 v }* ]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{Architecture, DecoderId, NetConfig, WbNet};
use crate::error::{Result, WbError};

pub const MAGIC: &[u8; 4] = b"DWBE";
pub const FORMAT_VERSION: u16 = 1;

/// Training position stored alongside weights in a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainProgress {
    pub iteration: u64,
    pub epoch: u64,
}

fn bad(msg: impl Into<String>) -> WbError {
    WbError::ModelFormat(msg.into())
}

fn io_err(e: std::io::Error) -> WbError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        bad("truncated file")
    } else {
        WbError::io("<model stream>", e)
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b).map_err(io_err)?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 4096 {
            return Err(bad(format!("string length {n} too large")));
        }
        let mut b = vec![0u8; n];
        self.inner.read_exact(&mut b).map_err(io_err)?;
        String::from_utf8(b).map_err(|_| bad("invalid utf-8"))
    }

    fn floats(&mut self, out: &mut [f32]) -> Result<()> {
        let mut buf = vec![0u8; out.len() * 4];
        self.inner.read_exact(&mut buf).map_err(io_err)?;
        for (dst, chunk) in out.iter_mut().zip(buf.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        Ok(())
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn put_floats(buf: &mut Vec<u8>, v: &[f32]) {
    buf.reserve(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes weights, plus optimizer state when `progress` is given.
pub fn write_checkpoint<W: Write>(net: &WbNet, progress: Option<TrainProgress>, mut w: W) -> Result<()> {
    let cfg = net.config();
    let mut buf = Vec::with_capacity(net.param_count() * 4 + 1024);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for v in [cfg.levels, cfg.base_channels, cfg.conv_kernel] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.push(match cfg.architecture {
        Architecture::SharedEncoder => 0,
        Architecture::MultiUNet => 1,
    });
    buf.extend_from_slice(&(cfg.decoder_ids.len() as u32).to_le_bytes());
    for id in &cfg.decoder_ids {
        put_str(&mut buf, id.as_str());
    }
    buf.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params() {
        put_str(&mut buf, &p.name);
        for d in p.tensor.dims() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_floats(&mut buf, p.tensor.data());
    }
    match progress {
        None => buf.push(0),
        Some(pr) => {
            buf.push(1);
            buf.extend_from_slice(&pr.iteration.to_le_bytes());
            buf.extend_from_slice(&pr.epoch.to_le_bytes());
            for p in net.params() {
                buf.extend_from_slice(&p.step_count.to_le_bytes());
                put_floats(&mut buf, &p.adam_m);
                put_floats(&mut buf, &p.adam_v);
            }
        }
    }
    w.write_all(&buf).map_err(|e| WbError::io("<model stream>", e))
}

/// Parses a weight file or checkpoint. Rejects unknown versions and any
/// tensor whose name or size disagrees with the stored configuration.
pub fn read_checkpoint<R: Read>(r: R) -> Result<(WbNet, Option<TrainProgress>)> {
    let mut r = Reader { inner: r };
    if &r.bytes::<4>()? != MAGIC {
        return Err(bad("missing DWBE magic"));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let levels = r.u32()? as usize;
    let base_channels = r.u32()? as usize;
    let conv_kernel = r.u32()? as usize;
    let architecture = match r.u8()? {
        0 => Architecture::SharedEncoder,
        1 => Architecture::MultiUNet,
        t => return Err(bad(format!("unknown architecture tag {t}"))),
    };
    let n_dec = r.u32()? as usize;
    if n_dec > 16 {
        return Err(bad(format!("{n_dec} decoders")));
    }
    let decoder_ids = (0..n_dec)
        .map(|_| r.string()?.parse::<DecoderId>())
        .collect::<Result<Vec<_>>>()?;
    let config = NetConfig {
        levels,
        base_channels,
        decoder_ids,
        conv_kernel,
        architecture,
    };
    let mut net = WbNet::build(config, 0).map_err(|e| bad(format!("bad config block: {e}")))?;

    let n_params = r.u32()? as usize;
    if n_params != net.params().len() {
        return Err(bad(format!("expected {} tensors, file has {n_params}", net.params().len())));
    }
    for p in net.params_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(bad(format!("expected tensor `{}`, found `{name}`", p.name)));
        }
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        if dims != p.tensor.dims() {
            return Err(bad(format!(
                "tensor size mismatch for `{name}`: expected {:?}, found {dims:?}",
                p.tensor.dims()
            )));
        }
        r.floats(p.tensor.data_mut())?;
    }
    let progress = match r.u8()? {
        0 => None,
        1 => {
            let iteration = r.u64()?;
            let epoch = r.u64()?;
            for p in net.params_mut() {
                p.step_count = r.u64()?;
                r.floats(&mut p.adam_m)?;
                r.floats(&mut p.adam_v)?;
            }
            Some(TrainProgress { iteration, epoch })
        }
        t => return Err(bad(format!("unknown state flag {t}"))),
    };
    Ok((net, progress))
}

impl WbNet {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(self, None, &mut buf)?;
        std::fs::write(path.as_ref(), buf).map_err(|e| WbError::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<WbNet> {
        Ok(Self::load_checkpoint(path)?.0)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(WbNet, Option<TrainProgress>)> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| WbError::io(path.as_ref(), e))?;
        read_checkpoint(bytes.as_slice())
    }

    pub fn save_checkpoint(&self, progress: TrainProgress, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        write_checkpoint(self, Some(progress), &mut buf)?;
        std::fs::write(path.as_ref(), buf).map_err(|e| WbError::io(path.as_ref(), e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(self, None, &mut buf).expect("writing to memory");
        buf
    }
}
