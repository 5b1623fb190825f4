//! "MAFC" checkpoints: named f64 tensor blocks, little-endian.
//!
//! `"MAFC" | version u16 | count u32 | count x (name_len u16, name utf-8,
//! rank u16, rank x u32 dims, numel x f64)`.

use std::fs;
use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::model::{MafNet, NetState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAFC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(state: &NetState) -> Result<Vec<u8>> {
    let too_big = |what: &str| Error::Data(format!("{what} does not fit the checkpoint format"));
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(state.len()).map_err(|_| too_big("entry count"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in state {
        let len = u16::try_from(name.len()).map_err(|_| too_big("name"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u16::try_from(t.dims().len()).map_err(|_| too_big("rank"))?;
        out.extend_from_slice(&rank.to_le_bytes());
        for &d in t.dims() {
            let d = u32::try_from(d).map_err(|_| too_big("extent"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetState> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected MAFC".into(),
        });
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32()? as usize;
    let mut state = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let at = r.offset();
        let name = match std::str::from_utf8(r.take(len)?) {
            Ok(s) => s.to_string(),
            Err(_) => {
                return Err(Error::Format {
                    offset: at,
                    message: "tensor name is not utf-8".into(),
                })
            }
        };
        let rank = r.u16()? as usize;
        let at = r.offset();
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if dims.contains(&0) {
            return Err(Error::Format {
                offset: at,
                message: format!("tensor {name} has a zero extent"),
            });
        }
        let n: usize = dims.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        state.push((name, Tensor::new(dims, data)?));
    }
    r.finish()?;
    Ok(state)
}

pub fn save_checkpoint(net: &MafNet, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(&net.state())?)?;
    Ok(())
}

/// Loads a checkpoint into an identically configured network.
pub fn load_checkpoint(net: &mut MafNet, path: impl AsRef<Path>) -> Result<()> {
    let state = decode_checkpoint(&fs::read(path)?)?;
    net.load_state(&state)
}
