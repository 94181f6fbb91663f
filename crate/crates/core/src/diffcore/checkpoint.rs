//! Parameter checkpoints.
//!
//! ```text
//! "ORILCK01" | entry_count u32
//! per entry: name (u32 len + utf8) | descriptor (u32 len + utf8) | param_count u64 | params f64*
//! meta: pair_count u32 | (key, value) as length-prefixed utf8
//! ```
//! The descriptor is `"<topology>; head=<head>"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::approx::Approximator;
use super::heads::Head;
use super::mlp::Topology;
use super::DiffError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ORILCK01";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Approximator)>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Approximator> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.write_u32::<LittleEndian>(self.entries.len() as u32).unwrap();
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.write_u32::<LittleEndian>(s.len() as u32).unwrap();
            out.extend_from_slice(s.as_bytes());
        };
        for (name, net) in &self.entries {
            put_str(&mut out, name);
            put_str(&mut out, &format!("{}; head={}", net.topology(), net.head()));
            out.write_u64::<LittleEndian>(net.params.len() as u64).unwrap();
            for &p in &net.params {
                out.write_f64::<LittleEndian>(p).unwrap();
            }
        }
        out.write_u32::<LittleEndian>(self.meta.len() as u32).unwrap();
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DiffError> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], DiffError> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len()).ok_or(DiffError::Format {
                offset: *pos,
                msg: "truncated".into(),
            })?;
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        };
        let get_str = |pos: &mut usize| -> Result<String, DiffError> {
            let len = LittleEndian::read_u32(take(pos, 4)?) as usize;
            let at = *pos;
            String::from_utf8(take(pos, len)?.to_vec())
                .map_err(|_| DiffError::Format { offset: at, msg: "invalid UTF-8".into() })
        };
        if take(&mut pos, 8)? != CHECKPOINT_MAGIC {
            return Err(DiffError::Format { offset: 0, msg: "bad magic".into() });
        }
        let count = LittleEndian::read_u32(take(&mut pos, 4)?);
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let name = get_str(&mut pos)?;
            let desc = get_str(&mut pos)?;
            let (topo, head) = desc
                .split_once("; head=")
                .ok_or_else(|| DiffError::Descriptor(desc.clone()))?;
            let topo: Topology = topo.parse()?;
            let head: Head = head.parse()?;
            let n = LittleEndian::read_u64(take(&mut pos, 8)?) as usize;
            let raw = take(&mut pos, n.checked_mul(8).unwrap_or(usize::MAX))?;
            let mut params = vec![0.0; n];
            LittleEndian::read_f64_into(raw, &mut params);
            ck.entries.push((name, Approximator::from_parts(topo, head, params)?));
        }
        let pairs = LittleEndian::read_u32(take(&mut pos, 4)?);
        for _ in 0..pairs {
            let k = get_str(&mut pos)?;
            let v = get_str(&mut pos)?;
            ck.meta.insert(k, v);
        }
        if pos != bytes.len() {
            return Err(DiffError::Format { offset: pos, msg: "trailing bytes".into() });
        }
        Ok(ck)
    }
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<(), DiffError> {
    fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DiffError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
