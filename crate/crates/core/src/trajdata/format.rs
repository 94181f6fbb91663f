//! Little-endian binary dataset container.
//!
//! ```text
//! "ORILDS01" | obs_dim u32 | act_dim u32 | episode_count u32 | flags u32 (bit0: rewards)
//! per episode: id u64 | T u32 | states (T+1)*obs_dim f32 | actions T*act_dim f32 | [rewards T f32]
//! meta: pair_count u32 | (key_len u32, key utf8, value_len u32, value utf8)*
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{DataError, Dataset, Episode};

pub const DATASET_MAGIC: &[u8; 8] = b"ORILDS01";
const FLAG_REWARDS: u32 = 1;

pub fn write_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut buf = Vec::new();
    write_dataset_to(d, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_dataset_to(d: &Dataset, mut w: impl Write) -> Result<(), DataError> {
    let with_rewards = d.has_gt_rewards();
    if !with_rewards && d.episodes().iter().any(|e| e.gt_rewards().is_some()) {
        return Err(DataError::Schema("rewards present on some episodes only".into()));
    }
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(d.obs_dim() as u32)?;
    w.write_u32::<LittleEndian>(d.act_dim() as u32)?;
    w.write_u32::<LittleEndian>(d.len() as u32)?;
    w.write_u32::<LittleEndian>(if with_rewards { FLAG_REWARDS } else { 0 })?;
    for e in d.episodes() {
        w.write_u64::<LittleEndian>(e.id())?;
        w.write_u32::<LittleEndian>(e.len() as u32)?;
        for &x in e.states_flat().iter().chain(e.actions_flat()) {
            w.write_f32::<LittleEndian>(x)?;
        }
        if let Some(r) = e.gt_rewards() {
            for &x in r {
                w.write_f32::<LittleEndian>(x)?;
            }
        }
    }
    w.write_u32::<LittleEndian>(d.meta.len() as u32)?;
    for (k, v) in &d.meta {
        for s in [k, v] {
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())?;
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    read_dataset_from(&bytes[..])
}

pub fn read_dataset_from(mut r: impl Read) -> Result<Dataset, DataError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    let magic = cur.take(8, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(DataError::Format { offset: 0, msg: "bad magic".into() });
    }
    let obs_dim = cur.u32("obs_dim")? as usize;
    let act_dim = cur.u32("act_dim")? as usize;
    let count = cur.u32("episode_count")? as usize;
    let flags_at = cur.pos;
    let flags = cur.u32("flags")?;
    if flags & !FLAG_REWARDS != 0 {
        return Err(DataError::Format { offset: flags_at, msg: format!("unknown flags {flags:#x}") });
    }
    if obs_dim == 0 || act_dim == 0 {
        return Err(DataError::Schema(format!("dims ({obs_dim}, {act_dim}) must be positive")));
    }
    let mut d = Dataset::new(obs_dim, act_dim);
    for _ in 0..count {
        let id = cur.u64("episode id")?;
        let steps = cur.u32("episode length")? as usize;
        let states = cur.f32s((steps + 1) * obs_dim, "states")?;
        let actions = cur.f32s(steps * act_dim, "actions")?;
        let rewards =
            if flags & FLAG_REWARDS != 0 { Some(cur.f32s(steps, "rewards")?) } else { None };
        d.push(Episode::new(id, obs_dim, act_dim, states, actions, rewards)?)?;
    }
    let pairs = cur.u32("meta count")?;
    for _ in 0..pairs {
        let k = cur.string("meta key")?;
        let v = cur.string("meta value")?;
        d.meta.insert(k, v);
    }
    if cur.pos != bytes.len() {
        return Err(DataError::Format { offset: cur.pos, msg: "trailing bytes".into() });
    }
    Ok(d)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            DataError::Format { offset: self.pos, msg: format!("truncated while reading {what}") }
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>, DataError> {
        let raw = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        let mut out = vec![0.0f32; n];
        LittleEndian::read_f32_into(raw, &mut out);
        Ok(out)
    }

    fn string(&mut self, what: &str) -> Result<String, DataError> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| DataError::Format { offset: at, msg: format!("{what} is not UTF-8") })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::ramp_episode;
    use super::*;

    fn sample(with_rewards: bool) -> Dataset {
        let r = |n: usize| with_rewards.then(|| (0..n).map(|i| i as f32 * 0.25).collect());
        let mut d = Dataset::from_episodes(
            2,
            1,
            vec![
                ramp_episode(7, 0.1, 3, r(3)),
                ramp_episode(2, -3.3, 1, r(1)),
                ramp_episode(9, 1e-7, 5, r(5)),
            ],
        )
        .unwrap();
        d.meta.insert("env".into(), "point_reach".into());
        d.meta.insert("mix".into(), "scripted:1,random:2 ✓".into());
        d
    }

    #[test]
    fn round_trip_is_exact() {
        for with in [true, false] {
            let d = sample(with);
            let mut buf = Vec::new();
            write_dataset_to(&d, &mut buf).unwrap();
            let back = read_dataset_from(&buf[..]).unwrap();
            assert_eq!(back, d);
            let mut again = Vec::new();
            write_dataset_to(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.orilds");
        write_dataset(&sample(true), &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), sample(true));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut buf = Vec::new();
        write_dataset_to(&sample(true), &mut buf).unwrap();
        buf[3] = b'X';
        assert!(matches!(read_dataset_from(&buf[..]), Err(DataError::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_dataset_to(&sample(false), &mut buf).unwrap();
        buf.truncate(30);
        match read_dataset_from(&buf[..]) {
            Err(DataError::Format { offset, .. }) => assert!(offset <= 30),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_dims_are_schema_errors() {
        let mut buf = Vec::new();
        write_dataset_to(&sample(false), &mut buf).unwrap();
        buf[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_dataset_from(&buf[..]), Err(DataError::Schema(_))));
    }
}
