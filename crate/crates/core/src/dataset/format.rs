//! MABD binary dataset container and CSV export.
//!
//! Layout (little-endian): magic `MABD`, `u32` version, `u32` obs_dim,
//! `u32` act_dim, `u64` transition count, then packed records
//! `obs f32×obs_dim, action f32×act_dim, reward f32, next_obs f32×obs_dim,
//! done u8, traj_end u8`, then a footer: `u32` entry count followed by
//! `u32`-length-prefixed UTF-8 `key=value` lines.

use std::fs;
use std::path::Path;

use super::{Dataset, Transition};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MABD";
pub const VERSION: u32 = 1;

pub fn encode(d: &Dataset) -> Vec<u8> {
    let rec = 4 * (2 * d.obs_dim() + d.act_dim() + 1) + 2;
    let mut out = Vec::with_capacity(24 + rec * d.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(d.obs_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(d.act_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(d.len() as u64).to_le_bytes());
    let put = |out: &mut Vec<u8>, xs: &[f64]| {
        for &x in xs {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    };
    for t in d.transitions() {
        put(&mut out, &t.obs);
        put(&mut out, &t.action);
        put(&mut out, &[t.reward]);
        put(&mut out, &t.next_obs);
        out.push(t.done as u8);
        out.push(t.traj_end as u8);
    }
    out.extend_from_slice(&(d.meta.len() as u32).to_le_bytes());
    for (k, v) in &d.meta {
        let line = format!("{k}={v}");
        out.extend_from_slice(&(line.len() as u32).to_le_bytes());
        out.extend_from_slice(line.as_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.buf.len() as u64,
                what,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    fn flag(&mut self, what: &'static str) -> Result<bool> {
        let at = self.pos;
        match self.take(1, what)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Inconsistent(format!(
                "{what} byte {b} at offset {at} is not 0 or 1"
            ))),
        }
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let obs_dim = c.u32("obs_dim")? as usize;
    let act_dim = c.u32("act_dim")? as usize;
    let count = c.u64("transition count")?;
    if obs_dim == 0 || act_dim == 0 {
        return Err(Error::Inconsistent(format!(
            "zero dimension (obs_dim {obs_dim}, act_dim {act_dim})"
        )));
    }
    let rec = (4 * (2 * obs_dim + act_dim + 1) + 2) as u64;
    let available = (buf.len() - c.pos) as u64;
    let mut transitions = Vec::with_capacity(count.min(available / rec) as usize);
    for _ in 0..count {
        let obs = c.f32s(obs_dim, "record")?;
        let action = c.f32s(act_dim, "record")?;
        let reward = c.f32s(1, "record")?[0];
        let next_obs = c.f32s(obs_dim, "record")?;
        let done = c.flag("done")?;
        let traj_end = c.flag("traj_end")?;
        transitions.push(Transition {
            obs,
            action,
            reward,
            next_obs,
            done,
            traj_end,
        });
    }
    let entries = c.u32("metadata footer")?;
    let mut meta = std::collections::BTreeMap::new();
    for _ in 0..entries {
        let n = c.u32("metadata footer")? as usize;
        let line = std::str::from_utf8(c.take(n, "metadata footer")?)
            .map_err(|e| Error::Inconsistent(format!("metadata is not UTF-8: {e}")))?;
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Inconsistent(format!("metadata line without '=': {line:?}")))?;
        meta.insert(k.to_string(), v.to_string());
    }
    if c.pos != buf.len() {
        return Err(Error::Inconsistent(format!(
            "{} trailing bytes after footer",
            buf.len() - c.pos
        )));
    }
    let mut d = Dataset::new(obs_dim, act_dim, transitions)?;
    d.meta = meta;
    Ok(d)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(d)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

/// One row per transition with a header row.
pub fn write_csv(path: impl AsRef<Path>, d: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = Vec::new();
    header.extend((0..d.obs_dim()).map(|i| format!("obs_{i}")));
    header.extend((0..d.act_dim()).map(|i| format!("action_{i}")));
    header.push("reward".into());
    header.extend((0..d.obs_dim()).map(|i| format!("next_obs_{i}")));
    header.push("done".into());
    header.push("traj_end".into());
    w.write_record(&header)?;
    for t in d.transitions() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.extend(t.obs.iter().map(|v| v.to_string()));
        row.extend(t.action.iter().map(|v| v.to_string()));
        row.push(t.reward.to_string());
        row.extend(t.next_obs.iter().map(|v| v.to_string()));
        row.push((t.done as u8).to_string());
        row.push((t.traj_end as u8).to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
