//! MABM model container.
//!
//! Layout (little-endian): magic `MABM`, `u32` version, `u32`-prefixed UTF-8
//! kind tag, `u32` tensor count, then per tensor a `u32`-prefixed name,
//! `u32` rank, `u64` extents and `f64` data; then the same key=value
//! footer used by MABD files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::numeric::{Dense, Head, Mlp};

pub const MAGIC: [u8; 4] = *b"MABM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub tensors: Vec<Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn push_vec(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.push(name, vec![v.len()], v.to_vec());
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Inconsistent(format!("checkpoint missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.meta(key)?
            .parse()
            .map_err(|_| Error::Inconsistent(format!("checkpoint metadata {key:?} unparsable")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Inconsistent(format!("checkpoint missing tensor {name:?}")))
    }

    pub fn vec(&self, name: &str) -> Result<Array1<f64>> {
        Ok(Array1::from(self.tensor(name)?.data.clone()))
    }

    /// Stores a network under `prefix`.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp<f64>) {
        self.set_meta(&format!("{prefix}.layers"), net.layers.len());
        self.set_meta(
            &format!("{prefix}.head"),
            match net.head {
                Head::Linear => "linear",
                Head::GaussianTwoHead => "gaussian",
            },
        );
        self.set_meta(&format!("{prefix}.log_std_min"), net.log_std_min);
        self.set_meta(&format!("{prefix}.log_std_max"), net.log_std_max);
        for (i, l) in net.layers.iter().enumerate() {
            self.push(
                format!("{prefix}.{i}.weight"),
                vec![l.output_dim(), l.input_dim()],
                l.weight.iter().copied().collect(),
            );
            self.push(
                format!("{prefix}.{i}.bias"),
                vec![l.output_dim()],
                l.bias.to_vec(),
            );
        }
    }

    pub fn mlp(&self, prefix: &str) -> Result<Mlp<f64>> {
        let n: usize = self.meta_parse(&format!("{prefix}.layers"))?;
        let head = match self.meta(&format!("{prefix}.head"))? {
            "linear" => Head::Linear,
            "gaussian" => Head::GaussianTwoHead,
            h => return Err(Error::Inconsistent(format!("unknown head {h:?}"))),
        };
        let mut layers = Vec::with_capacity(n);
        for i in 0..n {
            let w = self.tensor(&format!("{prefix}.{i}.weight"))?;
            let b = self.tensor(&format!("{prefix}.{i}.bias"))?;
            if w.shape.len() != 2 {
                return Err(Error::Inconsistent(format!(
                    "{prefix}.{i}.weight is not a matrix"
                )));
            }
            let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.data.clone())
                .map_err(|e| Error::Inconsistent(e.to_string()))?;
            layers.push(Dense {
                weight,
                bias: Array1::from(b.data.clone()),
            });
        }
        Ok(Mlp::from_layers(layers, head)?.with_log_std_bounds(
            self.meta_parse(&format!("{prefix}.log_std_min"))?,
            self.meta_parse(&format!("{prefix}.log_std_max"))?,
        ))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, &format!("{k}={v}"));
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION,
                found: version,
            });
        }
        let kind = r.string("kind")?;
        let n = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("tensor extent")? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::Inconsistent("tensor too large".into()))?,
                "tensor data",
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        let entries = r.u32("metadata footer")?;
        let mut meta = BTreeMap::new();
        for _ in 0..entries {
            let line = r.string("metadata footer")?;
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Inconsistent(format!("metadata line without '=': {line:?}"))
            })?;
            meta.insert(k.to_string(), v.to_string());
        }
        if r.pos != buf.len() {
            return Err(Error::Inconsistent("trailing bytes after footer".into()));
        }
        Ok(Checkpoint {
            kind,
            tensors,
            meta,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Reads a checkpoint and checks its kind tag.
    pub fn read_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let c = Self::read(path)?;
        if c.kind != kind {
            return Err(Error::Inconsistent(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                c.kind
            )));
        }
        Ok(c)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|e| Error::Inconsistent(format!("{what}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Head;
    use crate::rng::rng;

    #[test]
    fn mlp_round_trip_is_bitwise() {
        let net = Mlp::<f64>::new(&[3, 5, 2], Head::GaussianTwoHead, &mut rng(2)).unwrap();
        let mut c = Checkpoint::new("policy");
        c.push_mlp("pi", &net);
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.mlp("pi").unwrap(), net);
    }

    #[test]
    fn corrupt_inputs() {
        let mut c = Checkpoint::new("x");
        c.push("t", vec![2], vec![1.0, 2.0]);
        let bytes = c.encode();
        assert!(matches!(
            Checkpoint::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[3] = b'D';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::BadMagic { .. })
        ));
    }
}
