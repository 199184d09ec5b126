//! Named parameter storage and the `TXCKPT1` checkpoint format.
//!
//! `TXCKPT1`: magic `b"TXCKPT1"`, little-endian `u32` blob count, then per
//! blob a `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32` dims and
//! `prod(dims)` x `f32` values.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::binio::Cursor;
use crate::error::{format_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"TXCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    data: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.data.len()).map(ParamId)
    }

    /// Register a parameter with explicit values. Names must be unique.
    pub fn add_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "parameter `{name}` shape mismatch");
        assert!(!self.index.contains_key(name), "duplicate parameter `{name}`");
        self.index.insert(name.to_string(), self.data.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.data.push(values);
        ParamId(self.data.len() - 1)
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add_values(name, shape, vec![0.0; shape.iter().product()])
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> ParamId {
        let b = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-b..=b)).collect();
        self.add_values(name, shape, values)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.data.iter().map(Vec::len).sum()
    }

    /// Copy values for every parameter found by name in `other` with a
    /// matching shape; missing or mismatched entries are errors.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.len() {
            let src = other.find(&self.names[i]).ok_or_else(|| Error::MissingParam(self.names[i].clone()))?;
            if other.shape(src) != self.shapes[i].as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    self.shapes[i],
                    other.shape(src)
                )));
            }
            self.data[i].copy_from_slice(other.get(src));
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for i in 0..self.len() {
            buf.extend_from_slice(&(self.names[i].len() as u32).to_le_bytes());
            buf.extend_from_slice(self.names[i].as_bytes());
            buf.extend_from_slice(&(self.shapes[i].len() as u32).to_le_bytes());
            for &d in &self.shapes[i] {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &self.data[i] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(7).map_err(|_| format_err("TXCKPT1", "truncated header"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err("TXCKPT1", "bad magic"));
        }
        let count = cur.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| format_err("TXCKPT1", "parameter name is not UTF-8"))?
                .to_string();
            if store.find(&name).is_some() {
                return Err(format_err("TXCKPT1", format!("duplicate parameter `{name}`")));
            }
            let rank = cur.u32()? as usize;
            if rank > 8 {
                return Err(format_err("TXCKPT1", format!("parameter `{name}` has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len() - cur.pos));
            let n = n.ok_or_else(|| format_err("TXCKPT1", format!("parameter `{name}` payload truncated")))?;
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(cur.f32()? as f64);
            }
            store.add_values(&name, &shape, values);
        }
        if !cur.at_end() {
            return Err(format_err("TXCKPT1", "trailing bytes after last parameter"));
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add_uniform("w", &[16, 4], 16, &mut rng);
        assert!(s.get(id).iter().all(|v| v.abs() <= 0.25));
        assert_eq!(s.find("w"), Some(id));
    }

    #[test]
    fn checkpoint_round_trip_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.add_uniform("enc.w", &[3, 3, 3, 2, 4], 54, &mut rng);
        s.add_values("cfg.dim", &[1], vec![16.0]);
        s.add_zeros("empty", &[0]);
        let mut a = Vec::new();
        s.write_checkpoint(&mut a).unwrap();
        let back = ParamStore::read_checkpoint(a.as_slice()).unwrap();
        let mut b = Vec::new();
        back.write_checkpoint(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(back.shape(back.find("enc.w").unwrap()), &[3, 3, 3, 2, 4]);
    }

    #[test]
    fn checkpoint_rejects_malformed() {
        let mut s = ParamStore::new();
        s.add_values("a", &[2], vec![1.0, 2.0]);
        let mut a = Vec::new();
        s.write_checkpoint(&mut a).unwrap();
        assert!(ParamStore::read_checkpoint(&a[..a.len() - 1]).is_err());
        let mut bad = a.clone();
        bad[6] = b'2';
        assert!(ParamStore::read_checkpoint(bad.as_slice()).is_err());
        let mut long = a.clone();
        long.push(0);
        assert!(ParamStore::read_checkpoint(long.as_slice()).is_err());
        assert!(ParamStore::read_checkpoint(&b"TXC"[..]).is_err());
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut a = ParamStore::new();
        a.add_values("x", &[2], vec![1.0, 2.0]);
        let mut b = ParamStore::new();
        b.add_zeros("x", &[2]);
        b.load_from(&a).unwrap();
        assert_eq!(b.get(ParamId(0)), &[1.0, 2.0]);
        let mut c = ParamStore::new();
        c.add_zeros("x", &[3]);
        assert!(c.load_from(&a).is_err());
        let mut d = ParamStore::new();
        d.add_zeros("y", &[2]);
        assert!(matches!(d.load_from(&a), Err(Error::MissingParam(_))));
    }
}
