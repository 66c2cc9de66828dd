//! Named parameter arrays, seeded initialisation and the checkpoint archive.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic  "PRCK"
//! u32    record count R
//! R ×    manifest entry: u32 path length, UTF-8 path, u8 trainable,
//!        u32 rank, rank × u32 dims
//! R ×    f64 data, in manifest order
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PRCK";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub value: Tensor<T>,
    /// Running statistics and other buffers are stored but not optimised.
    pub trainable: bool,
}

/// All learnable arrays and buffers of a model, keyed by stable dotted path.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// Deterministic 64-bit FNV-1a; used to derive per-path seeds.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent stream for `(seed, label)`.
pub fn derived_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor<T>, trainable: bool) {
        self.entries.insert(path.into(), ParamEntry { value, trainable });
    }

    pub fn get(&self, path: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor<T>> {
        self.entries.get(path).map(|e| &e.value).ok_or_else(|| Error::Checkpoint {
            path: path.to_owned(),
            detail: "parameter missing".into(),
        })
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count of trainable arrays.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Uniform `±sqrt(6 / fan_in)` initialisation (He-uniform), seeded per path.
    pub fn init_he(&mut self, seed: u64, path: &str, shape: &[usize], fan_in: usize) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.init_uniform(seed, path, shape, bound);
    }

    pub fn init_uniform(&mut self, seed: u64, path: &str, shape: &[usize], bound: f64) {
        let mut rng = derived_rng(seed, path);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
        self.insert(path, Tensor::new(shape.to_vec(), data), true);
    }

    pub fn init_const(&mut self, path: &str, shape: &[usize], v: f64, trainable: bool) {
        self.insert(path, Tensor::full(shape, T::of(v)), trainable);
    }

    /// Verifies that `other` has exactly the same path set and shapes.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (p, e) in &self.entries {
            match other.entries.get(p) {
                None => {
                    return Err(Error::Checkpoint {
                        path: p.clone(),
                        detail: "missing from checkpoint".into(),
                    })
                }
                Some(o) if o.value.shape() != e.value.shape() => {
                    return Err(Error::Checkpoint {
                        path: p.clone(),
                        detail: format!("shape {:?}, expected {:?}", o.value.shape(), e.value.shape()),
                    })
                }
                _ => {}
            }
        }
        if let Some(p) = other.entries.keys().find(|p| !self.entries.contains_key(*p)) {
            return Err(Error::Checkpoint {
                path: p.clone(),
                detail: "unexpected parameter".into(),
            });
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (p, e) in &self.entries {
            w.write_all(&(p.len() as u32).to_le_bytes())?;
            w.write_all(p.as_bytes())?;
            w.write_all(&[e.trainable as u8])?;
            w.write_all(&(e.value.shape().len() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for e in self.entries.values() {
            for &v in e.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let count = read_u32(r)? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "path is not UTF-8"))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            manifest.push((name, flag[0] != 0, shape));
        }
        let mut store = ParamStore::new();
        for (name, trainable, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(T::of(f64::from_le_bytes(buf)));
            }
            if store.contains(&name) {
                return Err(Error::format("checkpoint", format!("duplicate path '{name}'")));
            }
            store.insert(name, Tensor::new(shape, data), trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Loads a checkpoint and verifies it against the expected layout.
    pub fn load_matching(path: &Path, expected: &ParamStore<T>) -> Result<Self> {
        let loaded = Self::load(path)?;
        expected.check_compatible(&loaded)?;
        Ok(loaded)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
