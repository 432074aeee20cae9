//! Named parameter store, Adam optimizer state, and the GMLB checkpoint
//! format: header {magic "GMLB", version u32, param count u32}, then per
//! parameter {name length u32 + UTF-8 name, rank u32, dims u32 each,
//! little-endian f64 values}.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

const MAGIC: &[u8; 4] = b"GMLB";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Insertion-ordered named parameters. Order is part of the checkpoint
/// contract, so two stores built the same way serialize identically.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Gaussian-initialized parameter, std 0.02.
    pub fn add_gaussian(&mut self, name: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller; two uniforms per sample keeps the stream simple.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect();
        self.params.insert(name.to_string(), Param { shape, data });
    }

    pub fn add_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.params.insert(name.to_string(), Param { shape, data: vec![value; n] });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.numel()).sum()
    }

    /// Register a parameter as a differentiable leaf on the tape.
    pub fn leaf(&self, graph: &mut Graph, name: &str) -> Result<TensorId> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        graph.named_leaf(name, p.data.clone(), p.shape.clone())
    }

    /// Gradients accumulated on this store's leaves in `graph`, keyed by
    /// parameter name. Parameters not used in the graph are absent.
    pub fn collect_grads(&self, graph: &Graph) -> IndexMap<String, Vec<f64>> {
        let mut out = IndexMap::new();
        for name in self.params.keys() {
            if let Some(id) = graph.named_id(name) {
                if let Some(g) = graph.grad(id) {
                    out.insert(name.clone(), g.to_vec());
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Validation(format!(
                "{} is not a GMLB checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Validation(format!("unsupported GMLB version {version}")));
        }
        let count = cur.u32()? as usize;
        let mut params = IndexMap::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| Error::Validation("non-UTF-8 parameter name".into()))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let raw = cur.take(8)?;
                data.push(f64::from_le_bytes(raw.try_into().unwrap()));
            }
            params.insert(name, Param { shape, data });
        }
        Ok(ParamStore { params })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Validation("truncated GMLB checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Adam with fixed hyperparameters; one moment pair per parameter name.
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// Apply one update from accumulated gradients keyed by parameter name.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Vec<f64>>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (name, grad) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                let g = grad[i];
                if !g.is_finite() {
                    return Err(Error::Numeric(format!("non-finite gradient for {name}")));
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.add_gaussian("enc.w", vec![3, 4], &mut rng);
        store.add_const("enc.b", vec![4], 0.0);
        store.add_gaussian("head.w", vec![4, 2], &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmlb");
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.shape, q.shape);
            assert_eq!(p.data, q.data);
        }
        // Save is byte-deterministic.
        let path2 = dir.path().join("model2.gmlb");
        store.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.gmlb");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        // Minimize (x - 3)^2; Adam should move x toward 3.
        let mut store = ParamStore::new();
        store.add_const("x", vec![1], 0.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..200 {
            let x = store.get("x").unwrap().data[0];
            let mut grads = IndexMap::new();
            grads.insert("x".to_string(), vec![2.0 * (x - 3.0)]);
            opt.step(&mut store, &grads).unwrap();
        }
        assert!((store.get("x").unwrap().data[0] - 3.0).abs() < 0.05);
    }
}
