use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{RapError, Result};

/// Dense 64-bit float tensor. Rank is 1 or 2 everywhere in this crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            vals: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], vals: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != vals.len() {
            return Err(RapError::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![vals.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            vals,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            vals: vec![v],
        }
    }

    /// Entries drawn i.i.d. uniform over [lo, hi).
    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let vals = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        Tensor {
            shape: shape.to_vec(),
            vals,
        }
    }

    pub fn numel(&self) -> usize {
        self.vals.len()
    }

    /// (rows, cols) view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensors of rank {} are not supported", self.shape.len()),
        }
    }
}

/// Index of a parameter inside a [`ParameterSet`]; stable once all
/// parameters have been inserted.
pub type ParamId = usize;

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named parameter tensors with lexicographic iteration order and a
/// persistent gradient buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    grads_populated: bool,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a named tensor, keeping lexicographic order. Duplicate
    /// names are rejected. Inserting can shift existing indices, so
    /// [`ParamId`]s should only be looked up once the set is fully built.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(RapError::usage(format!("duplicate parameter name {name:?}")));
        }
        let pos = self
            .params
            .binary_search_by(|p| p.name.as_str().cmp(name))
            .unwrap_err();
        let grad = vec![0.0; value.numel()];
        self.params.insert(
            pos,
            Param {
                name: name.to_string(),
                value,
                grad,
            },
        );
        self.reindex();
        Ok(pos)
    }

    fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| RapError::usage(format!("unknown parameter {name:?}")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(self.value(self.id(name)?))
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id].grad
    }

    pub fn grad_by_name(&self, name: &str) -> Result<&[f64]> {
        Ok(self.grad(self.id(name)?))
    }

    pub(crate) fn grad_acc(&mut self, id: ParamId) -> &mut [f64] {
        self.grads_populated = true;
        &mut self.params[id].grad
    }

    /// Split borrow used by the optimizer: mutable values, read-only grads.
    pub(crate) fn value_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let p = &mut self.params[id];
        (&mut p.value.vals, &p.grad)
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_populated = false;
    }

    /// Total number of scalar entries across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.vals.iter().all(|v| v.is_finite()))
    }

    /// Order-sensitive FNV-1a hash of the raw value bits; used by tests
    /// to assert that an update left a parameter set untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.name.as_bytes() {
                h = (h ^ (*b as u64)).wrapping_mul(0x100_0000_01b3);
            }
            for v in &p.value.vals {
                for b in v.to_le_bytes() {
                    h = (h ^ (b as u64)).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Flat binary checkpoint: a header listing names and shapes, then the
    /// value arrays as little-endian f64 in parameter order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"RAPPSET1");
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            let nb = p.name.as_bytes();
            out.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(p.value.shape.len() as u32).to_le_bytes());
            for d in &p.value.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
        }
        for p in &self.params {
            for v in &p.value.vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        let mut cur = std::io::Cursor::new(&buf[..]);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic)
            .map_err(|_| RapError::validation("checkpoint truncated"))?;
        if &magic != b"RAPPSET1" {
            return Err(RapError::validation("bad checkpoint magic"));
        }
        let n = read_u32(&mut cur)? as usize;
        let mut headers = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u32(&mut cur)? as usize;
            let mut name = vec![0u8; name_len];
            cur.read_exact(&mut name)
                .map_err(|_| RapError::validation("checkpoint truncated"))?;
            let name = String::from_utf8(name)
                .map_err(|_| RapError::validation("checkpoint name not utf-8"))?;
            let rank = read_u32(&mut cur)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut cur)? as usize);
            }
            headers.push((name, shape));
        }
        let mut ps = ParameterSet::new();
        for (name, shape) in &headers {
            let numel: usize = shape.iter().product();
            let mut vals = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                cur.read_exact(&mut b)
                    .map_err(|_| RapError::validation("checkpoint truncated"))?;
                vals.push(f64::from_le_bytes(b));
            }
            ps.insert(name, Tensor::from_vec(shape, vals)?)?;
        }
        // The header is written in lexicographic order; re-inserting must
        // reproduce it or the file was tampered with.
        for (i, (name, _)) in headers.iter().enumerate() {
            if ps.name(i) != name {
                return Err(RapError::validation("checkpoint parameter order is not sorted"));
            }
        }
        Ok(ps)
    }
}

fn read_u32(cur: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b)
        .map_err(|_| RapError::validation("checkpoint truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(cur: &mut std::io::Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    cur.read_exact(&mut b)
        .map_err(|_| RapError::validation("checkpoint truncated"))?;
    Ok(u64::from_le_bytes(b))
}

// Keep Write import used on all platforms.
#[allow(dead_code)]
fn _write_hint(mut w: impl Write) {
    let _ = w.flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_keeps_lexicographic_order() {
        let mut ps = ParameterSet::new();
        ps.insert("b.w", Tensor::zeros(&[2])).unwrap();
        ps.insert("a.w", Tensor::zeros(&[3])).unwrap();
        ps.insert("a.b", Tensor::zeros(&[1])).unwrap();
        let names: Vec<_> = ps.names().collect();
        assert_eq!(names, vec!["a.b", "a.w", "b.w"]);
        assert!(ps.insert("a.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParameterSet::new();
        ps.insert("m", Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng))
            .unwrap();
        ps.insert("v", Tensor::uniform(&[5], 0.0, 1.0, &mut rng))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        ps.save(&path).unwrap();
        let back = ParameterSet::load(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.get("m").unwrap(), ps.get("m").unwrap());
        assert_eq!(back.get("v").unwrap(), ps.get("v").unwrap());
        assert_eq!(back.checksum(), ps.checksum());
    }

    #[test]
    fn zero_grads_resets_population_flag() {
        let mut ps = ParameterSet::new();
        let id = ps.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(!ps.grads_populated());
        ps.grad_acc(id)[0] = 1.5;
        assert!(ps.grads_populated());
        ps.zero_grads();
        assert!(!ps.grads_populated());
        assert_eq!(ps.grad(id), &[0.0, 0.0]);
    }
}
