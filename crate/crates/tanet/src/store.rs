//! Named parameter storage and the checkpoint file format.
//!
//! A [`ParamStore`] keeps parameters (and non-trainable running state) in
//! deterministic insertion order. Checkpoints are a text manifest of
//! `(name, shape, byte offset)` lines followed by a raw little-endian f32
//! blob; round-trips are bit-exact.

use indexmap::IndexMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::shape::Shape;
use crate::tensor::Tensor;

const MAGIC: &str = "TANET-STORE-V1";

pub struct Param<E: Elem> {
    pub shape: Shape,
    pub data: Vec<E>,
    pub grad: Option<Vec<E>>,
    pub trainable: bool,
}

pub struct ParamStore<E: Elem> {
    entries: IndexMap<String, Param<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<E>, trainable: bool) -> Result<()> {
        if name.contains(char::is_whitespace) || name.is_empty() {
            return Err(Error::Config(format!("parameter name {name:?} must be non-empty and whitespace-free")));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let shape = value.shape();
        self.entries.insert(
            name.to_string(),
            Param { shape, data: value.into_data(), grad: None, trainable },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param<E>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<E>> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn set_data(&mut self, name: &str, value: &Tensor<E>) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.shape != value.shape() {
            return Err(Error::shape(
                "set_data",
                format!("{name:?} has shape {}, got {}", p.shape, value.shape()),
            ));
        }
        p.data.copy_from_slice(value.data());
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<E>> {
        let p = self.get(name)?;
        Tensor::new(p.shape, p.data.clone())
    }

    /// Iteration in insertion order; stable across runs with identical
    /// construction.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values held by trainable entries.
    pub fn trainable_values(&self) -> u64 {
        self.entries.values().filter(|p| p.trainable).map(|p| p.data.len() as u64).sum()
    }

    /// Set every trainable gradient to zeros (creating buffers if absent).
    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            if p.trainable {
                match &mut p.grad {
                    Some(g) => g.fill(E::ZERO),
                    None => p.grad = Some(vec![E::ZERO; p.data.len()]),
                }
            }
        }
    }

    /// Add `g` into the entry's gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, name: &str, g: &[E]) -> Result<()> {
        let p = self.get_mut(name)?;
        debug_assert_eq!(g.len(), p.data.len());
        match &mut p.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += *v),
            None => p.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Ensure the entry has a (possibly zero) gradient buffer.
    pub fn touch_grad(&mut self, name: &str) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.is_none() {
            p.grad = Some(vec![E::ZERO; p.data.len()]);
        }
        Ok(())
    }

    /// Element-type conversion preserving order, flags and data (lossy for
    /// f64 -> f32).
    pub fn convert<F: Elem>(&self) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            out.entries.insert(
                name.clone(),
                Param {
                    shape: p.shape,
                    data: p.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
                    grad: None,
                    trainable: p.trainable,
                },
            );
        }
        out
    }

    /// Write all entries, in store order, as manifest + little-endian f32 blob.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "count {}", self.entries.len())?;
        let mut offset = 0u64;
        for (name, p) in &self.entries {
            let s = p.shape;
            writeln!(w, "{name} {} {} {} {} {offset}", s.n, s.c, s.h, s.w)?;
            offset += 4 * p.data.len() as u64;
        }
        writeln!(w, "DATA")?;
        for p in self.entries.values() {
            for v in &p.data {
                w.write_all(&v.to_f32().to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Fill existing entries from a checkpoint written by [`ParamStore::save`].
    /// Every entry in the file must exist here with a matching shape, and
    /// every store entry must be present in the file.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let raw = read_checkpoint(path)?;
        if raw.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "{} has {} tensors, store expects {}",
                path.display(),
                raw.len(),
                self.entries.len()
            )));
        }
        for (name, shape, values) in raw {
            let p = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            if p.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "{name:?}: file shape {} vs store shape {}",
                    shape, p.shape
                )));
            }
            p.data.clear();
            p.data.extend(values.iter().map(|v| E::from_f32(*v)));
        }
        Ok(())
    }
}

/// Parse a checkpoint into (name, shape, f32 values) triples in file order.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Shape, Vec<f32>)>> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(bad(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let count: usize = line
        .trim_end()
        .strip_prefix("count ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad count line {:?}", line.trim_end())))?;

    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        line.clear();
        r.read_line(&mut line)?;
        let parts: Vec<&str> = line.trim_end().split(' ').collect();
        if parts.len() != 6 {
            return Err(bad(format!("bad manifest line {:?}", line.trim_end())));
        }
        let dims: Vec<usize> = parts[1..5]
            .iter()
            .map(|p| p.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad(format!("bad shape in {:?}", line.trim_end())))?;
        let offset: u64 =
            parts[5].parse().map_err(|_| bad(format!("bad offset in {:?}", line.trim_end())))?;
        manifest.push((
            parts[0].to_string(),
            Shape::new(dims[0], dims[1], dims[2], dims[3]),
            offset,
        ));
    }
    line.clear();
    r.read_line(&mut line)?;
    if line.trim_end() != "DATA" {
        return Err(bad(format!("missing DATA separator, got {:?}", line.trim_end())));
    }

    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in manifest {
        let nbytes = 4 * shape.len();
        let start = offset as usize;
        if start + nbytes > blob.len() {
            return Err(bad(format!("{name:?} extends past end of blob")));
        }
        let values: Vec<f32> = blob[start..start + nbytes]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(Shape::new(2, 3, 1, 1), |n, c, _, _| (n * 3 + c) as f32 * 0.5 - 1.0), true)
            .unwrap();
        s.insert("a.running_mean", Tensor::full(Shape::new(2, 1, 1, 1), 0.25), false).unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample_store();
        let err = s.insert("a.weight", Tensor::zeros(Shape::scalar()), true).unwrap_err();
        assert!(matches!(err, Error::DuplicateParam(_)));
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.tanet");
        let src = sample_store();
        src.save(&path).unwrap();

        let mut dst = sample_store();
        for (_, p) in dst.iter_mut() {
            p.data.fill(9.0);
        }
        dst.load(&path).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            let same = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }

        // Saving the loaded store reproduces the file byte-for-byte.
        let path2 = dir.path().join("ck2.tanet");
        dst.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn grad_accumulation() {
        let mut s = sample_store();
        s.accumulate_grad("a.weight", &[1.0; 6]).unwrap();
        s.accumulate_grad("a.weight", &[2.0; 6]).unwrap();
        assert_eq!(s.get("a.weight").unwrap().grad.as_deref().unwrap(), &[3.0; 6]);
        s.zero_grads();
        assert_eq!(s.get("a.weight").unwrap().grad.as_deref().unwrap(), &[0.0; 6]);
    }
}
