//! Named parameter storage and checkpoint serialization.
//!
//! Checkpoints are a single file: a line-oriented text header listing
//! (name, shape, element offset) for every tensor, then the raw payload of
//! 32-bit little-endian values in header order. f32 stores round-trip
//! bitwise; f64 stores narrow to f32 on save and widen on load.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::{numel, Volume5};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct ParamEntry<T> {
    name: String,
    value: Volume5<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    /// Registers a tensor under a unique dotted name, e.g.
    /// "encoder.stage1.block0.gla.detail.weight".
    pub fn add(&mut self, name: impl Into<String>, value: Volume5<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Volume5<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Volume5<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar counts grouped by a name prefix of `depth` dotted segments,
    /// in first-seen order, e.g. depth 2 groups "encoder.stage1".
    pub fn count_by_prefix(&self, depth: usize) -> Vec<(String, usize)> {
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for e in &self.entries {
            let prefix: String =
                e.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            if !counts.contains_key(&prefix) {
                order.push(prefix.clone());
            }
            *counts.entry(prefix).or_insert(0) += e.value.numel();
        }
        order.into_iter().map(|p| { let c = counts[&p]; (p, c) }).collect()
    }

    /// First parameter containing a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.value.first_non_finite().is_some())
            .map(|e| e.name.as_str())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::from("volume-params v1\n");
        header.push_str(&format!("count {}\n", self.entries.len()));
        let mut offset = 0usize;
        for e in &self.entries {
            let [b, c, d, h, w] = e.value.shape();
            header.push_str(&format!("{} {} {} {} {} {} {}\n", e.name, b, c, d, h, w, offset));
            offset += e.value.numel();
        }
        header.push_str("end\n");
        let mut payload = Vec::with_capacity(offset * 4);
        for e in &self.entries {
            for &v in e.value.data() {
                payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(header.as_bytes())?;
        f.write_all(&payload)?;
        Ok(())
    }

    /// Loads a checkpoint into this store. Every tensor in the file must
    /// match an existing parameter by name and shape, and vice versa.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        if entries.len() != self.entries.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!("checkpoint holds {} tensors, store holds {}", entries.len(), self.entries.len()),
            ));
        }
        for (name, shape, data) in entries {
            let id = self.lookup(&name).ok_or_else(|| {
                Error::format(path.display().to_string(), format!("unknown parameter {name}"))
            })?;
            let value = self.value_mut(id);
            if value.shape() != shape {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("{name}: shape {:?} in file, {:?} in store", shape, value.shape()),
                ));
            }
            for (dst, src) in value.data_mut().iter_mut().zip(data) {
                *dst = T::from_f64(src as f64);
            }
        }
        Ok(())
    }
}

/// Parses a checkpoint file into (name, shape, f32 payload) tuples.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, [usize; 5], Vec<f32>)>> {
    let pd = || path.display().to_string();
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != "volume-params v1" {
        return Err(Error::format(pd(), format!("bad magic line {line:?}")));
    }
    line.clear();
    r.read_line(&mut line)?;
    let count: usize = line
        .trim_end()
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(pd(), format!("bad count line {line:?}")))?;
    let mut meta = Vec::with_capacity(count);
    for i in 0..count {
        line.clear();
        r.read_line(&mut line)?;
        let parts: Vec<&str> = line.trim_end().split(' ').collect();
        if parts.len() != 7 {
            return Err(Error::format(pd(), format!("bad tensor line {i}: {line:?}")));
        }
        let name = parts[0].to_string();
        let mut nums = [0usize; 6];
        for (j, p) in parts[1..].iter().enumerate() {
            nums[j] = p
                .parse()
                .map_err(|_| Error::format(pd(), format!("bad integer in line {i}: {line:?}")))?;
        }
        let shape = [nums[0], nums[1], nums[2], nums[3], nums[4]];
        meta.push((name, shape, nums[5]));
    }
    line.clear();
    r.read_line(&mut line)?;
    if line.trim_end() != "end" {
        return Err(Error::format(pd(), format!("missing end marker, got {line:?}")));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let total: usize = meta.iter().map(|(_, s, _)| numel(*s)).sum();
    if payload.len() != total * 4 {
        return Err(Error::format(
            pd(),
            format!("payload holds {} bytes, header implies {}", payload.len(), total * 4),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape, offset) in meta {
        let n = numel(shape);
        if (offset + n) * 4 > payload.len() {
            return Err(Error::format(pd(), format!("{name}: offset {offset} out of range")));
        }
        let mut data = Vec::with_capacity(n);
        for k in 0..n {
            let at = (offset + k) * 4;
            data.push(f32::from_le_bytes([
                payload[at],
                payload[at + 1],
                payload[at + 2],
                payload[at + 3],
            ]));
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Uniform initialization in [-bound, bound], the fan-in rule used for all
/// convolution and projection weights.
pub fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: [usize; 5], bound: f64) -> Volume5<T> {
    Volume5::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}

pub fn fan_in_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}
