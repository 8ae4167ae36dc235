use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

use super::tape::Matrix;

static NEXT_STORE: AtomicU32 = AtomicU32::new(1);

/// Identifies one parameter matrix within one store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    store: u32,
    index: u32,
}

/// Role of a parameter; decides what is trainable under each fine-tuning
/// regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Pre-trained weights, frozen during parameter-efficient fine-tuning.
    Backbone,
    /// LayerNorm scales and shifts.
    Norm,
    /// Weights introduced by a conditioning method (prompts, adapters, ...).
    Conditioning,
    /// Weights of the zoom-step embedding module.
    Piza,
}

impl ParamGroup {
    fn code(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Norm => 1,
            ParamGroup::Conditioning => 2,
            ParamGroup::Piza => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::Norm,
            2 => ParamGroup::Conditioning,
            3 => ParamGroup::Piza,
            _ => return Err(Error::invalid(format!("unknown parameter group {c}"))),
        })
    }
}

#[derive(Debug)]
struct Entry {
    name: String,
    value: Matrix,
    group: ParamGroup,
    trainable: bool,
}

/// Named parameter matrices of one model.
#[derive(Debug)]
pub struct ParamStore {
    id: u32,
    entries: Vec<Entry>,
}

impl Clone for ParamStore {
    /// Clones get a fresh identity so both copies can share a tape.
    fn clone(&self) -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    group: e.group,
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        ParamStore::new()
    }
}

impl ParamStore {
    /// Copy that keeps this store's identity, so existing keys stay valid.
    /// The two copies must not share a tape.
    pub fn duplicate(&self) -> Self {
        let mut c = self.clone();
        c.id = self.id;
        c
    }

    pub fn new() -> Self {
        ParamStore {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Matrix) -> ParamKey {
        self.entries.push(Entry {
            name: name.into(),
            value,
            group,
            trainable: true,
        });
        ParamKey {
            store: self.id,
            index: (self.entries.len() - 1) as u32,
        }
    }

    /// Gaussian initialization with standard deviation `std`.
    pub fn add_normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> ParamKey {
        let value = Array2::from_shape_simple_fn(shape, || std * rng.sample::<f64, _>(StandardNormal));
        self.add(name, group, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: ParamGroup, shape: (usize, usize)) -> ParamKey {
        self.add(name, group, Array2::zeros(shape))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: (usize, usize),
        v: f64,
    ) -> ParamKey {
        self.add(name, group, Array2::from_elem(shape, v))
    }

    fn entry(&self, key: ParamKey) -> &Entry {
        assert_eq!(key.store, self.id, "parameter key from another store");
        &self.entries[key.index as usize]
    }

    pub fn value(&self, key: ParamKey) -> &Matrix {
        &self.entry(key).value
    }

    pub fn value_mut(&mut self, key: ParamKey) -> &mut Matrix {
        assert_eq!(key.store, self.id, "parameter key from another store");
        &mut self.entries[key.index as usize].value
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.entry(key).name
    }

    pub fn group(&self, key: ParamKey) -> ParamGroup {
        self.entry(key).group
    }

    pub fn is_trainable(&self, key: ParamKey) -> bool {
        key.store == self.id && self.entries[key.index as usize].trainable
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        (0..self.entries.len() as u32).map(move |index| ParamKey {
            store: self.id,
            index,
        })
    }

    pub fn key_of(&self, name: &str) -> Option<ParamKey> {
        self.keys().find(|k| self.name(*k) == name)
    }

    /// Marks exactly the parameters whose group is in `groups` as trainable.
    pub fn set_trainable_groups(&mut self, groups: &[ParamGroup]) {
        for e in &mut self.entries {
            e.trainable = groups.contains(&e.group);
        }
    }

    pub fn set_trainable(&mut self, key: ParamKey, trainable: bool) {
        assert_eq!(key.store, self.id, "parameter key from another store");
        self.entries[key.index as usize].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries
            .iter()
            .all(|e| e.value.iter().all(|v| v.is_finite()))
    }

    /// Copies values of equally named, equally shaped parameters from `other`.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let by_name: HashMap<&str, &Entry> =
            other.entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(src) = by_name.get(e.name.as_str()) {
                if src.value.dim() == e.value.dim() {
                    e.value.assign(&src.value);
                    copied += 1;
                }
            }
        }
        copied
    }

    const MAGIC: &'static [u8; 8] = b"PIZAPRM1";

    /// Little-endian binary encoding of every parameter.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.group.code());
            out.push(e.trainable as u8);
            let (r, c) = e.value.dim();
            out.extend_from_slice(&(r as u32).to_le_bytes());
            out.extend_from_slice(&(c as u32).to_le_bytes());
            for v in e.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::invalid(format!("parameter blob: {m}"));
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != Self::MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |b: &mut &[u8]| -> Result<u32> {
            b.read_exact(&mut u32buf).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let count = read_u32(&mut bytes)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut bytes)? as usize;
            if bytes.len() < len + 2 {
                return Err(bad("truncated name"));
            }
            let name = String::from_utf8(bytes[..len].to_vec()).map_err(|_| bad("name is not utf-8"))?;
            let group = ParamGroup::from_code(bytes[len])?;
            let trainable = bytes[len + 1] != 0;
            bytes = &bytes[len + 2..];
            let rows = read_u32(&mut bytes)? as usize;
            let cols = read_u32(&mut bytes)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut f = [0u8; 8];
            for _ in 0..rows * cols {
                bytes.read_exact(&mut f).map_err(|_| bad("truncated values"))?;
                data.push(f64::from_le_bytes(f));
            }
            let value = Array2::from_shape_vec((rows, cols), data).map_err(|_| bad("shape"))?;
            let key = store.add(name, group, value);
            store.entries[key.index as usize].trainable = trainable;
        }
        Ok(store)
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_key: HashMap<ParamKey, Matrix>,
}

impl Gradients {
    pub(crate) fn insert(&mut self, key: ParamKey, g: Matrix) {
        match self.by_key.get_mut(&key) {
            Some(existing) => *existing += &g,
            None => {
                self.by_key.insert(key, g);
            }
        }
    }

    pub fn get(&self, key: ParamKey) -> Option<&Matrix> {
        self.by_key.get(&key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.by_key.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: Gradients, scale: f64) {
        for (k, mut g) in other.by_key {
            g *= scale;
            self.insert(k, g);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_key.values_mut() {
            *g *= k;
        }
    }

    pub fn global_norm(&self) -> f64 {
        let mut keys: Vec<_> = self.by_key.keys().collect();
        keys.sort();
        keys.iter()
            .map(|k| self.by_key[*k].iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blob_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_normal("w", ParamGroup::Backbone, (3, 4), 0.5, &mut rng);
        let k = s.add_filled("ln.g", ParamGroup::Norm, (1, 4), 1.0);
        s.set_trainable_groups(&[ParamGroup::Norm]);
        let back = ParamStore::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back.param_count(), 16);
        let kb = back.key_of("ln.g").unwrap();
        assert!(back.is_trainable(kb));
        assert!(!back.is_trainable(back.key_of("w").unwrap()));
        assert_eq!(back.value(kb), s.value(k));
        assert_eq!(back.to_bytes(), s.to_bytes());
        assert!(ParamStore::from_bytes(&s.to_bytes()[..20]).is_err());
    }

    #[test]
    fn clones_have_distinct_identity() {
        let mut s = ParamStore::new();
        let k = s.add_zeros("a", ParamGroup::Piza, (1, 1));
        let c = s.clone();
        assert!(!c.is_trainable(k));
        assert!(c.is_trainable(c.key_of("a").unwrap()));
    }
}
